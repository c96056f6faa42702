"""Losses, optimizer, augmentation, and the training loop.

This file currently holds the sample container; losses and the loop land
with the score network.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import apply_homography, overlap_fraction
from .imaging import as_image


@dataclass
class TrainSample:
    """A synthesized registration pair with exact ground truth."""

    I_s: np.ndarray
    I_d: np.ndarray
    H_gt: np.ndarray

    def __post_init__(self):
        self.I_s = as_image(self.I_s)
        self.I_d = as_image(self.I_d)
        self.H_gt = np.asarray(self.H_gt, dtype=float).reshape(3, 3)
        if overlap_fraction(self.H_gt) < 0.3 - 1e-9:
            raise ValueError("ground-truth warp leaves < 30% domain overlap")

    def gt_correspondence(self, p):
        return apply_homography(self.H_gt, p)
