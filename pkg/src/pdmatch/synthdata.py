"""Procedural vessel-like images and random-homography training pairs.

gen_vessel_scene draws a bright circular fundus-style disk with recursive
Bezier vessel trees and reports its own vessel/disk masks; gen_pair warps
such an image by a random homography (rejection-sampled for domain overlap)
and applies photometric jitter to the result.

Generator knobs beyond the public signatures (branch depth, widths, vessel
darkness, texture octaves) are module constants below.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import OverlapUnsatisfiable
from .geometry import apply_homography, overlap_fraction
from .imaging import warp_image, write_pgm, read_pgm
from .training import TrainSample

_ROOT_BRANCHES = (2, 2)        # inclusive range drawn per image
_LEVELS = (4, 7)               # recursion depth range
_WIDTH0 = 6.0                  # root vessel width, px at the 128-px scale
_WIDTH_DECAY = 0.66
_VESSEL_DEPTH = (0.28, 0.38)   # intensity drop of vessels
_TEXTURE_AMP = 0.05


# ------------------------------------------------------------ vessel images


def _value_noise(rng, size, cells):
    g = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = g[i0] * (1 - f)[:, None] + g[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _stamp(canvas, pts, width):
    """Paint anti-aliased disks along a polyline onto a max-blended canvas."""
    H, W = canvas.shape
    r = width / 2 + 1.0
    for x, y in pts:
        x0, x1 = max(int(x - r), 0), min(int(x + r) + 2, W)
        y0, y1 = max(int(y - r), 0), min(int(y + r) + 2, H)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d = np.hypot(xx - x, yy - y)
        a = np.clip(width / 2 + 0.5 - d, 0.0, 1.0)
        np.maximum(canvas[y0:y1, x0:x1], a, out=canvas[y0:y1, x0:x1])


def _bezier(p0, p1, p2, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t * t * p2


def _grow(rng, canvas, p0, angle, length, width, level, max_level, min_width):
    if level > max_level or width < min_width:
        return
    angle = angle + rng.uniform(-0.3, 0.3)
    p2 = p0 + length * np.array([np.cos(angle), np.sin(angle)])
    mid = 0.5 * (p0 + p2)
    perp = np.array([-np.sin(angle), np.cos(angle)])
    p1 = mid + perp * rng.uniform(-0.25, 0.25) * length
    n = max(int(length * 2), 8)
    _stamp(canvas, _bezier(p0, p1, p2, n), width)
    for s in (1.0, -1.0):
        child = angle + s * rng.uniform(0.25, 0.6)
        _grow(rng, canvas, p2, child, length * rng.uniform(0.7, 0.82),
              width * _WIDTH_DECAY, level + 1, max_level, min_width)


def gen_vessel_scene(seed: int, size: int):
    """Image plus self-reported (vessel_mask, disk_mask)."""
    if size < 64:
        raise ValueError("size must be >= 64")
    rng = np.random.default_rng(seed)
    S = size
    yy, xx = np.mgrid[0:S, 0:S].astype(float)
    cx, cy = S / 2 + rng.uniform(-0.03, 0.03, 2) * S
    R = 0.45 * S * rng.uniform(0.95, 1.05)
    r = np.hypot(xx - cx, yy - cy)
    disk = np.clip((R - r) / 1.5 + 0.5, 0.0, 1.0)

    tex = (0.5 * _value_noise(rng, S, 8) + 0.3 * _value_noise(rng, S, 16)
           + 0.2 * _value_noise(rng, S, 32))
    I = 0.06 + disk * (0.52 * (1.0 - 0.25 * (r / R) ** 2) + _TEXTURE_AMP * tex)

    # optic-disc analogue, offset from center
    oa = rng.uniform(0, 2 * np.pi)
    od = np.array([cx, cy]) + 0.5 * R * np.array([np.cos(oa), np.sin(oa)])
    I += disk * 0.16 * np.exp(-((xx - od[0]) ** 2 + (yy - od[1]) ** 2)
                              / (2 * (0.06 * S) ** 2))

    vess = np.zeros((S, S))
    scale = S / 128.0
    n_root = rng.integers(_ROOT_BRANCHES[0], _ROOT_BRANCHES[1] + 1)
    max_level = rng.integers(_LEVELS[0], _LEVELS[1] + 1)
    to_center = np.arctan2(cy - od[1], cx - od[0])
    for i in range(n_root):
        ang = to_center + rng.uniform(-1.3, 1.3)
        _grow(rng, vess, od.copy(), ang, 0.42 * R * rng.uniform(0.8, 1.2),
              _WIDTH0 * scale, 1, max_level, 0.8 * scale)
    depth = rng.uniform(*_VESSEL_DEPTH)
    I -= depth * vess * disk

    disk_mask = disk > 0.5
    # report only confident core pixels, not anti-aliased skirts
    vessel_mask = (vess > 0.65) & disk_mask
    return np.clip(I, 0.0, 1.0), vessel_mask, disk_mask


def gen_vessel_image(seed: int, size: int) -> np.ndarray:
    return gen_vessel_scene(seed, size)[0]


# ----------------------------------------------------------------- PairSpec


@dataclass(frozen=True)
class PairSpec:
    image_size: int = 128
    max_rotation_deg: float = 30.0
    scale_range: tuple = (0.8, 1.25)
    max_translation_frac: float = 0.1
    perspective_jitter: float = 1e-4
    photo_brightness: bool = True
    photo_blur: bool = True
    photo_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        # nominal bound is (0.3, 3); widened a notch so the hard preset's
        # 0.25 lower scale stays admissible
        if not (0.2 < lo <= hi < 3.5):
            raise ValueError(f"scale_range {self.scale_range} out of bounds")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")


def hard_pair_spec(**kw) -> PairSpec:
    """Scale-disparity stress preset: source up to 4x larger than target."""
    return PairSpec(scale_range=(0.25, 1.0), **kw)


def sample_homography(rng, spec: PairSpec) -> np.ndarray:
    """One random warp in normalized coordinates: scale, rotation,
    perspective, translation, composed about the image center."""
    th = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    sx, sy = rng.uniform(spec.scale_range[0], spec.scale_range[1], 2)
    tx, ty = rng.uniform(-spec.max_translation_frac, spec.max_translation_frac, 2)
    p0, p1 = rng.uniform(-spec.perspective_jitter, spec.perspective_jitter, 2)
    S = np.diag([sx, sy, 1.0])
    Rm = np.array([[np.cos(th), -np.sin(th), 0.0],
                   [np.sin(th), np.cos(th), 0.0],
                   [0.0, 0.0, 1.0]])
    P = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [p0, p1, 1.0]])
    T = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    return T @ P @ Rm @ S


def photometric_jitter(I, rng, spec: PairSpec) -> np.ndarray:
    out = I
    if spec.photo_brightness:
        b = rng.uniform(-0.2, 0.2)
        c = rng.uniform(0.8, 1.2)
        out = out.mean() + c * (out - out.mean()) + b
    if spec.photo_blur:
        sig = rng.uniform(0.0, 1.0)
        if sig > 1e-3:
            out = ndimage.gaussian_filter(out, sig, mode="reflect")
    if spec.photo_noise:
        out = out + rng.normal(0.0, rng.uniform(0.0, 0.02), I.shape)
    return np.clip(out, 0.0, 1.0)


_MAX_REJECTIONS = 100


def accepted_homography(rng, spec: PairSpec) -> np.ndarray:
    """Rejection-sample warps until the domain overlap reaches 30%."""
    for _ in range(_MAX_REJECTIONS):
        H = sample_homography(rng, spec)
        if overlap_fraction(H) >= 0.3:
            return H
    raise OverlapUnsatisfiable(
        f"no warp with >= 30% overlap in {_MAX_REJECTIONS} draws")


def gen_pair(spec: PairSpec) -> TrainSample:
    rng = np.random.default_rng(spec.seed)
    img_seed = int(rng.integers(2 ** 31))
    I_s = gen_vessel_image(img_seed, spec.image_size)
    H = accepted_homography(rng, spec)
    I_d = photometric_jitter(warp_image(I_s, H, spec.image_size), rng, spec)
    return TrainSample(I_s=I_s, I_d=I_d, H_gt=H)


# ------------------------------------------------------------------ dataset


def _landmarks(H, size, grid_n=8):
    """Deterministic GT correspondences on the overlapping part of a grid,
    both frames in pixel coordinates."""
    g = np.linspace(-0.9, 0.9, grid_n)
    xx, yy = np.meshgrid(g, g)
    src = np.column_stack([xx.ravel(), yy.ravel()])
    dst = apply_homography(H, src)
    keep = np.all(np.abs(dst) <= 1.0, axis=1)
    src, dst = src[keep], dst[keep]
    to_pix = lambda p: (p + 1.0) * size / 2.0 - 0.5
    return to_pix(src), to_pix(dst)


def write_pair(pair_dir, sample: TrainSample, spec: PairSpec):
    pair_dir.mkdir(parents=True, exist_ok=True)
    write_pgm(pair_dir / "src.pgm", sample.I_s)
    write_pgm(pair_dir / "dst.pgm", sample.I_d)
    with open(pair_dir / "H_gt.csv", "w") as f:
        f.write(",".join("%.17g" % v for v in sample.H_gt.ravel()) + "\n")
    src, dst = _landmarks(sample.H_gt, spec.image_size)
    with open(pair_dir / "landmarks.csv", "w") as f:
        f.write("id,src_x,src_y,dst_x,dst_y\n")
        for i, (s, d) in enumerate(zip(src, dst)):
            f.write(f"{i},{s[0]:.9g},{s[1]:.9g},{d[0]:.9g},{d[1]:.9g}\n")
    meta = io.StringIO()
    for k, v in vars(spec).items():
        meta.write(f"{k}={v}\n")
    meta.write(f"overlap={overlap_fraction(sample.H_gt):.6f}\n")
    (pair_dir / "meta.txt").write_text(meta.getvalue())


def gen_dataset(root, count: int, spec: PairSpec):
    """Write `count` pairs under root plus a manifest; returns pair dirs."""
    from pathlib import Path
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    lines = [f"count={count}", f"base_seed={spec.seed}",
             f"image_size={spec.image_size}"]
    for i in range(count):
        s = replace(spec, seed=spec.seed + i)
        sample = gen_pair(s)
        d = root / f"pair_{i:06d}"
        write_pair(d, sample, s)
        lines.append(f"pair_{i:06d},seed={s.seed},"
                     f"overlap={overlap_fraction(sample.H_gt):.6f}")
        dirs.append(d)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return dirs


def load_pair(pair_dir) -> TrainSample:
    from pathlib import Path
    pair_dir = Path(pair_dir)
    H = np.loadtxt(pair_dir / "H_gt.csv", delimiter=",").reshape(3, 3)
    return TrainSample(I_s=read_pgm(pair_dir / "src.pgm"),
                       I_d=read_pgm(pair_dir / "dst.pgm"), H_gt=H)
