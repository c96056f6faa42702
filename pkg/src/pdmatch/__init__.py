"""Diffusion-guided random-walk point correspondence search.

Subpackage map:
  geometry   — homography/polynomial transforms, DLT, RANSAC, IRLS soft fit
  diffusion  — noise schedule, forward/reverse updates, random-walk sampler
  imaging    — grayscale images, PGM I/O, feature pyramids, warping, NCC
  keypoints  — query-point detection (DoG + blob fallback + grid fill)
  scorenet   — transformer denoiser with hand-written forward/backward
  training   — losses, AdamW, the self-supervised training loop
  synthdata  — procedural vessel images and warped training pairs
  evalcem    — registration error metrics and corpus aggregation
  cli        — pdmatch {synth,train,align,eval,ablate}
"""

__version__ = "0.1.0"
