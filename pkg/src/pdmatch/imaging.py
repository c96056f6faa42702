"""Grayscale imaging: containers, PGM I/O, the classical two-level feature
pyramid, vessel binarization, NCC, warping, and feature sampling.

An image is a (H, W) float64 array with values in [0, 1], row-major.
Pyramid grids are (Gh, Gw, d) channel-last arrays.  Normalized coordinates
follow x = 2*(u + 0.5)/W - 1 (pixel centers; see keypoints.to_normalized).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ZeroVariance
from .geometry import Poly2Transform, apply_poly2, poly2_jacobian

COARSE_STRIDE = 8
FINE_STRIDE = 2
_SIGMA_COARSE = 2.0
_SIGMA_FINE = 0.5


def as_image(arr) -> np.ndarray:
    """Validate and return a float64 (H, W) image in [0,1]."""
    I = np.asarray(arr, dtype=float)
    if I.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {I.shape}")
    if I.shape[0] < 16 or I.shape[1] < 16:
        raise ValueError(f"image must be at least 16x16, got {I.shape}")
    if not np.all(np.isfinite(I)) or I.min() < -1e-9 or I.max() > 1 + 1e-9:
        raise ValueError("pixel values must be finite and in [0,1]")
    return np.clip(I, 0.0, 1.0)


# ---------------------------------------------------------------------- PGM


def write_pgm(path, I):
    """Binary 8-bit PGM (P5); intensities mapped linearly from [0,1]."""
    I = as_image(I)
    data = np.round(I * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (I.shape[1], I.shape[0]))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5)")
    # header = magic, width, height, maxval; '#' comments allowed
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(float) / 255.0


# ------------------------------------------------------------------ pyramid


@dataclass
class FeaturePyramid:
    """Coarse (x1/8) and fine (x1/2) standardized descriptor grids."""

    coarse: np.ndarray  # (Hc, Wc, d_c)
    fine: np.ndarray    # (Hf, Wf, d_f)
    width: int
    height: int

    @property
    def d_c(self):
        return self.coarse.shape[2]

    @property
    def d_f(self):
        return self.fine.shape[2]


def _cell_stats(I, stride, sigma):
    """Raw per-cell statistics channels: mean, std, mean|gx|, mean|gy|,
    4-bin unsigned gradient-orientation histogram (magnitude-weighted)."""
    S = ndimage.gaussian_filter(I, sigma, mode="reflect")
    gy, gx = np.gradient(S)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    b = np.minimum((theta / (np.pi / 4)).astype(int), 3)
    H, W = I.shape
    ri = np.arange(0, H, stride)
    ci = np.arange(0, W, stride)
    counts = np.outer(np.diff(np.append(ri, H)), np.diff(np.append(ci, W)))

    def box_mean(X):
        return np.add.reduceat(np.add.reduceat(X, ri, axis=0), ci, axis=1) / counts

    m = box_mean(S)
    m2 = box_mean(S * S)
    std = np.sqrt(np.maximum(m2 - m * m, 0.0))
    chans = [m, std, box_mean(np.abs(gx)), box_mean(np.abs(gy))]
    for k in range(4):
        chans.append(box_mean(mag * (b == k)))
    return np.stack(chans, axis=-1)


def _standardize(grid):
    flat = grid.reshape(-1, grid.shape[-1])
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0)
    out = np.where(sd > 1e-12, (flat - mu) / np.where(sd > 1e-12, sd, 1.0), 0.0)
    return out.reshape(grid.shape)


def _fit_dim(grid, d):
    have = grid.shape[-1]
    if d == have:
        return grid
    if d < have:
        return grid[..., :d]
    pad = np.zeros(grid.shape[:-1] + (d - have,))
    return np.concatenate([grid, pad], axis=-1)


def build_pyramid(I, d_c: int = 8, d_f: int = 8) -> FeaturePyramid:
    I = as_image(I)
    coarse = _fit_dim(_standardize(_cell_stats(I, COARSE_STRIDE, _SIGMA_COARSE)), d_c)
    fine = _fit_dim(_standardize(_cell_stats(I, FINE_STRIDE, _SIGMA_FINE)), d_f)
    return FeaturePyramid(coarse=coarse, fine=fine, width=I.shape[1], height=I.shape[0])


# ----------------------------------------------------------------- binarize


def _otsu_threshold(x):
    """Between-class-variance-maximizing threshold; returns None when the
    input has no contrast."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return None
    hist, edges = np.histogram(x, bins=256, range=(lo, hi))
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * centers)
    mt = m0[-1]
    valid = (w0 > 0) & (w0 < 1)
    sigma_b = np.zeros_like(w0)
    sigma_b[valid] = (mt * w0[valid] - m0[valid]) ** 2 / (w0[valid] * (1.0 - w0[valid]))
    if sigma_b.max() <= 0:
        return None
    return centers[int(np.argmax(sigma_b))]


def _disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def _tophat(I, fp):
    return I - ndimage.grey_opening(I, footprint=fp, mode="reflect")


def enhance_vessels(I) -> np.ndarray:
    """Binary thin-structure map: white top-hat (disk radius 7 px at 128-px
    scale) + Otsu.

    Continuous images are inverted first so thin dark structures respond.
    Two-valued images are treated as indicator maps of their minority class,
    which makes re-application to the operator's own binary output exact.
    """
    I = as_image(I)
    radius = max(1, round(7 * min(I.shape) / 128))
    fp = _disk(radius)
    vals = np.unique(I)
    if len(vals) == 1:
        return np.zeros_like(I)
    if len(vals) == 2:
        minority = vals[int(np.argmin([(I == v).sum() for v in vals]))]
        resp = _tophat((I == minority).astype(float), fp)
    else:
        resp = _tophat(1.0 - I, fp)
    thr = _otsu_threshold(resp)
    if thr is None:
        return np.zeros_like(I)
    return (resp > thr).astype(float)


# ---------------------------------------------------------------------- ncc


def ncc(A, B) -> float:
    """Zero-mean normalized cross-correlation in [-1, 1]."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    a = A.ravel() - A.mean()
    b = B.ravel() - B.mean()
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVariance("constant image in ncc")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


# --------------------------------------------------------------------- warp


def _bilinear_image(I, u, v):
    """Sample image at pixel coords (u, v); zero outside [0,W-1]x[0,H-1]."""
    H, W = I.shape
    inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0, W - 1)
    vc = np.clip(v, 0, H - 1)
    u0 = np.clip(np.floor(uc).astype(int), 0, W - 2)
    v0 = np.clip(np.floor(vc).astype(int), 0, H - 2)
    fu = uc - u0
    fv = vc - v0
    val = (I[v0, u0] * (1 - fu) * (1 - fv) + I[v0, u0 + 1] * fu * (1 - fv)
           + I[v0 + 1, u0] * (1 - fu) * fv + I[v0 + 1, u0 + 1] * fu * fv)
    return np.where(inside, val, 0.0)


def _pix_to_norm(u, size):
    return 2.0 * (u + 0.5) / size - 1.0


def _norm_to_pix(x, size):
    return (x + 1.0) * size / 2.0 - 0.5


def poly2_inverse_grid(t: Poly2Transform, qx, qy, max_iter=10, tol=1e-6, p0=None):
    """Solve T(p) = q per point by Newton from the forward map.

    Returns (px, py, converged mask).  Non-converged or Jacobian-degenerate
    points keep their last iterate and are flagged False.
    """
    px = qx.copy() if p0 is None else p0[0].copy()
    py = qy.copy() if p0 is None else p0[1].copy()
    ok = np.zeros(px.shape, dtype=bool)
    alive = ~ok
    for _ in range(max_iter):
        pts = np.stack([px[alive], py[alive]], axis=-1).reshape(-1, 2)
        out = apply_poly2(t, pts)
        rx = qx[alive] - out[:, 0].reshape(px[alive].shape)
        ry = qy[alive] - out[:, 1].reshape(py[alive].shape)
        J = poly2_jacobian(t, pts)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        good = np.abs(det) > 1e-12
        det = np.where(good, det, 1.0)
        dx = (J[:, 1, 1] * rx.ravel() - J[:, 0, 1] * ry.ravel()) / det
        dy = (-J[:, 1, 0] * rx.ravel() + J[:, 0, 0] * ry.ravel()) / det
        dx = np.where(good, dx, 0.0).reshape(rx.shape)
        dy = np.where(good, dy, 0.0).reshape(ry.shape)
        px[alive] += dx
        py[alive] += dy
        done = (np.abs(np.stack([dx, dy])).max(axis=0) < tol) & good.reshape(rx.shape)
        ok[alive] = done
        alive = ~ok
        if not alive.any():
            break
    return px, py, ok


def warp_image(I, transform, out_size) -> np.ndarray:
    """Inverse-mapped bilinear warp.

    The transform maps normalized source coordinates to normalized output
    coordinates; out_size is (W, H) or a single square size.  Output pixels
    whose preimage is outside the source (or whose Newton inverse fails for
    polynomial warps) are 0.
    """
    I = as_image(I)
    if np.isscalar(out_size):
        out_w = out_h = int(out_size)
    else:
        out_w, out_h = int(out_size[0]), int(out_size[1])
    vv, uu = np.mgrid[0:out_h, 0:out_w]
    qx = _pix_to_norm(uu.astype(float), out_w)
    qy = _pix_to_norm(vv.astype(float), out_h)
    if isinstance(transform, Poly2Transform):
        px, py, ok = poly2_inverse_grid(transform, qx, qy)
    else:
        H = np.asarray(transform, dtype=float).reshape(3, 3)
        Hi = np.linalg.inv(H)
        w = Hi[2, 0] * qx + Hi[2, 1] * qy + Hi[2, 2]
        ok = np.abs(w) > 1e-12
        wsafe = np.where(ok, w, 1.0)
        px = (Hi[0, 0] * qx + Hi[0, 1] * qy + Hi[0, 2]) / wsafe
        py = (Hi[1, 0] * qx + Hi[1, 1] * qy + Hi[1, 2]) / wsafe
    su = _norm_to_pix(px, I.shape[1])
    sv = _norm_to_pix(py, I.shape[0])
    out = _bilinear_image(I, su, sv)
    return np.where(ok, out, 0.0)


# ---------------------------------------------------------- feature sampling


def _grid_coords(p, size, stride):
    """Normalized coordinate -> grid-cell coordinate (cell j center at j)."""
    return (np.asarray(p, dtype=float) + 1.0) * size / (2.0 * stride) - 0.5


def grid_sample(grid, gx, gy):
    """Bilinear sample of a (Gh, Gw, d) grid at continuous cell coords, with
    a one-cell linear fade to (zero descriptor, flag 1) outside.

    Returns (values (..., d+1), cache for grid_sample_vjp).  The last channel
    is the out-of-bounds flag 1 - w.
    """
    Gh, Gw, d = grid.shape
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    # per-axis fade weight and its derivative
    def fade(g, G):
        out = np.maximum(np.maximum(-g, g - (G - 1)), 0.0)
        w = np.clip(1.0 - out, 0.0, 1.0)
        dw = np.where((out > 0) & (out < 1), np.where(g < 0, 1.0, -1.0), 0.0)
        return w, dw

    wx, dwx = fade(gx, Gw)
    wy, dwy = fade(gy, Gh)
    cx = np.clip(gx, 0.0, Gw - 1.0)
    cy = np.clip(gy, 0.0, Gh - 1.0)
    x0 = np.clip(np.floor(cx).astype(int), 0, max(Gw - 2, 0))
    y0 = np.clip(np.floor(cy).astype(int), 0, max(Gh - 2, 0))
    x1 = np.minimum(x0 + 1, Gw - 1)
    y1 = np.minimum(y0 + 1, Gh - 1)
    fx = (cx - x0)[..., None]
    fy = (cy - y0)[..., None]
    g00 = grid[y0, x0]
    g01 = grid[y0, x1]
    g10 = grid[y1, x0]
    g11 = grid[y1, x1]
    top = g00 * (1 - fx) + g01 * fx
    bot = g10 * (1 - fx) + g11 * fx
    desc = top * (1 - fy) + bot * fy
    w = (wx * wy)[..., None]
    flag = np.broadcast_to(1.0 - w, desc[..., :1].shape)
    vals = np.concatenate([desc * w, flag], axis=-1)
    cache = dict(grid=grid, x0=x0, x1=x1, y0=y0, y1=y1, fx=fx, fy=fy,
                 wx=wx, wy=wy, dwx=dwx, dwy=dwy, desc=desc,
                 inx=(gx > 0) & (gx < Gw - 1), iny=(gy > 0) & (gy < Gh - 1))
    return vals, cache


def grid_sample_vjp(cache, upstream):
    """d(loss)/d(gx, gy) given upstream d(loss)/d(values).  Shapes: upstream
    (..., d+1) -> returns ((...), (...)) gradients for gx and gy."""
    grid = cache["grid"]
    fx, fy = cache["fx"], cache["fy"]
    wx, wy = cache["wx"], cache["wy"]
    dwx, dwy = cache["dwx"], cache["dwy"]
    g00 = grid[cache["y0"], cache["x0"]]
    g01 = grid[cache["y0"], cache["x1"]]
    g10 = grid[cache["y1"], cache["x0"]]
    g11 = grid[cache["y1"], cache["x1"]]
    up_desc = upstream[..., :-1]
    up_flag = upstream[..., -1]
    # derivative of bilinear part wrt cell coords (only inside the grid)
    ddesc_dx = ((g01 - g00) * (1 - fy) + (g11 - g10) * fy)
    ddesc_dy = ((g10 - g00) * (1 - fx) + (g11 - g01) * fx)
    w = (wx * wy)
    desc = cache["desc"]
    inx = cache["inx"]
    iny = cache["iny"]
    gx_grad = (up_desc * ddesc_dx).sum(axis=-1) * w * inx
    gy_grad = (up_desc * ddesc_dy).sum(axis=-1) * w * iny
    # fade-weight path: d(desc*w)/dg and d(flag)/dg = -dw/dg
    gx_grad += ((up_desc * desc).sum(axis=-1) - up_flag) * (dwx * wy)
    gy_grad += ((up_desc * desc).sum(axis=-1) - up_flag) * (wx * dwy)
    return gx_grad, gy_grad


def sample_feature(P: FeaturePyramid, level: str, p):
    """Descriptor (+ out-of-bounds flag channel) at normalized point p."""
    grid, stride = _select_level(P, level)
    pt = np.asarray(p, dtype=float)
    gx = _grid_coords(pt[..., 0], P.width, stride)
    gy = _grid_coords(pt[..., 1], P.height, stride)
    vals, _ = grid_sample(grid, gx, gy)
    return vals


def _select_level(P: FeaturePyramid, level: str):
    if level == "coarse":
        return P.coarse, COARSE_STRIDE
    if level == "fine":
        return P.fine, FINE_STRIDE
    raise ValueError(f"unknown pyramid level {level!r}")


# --------------------------------------------------------------------- crop


@dataclass
class Patch:
    values: np.ndarray  # (k, k, d_f)
    valid: np.ndarray   # (k, k) bool, False where zero-filled
    center: np.ndarray  # the requested center (normalized)


def crop_fine(P: FeaturePyramid, center, k: int) -> Patch:
    """k x k fine-grid window centered at the cell nearest to `center`."""
    if k % 2 != 1:
        raise ValueError("crop size k must be odd")
    grid, stride = _select_level(P, "fine")
    Gh, Gw, d = grid.shape
    c = np.asarray(center, dtype=float)
    cj = int(np.round(_grid_coords(c[0], P.width, stride)))
    ci = int(np.round(_grid_coords(c[1], P.height, stride)))
    half = k // 2
    vals = np.zeros((k, k, d))
    valid = np.zeros((k, k), dtype=bool)
    for r in range(k):
        gi = ci - half + r
        if not 0 <= gi < Gh:
            continue
        j0 = max(0, cj - half)
        j1 = min(Gw, cj + half + 1)
        if j0 < j1:
            vals[r, j0 - (cj - half):j1 - (cj - half)] = grid[gi, j0:j1]
            valid[r, j0 - (cj - half):j1 - (cj - half)] = True
    return Patch(values=vals, valid=valid, center=c)


# ---------------------------------------------------------------- amplifier


def amplify(I, strength: float = 1.5, sigma: float = 2.0) -> np.ndarray:
    """Unsharp-mask contrast amplifier, clipped back to [0,1]."""
    I = as_image(I)
    blur = ndimage.gaussian_filter(I, sigma, mode="reflect")
    return np.clip(I + strength * (I - blur), 0.0, 1.0)
