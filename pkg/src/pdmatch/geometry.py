"""Planar transforms and their estimators.

Homographies are plain 3x3 float arrays (row-major, canonical scale fixed
only where a contract demands it).  Point sets are (N, 2) float arrays; a
single point may be passed as shape (2,).  All estimators are pure
functions of their inputs plus an explicit seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateProjection, NoConsensus, RankDeficient, ShapeMismatch

_RANK_RTOL = 1e-10


@dataclass
class Poly2Transform:
    """Second-order polynomial warp: per-axis coefficients over (1, x, y, x^2, xy, y^2)."""

    cx: np.ndarray
    cy: np.ndarray

    def __post_init__(self):
        self.cx = np.asarray(self.cx, dtype=float).reshape(6)
        self.cy = np.asarray(self.cy, dtype=float).reshape(6)
        if not (np.all(np.isfinite(self.cx)) and np.all(np.isfinite(self.cy))):
            raise ValueError("poly2 coefficients must be finite")


@dataclass
class CorrespondenceSet:
    """Matched source/destination points, optionally with an inlier mask."""

    src: np.ndarray
    dst: np.ndarray
    inlier_mask: np.ndarray | None = None

    def __post_init__(self):
        self.src = np.atleast_2d(np.asarray(self.src, dtype=float))
        self.dst = np.atleast_2d(np.asarray(self.dst, dtype=float))
        if self.src.shape != self.dst.shape or self.src.ndim != 2 or self.src.shape[1] != 2:
            raise ShapeMismatch(f"src {self.src.shape} vs dst {self.dst.shape}")
        if self.inlier_mask is not None:
            self.inlier_mask = np.asarray(self.inlier_mask, dtype=bool).reshape(-1)
            if self.inlier_mask.shape[0] != self.src.shape[0]:
                raise ShapeMismatch("inlier mask length != pair count")

    def __len__(self):
        return self.src.shape[0]


def apply_homography(H, p):
    """Apply a 3x3 homography to one point (2,) or a batch (N, 2)."""
    H = np.asarray(H, dtype=float).reshape(3, 3)
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    w = H[2, 0] * pts[:, 0] + H[2, 1] * pts[:, 1] + H[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateProjection("projective depth |w| < 1e-12")
    x = (H[0, 0] * pts[:, 0] + H[0, 1] * pts[:, 1] + H[0, 2]) / w
    y = (H[1, 0] * pts[:, 0] + H[1, 1] * pts[:, 1] + H[1, 2]) / w
    out = np.stack([x, y], axis=1)
    return out[0] if single else out


def overlap_fraction(H, n: int = 32) -> float:
    """Fraction of an n x n source grid over [-1,1]^2 that H maps back into
    [-1,1]^2.  Rough domain-coverage measure for synthesized warps."""
    g = np.linspace(-1.0, 1.0, n)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    try:
        out = apply_homography(H, pts)
    except DegenerateProjection:
        return 0.0
    inside = np.all(np.abs(out) <= 1.0, axis=1)
    return float(inside.mean())


def _hartley(pts):
    """Normalizing similarity: centroid to origin, mean radius sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return T, (pts - c) * s


def _dlt_rows(srcn, dstn):
    n = srcn.shape[0]
    A = np.zeros((2 * n, 9))
    x, y = srcn[:, 0], srcn[:, 1]
    u, v = dstn[:, 0], dstn[:, 1]
    A[0::2, 0] = x
    A[0::2, 1] = y
    A[0::2, 2] = 1.0
    A[0::2, 6] = -u * x
    A[0::2, 7] = -u * y
    A[0::2, 8] = -u
    A[1::2, 3] = x
    A[1::2, 4] = y
    A[1::2, 5] = 1.0
    A[1::2, 6] = -v * x
    A[1::2, 7] = -v * y
    A[1::2, 8] = -v
    return A


def _solve_dlt(src, dst, weights=None, shared_norm=False):
    """Weighted normalized DLT.  Returns (H, cache) — cache carries the pieces
    the IRLS adjoint needs.

    shared_norm=True conditions both clouds with the source similarity, so
    the normalization is constant wrt dst (required for an exact adjoint in
    soft_homography_vjp)."""
    Ts, srcn = _hartley(src)
    if shared_norm:
        Td = Ts
        dstn = dst * Ts[0, 0] + np.array([Ts[0, 2], Ts[1, 2]])
    else:
        Td, dstn = _hartley(dst)
    A = _dlt_rows(srcn, dstn)
    if weights is not None:
        A = A * np.repeat(np.sqrt(weights), 2)[:, None]
    s = np.linalg.svd(A, compute_uv=False)
    if s.shape[0] < 8 or s[7] <= s[0] * _RANK_RTOL:
        raise RankDeficient("DLT design matrix rank < 8")
    M = A.T @ A
    evals, evecs = np.linalg.eigh(M)
    h = evecs[:, 0]
    # deterministic sign: largest-magnitude entry positive
    k = int(np.argmax(np.abs(h)))
    if h[k] < 0:
        h = -h
    Hn = h.reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    cache = {
        "Ts": Ts, "Td": Td, "srcn": srcn, "dstn": dstn, "A": A,
        "evals": evals, "evecs": evecs, "h": h,
        "weights": None if weights is None else np.asarray(weights, float),
    }
    return H, cache


def fit_homography_dlt(c: CorrespondenceSet):
    """Normalized direct linear transform over all pairs (least squares)."""
    if len(c) < 4:
        raise RankDeficient("need >= 4 pairs")
    H, _ = _solve_dlt(c.src, c.dst)
    return H


def _reproj_errors(H, src, dst):
    return np.sqrt(((apply_homography(H, src) - dst) ** 2).sum(axis=1))


def _sample_ok(pts):
    # reject minimal samples with any near-collinear triple
    scale2 = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1])) ** 2 + 1e-30
    for i in range(4):
        idx = [j for j in range(4) if j != i]
        a, b, d = pts[idx[0]], pts[idx[1]], pts[idx[2]]
        area2 = abs((b[0] - a[0]) * (d[1] - a[1]) - (b[1] - a[1]) * (d[0] - a[0]))
        if area2 < 1e-9 * scale2:
            return False
    return True


def ransac_homography(c: CorrespondenceSet, threshold_px: float = 2.0,
                      max_iters: int = 2000, seed: int = 0):
    """RANSAC homography with DLT refit on the best consensus set.

    threshold_px is interpreted in the units of the supplied coordinates
    (callers evaluating normalized points convert via the image size
    beforehand).  Deterministic for a fixed seed; adaptive early exit at
    99.9% confidence.
    """
    n = len(c)
    if n < 4:
        raise NoConsensus("fewer than 4 pairs")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_sse = np.inf
    best_mask = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if not _sample_ok(c.src[idx]):
            continue
        try:
            H, _ = _solve_dlt(c.src[idx], c.dst[idx])
        except RankDeficient:
            continue
        err = _reproj_errors(H, c.src, c.dst)
        mask = err <= threshold_px
        count = int(mask.sum())
        if count < 4:
            continue
        sse = float((err[mask] ** 2).sum())
        if count > best_count or (count == best_count and sse < best_sse):
            best_count, best_sse, best_mask = count, sse, mask
            w = count / n
            if w >= 1.0:
                break
            # iterations for 99.9% chance of one all-inlier sample
            denom = np.log1p(-min(w ** 4, 1 - 1e-12))
            needed = int(np.ceil(np.log(1e-3) / denom)) if denom < 0 else max_iters
    if best_mask is None:
        raise NoConsensus("no minimal sample produced >= 4 inliers")
    H, _ = _solve_dlt(c.src[best_mask], c.dst[best_mask])
    final_mask = _reproj_errors(H, c.src, c.dst) <= threshold_px
    return H, final_mask


def _irls_passes(src, dst, tau):
    """Uniform DLT followed by 3 Gaussian reweighting rounds.

    Both clouds are conditioned by the source similarity (constant wrt dst)
    so the fit stays an exactly differentiable function of dst."""
    H, cache = _solve_dlt(src, dst, shared_norm=True)
    w = None
    for _ in range(3):
        r = _reproj_errors(H, src, dst)
        # annealed bandwidth, floored at tau: a cold start whose residuals
        # dwarf tau would otherwise zero out every weight at once; once the
        # fit settles (median residual <= tau) this is exactly exp(-(r/tau)^2)
        bw = max(tau, float(np.median(r)))
        logw = -((r / bw) ** 2)
        # rescaling all weights leaves the minimizer unchanged; anchoring the
        # best pair at weight 1 avoids underflow
        w = np.exp(logw - logw.max())
        H, cache = _solve_dlt(src, dst, weights=w, shared_norm=True)
    return H, cache


def soft_homography(c: CorrespondenceSet, tau: float):
    """Differentiable robust fit: IRLS-DLT with weights exp(-(r/tau)^2)."""
    if len(c) < 4:
        raise RankDeficient("need >= 4 pairs")
    H, _ = _irls_passes(c.src, c.dst, tau)
    return H


def soft_homography_vjp(c: CorrespondenceSet, tau: float, dL_dH: np.ndarray):
    """Adjoint of soft_homography wrt destination coordinates.

    Final-round IRLS weights and the Hartley normalizations are held fixed
    (both sensitivities vanish as residuals -> 0, the training operating
    point).  Returns (H, dL/ddst of shape (N, 2)).
    """
    H, cache = _irls_passes(c.src, c.dst, tau)
    Ts, Td = cache["Ts"], cache["Td"]
    A, h = cache["A"], cache["h"]
    evals, evecs = cache["evals"], cache["evecs"]
    w = cache["weights"]
    Tdi = np.linalg.inv(Td)
    # H = Td^-1 Hn Ts, with Hn = reshape(h); pull the loss gradient back to h
    dL_dHn = Tdi.T @ np.asarray(dL_dH, float) @ Ts.T
    hhat = dL_dHn.reshape(9)
    # eigenvector perturbation: dh = sum_{j>0} (v_j^T dM h)/(l0 - l_j) v_j
    gaps = evals[0] - evals[1:]
    K = (evecs[:, 1:] / gaps) @ evecs[:, 1:].T
    Z = np.outer(K @ hhat, h)
    dL_dA = A @ (Z + Z.T)
    # dst enters rows through u, v (scaled by sqrt(w) and Hartley of dst)
    srcn = cache["srcn"]
    sw = np.sqrt(w) if w is not None else np.ones(len(c))
    sd = Td[0, 0]  # isotropic Hartley scale of the dst cloud
    gx = -(dL_dA[0::2, 6] * srcn[:, 0] + dL_dA[0::2, 7] * srcn[:, 1] + dL_dA[0::2, 8])
    gy = -(dL_dA[1::2, 6] * srcn[:, 0] + dL_dA[1::2, 7] * srcn[:, 1] + dL_dA[1::2, 8])
    dL_ddst = np.stack([gx, gy], axis=1) * (sw * sd)[:, None]
    return H, dL_ddst


def fit_poly2(c: CorrespondenceSet) -> Poly2Transform:
    """Per-axis least squares over the quadratic basis."""
    if len(c) < 6:
        raise RankDeficient("need >= 6 pairs")
    P = _poly2_basis(c.src)
    s = np.linalg.svd(P, compute_uv=False)
    if s[5] <= s[0] * _RANK_RTOL:
        raise RankDeficient("quadratic design matrix rank < 6")
    cx, *_ = np.linalg.lstsq(P, c.dst[:, 0], rcond=None)
    cy, *_ = np.linalg.lstsq(P, c.dst[:, 1], rcond=None)
    return Poly2Transform(cx, cy)


def _poly2_basis(pts):
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    return np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=1)


def apply_poly2(t: Poly2Transform, p):
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    B = _poly2_basis(pts)
    out = np.stack([B @ t.cx, B @ t.cy], axis=1)
    return out[0] if single else out


def poly2_jacobian(t: Poly2Transform, p):
    """Analytic 2x2 Jacobian(s) of the quadratic warp at p: shape (..., 2, 2)."""
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    J = np.empty((pts.shape[0], 2, 2))
    for row, cf in ((0, t.cx), (1, t.cy)):
        J[:, row, 0] = cf[1] + 2 * cf[3] * x + cf[4] * y
        J[:, row, 1] = cf[2] + cf[4] * x + 2 * cf[5] * y
    return J[0] if np.asarray(p).ndim == 1 else J


def canonical_homography(H):
    """Scale so the bottom-right entry is exactly 1."""
    H = np.asarray(H, dtype=float).reshape(3, 3)
    scale = np.max(np.abs(H))
    if scale < 1e-300:
        raise DegenerateProjection("zero matrix")
    Hs = H / scale
    if abs(Hs[2, 2]) < 1e-12:
        raise DegenerateProjection("|h22| < 1e-12 after rescale")
    return Hs / Hs[2, 2]


def homography_l1(H, H_gt) -> float:
    """Elementwise L1 distance between canonicalized homographies."""
    return float(np.abs(canonical_homography(H) - canonical_homography(H_gt)).sum())


def homography_l1_vjp(H, H_gt):
    """Returns (l1 value, dL1/dH) — gradient wrt the *uncanonicalized* H."""
    H = np.asarray(H, dtype=float).reshape(3, 3)
    Hc = canonical_homography(H)
    Gc = canonical_homography(H_gt)
    S = np.sign(Hc - Gc)
    h22 = H[2, 2]
    grad = S / h22
    grad[2, 2] -= (S * H).sum() / (h22 * h22)
    return float(np.abs(Hc - Gc).sum()), grad


def write_correspondences(path, c: CorrespondenceSet):
    """CSV: id,src_x,src_y,dst_x,dst_y (pixel coordinates)."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["id", "src_x", "src_y", "dst_x", "dst_y"])
        for i in range(len(c)):
            wr.writerow([i, *("%.9g" % v for v in (*c.src[i], *c.dst[i]))])


def read_correspondences(path) -> CorrespondenceSet:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:5] != ["id", "src_x", "src_y", "dst_x", "dst_y"]:
        raise ValueError(f"{path}: not a correspondence CSV")
    vals = np.array([[float(v) for v in r[1:5]] for r in rows[1:]], dtype=float)
    vals = vals.reshape(-1, 4)
    return CorrespondenceSet(vals[:, 0:2], vals[:, 2:4])
