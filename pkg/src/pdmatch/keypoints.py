"""Query-point generation on the source image.

Three stages, each filling what the previous left short: difference-of-
Gaussians scale-space extrema, Laplacian-of-Gaussian blob maxima, and a
seeded jittered grid.  The result always has exactly N points, mutually
separated by the non-max-suppression radius.

The scale-space blurs use circular (wrap) boundaries so the detector is
exactly equivariant to integer circular shifts; the seam responses this can
create at the border are harmless for query generation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmall
from .imaging import amplify, as_image

NMS_RADIUS_BASE = 4.0     # pixels at the 128-px reference scale
_OCTAVES = 3
_SCALES = 3
_SIGMA0 = 1.6
_CONTRAST_THRESHOLD = 0.01
_LOG_SIGMAS = (2.0, 4.0, 8.0)
_LOG_THRESHOLD = 0.005


def nms_radius(width: int, height: int) -> float:
    return NMS_RADIUS_BASE * min(width, height) / 128.0


def to_normalized(p, W: int, H: int):
    """Pixel coords (u, v) -> normalized (x, y) with pixel centers at
    x = 2*(u+0.5)/W - 1."""
    p = np.asarray(p, dtype=float)
    out = np.empty_like(p)
    out[..., 0] = 2.0 * (p[..., 0] + 0.5) / W - 1.0
    out[..., 1] = 2.0 * (p[..., 1] + 0.5) / H - 1.0
    return out


def to_pixels(p, W: int, H: int):
    p = np.asarray(p, dtype=float)
    out = np.empty_like(p)
    out[..., 0] = (p[..., 0] + 1.0) * W / 2.0 - 0.5
    out[..., 1] = (p[..., 1] + 1.0) * H / 2.0 - 0.5
    return out


@dataclass
class QuerySet:
    points: np.ndarray   # (N, 2) normalized
    scores: np.ndarray   # (N,) detector response, 0 for grid fill
    width: int
    height: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        n = len(self.points)
        if n < 4 or len(self.scores) != n:
            raise ValueError("need >= 4 scored points")
        if np.abs(self.points).max() > 1 + 1e-9:
            raise ValueError("points must lie in [-1,1]^2")
        pix = to_pixels(self.points, self.width, self.height)
        d2 = np.sum((pix[:, None, :] - pix[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        r = nms_radius(self.width, self.height)
        if d2.min() < (r - 1e-9) ** 2:
            raise ValueError("points violate the NMS separation radius")

    def __len__(self):
        return len(self.points)


# -------------------------------------------------------------- stage 1: DoG


def dog_extrema(I):
    """Scale-space |DoG| extrema above the contrast threshold.

    Returns (pts (K,2) full-resolution pixel coords, resp (K,)).  Exposed
    separately from detect_queries so the translation-equivariance property
    can be checked on the raw detector.
    """
    I = as_image(I)
    k = 2.0 ** (1.0 / _SCALES)
    pts, resp = [], []
    base = I
    for octave in range(_OCTAVES):
        if min(base.shape) < 8:
            break
        gs = [ndimage.gaussian_filter(base, _SIGMA0 * k ** i, mode="wrap")
              for i in range(_SCALES + 3)]
        dog = np.stack([gs[i + 1] - gs[i] for i in range(_SCALES + 2)])
        # 26-neighborhood extrema on the middle scales
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        core = dog[1:-1, 1:-1, 1:-1]
        hit = ((core == mx[1:-1, 1:-1, 1:-1]) | (core == mn[1:-1, 1:-1, 1:-1]))
        hit &= np.abs(core) > _CONTRAST_THRESHOLD
        s, v, u = np.nonzero(hit)
        scale = 2 ** octave
        pts.append(np.stack([(u + 1) * scale, (v + 1) * scale], axis=1).astype(float))
        resp.append(np.abs(core[s, v, u]))
        base = gs[_SCALES][::2, ::2]
    if not pts:
        return np.zeros((0, 2)), np.zeros(0)
    return np.concatenate(pts), np.concatenate(resp)


# ------------------------------------------------------------- stage 2: LoG


def log_blobs(I):
    """Scale-normalized |LoG| spatial maxima at a fixed sigma sweep."""
    I = as_image(I)
    pts, resp = [], []
    for sigma in _LOG_SIGMAS:
        r = np.abs(sigma ** 2 * ndimage.gaussian_laplace(I, sigma, mode="wrap"))
        mx = ndimage.maximum_filter(r, size=3, mode="nearest")
        hit = (r == mx) & (r > _LOG_THRESHOLD)
        hit[0, :] = hit[-1, :] = False
        hit[:, 0] = hit[:, -1] = False
        v, u = np.nonzero(hit)
        pts.append(np.stack([u, v], axis=1).astype(float))
        resp.append(r[v, u])
    return np.concatenate(pts), np.concatenate(resp)


# ---------------------------------------------------------------- selection


def _ranked(pts, resp):
    # response desc, then y asc, then x asc
    order = np.lexsort((pts[:, 0], pts[:, 1], -resp))
    return pts[order], resp[order]


def _nms_accept(cand, cand_resp, accepted, r, budget):
    """Greedily keep candidates at least r away from every accepted point."""
    out_p, out_s = [], []
    acc = list(accepted)
    for p, s in zip(cand, cand_resp):
        if len(out_p) >= budget:
            break
        if acc:
            d2 = np.sum((np.asarray(acc) - p) ** 2, axis=1)
            if d2.min() < r * r:
                continue
        acc.append(p)
        out_p.append(p)
        out_s.append(s)
    return out_p, out_s


def detect_queries(I, N: int, seed: int) -> QuerySet:
    """Exactly N well-separated query points on the amplified image."""
    I = as_image(I)
    if N < 4:
        raise ValueError("N must be >= 4")
    H, W = I.shape
    r = nms_radius(W, H)
    if (np.floor(W / r) + 1) * (np.floor(H / r) + 1) < N:
        raise ImageTooSmall(f"cannot place {N} points {r:.2f}px apart in {W}x{H}")
    A = amplify(I)

    pts, scores = [], []
    for detector in (dog_extrema, log_blobs):
        if len(pts) >= N:
            break
        cp, cr = detector(A)
        if len(cp):
            cp, cr = _ranked(cp, cr)
            got_p, got_s = _nms_accept(cp, cr, pts, r, N - len(pts))
            pts.extend(got_p)
            scores.extend(got_s)

    if len(pts) < N:
        rng = np.random.default_rng(seed)
        m = int(np.ceil(np.sqrt(N)))
        for _ in range(6):
            if len(pts) >= N:
                break
            px, py = W / m, H / m
            cells = [(a, b) for a in range(m) for b in range(m)]
            jit = rng.uniform(-0.25, 0.25, size=(len(cells), 2))
            order = rng.permutation(len(cells))
            cand = []
            for idx in order:
                a, b = cells[idx]
                u = (b + 0.5 + jit[idx, 0]) * px
                v = (a + 0.5 + jit[idx, 1]) * py
                cand.append((min(max(u, 0.0), W - 1.0), min(max(v, 0.0), H - 1.0)))
            got_p, got_s = _nms_accept(np.asarray(cand), np.zeros(len(cand)),
                                       pts, r, N - len(pts))
            pts.extend(got_p)
            scores.extend(got_s)
            m *= 2
    if len(pts) < N:
        raise ImageTooSmall(f"only {len(pts)} of {N} points satisfiable in {W}x{H}")

    pix = np.asarray(pts[:N])
    return QuerySet(points=to_normalized(pix, W, H),
                    scores=np.asarray(scores[:N]), width=W, height=H)


# ---------------------------------------------------------------------- csv


def write_queries(path, qs: QuerySet):
    pix = to_pixels(qs.points, qs.width, qs.height)
    with open(path, "w") as f:
        f.write("id,x,y,score\n")
        for i, ((u, v), s) in enumerate(zip(pix, qs.scores)):
            f.write(f"{i},{u:.9g},{v:.9g},{s:.9g}\n")


def read_queries(path, width: int, height: int) -> QuerySet:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    pts = to_normalized(rows[:, 1:3], width, height)
    return QuerySet(points=pts, scores=rows[:, 3], width=width, height=height)
