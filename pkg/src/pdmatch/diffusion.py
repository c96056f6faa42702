"""Noise schedule, forward/reverse diffusion updates, and the random-walk
correspondence sampler.

Conventions: timesteps run 1..T (arrays are indexed t-1); the empty product
alpha_bar_0 = 1.  Points are (N, 2) float arrays in normalized [-1,1]-style
coordinates.  The score function is any callable

    fn(x_t: (N,2) array, t: int, images, queries) -> (N,2) array of eps_hat

where `images` is whatever pair handle the caller supplied to rwcs_sample
(a (GrayImage, GrayImage) tuple for real models, None for synthetic oracles).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSchedule, ShapeMismatch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        """alpha_bar_t with the empty-product convention abar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def bt(self, t: int) -> float:
        return float(self.beta[t - 1])


@dataclass
class ParticleSet:
    """Fixed source queries paired with evolving destination points."""

    src: np.ndarray
    dst: np.ndarray
    t: int

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=float)
        self.dst = np.asarray(self.dst, dtype=float)
        if self.src.shape != self.dst.shape or self.src.ndim != 2 or self.src.shape[1] != 2:
            raise ShapeMismatch(f"src {self.src.shape} vs dst {self.dst.shape}")
        if self.src.shape[0] < 4:
            raise ShapeMismatch("need at least 4 particles (homography estimability)")
        if np.max(np.abs(self.src)) > 1.0 + 1e-9:
            raise ValueError("source queries must lie in [-1,1]^2")


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)  # [(t, (N,2) array), ...]

    def append(self, t: int, dst: np.ndarray):
        if self.snapshots and t >= self.snapshots[-1][0]:
            raise ValueError("snapshot timesteps must strictly decrease")
        self.snapshots.append((t, dst.copy()))


def make_schedule(T: int = 100, beta_start: float = 0.001, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule; alpha and alpha_bar precomputed."""
    if T < 1:
        raise InvalidSchedule(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    if not (1 <= t <= sched.T):
        raise ValueError(f"t={t} outside 1..{sched.T}")
    ab = sched.abar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_coefficients(t: int, sched: NoiseSchedule):
    """(a, b, c) of the reverse update x_{t-1} = a x_t + b eps_hat + c z."""
    at = sched.at(t)
    ab = sched.abar(t)
    a = 1.0 / np.sqrt(at)
    b = -(1.0 - at) / np.sqrt(at * (1.0 - ab))
    c = np.sqrt(sched.bt(t))
    return a, b, c


def reverse_step(x_t, t: int, eps_hat, z, sched: NoiseSchedule):
    """One reverse-diffusion step.  z is forced to zero at the final step t=1."""
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    if not (1 <= t <= sched.T):
        raise ValueError(f"t={t} outside 1..{sched.T}")
    a, b, c = reverse_coefficients(t, sched)
    if t == 1:
        return a * x_t + b * eps_hat
    z = np.asarray(z, dtype=float)
    if z.shape != x_t.shape:
        raise ShapeMismatch(f"x_t {x_t.shape} vs z {z.shape}")
    return a * x_t + b * eps_hat + c * z


def rwcs_sample(model, images, queries, sched: NoiseSchedule, seed: int,
                record: bool = False, deterministic: bool = False):
    """Random-walk correspondence search: walk Gaussian-initialized
    destination points down the reverse chain under a score function.

    Returns (ParticleSet at t=0, Trajectory or None).  Bit-identical for a
    fixed seed.  deterministic=True suppresses the per-step noise z entirely
    (the final step never has noise either way).
    """
    queries = np.asarray(queries, dtype=float)
    if queries.size == 0:
        raise ValueError("queries must be non-empty")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(queries.shape)
    traj = Trajectory() if record else None
    if record:
        traj.append(sched.T, x)
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(model(x, t, images, queries), dtype=float)
        if eps_hat.shape != x.shape:
            raise ShapeMismatch(f"model returned {eps_hat.shape}, expected {x.shape}")
        if t == 1 or deterministic:
            z = None if t == 1 else np.zeros_like(x)
        else:
            z = rng.standard_normal(x.shape)
        x = reverse_step(x, t, eps_hat, z, sched)
        if record:
            traj.append(t - 1, x)
    return ParticleSet(src=queries, dst=x, t=0), traj


def write_trajectory(path, traj: Trajectory):
    """CSV: t,particle_id,x,y in normalized coordinates."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["t", "particle_id", "x", "y"])
        for t, pts in traj.snapshots:
            for i, (x, y) in enumerate(pts):
                wr.writerow([t, i, "%.9g" % x, "%.9g" % y])


def read_trajectory(path) -> Trajectory:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["t", "particle_id", "x", "y"]:
        raise ValueError(f"{path}: not a trajectory CSV")
    traj = Trajectory()
    cur_t, pts = None, []
    for r in rows[1:]:
        t = int(r[0])
        if cur_t is None:
            cur_t = t
        if t != cur_t:
            traj.append(cur_t, np.array(pts))
            cur_t, pts = t, []
        pts.append((float(r[2]), float(r[3])))
    if pts:
        traj.append(cur_t, np.array(pts))
    return traj
