"""Trainable noise predictor for the random-walk correspondence search.

Two passes with identical architecture: a coarse pass reads pyramid
descriptors at the current particle positions, a fine pass re-reads the fine
pyramid in k x k neighborhoods around the coarse preview positions.  Tokens
(one per particle) go through pre-norm self-attention blocks; a small MLP
head emits the per-particle noise estimate.

Everything is plain numpy with a hand-written backward pass; `backward`
returns exact analytic gradients for all parameters and for the particle
destination coordinates.

Checkpoint format (little-endian):
  bytes 0-3   magic "PDM1"
  bytes 4-39  nine u32: model_dim, num_blocks, num_heads, mlp_hidden,
              patch_k, d_c, d_f, share_weights, n_tensors
  then each parameter tensor as raw f32 in declaration order (the order
  produced by param_specs / init_params).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, make_schedule, reverse_coefficients
from .errors import BadCheckpoint, ShapeMismatch, StaleCache
from .imaging import (COARSE_STRIDE, FINE_STRIDE, FeaturePyramid,
                      _grid_coords, grid_sample, grid_sample_vjp)

_LN_EPS = 1e-5
_MAGIC = b"PDM1"


@dataclass(frozen=True)
class ScoreNetConfig:
    model_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 2
    mlp_hidden: int = 64
    patch_k: int = 7
    d_c: int = 8
    d_f: int = 8
    share_weights: bool = False

    def __post_init__(self):
        if min(self.model_dim, self.num_blocks, self.num_heads,
               self.mlp_hidden, self.patch_k, self.d_c, self.d_f) < 1:
            raise ValueError("all config integers must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must divide evenly into heads")
        if self.patch_k % 2 != 1:
            raise ValueError("patch_k must be odd")

    @property
    def u_coarse(self):
        return 4 + 2 * (self.d_c + 1) + self.model_dim

    @property
    def u_fine(self):
        return 4 + 2 * self.patch_k ** 2 * (self.d_f + 1) + self.model_dim


def param_specs(cfg: ScoreNetConfig):
    """(name, shape) pairs in declaration order; this order IS the
    checkpoint tensor order."""
    D, F = cfg.model_dim, 4 * cfg.model_dim
    specs = []

    def one_pass(p, u_in, full):
        specs.append((f"{p}.w_in", (D, u_in)))
        specs.append((f"{p}.b_in", (D,)))
        if not full:
            return
        for i in range(cfg.num_blocks):
            b = f"{p}.b{i}"
            specs.append((f"{b}.ln1g", (D,)))
            specs.append((f"{b}.ln1b", (D,)))
            for nm in ("wq", "wk", "wv", "wo"):
                specs.append((f"{b}.{nm}", (D, D)))
                specs.append((f"{b}.{nm[1]}b", (D,)))
            specs.append((f"{b}.ln2g", (D,)))
            specs.append((f"{b}.ln2b", (D,)))
            specs.append((f"{b}.w1", (F, D)))
            specs.append((f"{b}.b1", (F,)))
            specs.append((f"{b}.w2", (D, F)))
            specs.append((f"{b}.b2", (D,)))
        specs.append((f"{p}.lnfg", (D,)))
        specs.append((f"{p}.lnfb", (D,)))
        specs.append((f"{p}.head_w1", (cfg.mlp_hidden, D)))
        specs.append((f"{p}.head_b1", (cfg.mlp_hidden,)))
        specs.append((f"{p}.head_w2", (2, cfg.mlp_hidden)))
        specs.append((f"{p}.head_b2", (2,)))

    one_pass("coarse", cfg.u_coarse, True)
    one_pass("fine", cfg.u_fine, not cfg.share_weights)
    return specs


def init_params(cfg: ScoreNetConfig, seed: int) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_specs(cfg):
        if name.endswith(("ln1g", "ln2g", "lnfg")):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, shape)
    return params


def timestep_embed(t: int, T: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding of the progress t/T, channels interleaved
    sin/cos over a geometric frequency ladder (base 10^4)."""
    if not 1 <= t <= T:
        raise ValueError(f"t={t} outside 1..{T}")
    half = (dim + 1) // 2
    i = np.arange(half)
    freqs = 10_000.0 ** (-2.0 * i / dim)
    ang = (t / T) * freqs
    emb = np.zeros(dim)
    emb[0::2] = np.sin(ang)
    emb[1::2] = np.cos(ang[: dim // 2])
    return emb


# ---------------------------------------------------------------- primitives


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    istd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + _LN_EPS)
    xhat = xc * istd
    return g * xhat + b, (xhat, istd)

def _ln_bwd(dy, g, cache):
    xhat, istd = cache
    dg = (dy * xhat).sum(0)
    db = dy.sum(0)
    dxh = dy * g
    dx = istd * (dxh - dxh.mean(-1, keepdims=True)
                 - xhat * (dxh * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _heads(x, nh):
    N, D = x.shape
    return x.reshape(N, nh, D // nh).transpose(1, 0, 2)

def _merge(x):
    nh, N, dh = x.shape
    return x.transpose(1, 0, 2).reshape(N, nh * dh)


class _P:
    """Weight lookup that falls back to the coarse pass when sharing."""

    def __init__(self, params, prefix):
        self.params = params
        self.prefix = prefix

    def key(self, name):
        k = f"{self.prefix}.{name}"
        return k if k in self.params else f"coarse.{name}"

    def __getitem__(self, name):
        return self.params[self.key(name)]


def _pass_forward(P, cfg, u):
    """One attention stack over per-particle tokens u (N, U)."""
    nh = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.model_dim // nh)
    x = u @ P["w_in"].T + P["b_in"]
    blocks = []
    for i in range(cfg.num_blocks):
        b = f"b{i}"
        h, ln1 = _ln_fwd(x, P[f"{b}.ln1g"], P[f"{b}.ln1b"])
        q = _heads(h @ P[f"{b}.wq"].T + P[f"{b}.qb"], nh)
        k = _heads(h @ P[f"{b}.wk"].T + P[f"{b}.kb"], nh)
        v = _heads(h @ P[f"{b}.wv"].T + P[f"{b}.vb"], nh)
        s = (q @ k.transpose(0, 2, 1)) * scale
        s -= s.max(-1, keepdims=True)
        A = np.exp(s)
        A /= A.sum(-1, keepdims=True)
        o = _merge(A @ v)
        x1 = x + o @ P[f"{b}.wo"].T + P[f"{b}.ob"]
        h2, ln2 = _ln_fwd(x1, P[f"{b}.ln2g"], P[f"{b}.ln2b"])
        r = h2 @ P[f"{b}.w1"].T + P[f"{b}.b1"]
        a = np.maximum(r, 0.0)
        x2 = x1 + a @ P[f"{b}.w2"].T + P[f"{b}.b2"]
        blocks.append(dict(x=x, h=h, ln1=ln1, q=q, k=k, v=v, A=A, o=o,
                           x1=x1, h2=h2, ln2=ln2, r=r, a=a))
        x = x2
    xf, lnf = _ln_fwd(x, P["lnfg"], P["lnfb"])
    r1 = xf @ P["head_w1"].T + P["head_b1"]
    a1 = np.maximum(r1, 0.0)
    out = a1 @ P["head_w2"].T + P["head_b2"]
    return out, dict(u=u, blocks=blocks, x_last=x, xf=xf, lnf=lnf,
                     r1=r1, a1=a1)


def _acc(grads, key, val):
    if key in grads:
        grads[key] += val
    else:
        grads[key] = val


def _pass_backward(P, cfg, cache, dout, grads):
    """Accumulate parameter gradients; return d(loss)/du."""
    nh = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.model_dim // nh)
    a1, r1, xf = cache["a1"], cache["r1"], cache["xf"]
    _acc(grads, P.key("head_w2"), dout.T @ a1)
    _acc(grads, P.key("head_b2"), dout.sum(0))
    dr1 = (dout @ P["head_w2"]) * (r1 > 0)
    _acc(grads, P.key("head_w1"), dr1.T @ xf)
    _acc(grads, P.key("head_b1"), dr1.sum(0))
    dxf = dr1 @ P["head_w1"]
    dx, dg, db = _ln_bwd(dxf, P["lnfg"], cache["lnf"])
    _acc(grads, P.key("lnfg"), dg)
    _acc(grads, P.key("lnfb"), db)
    for i in reversed(range(cfg.num_blocks)):
        b = f"b{i}"
        c = cache["blocks"][i]
        # feed-forward
        da = dx @ P[f"{b}.w2"]
        _acc(grads, P.key(f"{b}.w2"), dx.T @ c["a"])
        _acc(grads, P.key(f"{b}.b2"), dx.sum(0))
        dr = da * (c["r"] > 0)
        _acc(grads, P.key(f"{b}.w1"), dr.T @ c["h2"])
        _acc(grads, P.key(f"{b}.b1"), dr.sum(0))
        dh2 = dr @ P[f"{b}.w1"]
        dx1, dg, db = _ln_bwd(dh2, P[f"{b}.ln2g"], c["ln2"])
        _acc(grads, P.key(f"{b}.ln2g"), dg)
        _acc(grads, P.key(f"{b}.ln2b"), db)
        dx1 = dx1 + dx
        # attention
        do = dx1 @ P[f"{b}.wo"]
        _acc(grads, P.key(f"{b}.wo"), dx1.T @ c["o"])
        _acc(grads, P.key(f"{b}.ob"), dx1.sum(0))
        doh = _heads(do, nh)
        A, q, k, v = c["A"], c["q"], c["k"], c["v"]
        dA = doh @ v.transpose(0, 2, 1)
        dv = A.transpose(0, 2, 1) @ doh
        ds = A * (dA - (dA * A).sum(-1, keepdims=True))
        ds *= scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dqf, dkf, dvf = _merge(dq), _merge(dk), _merge(dv)
        h = c["h"]
        _acc(grads, P.key(f"{b}.wq"), dqf.T @ h)
        _acc(grads, P.key(f"{b}.qb"), dqf.sum(0))
        _acc(grads, P.key(f"{b}.wk"), dkf.T @ h)
        _acc(grads, P.key(f"{b}.kb"), dkf.sum(0))
        _acc(grads, P.key(f"{b}.wv"), dvf.T @ h)
        _acc(grads, P.key(f"{b}.vb"), dvf.sum(0))
        dh = dqf @ P[f"{b}.wq"] + dkf @ P[f"{b}.wk"] + dvf @ P[f"{b}.wv"]
        dxin, dg, db = _ln_bwd(dh, P[f"{b}.ln1g"], c["ln1"])
        _acc(grads, P.key(f"{b}.ln1g"), dg)
        _acc(grads, P.key(f"{b}.ln1b"), db)
        dx = dxin + dx1
    u = cache["u"]
    _acc(grads, P.key("w_in"), dx.T @ u)
    _acc(grads, P.key("b_in"), dx.sum(0))
    return dx @ P["w_in"]


# ------------------------------------------------------------ feature wiring


def _point_features(pyr: FeaturePyramid, pts, level):
    grid = pyr.coarse if level == "coarse" else pyr.fine
    stride = COARSE_STRIDE if level == "coarse" else FINE_STRIDE
    gx = _grid_coords(pts[:, 0], pyr.width, stride)
    gy = _grid_coords(pts[:, 1], pyr.height, stride)
    vals, cache = grid_sample(grid, gx, gy)
    return vals, (cache, pyr.width / (2.0 * stride), pyr.height / (2.0 * stride))


def _crop_features(pyr: FeaturePyramid, centers, k):
    half = k // 2
    gx = _grid_coords(centers[:, 0], pyr.width, FINE_STRIDE)
    gy = _grid_coords(centers[:, 1], pyr.height, FINE_STRIDE)
    off = np.arange(k) - half
    GX = gx[:, None, None] + off[None, None, :]
    GY = gy[:, None, None] + off[None, :, None]
    vals, cache = grid_sample(pyr.fine, GX, GY)
    N = centers.shape[0]
    return vals.reshape(N, -1), (cache, pyr.width / (2.0 * FINE_STRIDE),
                                 pyr.height / (2.0 * FINE_STRIDE))


def _feature_position_grad(upstream, fcache, reduce_patch=False):
    cache, sx, sy = fcache
    dgx, dgy = grid_sample_vjp(cache, upstream)
    if reduce_patch:
        dgx = dgx.sum(axis=(1, 2))
        dgy = dgy.sum(axis=(1, 2))
    return np.stack([dgx * sx, dgy * sy], axis=-1)


# ------------------------------------------------------------------- forward


def forward(params, cfg: ScoreNetConfig, particles, t: int,
            pyr_s: FeaturePyramid, pyr_d: FeaturePyramid,
            sched: NoiseSchedule = None, variant: str = "cascade"):
    """Returns (eps_hat (N,2), x_tilde (N,2), cache).

    variant: "cascade" (default) runs coarse then fine around the preview;
    "coarse" stops after the coarse pass; "fine" runs only the fine pass
    with crops centered at the current particle positions.
    """
    if sched is None:
        sched = make_schedule()
    if variant not in ("cascade", "coarse", "fine"):
        raise ValueError(f"unknown variant {variant!r}")
    src = np.asarray(particles.src, dtype=float)
    dst = np.asarray(particles.dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ShapeMismatch(f"src {src.shape} vs dst {dst.shape}")
    if pyr_s.d_c != cfg.d_c or pyr_d.d_c != cfg.d_c \
            or pyr_s.d_f != cfg.d_f or pyr_d.d_f != cfg.d_f:
        raise ShapeMismatch("pyramid descriptor dims disagree with config")
    N = src.shape[0]
    emb = np.broadcast_to(timestep_embed(t, sched.T, cfg.model_dim), (N, cfg.model_dim))
    cache = dict(cfg=cfg, t=t, n=N, variant=variant, src=src, dst=dst)

    eps_c = None
    if variant in ("cascade", "coarse"):
        fs, fs_cache = _point_features(pyr_s, src, "coarse")
        fd, fd_cache = _point_features(pyr_d, dst, "coarse")
        u_c = np.concatenate([src, dst, fs, fd, emb], axis=1)
        Pc = _P(params, "coarse")
        eps_c, pass_c = _pass_forward(Pc, cfg, u_c)
        cache.update(fd_cache=fd_cache, pass_c=pass_c, Pc=Pc)
        a_t, b_t, _ = reverse_coefficients(t, sched)
        x_tilde = a_t * dst + b_t * eps_c
        cache.update(a_t=a_t, b_t=b_t)
        if variant == "coarse":
            cache["eps_c"] = eps_c
            return eps_c, x_tilde, cache
    else:
        x_tilde = dst

    cs, cs_cache = _crop_features(pyr_s, src, cfg.patch_k)
    cd, cd_cache = _crop_features(pyr_d, x_tilde, cfg.patch_k)
    u_f = np.concatenate([src, dst, cs, cd, emb], axis=1)
    Pf = _P(params, "fine")
    eps_f, pass_f = _pass_forward(Pf, cfg, u_f)
    cache.update(cd_cache=cd_cache, pass_f=pass_f, Pf=Pf,
                 x_tilde=x_tilde, eps_c=eps_c)
    return eps_f, x_tilde, cache


def backward(cache, upstream, upstream_coarse=None):
    """Analytic gradients for a forward cache.

    upstream is d(loss)/d(eps_hat); upstream_coarse optionally adds
    d(loss)/d(coarse eps_hat) for the cascade variant.  Returns
    (Gradients dict covering every parameter, d(loss)/d(dst) (N,2)).
    """
    cfg = cache["cfg"]
    N = cache["n"]
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (N, 2):
        raise StaleCache(f"upstream {upstream.shape} does not match N={N}")
    variant = cache["variant"]
    grads = {}
    d_dst = np.zeros((N, 2))
    d_eps_c = np.zeros((N, 2)) if upstream_coarse is None \
        else np.asarray(upstream_coarse, dtype=float).copy()
    if d_eps_c.shape != (N, 2):
        raise StaleCache(f"upstream_coarse {d_eps_c.shape} does not match N={N}")

    k2f = cfg.patch_k ** 2 * (cfg.d_f + 1)
    if variant in ("cascade", "fine"):
        du_f = _pass_backward(cache["Pf"], cfg, cache["pass_f"], upstream, grads)
        d_dst += du_f[:, 2:4]
        d_crop = du_f[:, 4 + k2f: 4 + 2 * k2f].reshape(N, cfg.patch_k, cfg.patch_k,
                                                       cfg.d_f + 1)
        d_center = _feature_position_grad(d_crop, cache["cd_cache"], reduce_patch=True)
        if variant == "fine":
            d_dst += d_center
        else:
            d_dst += cache["a_t"] * d_center
            d_eps_c += cache["b_t"] * d_center

    if variant in ("cascade", "coarse"):
        if variant == "coarse":
            d_eps_c = d_eps_c + upstream
        du_c = _pass_backward(cache["Pc"], cfg, cache["pass_c"], d_eps_c, grads)
        d_dst += du_c[:, 2:4]
        dc1 = cfg.d_c + 1
        d_fd = du_c[:, 4 + dc1: 4 + 2 * dc1]
        d_dst += _feature_position_grad(d_fd, cache["fd_cache"])

    for name, shape in param_specs(cfg):
        if name not in grads:
            grads[name] = np.zeros(shape)
    return grads, d_dst


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, cfg: ScoreNetConfig, params: dict):
    specs = param_specs(cfg)
    header = struct.pack("<9I", cfg.model_dim, cfg.num_blocks, cfg.num_heads,
                         cfg.mlp_hidden, cfg.patch_k, cfg.d_c, cfg.d_f,
                         int(cfg.share_weights), len(specs))
    with open(path, "wb") as f:
        f.write(_MAGIC + header)
        for name, shape in specs:
            arr = np.asarray(params[name], dtype="<f4")
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: {arr.shape} != {shape}")
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise BadCheckpoint(f"{path}: bad magic {raw[:4]!r}")
    fields = struct.unpack("<9I", raw[4:40])
    cfg = ScoreNetConfig(model_dim=fields[0], num_blocks=fields[1],
                         num_heads=fields[2], mlp_hidden=fields[3],
                         patch_k=fields[4], d_c=fields[5], d_f=fields[6],
                         share_weights=bool(fields[7]))
    specs = param_specs(cfg)
    if fields[8] != len(specs):
        raise BadCheckpoint(f"{path}: header says {fields[8]} tensors, "
                            f"config implies {len(specs)}")
    params, pos = {}, 40
    for name, shape in specs:
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(raw):
            raise BadCheckpoint(f"{path}: truncated at tensor {name}")
        params[name] = np.frombuffer(raw[pos:end], dtype="<f4").astype(float).reshape(shape)
        pos = end
    if pos != len(raw):
        raise BadCheckpoint(f"{path}: {len(raw) - pos} trailing bytes")
    return cfg, params


# ------------------------------------------------------------------- adapter


def as_score_model(params, cfg: ScoreNetConfig, pyr_s: FeaturePyramid,
                   pyr_d: FeaturePyramid, sched: NoiseSchedule = None,
                   variant: str = "cascade"):
    """Close over pyramids/weights as the 4-argument score function the
    sampler expects; `images` passed by the sampler is ignored here."""
    class _Particles:
        def __init__(self, src, dst):
            self.src, self.dst = src, dst

    def model(x_t, t, images, queries):
        eps, _, _ = forward(params, cfg, _Particles(np.asarray(queries), x_t),
                            t, pyr_s, pyr_d, sched, variant)
        return eps

    return model
