"""Diffusion schedule and sampler tests.

Frozen oracle values (computed independently via exp-sum-log1p):
  - default schedule (T=100, beta 0.001 -> 0.2 linear): abar_100 = 2.0390089755640775e-05
  - beta_t = 0.2: a = 1/sqrt(0.8) = 1.1180339887498949

The mu evaluator below uses the posterior-mean algebra (x0-hat form), a
different expression from the library's (a, b) coefficients, so agreement
is a genuine two-codepath check.
"""
import numpy as np
import pytest

from pdmatch.errors import InvalidSchedule, ShapeMismatch
from pdmatch.diffusion import (
    ParticleSet,
    Trajectory,
    forward_sample,
    make_schedule,
    read_trajectory,
    reverse_coefficients,
    reverse_step,
    rwcs_sample,
    write_trajectory,
)

ABAR_100 = 2.0390089755640775e-05


def posterior_mu(x_t, t, eps_hat, sched):
    """Independent evaluator: mu = c0*x0_hat + ct*x_t with the posterior
    coefficients, x0_hat recovered from eps_hat."""
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    beta = sched.bt(t)
    alpha = sched.at(t)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * x0_hat + ct * x_t


# ---------------------------------------------------------------- schedule


def test_schedule_single_step():
    s = make_schedule(T=1, beta_start=0.5, beta_end=0.5)
    assert s.abar(1) == 0.5
    assert s.at(1) == 0.5


def test_schedule_default_terminal_alpha_bar():
    s = make_schedule()
    assert s.T == 100
    assert abs(s.abar(100) - ABAR_100) < 1e-15
    assert s.abar(100) < 1e-3


def test_schedule_monotonicity():
    s = make_schedule()
    assert np.all(np.diff(s.beta) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("kwargs", [
    dict(T=0),
    dict(beta_start=0.0),
    dict(beta_end=1.0),
    dict(beta_start=0.3, beta_end=0.2),
    dict(beta_start=-0.1),
])
def test_schedule_rejects_bad_ranges(kwargs):
    with pytest.raises(InvalidSchedule):
        make_schedule(**{"T": 100, "beta_start": 0.001, "beta_end": 0.2, **kwargs})


# ---------------------------------------------------------------- forward


def test_forward_noiseless_small_t():
    s = make_schedule(T=10, beta_start=1e-6, beta_end=1e-5)
    x0 = np.array([[0.3, -0.7]])
    out = forward_sample(x0, 1, np.zeros_like(x0), s)
    assert np.allclose(out, x0, atol=1e-6)


def test_forward_hand_value():
    # abar_1 = 0.25 via a single step with beta = 0.75
    s = make_schedule(T=1, beta_start=0.75, beta_end=0.75)
    out = forward_sample(np.array([[0.4, 0.0]]), 1, np.array([[1.0, 1.0]]), s)
    root75 = np.sqrt(0.75)
    assert np.allclose(out, [[0.2 + root75, root75]], atol=1e-15)


def test_forward_shape_mismatch():
    s = make_schedule()
    with pytest.raises(ShapeMismatch):
        forward_sample(np.zeros((3, 2)), 1, np.zeros((4, 2)), s)


def test_forward_terminal_marginal_moments():
    # smaller-N version of the acceptance criterion; 3-sigma moment bounds
    s = make_schedule()
    rng = np.random.default_rng(0)
    x0 = np.array([0.4, -0.6])
    eps = rng.standard_normal((20000, 2))
    xt = forward_sample(np.broadcast_to(x0, eps.shape).copy(), 100, eps, s)
    assert np.all(np.abs(xt.mean(axis=0)) < 0.05)
    assert np.all(np.abs(xt.var(axis=0) - 1.0) < 0.05)


# ---------------------------------------------------------------- reverse


def test_reverse_zero_score():
    s = make_schedule()
    x = np.array([[0.5, -0.25]])
    t = 50
    out = reverse_step(x, t, np.zeros_like(x), np.zeros_like(x), s)
    assert np.allclose(out, x / np.sqrt(s.at(t)), atol=1e-15)


def test_reverse_a_coefficient_hand_value():
    s = make_schedule(T=1, beta_start=0.2, beta_end=0.2)
    a, _, c = reverse_coefficients(1, s)
    assert abs(a - 1.1180339887498949) < 1e-12
    assert abs(c - np.sqrt(0.2)) < 1e-15


def test_reverse_mean_matches_posterior_mu_all_t():
    # two-codepath identity, all timesteps, tolerance 1e-12
    s = make_schedule()
    rng = np.random.default_rng(1)
    for t in range(1, 101):
        x_t = rng.standard_normal((16, 2))
        eps_hat = rng.standard_normal((16, 2))
        mean = reverse_step(x_t, t, eps_hat, np.zeros_like(x_t), s)
        mu = posterior_mu(x_t, t, eps_hat, s)
        assert np.max(np.abs(mean - mu)) < 1e-12


def test_reverse_roundtrip_with_true_eps():
    # reverse of a forward draw with the true eps stays near x0's scale
    s = make_schedule()
    rng = np.random.default_rng(2)
    x0 = rng.uniform(-1, 1, (8, 2))
    for t in (1, 13, 99):
        eps = rng.standard_normal(x0.shape)
        x_t = forward_sample(x0, t, eps, s)
        mu = reverse_step(x_t, t, eps, np.zeros_like(x0), s)
        ref = posterior_mu(x_t, t, eps, s)
        assert np.allclose(mu, ref, atol=1e-12)


def test_reverse_forces_zero_noise_at_final_step():
    s = make_schedule()
    x = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]])
    eps = np.zeros_like(x)
    big_z = np.full_like(x, 1e6)
    assert np.array_equal(reverse_step(x, 1, eps, big_z, s),
                          reverse_step(x, 1, eps, np.zeros_like(x), s))


# ---------------------------------------------------------------- sampler


def oracle_model(x0_gt, sched):
    """Exact eps for the current state: eps = (x_t - sqrt(abar) x0)/sqrt(1-abar)."""
    def fn(x_t, t, images, queries):
        ab = sched.abar(t)
        return (x_t - np.sqrt(ab) * x0_gt) / np.sqrt(1.0 - ab)
    return fn


def test_rwcs_oracle_convergence():
    sched = make_schedule()
    rng = np.random.default_rng(3)
    hits, total = 0, 0
    for pair in range(5):
        queries = rng.uniform(-0.9, 0.9, (100, 2))
        x0_gt = queries * 0.8 + rng.uniform(-0.1, 0.1, 2)
        ps, _ = rwcs_sample(oracle_model(x0_gt, sched), None, queries, sched, seed=pair)
        err = np.sqrt(((ps.dst - x0_gt) ** 2).sum(axis=1))
        hits += int((err < 0.02).sum())
        total += 100
    assert hits / total >= 0.95


def test_rwcs_zero_model_closed_form():
    sched = make_schedule()
    queries = np.zeros((6, 2))
    zero = lambda x, t, images, queries: np.zeros_like(x)
    ps, _ = rwcs_sample(zero, None, queries, sched, seed=5, deterministic=True)
    rng = np.random.default_rng(5)
    x_T = rng.standard_normal((6, 2))
    gain = 1.0 / np.sqrt(sched.abar(100))  # = prod of a_t
    assert np.allclose(ps.dst, x_T * gain, rtol=1e-10)


def test_rwcs_trajectory_shape():
    sched = make_schedule(T=17, beta_start=0.001, beta_end=0.2)
    zero = lambda x, t, images, queries: np.zeros_like(x)
    ps, traj = rwcs_sample(zero, None, np.zeros((4, 2)), sched, seed=0, record=True)
    assert len(traj.snapshots) == 18
    ts = [t for t, _ in traj.snapshots]
    assert ts == list(range(17, -1, -1))
    assert ps.t == 0


def test_rwcs_bit_identical_reruns():
    sched = make_schedule()
    rng = np.random.default_rng(9)
    queries = rng.uniform(-1, 1, (10, 2))
    x0_gt = queries * 0.9
    m = oracle_model(x0_gt, sched)
    a, _ = rwcs_sample(m, None, queries, sched, seed=123)
    b, _ = rwcs_sample(m, None, queries, sched, seed=123)
    assert np.array_equal(a.dst, b.dst)
    c, _ = rwcs_sample(m, None, queries, sched, seed=124)
    assert not np.array_equal(a.dst, c.dst)


def test_particleset_invariants():
    with pytest.raises(ShapeMismatch):
        ParticleSet(np.zeros((3, 2)), np.zeros((3, 2)), 0)  # < 4 particles
    with pytest.raises(ValueError):
        ParticleSet(np.full((4, 2), 2.0), np.zeros((4, 2)), 0)  # src outside [-1,1]


def test_trajectory_csv_roundtrip(tmp_path):
    traj = Trajectory()
    rng = np.random.default_rng(11)
    for t in (3, 2, 1, 0):
        traj.append(t, rng.uniform(-1, 1, (5, 2)))
    p = tmp_path / "traj.csv"
    write_trajectory(p, traj)
    back = read_trajectory(p)
    assert [t for t, _ in back.snapshots] == [3, 2, 1, 0]
    for (t1, a), (t2, b) in zip(traj.snapshots, back.snapshots):
        assert np.allclose(a, b, atol=1e-6)
    assert open(p).readline().strip() == "t,particle_id,x,y"
