import numpy as np
import pytest
from scipy import ndimage

from pdmatch import imaging
from pdmatch.errors import ZeroVariance
from pdmatch.geometry import Poly2Transform


def smooth_image(seed, h=128, w=128, sigma=3.0):
    rng = np.random.default_rng(seed)
    I = ndimage.gaussian_filter(rng.random((h, w)), sigma, mode="reflect")
    I -= I.min()
    return I / I.max()


# ----------------------------------------------------------------- container


def test_as_image_accepts_valid():
    I = imaging.as_image(np.full((16, 20), 0.5))
    assert I.dtype == np.float64 and I.shape == (16, 20)


@pytest.mark.parametrize("bad", [
    np.zeros(64),                      # wrong rank
    np.zeros((8, 64)),                 # too short
    np.zeros((64, 8)),                 # too narrow
    np.full((32, 32), 1.5),            # out of range
    np.full((32, 32), np.nan),         # non-finite
])
def test_as_image_rejects(bad):
    with pytest.raises(ValueError):
        imaging.as_image(bad)


# ---------------------------------------------------------------------- pgm


def test_pgm_roundtrip(tmp_path):
    I = smooth_image(0, 37, 53)
    p = tmp_path / "a.pgm"
    imaging.write_pgm(p, I)
    J = imaging.read_pgm(p)
    assert J.shape == I.shape
    # 8-bit quantization bounds the roundtrip error
    assert np.abs(J - I).max() <= 0.5 / 255 + 1e-12


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    body = bytes(range(16)) * 16
    with open(p, "wb") as f:
        f.write(b"P5\n# a comment\n16\n# another\n 16 255\n" + body)
    J = imaging.read_pgm(p)
    assert J.shape == (16, 16)
    assert np.isclose(J[0, 3], 3 / 255)


def test_pgm_rejects_wrong_magic(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n4 4\n255\n" + b"0 " * 16)
    with pytest.raises(ValueError):
        imaging.read_pgm(p)


# ------------------------------------------------------------------ pyramid


def test_pyramid_shapes_divisible():
    P = imaging.build_pyramid(smooth_image(1))
    assert P.coarse.shape == (16, 16, 8)
    assert P.fine.shape == (64, 64, 8)
    assert (P.width, P.height) == (128, 128)


def test_pyramid_shapes_ragged():
    P = imaging.build_pyramid(smooth_image(2, 100, 130))
    assert P.coarse.shape == (13, 17, 8)
    assert P.fine.shape == (50, 65, 8)


def test_pyramid_constant_image_is_all_zero():
    P = imaging.build_pyramid(np.full((64, 64), 0.3))
    assert np.all(P.coarse == 0.0)
    assert np.all(P.fine == 0.0)


def test_pyramid_channels_standardized():
    P = imaging.build_pyramid(smooth_image(3))
    for grid in (P.coarse, P.fine):
        flat = grid.reshape(-1, grid.shape[-1])
        assert np.allclose(flat.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(flat.std(axis=0), 1.0, atol=1e-9)


def test_pyramid_descriptor_dims():
    P = imaging.build_pyramid(smooth_image(4), d_c=5, d_f=11)
    assert P.coarse.shape[-1] == 5
    assert P.fine.shape[-1] == 11
    assert np.all(P.fine[..., 8:] == 0.0)  # padded channels


def test_pyramid_rot90_equivariance():
    # rotating the image rotates the grids and permutes channels:
    # |gx| <-> |gy|, orientation histogram shifts by two bins
    I = smooth_image(5)
    perm = [0, 1, 3, 2, 6, 7, 4, 5]
    P = imaging.build_pyramid(I)
    Q = imaging.build_pyramid(np.rot90(I).copy())
    assert np.allclose(Q.coarse, np.rot90(P.coarse)[..., perm], atol=1e-8)
    assert np.allclose(Q.fine, np.rot90(P.fine)[..., perm], atol=1e-8)


# ----------------------------------------------------------------- binarize


def draw_lines(h=128, w=128, bg=0.8, fg=0.3, width=2, seed=0):
    rng = np.random.default_rng(seed)
    I = np.full((h, w), bg)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(6):
        x0, y0, x1, y1 = rng.uniform(10, min(h, w) - 10, size=4)
        n = int(np.hypot(x1 - x0, y1 - y0) * 2) + 2
        ts = np.linspace(0, 1, n)
        for t in ts:
            u = int(round(x0 + t * (x1 - x0)))
            v = int(round(y0 + t * (y1 - y0)))
            mask[max(0, v - width // 2):v + width // 2 + 1,
                 max(0, u - width // 2):u + width // 2 + 1] = True
    I[mask] = fg
    return I, mask


def test_enhance_output_is_binary():
    I, _ = draw_lines()
    E = imaging.enhance_vessels(I)
    assert set(np.unique(E)) <= {0.0, 1.0}


def test_enhance_recovers_dark_lines():
    I, mask = draw_lines()
    E = imaging.enhance_vessels(I)
    recall = E[mask].mean()
    bg_rate = E[~mask].mean()
    assert recall >= 0.8
    assert bg_rate <= 0.05


def test_enhance_recovers_bright_lines():
    I, mask = draw_lines(bg=0.2, fg=0.9)
    E = imaging.enhance_vessels(I)
    assert E[mask].mean() >= 0.8


def test_enhance_stable_under_reapplication():
    I, _ = draw_lines(seed=3)
    E = imaging.enhance_vessels(I)
    E2 = imaging.enhance_vessels(E)
    inter = np.logical_and(E > 0, E2 > 0).sum()
    union = np.logical_or(E > 0, E2 > 0).sum()
    assert inter / union >= 0.99


def test_enhance_flat_image_empty():
    E = imaging.enhance_vessels(np.full((64, 64), 0.5))
    assert np.all(E == 0.0)


# ---------------------------------------------------------------------- ncc


def test_ncc_self_is_one():
    I = smooth_image(6, 32, 32)
    assert imaging.ncc(I, I) == pytest.approx(1.0)


def test_ncc_invariant_to_gain_and_bias():
    I = smooth_image(7, 32, 32)
    assert imaging.ncc(I, 0.25 + 0.5 * I) == pytest.approx(1.0)


def test_ncc_negated_is_minus_one():
    I = smooth_image(8, 32, 32)
    assert imaging.ncc(I, 1.0 - I) == pytest.approx(-1.0)


def test_ncc_constant_raises():
    I = smooth_image(9, 32, 32)
    with pytest.raises(ZeroVariance):
        imaging.ncc(I, np.full_like(I, 0.4))


def test_ncc_shape_mismatch():
    with pytest.raises(ValueError):
        imaging.ncc(np.zeros((4, 4)), np.zeros((4, 5)))


# --------------------------------------------------------------------- warp


def test_warp_identity_exact():
    I = smooth_image(10, 48, 64)
    out = imaging.warp_image(I, np.eye(3), (64, 48))
    assert np.allclose(out, I, atol=1e-12)


def test_warp_integer_translation_exact():
    I = smooth_image(11, 64, 64)
    k = 5
    H = np.eye(3)
    H[0, 2] = 2 * k / 64  # +k pixels in x, normalized units
    out = imaging.warp_image(I, H, 64)
    assert np.allclose(out[:, k:], I[:, :-k], atol=1e-12)
    assert np.all(out[:, :k] == 0.0)


def test_warp_roundtrip_psnr():
    I = smooth_image(12)
    ang = 0.15
    H = np.array([[np.cos(ang), -np.sin(ang), 0.05],
                  [np.sin(ang), np.cos(ang), -0.04],
                  [0.02, -0.01, 1.0]])
    J = imaging.warp_image(I, H, 128)
    back = imaging.warp_image(J, np.linalg.inv(H), 128)
    c = slice(13, 115)  # central 80%
    mse = np.mean((back[c, c] - I[c, c]) ** 2)
    psnr = 10 * np.log10(1.0 / mse)
    assert psnr > 30.0


def test_warp_poly2_matches_affine_homography():
    I = smooth_image(13, 96, 96)
    A = np.array([[1.05, 0.10, 0.02], [-0.08, 0.97, -0.03], [0.0, 0.0, 1.0]])
    t = Poly2Transform(cx=[0.02, 1.05, 0.10, 0, 0, 0],
                       cy=[-0.03, -0.08, 0.97, 0, 0, 0])
    out_h = imaging.warp_image(I, A, 96)
    out_p = imaging.warp_image(I, t, 96)
    assert np.allclose(out_h, out_p, atol=1e-9)


def test_warp_poly2_quadratic_runs_and_fills():
    I = smooth_image(14, 64, 64)
    t = Poly2Transform(cx=[0.0, 1.0, 0.0, 0.05, 0.0, 0.0],
                       cy=[0.0, 0.0, 1.0, 0.0, 0.0, 0.05])
    out = imaging.warp_image(I, t, 64)
    assert out.shape == (64, 64)
    assert np.all(np.isfinite(out))
    assert out.max() > 0.1  # most of the frame is still covered


# ---------------------------------------------------------- feature sampling


def cell_center_norm(j, stride, size):
    return (2 * stride * (j + 0.5)) / size - 1.0


def test_sample_at_cell_center_is_exact():
    P = imaging.build_pyramid(smooth_image(15))
    i, j = 5, 9
    p = (cell_center_norm(j, 8, 128), cell_center_norm(i, 8, 128))
    v = imaging.sample_feature(P, "coarse", p)
    assert np.allclose(v[:-1], P.coarse[i, j], atol=1e-12)
    assert v[-1] == pytest.approx(0.0, abs=1e-12)


def test_sample_midpoint_averages_neighbors():
    P = imaging.build_pyramid(smooth_image(16))
    i, j = 7, 3
    x = 0.5 * (cell_center_norm(j, 8, 128) + cell_center_norm(j + 1, 8, 128))
    y = cell_center_norm(i, 8, 128)
    v = imaging.sample_feature(P, "coarse", (x, y))
    want = 0.5 * (P.coarse[i, j] + P.coarse[i, j + 1])
    assert np.allclose(v[:-1], want, atol=1e-12)
    assert v[-1] == pytest.approx(0.0, abs=1e-12)


def test_sample_far_outside_is_flagged():
    P = imaging.build_pyramid(smooth_image(17))
    v = imaging.sample_feature(P, "fine", (5.0, -7.0))
    assert np.all(v[:-1] == 0.0)
    assert v[-1] == 1.0


def test_sample_is_continuous_across_border():
    P = imaging.build_pyramid(smooth_image(18))
    eps = 1e-7
    for x in (-1.0 + 1e-3, 1.0 - 1e-3, -1.02, 1.02):
        a = imaging.sample_feature(P, "coarse", (x - eps, 0.1))
        b = imaging.sample_feature(P, "coarse", (x + eps, 0.1))
        assert np.abs(a - b).max() < 1e-4


def test_sample_batched_shape():
    P = imaging.build_pyramid(smooth_image(19))
    pts = np.random.default_rng(0).uniform(-1, 1, size=(40, 2))
    v = imaging.sample_feature(P, "coarse", pts)
    assert v.shape == (40, 9)


def test_sample_unknown_level():
    P = imaging.build_pyramid(smooth_image(20))
    with pytest.raises(ValueError):
        imaging.sample_feature(P, "medium", (0.0, 0.0))


def test_grid_sample_vjp_matches_fd():
    rng = np.random.default_rng(21)
    grid = rng.standard_normal((7, 9, 5))
    # probe interior cells, the fade band, and far outside; keep fractional
    # offsets away from the piecewise-linear kinks so FD is valid
    gx = np.concatenate([rng.integers(0, 8, 30) + rng.uniform(0.1, 0.9, 30),
                         -rng.uniform(0.1, 0.9, 10),
                         8.0 + rng.uniform(0.1, 0.9, 10)])
    gy = np.concatenate([rng.integers(0, 6, 30) + rng.uniform(0.1, 0.9, 30),
                         rng.integers(0, 6, 20) + rng.uniform(0.1, 0.9, 20)])
    up = rng.standard_normal((50, 6))
    vals, cache = imaging.grid_sample(grid, gx, gy)
    dgx, dgy = imaging.grid_sample_vjp(cache, up)
    h = 1e-6
    for g, dg in ((gx, dgx), (gy, dgy)):
        for idx in range(0, 50, 7):
            gp = g.copy(); gp[idx] += h
            gm = g.copy(); gm[idx] -= h
            if g is gx:
                vp, _ = imaging.grid_sample(grid, gp, gy)
                vm, _ = imaging.grid_sample(grid, gm, gy)
            else:
                vp, _ = imaging.grid_sample(grid, gx, gp)
                vm, _ = imaging.grid_sample(grid, gx, gm)
            fd = ((vp - vm) * up).sum() / (2 * h)
            assert np.isclose(dg[idx], fd, rtol=1e-5, atol=1e-7)


# --------------------------------------------------------------------- crop


def test_crop_interior_matches_grid():
    P = imaging.build_pyramid(smooth_image(22))
    i, j = 20, 31
    c = (cell_center_norm(j, 2, 128), cell_center_norm(i, 2, 128))
    patch = imaging.crop_fine(P, c, 7)
    assert np.allclose(patch.values, P.fine[i - 3:i + 4, j - 3:j + 4])
    assert patch.valid.all()
    assert np.allclose(patch.center, c)


def test_crop_k1_is_single_cell():
    P = imaging.build_pyramid(smooth_image(23))
    c = (cell_center_norm(10, 2, 128), cell_center_norm(4, 2, 128))
    patch = imaging.crop_fine(P, c, 1)
    assert patch.values.shape == (1, 1, 8)
    assert np.allclose(patch.values[0, 0], P.fine[4, 10])


def test_crop_corner_zero_filled():
    P = imaging.build_pyramid(smooth_image(24))
    patch = imaging.crop_fine(P, (-1.0, -1.0), 5)
    assert patch.values.shape == (5, 5, 8)
    assert not patch.valid[0].any()  # rows above the grid
    assert patch.valid[2:, 2:].all()
    assert np.all(patch.values[~patch.valid] == 0.0)


def test_crop_requires_odd_k():
    P = imaging.build_pyramid(smooth_image(25))
    with pytest.raises(ValueError):
        imaging.crop_fine(P, (0.0, 0.0), 4)


# ---------------------------------------------------------------- amplifier


def test_amplify_constant_unchanged():
    I = np.full((32, 32), 0.6)
    assert np.allclose(imaging.amplify(I), I)


def test_amplify_increases_contrast_in_range():
    I = smooth_image(26, 64, 64)
    A = imaging.amplify(I)
    assert A.min() >= 0.0 and A.max() <= 1.0
    assert A.std() > I.std()
