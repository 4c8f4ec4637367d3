import math

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from trace_recon.metrics import delta_series, psnr, ssim
from trace_recon.operators import Downsample, Inpaint, Radon
from trace_recon.tasks import (
    SHEPP_LOGAN_ELLIPSES,
    TASK_KINDS,
    TaskSpec,
    degrade,
    make_operator,
    piecewise_smooth,
    pixel_grid,
    shepp_logan,
)


def _pair(seed=0, shape=(1, 32, 32), noise=0.1):
    rng = np.random.default_rng(seed)
    ref = rng.uniform(0, 1, shape)
    return np.clip(ref + noise * rng.standard_normal(shape), 0, 1), ref


# --------------------------------------------------------------------- psnr


def test_psnr_identical_is_infinite():
    x = np.random.default_rng(0).random((1, 8, 8))
    assert psnr(x, x) == math.inf


def test_psnr_zeros_vs_ones():
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0


def test_psnr_matches_direct_mse_and_skimage():
    x, ref = _pair(1)
    mse = np.mean((x - ref) ** 2)
    assert abs(psnr(x, ref) - 10 * np.log10(1 / mse)) <= 1e-9
    assert psnr(x, ref) == pytest.approx(peak_signal_noise_ratio(ref, x, data_range=1.0), abs=1e-9)


def test_psnr_symmetric_and_monotone():
    rng = np.random.default_rng(2)
    ref = rng.uniform(0, 1, (1, 16, 16))
    noise = rng.standard_normal(ref.shape)
    values = [psnr(ref + s * noise, ref) for s in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]
    x = ref + 0.1 * noise
    assert psnr(x, ref) == psnr(ref, x)


# --------------------------------------------------------------------- ssim


def test_ssim_identical_is_one():
    x = np.random.default_rng(3).random((3, 16, 16))
    assert abs(ssim(x, x) - 1.0) <= 1e-9


def test_ssim_constant_images_direct_formula():
    ref = np.full((1, 12, 12), 0.5)
    x = ref + 0.1
    c1 = (0.01) ** 2
    expected = (2 * 0.5 * 0.6 + c1) / (0.5**2 + 0.6**2 + c1)  # variances vanish, contrast term is c2/c2
    assert abs(ssim(x, ref) - expected) <= 1e-9


def test_ssim_inverted_pattern_is_negative():
    ref = np.random.default_rng(4).random((1, 16, 16))
    assert ssim(1 - ref, ref) < 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_skimage_uniform_window(seed):
    x, ref = _pair(seed, shape=(1, 40, 40), noise=0.2)
    ours = ssim(x, ref)
    theirs = structural_similarity(
        ref[0], x[0], win_size=7, data_range=1.0, gaussian_weights=False, use_sample_covariance=False
    )
    assert ours == pytest.approx(theirs, abs=1e-9)


def test_ssim_is_symmetric_and_channel_averaged():
    x, ref = _pair(5, shape=(3, 16, 16))
    assert ssim(x, ref) == ssim(ref, x)
    per_channel = [ssim(x[c], ref[c]) for c in range(3)]
    assert ssim(x, ref) == pytest.approx(np.mean(per_channel), abs=1e-15)


def test_metric_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 5, 5)), np.zeros((1, 5, 5)))
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))


# ------------------------------------------------------------ delta series


def test_delta_series_basics():
    e1, e2 = np.eye(2)
    d, bd = delta_series([e1, e2], [0.5])
    assert d[0] == pytest.approx(math.sqrt(2))
    assert bd[0] == pytest.approx(0.5 * math.sqrt(2))
    d, _ = delta_series([e1, e1, e1], [1.0, 1.0])
    np.testing.assert_array_equal(d, [0.0, 0.0])


def test_delta_series_length_and_weight_order():
    states = [np.full(3, float(v)) for v in (0, 1, 3, 6)]  # x_3, x_2, x_1, x_0
    d, bd = delta_series(states, [10.0, 20.0, 30.0])
    assert len(d) == 3
    np.testing.assert_allclose(d, np.sqrt(3) * np.array([1, 2, 3]))
    # first entry is the step t = 2, weighted by betas[2]
    np.testing.assert_allclose(bd, d * [30.0, 20.0, 10.0])


# ---------------------------------------------------------------- phantoms


def test_pixel_grid_orientation():
    x, y = pixel_grid(4)
    np.testing.assert_allclose(x[0], [-0.75, -0.25, 0.25, 0.75])
    np.testing.assert_allclose(y[:, 0], [0.75, 0.25, -0.25, -0.75])


def test_shepp_logan_range_and_corners():
    img = shepp_logan(64)
    assert img.shape == (1, 64, 64) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1
    assert img[0, 0, 0] == img[0, 0, -1] == img[0, -1, 0] == img[0, -1, -1] == 0


def _analytic_value(px, py):
    total = 0.0
    for value, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        th = math.radians(phi)
        dx, dy = px - x0, py - y0
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        if (u / a) ** 2 + (v / b) ** 2 <= 1:
            total += value
    return min(max(total, 0.0), 1.0)


def test_shepp_logan_matches_analytic_memberships():
    n = 65  # odd size puts a pixel centre at the origin
    img = shepp_logan(n)
    assert _analytic_value(0.0, 0.0) == pytest.approx(0.2)
    assert img[0, 32, 32] == pytest.approx(0.2, abs=1e-7)
    x, y = pixel_grid(n)
    for r, c in [(10, 20), (40, 30), (55, 32), (20, 45)]:
        assert img[0, r, c] == pytest.approx(_analytic_value(x[r, c], y[r, c]), abs=1e-7)


def test_shepp_logan_too_small():
    with pytest.raises(ValueError):
        shepp_logan(8)


def test_piecewise_smooth_is_deterministic_and_in_range():
    a, b = piecewise_smooth(64), piecewise_smooth(64)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    rgb = piecewise_smooth(32, channels=3)
    assert rgb.shape == (3, 32, 32)


# ------------------------------------------------------------------- tasks


def test_every_task_builds():
    gray, square = piecewise_smooth(32), shepp_logan(32)
    for kind in TASK_KINDS:
        x = square if kind.startswith("ct_") else gray
        y, op = degrade(TaskSpec(kind, 0), x)
        assert np.all(np.isfinite(y.data))
        assert op.image_shape(y.shape) == x.shape


def test_inpaint50_keeps_observed_pixels():
    x = piecewise_smooth(32)
    y, op = degrade(TaskSpec("inpaint50", 1), x)
    assert isinstance(op, Inpaint)
    kept = op.mask[0] == 1
    np.testing.assert_array_equal(y.data[0][kept], x[0][kept])
    assert np.all(y.data[0][~kept] == 0)
    assert int((~kept).sum()) == 512


def test_ct_defaults():
    x = shepp_logan(32)
    _, sparse = degrade(TaskSpec("ct_sparse"), x)
    assert isinstance(sparse, Radon)
    np.testing.assert_allclose(sparse.angles, np.arange(60) * 3.0)
    _, limited = degrade(TaskSpec("ct_limited"), x)
    np.testing.assert_array_equal(limited.angles, np.arange(120.0))


def test_task_params_override_defaults():
    op = make_operator(TaskSpec("ct_sparse", params={"views": 30}), (1, 32, 32))
    assert len(op.angles) == 30
    op = make_operator(TaskSpec("sr4"), (1, 32, 32))
    assert isinstance(op, Downsample) and op.factor == 4


def test_degrade_is_deterministic_and_noiseless():
    x = piecewise_smooth(32)
    a, op = degrade(TaskSpec("inpaint70", 5), x)
    b, _ = degrade(TaskSpec("inpaint70", 5), x)
    assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(a.data, x * op.mask)


def test_degrade_validation():
    with pytest.raises(ValueError):
        TaskSpec("denoise")
    with pytest.raises(ValueError):
        degrade(TaskSpec("inpaint50"), np.full((1, 8, 8), 1.5))
    with pytest.raises(ValueError):
        degrade(TaskSpec("ct_sparse"), piecewise_smooth(32, channels=3))
    with pytest.raises(ValueError):
        degrade(TaskSpec("sr4"), np.zeros((1, 10, 10)))
