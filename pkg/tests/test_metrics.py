import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcqe.imageio import ImageBuffer
from dcqe.metrics import MetricSeries, degradation_index, drift, psnr, ssim
from dcqe.models import ModelSpec, apply, zero_params
from dcqe.training import distance
from dcqe.autodiff import Tensor


def test_psnr_identical_is_inf():
    x = ImageBuffer(np.full((4, 4), 0.3))
    assert psnr(x, x) == math.inf


def test_psnr_known_mse():
    a = ImageBuffer(np.zeros((10, 10)))
    b = ImageBuffer(np.full((10, 10), 0.1))  # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_symmetric_and_dimension_check():
    rng = np.random.default_rng(0)
    a, b = ImageBuffer(rng.random((8, 8))), ImageBuffer(rng.random((8, 8)))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, ImageBuffer(rng.random((8, 9))))


def test_psnr_decreases_with_error():
    a = ImageBuffer(np.zeros((8, 8)))
    vals = [psnr(a, ImageBuffer(np.full((8, 8), e))) for e in (0.01, 0.02, 0.05, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_identical_exactly_one():
    x = ImageBuffer(np.random.default_rng(1).random((16, 16, 3)))
    assert ssim(x, x) == 1.0


def test_ssim_constant_images_closed_form():
    a = ImageBuffer(np.zeros((16, 16)))
    b = ImageBuffer(np.ones((16, 16)))
    c1 = 1e-4
    assert ssim(a, b) == pytest.approx(c1 / (1 + c1), rel=1e-12)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    a, b = ImageBuffer(rng.random((20, 20))), ImageBuffer(rng.random((20, 20)))
    assert ssim(a, b) == ssim(b, a)
    assert -1 <= ssim(a, b) < 1


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(ImageBuffer(np.zeros((10, 20))), ImageBuffer(np.zeros((10, 20))))


def test_ssim_below_one_for_distinct_inputs():
    rng = np.random.default_rng(4)
    a = rng.random((16, 16))
    b = a.copy()
    b[5, 5] += 1e-3
    assert ssim(a, b) < 1.0 - 1e-12


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(3)
    a = rng.random((32, 32))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
    # skimage averages over a border-cropped map of the same-padded filter;
    # agreement is close but not exact
    assert ssim(a, b) == pytest.approx(ref, abs=0.02)


# -- Degradation Index --------------------------------------------------------

def test_di_constant_series():
    assert degradation_index(MetricSeries("psnr", (30,) * 5)) == 0.0


def test_di_hand_values():
    assert degradation_index(MetricSeries("psnr", (30, 29.7, 29.4, 29.1, 28.8))) == pytest.approx(1.0, abs=1e-12)
    assert degradation_index(MetricSeries("lpips", (0.2, 0.22, 0.25, 0.28, 0.3), -1)) == pytest.approx(12.5, abs=1e-12)


def test_di_errors():
    with pytest.raises(ValueError):
        degradation_index(MetricSeries("psnr", (0.0, 1.0)))
    with pytest.raises(ValueError):
        degradation_index(MetricSeries("psnr", (1.0,)))


@settings(max_examples=200)
@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=8), st.floats(0.01, 100))
def test_di_scale_invariant(values, k):
    base = degradation_index(MetricSeries("q", tuple(values)))
    scaled = degradation_index(MetricSeries("q", tuple(v * k for v in values)))
    assert scaled == pytest.approx(base, rel=1e-12, abs=1e-12)


@settings(max_examples=200)
@given(st.floats(0.1, 100), st.floats(0.1, 100), st.integers(2, 10), st.sampled_from([1, -1]))
def test_di_sign_convention(q1, qn, n, m):
    vals = (q1,) + (q1,) * (n - 2) + (qn,)
    di = degradation_index(MetricSeries("q", vals, m))
    worse = qn < q1 if m == 1 else qn > q1
    better = qn > q1 if m == 1 else qn < q1
    assert (di > 0) == worse and (di < 0) == better


def test_metric_orientation_defaults():
    assert MetricSeries.for_metric("psnr", (1, 2)).orientation == 1
    assert MetricSeries.for_metric("ssim", (1, 2)).orientation == 1
    assert MetricSeries.for_metric("mse", (1, 2)).orientation == -1


# -- drift --------------------------------------------------------------------

def test_drift_zero_for_identity_model():
    spec = ModelSpec.dncnn_like(depth=3, width=4)
    params = zero_params(spec)
    rng = np.random.default_rng(0)
    x = ImageBuffer(rng.random((8, 8)))
    assert drift(lambda a: apply(params, spec, a), x) == 0.0


def test_drift_is_distance_of_forward():
    spec = ModelSpec.dncnn_like(depth=3, width=4)
    from dcqe.models import init_params
    params = init_params(spec, 3)
    x = np.random.default_rng(1).random((2, 1, 8, 8))
    f = lambda a: apply(params, spec, a)
    expected = distance(Tensor(f(x)), Tensor(x), "L1").item()
    assert drift(f, x) == expected
    assert drift(f, x, "L2") == distance(Tensor(f(x)), Tensor(x), "L2").item()
