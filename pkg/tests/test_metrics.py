import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlt.counter import build_counter
from nlt.data import TARGET_DOMAIN, build_split, density_from_points
from nlt.metrics import PSNR_CAP, MetricsReport, evaluate, gaussian_window, mae_mse, psnr, report_from_maps, ssim

from oracles import ssim_loops


def _gt(seed=0, n=10, size=32):
    rng = np.random.default_rng(seed)
    return density_from_points(rng.uniform(4, size - 4, (n, 2)), 4.0, (size, size))[0, 0].astype(np.float64)


def test_mae_mse_arithmetic():
    mae, mse = mae_mse([10, 20], [12, 16])
    assert abs(mae - 3.0) <= 1e-9 and abs(mse - math.sqrt(10)) <= 1e-9
    assert mae_mse([1, 2], [1, 2]) == (0.0, 0.0)
    assert mae_mse([7.5], [5.0]) == (2.5, 2.5)


def test_mae_mse_errors():
    with pytest.raises(ValueError):
        mae_mse([1, 2], [1])
    with pytest.raises(ValueError):
        mae_mse([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=20), st.floats(0.01, 10))
def test_mae_le_root_mse_and_translation(gts, c):
    preds = [g + 1.0 for g in gts]
    mae, mse = mae_mse(preds, gts)
    assert mae <= mse + 1e-12
    shifted, _ = mae_mse([p + c for p in preds], gts)
    assert shifted == pytest.approx(mae + c, abs=1e-9)


def test_psnr_cap_and_formula():
    g = _gt()
    assert psnr(g, g) == PSNR_CAP
    # scaled gt has range [0, 1]; a uniform offset of 0.1 gives mse_pixel 0.01
    assert psnr(g + 0.1 * g.max(), g) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError, match="all zero"):
        psnr(g, np.zeros_like(g))
    with pytest.raises(ValueError, match="shape"):
        psnr(g[:-1], g)


def test_psnr_decreasing_with_noise():
    g = _gt(1)
    rng = np.random.default_rng(0)
    vals = []
    for std in (0.01, 0.05, 0.1):
        vals.append(np.mean([psnr(g + rng.normal(0, std * g.max(), g.shape), g) for _ in range(20)]))
    assert vals[0] > vals[1] > vals[2]


def test_ssim_self_and_zero_prediction():
    g = _gt(2)
    assert abs(ssim(g, g) - 1.0) <= 1e-6
    zero = ssim(np.zeros_like(g), g)
    oracle = ssim_loops(np.zeros_like(g), g / g.max(), gaussian_window(), 0.01**2, 0.03**2)
    assert zero == pytest.approx(oracle, abs=1e-9)
    assert zero < 0.5


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_loop_oracle(seed):
    g = _gt(seed, size=24)
    rng = np.random.default_rng(seed)
    p = np.abs(g + rng.normal(0, 0.3 * g.max(), g.shape))
    expected = ssim_loops(p / g.max(), g / g.max(), gaussian_window(), 0.01**2, 0.03**2)
    assert ssim(p, g) == pytest.approx(expected, abs=1e-9)


def test_ssim_window_too_large():
    g = _gt(size=8)
    with pytest.raises(ValueError, match="window"):
        ssim(g, g)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16))
    b = rng.random((16, 16))
    # shared data range: both share the same max after scaling
    a[0, 0] = b[0, 0] = 2.0
    v = ssim(a, b)
    assert -1.0 <= v <= 1.0
    assert v == pytest.approx(ssim(b, a), abs=1e-12)


def test_report_perfect_and_zero_predictors():
    gts = [density_from_points(np.full((c, 2), 16.0), 4.0, (32, 32)) for c in (10, 20)]
    perfect = report_from_maps(gts, gts)
    assert (perfect.mae, perfect.mse, perfect.psnr) == (0.0, 0.0, 100.0)
    assert perfect.ssim == pytest.approx(1.0, abs=1e-6)
    zero = report_from_maps([np.zeros_like(g) for g in gts], gts)
    assert zero.mae == pytest.approx(15.0, abs=1e-4)


def test_report_permutation_invariant():
    gts = [density_from_points(np.random.default_rng(i).uniform(4, 28, (i + 3, 2)), 4.0, (32, 32)) for i in range(4)]
    preds = [g * 0.8 + 0.001 for g in gts]
    a = report_from_maps(preds, gts)
    order = [2, 0, 3, 1]
    b = report_from_maps([preds[i] for i in order], [gts[i] for i in order])
    assert a.mae == pytest.approx(b.mae, abs=1e-12) and a.mse == pytest.approx(b.mse, abs=1e-12)
    assert a.psnr == pytest.approx(b.psnr, abs=1e-9) and a.ssim == pytest.approx(b.ssim, abs=1e-12)


def test_evaluate_network():
    net = build_counter("desk_small", seed=0)
    samples = build_split(TARGET_DOMAIN, (0, 0, 5), seed=0).test
    r = evaluate(net, net.params, samples)
    assert r.n_images == 5 and r.mae >= 0 and r.mae <= r.mse + 1e-12 and -1 <= r.ssim <= 1
    with pytest.raises(ValueError, match="empty"):
        evaluate(net, net.params, [])


def test_report_text_round_trip():
    r = MetricsReport(1.5, 2.25, 31.0, 0.5, 7)
    assert r.to_text().splitlines()[0] == "mae=1.5"
    assert MetricsReport.from_text(r.to_text()) == r
