"""The oracle battery itself: finite-difference Jacobians and gradients,
analytic Gaussian targets, histogram distance."""

import math

import numpy as np
import pytest
import torch

from compactflow.fields import TokenField, _counter_rng
from compactflow.flow import FlowConfig, flow_forward, make_flow_model, nll_batch
from compactflow.verify import (
    GAUSSIAN_ENTROPY_PER_DIM,
    check_invertibility,
    gaussian_nll_check,
    gradcheck,
    histogram_tv,
    jacobian_logdet_oracle,
    logdet_agreement,
    standard_suite,
)

TINY = FlowConfig(N=2, d=2, K=2, shallow_layers=1, deep_layers=1, width=8, heads=2, num_classes=2)


def test_oracle_zero_logdet_on_identity():
    model = make_flow_model(TINY, seed=0, dtype=torch.float64)
    rng = _counter_rng(1)
    field = TokenField(rng.standard_normal((2, 2)))
    assert abs(jacobian_logdet_oracle(model, field, 0)) <= 1e-6


def test_oracle_constant_scale_block():
    # single block with alpha = ln 2 on every entry of a (1, 2) field:
    # Jacobian is diag(1/2, 1/2), logdet = -2 ln 2
    cfg = FlowConfig(N=1, d=2, K=1, shallow_layers=1, deep_layers=1, width=4, heads=1, num_classes=1)
    model = make_flow_model(cfg, seed=0, dtype=torch.float64)
    c = cfg.alpha_clamp
    raw = c * math.atanh(math.log(2.0) / c)
    with torch.no_grad():
        model.blocks[0].head.bias.copy_(torch.tensor([0.0, 0.0, raw, raw], dtype=torch.float64))
    got = jacobian_logdet_oracle(model, TokenField(np.array([[0.3, -0.7]])), 0)
    assert got == pytest.approx(-2.0 * math.log(2.0), abs=1e-6)


def test_oracle_rejects_large_dimension():
    cfg = FlowConfig(N=5, d=4, K=1, shallow_layers=1, deep_layers=1, width=8, heads=2)
    model = make_flow_model(cfg, seed=0, dtype=torch.float64)
    with pytest.raises(ValueError, match="N\\*d <= 16"):
        jacobian_logdet_oracle(model, TokenField(np.zeros((5, 4))), None)


def test_logdet_agreement_random_models():
    rng = _counter_rng(2)
    for trial in range(3):
        model = make_flow_model(TINY, seed=10 + trial, dtype=torch.float64, random_head=True)
        field = TokenField(rng.standard_normal((2, 2)))
        report = logdet_agreement(model, field, int(rng.integers(0, 2)))
        assert report.passed, report.value
        assert report.value <= 1e-4


def test_gradcheck_quadratic_is_near_exact():
    theta = torch.tensor([0.7, -1.3], dtype=torch.float64, requires_grad=True)

    def loss_fn():
        return 0.5 * (theta**2).sum()

    report = gradcheck(loss_fn, [theta])
    assert report.passed
    assert report.value <= 1e-10


def test_gradcheck_catches_wrong_gradient():
    theta = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    scale = torch.tensor([2.0], dtype=torch.float64)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g * 100.0  # deliberately not 2x

    def loss_fn():
        return (Wrong.apply(theta) * scale).sum()

    report = gradcheck(loss_fn, [theta])
    assert not report.passed


def test_gradcheck_flow_nll():
    cfg = FlowConfig(N=2, d=1, K=1, shallow_layers=1, deep_layers=1, width=4, heads=1, num_classes=1)
    model = make_flow_model(cfg, seed=3, dtype=torch.float64, random_head=True)
    rng = _counter_rng(4)
    y = torch.from_numpy(rng.standard_normal((3, 2, 1)))
    labels = model.labels_tensor(0, 3)
    params = list(model.parameters())

    def loss_fn():
        return model.nll_t(y, labels).mean()

    report = gradcheck(loss_fn, params)
    assert report.passed, report.value


def test_gradcheck_parameter_cap():
    big = torch.zeros(501, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError, match="500"):
        gradcheck(lambda: (big**2).sum(), [big])


def test_invertibility_identity_exact():
    model = make_flow_model(TINY, seed=5, dtype=torch.float64)
    report = check_invertibility(model, n_trials=8, tolerance=0.0, seed=6)
    assert report.passed
    assert report.value == 0.0


def test_invertibility_random_precisions():
    m64 = make_flow_model(TINY, seed=7, dtype=torch.float64, random_head=True)
    r64 = check_invertibility(m64, n_trials=16, tolerance=1e-8, seed=8)
    assert r64.passed, r64.value
    m32 = make_flow_model(TINY, seed=7, dtype=torch.float32, random_head=True)
    r32 = check_invertibility(m32, n_trials=16, tolerance=1e-3, seed=8)
    assert r32.passed, r32.value


def test_gaussian_nll_check_identity_and_mismatch():
    model = make_flow_model(TINY, seed=9, dtype=torch.float64)
    report = gaussian_nll_check(model, n_samples=20_000, seed=10, tolerance=0.02)
    assert report.passed, report.value
    # identity model on N(0, 4) data: per-dim NLL is entropy + (ln 2 + 3/2)
    # off the standard-normal target
    rng = _counter_rng(11)
    data = 2.0 * rng.standard_normal((20_000, TINY.N, TINY.d))
    dim = TINY.N * TINY.d
    vals = nll_batch(data, None, model)
    per_dim = (vals.mean() + 0.5 * dim * math.log(2 * math.pi)) / dim
    expected = 0.5 * math.log(2 * math.pi) + 2.0  # E[0.5 u^2] = 2 for sigma = 2
    assert per_dim == pytest.approx(expected, abs=0.05)
    assert abs(per_dim - GAUSSIAN_ENTROPY_PER_DIM) > 0.5  # clearly flagged as off


def test_histogram_tv_edges():
    rng = _counter_rng(12)
    pts = rng.standard_normal((5000, 2))
    rng_b = _counter_rng(13)
    assert histogram_tv(pts, pts, bins=16, hist_range=[[-4, 4], [-4, 4]]) == 0.0
    shifted = pts + 100.0
    assert histogram_tv(pts, shifted, bins=16, hist_range=[[-110, 110], [-110, 110]]) == pytest.approx(1.0)
    same_law = rng_b.standard_normal((5000, 2))
    tv = histogram_tv(pts, same_law, bins=16, hist_range=[[-4, 4], [-4, 4]])
    assert 0.0 < tv < 0.2
    with pytest.raises(ValueError):
        histogram_tv(np.zeros((0, 2)), pts, bins=16, hist_range=[[-4, 4], [-4, 4]])
    with pytest.raises(ValueError):
        histogram_tv(pts, pts, bins=1, hist_range=[[-4, 4], [-4, 4]])


def test_standard_suite_passes():
    reports = standard_suite(seed=0, precision=64)
    assert len(reports) >= 8
    for report in reports:
        assert report.passed, f"{report.name}: {report.value} vs {report.tolerance}"
