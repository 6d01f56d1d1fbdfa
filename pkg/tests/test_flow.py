"""Affine flow blocks: causality, exact identities, inversion, guidance, NLL."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from compactflow import (
    AffineParams,
    FlowConfig,
    GuidanceSpec,
    affine_forward,
    affine_inverse,
    block_params,
    cfg_combine,
    flow_forward,
    flow_inverse,
    gaussian_constant,
    make_flow_model,
    nll,
)
from compactflow.fields import TokenField, _counter_rng
from compactflow.flow import nll_batch

TINY = FlowConfig(N=4, d=2, K=2, shallow_layers=1, deep_layers=1, width=16, heads=2, num_classes=3)


def test_affine_scalar_examples():
    assert affine_forward(3.0, 1.0, math.log(2.0)) == pytest.approx(1.0, rel=1e-12)
    assert affine_inverse(1.0, 1.0, math.log(2.0)) == pytest.approx(3.0, rel=1e-12)
    assert affine_forward(5.0, 5.0, 0.7) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_affine_round_trip(seed):
    rng = _counter_rng(seed)
    y = rng.standard_normal((3, 2)) * 5.0
    mu = rng.standard_normal((3, 2))
    alpha = rng.uniform(-4.0, 4.0, (3, 2))
    assert np.max(np.abs(affine_inverse(affine_forward(y, mu, alpha), mu, alpha) - y)) <= 1e-10


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(K=0)
    with pytest.raises(ValueError):
        FlowConfig(shallow_layers=3, deep_layers=2)
    with pytest.raises(ValueError):
        FlowConfig(width=10, heads=4)
    with pytest.raises(ValueError):
        FlowConfig(alpha_clamp=0.0)
    assert FlowConfig(num_classes=4).null_label == 4


def test_guidance_spec_validation():
    assert GuidanceSpec(0.0).w == 0.0
    with pytest.raises(ValueError):
        GuidanceSpec(-0.5)
    with pytest.raises(ValueError):
        GuidanceSpec(float("nan"))


def test_block_params_causality_exact():
    model = make_flow_model(TINY, seed=1, dtype=torch.float64, random_head=True)
    rng = _counter_rng(2)
    base = rng.standard_normal((TINY.N, TINY.d))
    ref = block_params(TokenField(base), 0, model)
    for j in range(TINY.N):
        perturbed = base.copy()
        perturbed[j] += rng.standard_normal(TINY.d)
        got = block_params(TokenField(perturbed), 0, model)
        # parameters at positions <= j must be bit-identical: position i sees
        # only tokens with index < i
        assert np.array_equal(got.mu[: j + 1], ref.mu[: j + 1])
        assert np.array_equal(got.alpha[: j + 1], ref.alpha[: j + 1])
        assert not np.array_equal(got.mu[j + 1 :], ref.mu[j + 1 :]) or j == TINY.N - 1


def test_first_token_params_depend_only_on_label():
    model = make_flow_model(TINY, seed=3, dtype=torch.float64, random_head=True)
    rng = _counter_rng(4)
    a = block_params(TokenField(rng.standard_normal((TINY.N, TINY.d))), 1, model)
    b = block_params(TokenField(rng.standard_normal((TINY.N, TINY.d))), 1, model)
    c = block_params(TokenField(rng.standard_normal((TINY.N, TINY.d))), 2, model)
    assert np.array_equal(a.mu[0], b.mu[0]) and np.array_equal(a.alpha[0], b.alpha[0])
    assert not np.array_equal(a.mu[0], c.mu[0])


def test_fresh_flow_is_identity():
    model = make_flow_model(TINY, seed=5, dtype=torch.float64)
    rng = _counter_rng(6)
    field = TokenField(rng.standard_normal((TINY.N, TINY.d)))
    u, logdet = flow_forward(field, 0, model)
    assert np.array_equal(u.data, field.data)  # even K: reversals cancel
    assert logdet == 0.0
    params = block_params(field, 0, model)
    assert np.all(params.mu == 0.0) and np.all(params.alpha == 0.0)


def test_single_block_constant_params_analytic():
    # one block, head bias only: mu = 1, alpha = ln 2 everywhere
    cfg = FlowConfig(N=2, d=1, K=1, shallow_layers=1, deep_layers=1, width=4, heads=1, num_classes=1)
    model = make_flow_model(cfg, seed=0, dtype=torch.float64)
    c = cfg.alpha_clamp
    raw = c * math.atanh(math.log(2.0) / c)  # tanh-clamp preimage of ln 2
    with torch.no_grad():
        model.blocks[0].head.bias.copy_(torch.tensor([1.0, raw], dtype=torch.float64))
    field = TokenField(np.array([[3.0], [3.0]]))
    u, logdet = flow_forward(field, 0, model)
    assert np.allclose(u.data, 1.0, atol=1e-12)
    assert logdet == pytest.approx(-2.0 * math.log(2.0), abs=1e-12)
    back = flow_inverse(u, 0, GuidanceSpec(0.0), model)
    assert np.allclose(back.data, 3.0, atol=1e-12)


def test_alpha_respects_clamp():
    cfg = FlowConfig(N=1, d=1, K=1, shallow_layers=1, deep_layers=1, width=4, heads=1, alpha_clamp=2.0)
    model = make_flow_model(cfg, seed=0, dtype=torch.float64)
    with torch.no_grad():
        model.blocks[0].head.bias.copy_(torch.tensor([0.0, 1e6], dtype=torch.float64))
    params = block_params(TokenField(np.zeros((1, 1))), 0, model)
    assert params.alpha[0, 0] <= 2.0
    assert params.alpha[0, 0] == pytest.approx(2.0, abs=1e-9)


def test_round_trip_float64():
    model = make_flow_model(TINY, seed=7, dtype=torch.float64, random_head=True)
    rng = _counter_rng(8)
    worst = 0.0
    for trial in range(10):
        field = TokenField(rng.standard_normal((TINY.N, TINY.d)))
        label = int(rng.integers(0, TINY.num_classes))
        u, _ = flow_forward(field, label, model)
        back = flow_inverse(u, label, GuidanceSpec(0.0), model)
        worst = max(worst, float(np.max(np.abs(back.data - field.data))))
    assert worst <= 1e-8


def test_round_trip_float32():
    model = make_flow_model(TINY, seed=9, dtype=torch.float32, random_head=True)
    rng = _counter_rng(10)
    worst = 0.0
    for trial in range(10):
        field = TokenField(rng.standard_normal((TINY.N, TINY.d)).astype(np.float32))
        u, _ = flow_forward(field, 0, model)
        back = flow_inverse(u, 0, GuidanceSpec(0.0), model)
        worst = max(worst, float(np.max(np.abs(back.data - field.data))))
    assert worst <= 1e-3


def test_cfg_combine_examples():
    cond = AffineParams(mu=np.full((1, 1), 2.0), alpha=np.full((1, 1), 0.5))
    uncond = AffineParams(mu=np.full((1, 1), 1.0), alpha=np.full((1, 1), 0.1))
    out = cfg_combine(cond, uncond, w=1.0)
    # uncond + 2 * (cond - uncond)
    assert out.mu[0, 0] == pytest.approx(3.0, abs=1e-12)
    assert out.alpha[0, 0] == pytest.approx(0.9, abs=1e-12)
    # w = 0 returns the conditional parameters untouched
    assert cfg_combine(cond, uncond, w=0.0) is cond
    # extreme extrapolation is clamped
    big = AffineParams(mu=np.zeros((1, 1)), alpha=np.full((1, 1), 7.0))
    clamped = cfg_combine(big, uncond, w=10.0, alpha_clamp=8.0)
    assert clamped.alpha[0, 0] == 8.0
    with pytest.raises(ValueError, match="shape mismatch"):
        cfg_combine(cond, AffineParams(mu=np.zeros((2, 1)), alpha=np.zeros((2, 1))), w=1.0)


def test_guided_zero_never_evaluates_null_path(monkeypatch):
    model = make_flow_model(TINY, seed=11, dtype=torch.float64, random_head=True)
    seen = []
    orig = model.block_params_t

    def spy(k, y, labels):
        seen.append(labels.detach().clone())
        return orig(k, y, labels)

    monkeypatch.setattr(model, "block_params_t", spy)
    rng = _counter_rng(12)
    field = TokenField(rng.standard_normal((TINY.N, TINY.d)))
    flow_inverse(field, 1, GuidanceSpec(0.0), model)
    assert len(seen) == TINY.K * TINY.N  # one call per (block, token), no null pass
    assert all(int(lab.item()) == 1 for lab in seen)


def test_guided_zero_matches_unguided_bitwise():
    model = make_flow_model(TINY, seed=13, dtype=torch.float32, random_head=True)
    rng = _counter_rng(14)
    u = torch.from_numpy(rng.standard_normal((5, TINY.N, TINY.d))).to(torch.float32)
    labels = model.labels_tensor(2, 5)
    with torch.no_grad():
        a = model.inverse_t(u, labels, w=0.0)
        b = model.inverse_t(u, labels)
    assert torch.equal(a, b)


def test_guided_sampling_differs_from_unguided():
    model = make_flow_model(TINY, seed=15, dtype=torch.float64, random_head=True)
    rng = _counter_rng(16)
    field = TokenField(rng.standard_normal((TINY.N, TINY.d)))
    plain = flow_inverse(field, 0, GuidanceSpec(0.0), model)
    guided = flow_inverse(field, 0, GuidanceSpec(2.0), model)
    assert not np.array_equal(plain.data, guided.data)


def test_nll_identity_model_is_half_square_norm():
    model = make_flow_model(TINY, seed=17, dtype=torch.float64)
    rng = _counter_rng(18)
    field = TokenField(rng.standard_normal((TINY.N, TINY.d)))
    assert nll(field, None, model) == pytest.approx(0.5 * np.sum(field.data**2), rel=1e-12)


def test_mean_nll_per_dim_matches_gaussian_entropy():
    model = make_flow_model(TINY, seed=19, dtype=torch.float64)
    rng = _counter_rng(20)
    data = rng.standard_normal((10_000, TINY.N, TINY.d))
    vals = nll_batch(data, None, model)
    dim = TINY.N * TINY.d
    per_dim = (vals.mean() + gaussian_constant(TINY.N, TINY.d)) / dim
    assert per_dim == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=0.02)


def test_shape_and_label_errors():
    model = make_flow_model(TINY, seed=21)
    with pytest.raises(ValueError, match="shape mismatch"):
        flow_forward(TokenField(np.zeros((2, 2))), 0, model)
    field = TokenField(np.zeros((TINY.N, TINY.d)))
    with pytest.raises(ValueError, match="unknown label id"):
        flow_forward(field, TINY.num_classes + 1, model)
    with pytest.raises(ValueError, match="unknown label id"):
        flow_forward(field, -1, model)
    # None routes to the null-label slot without error
    flow_forward(field, None, model)


def test_model_construction_determinism():
    m1 = make_flow_model(TINY, seed=33, random_head=True)
    m2 = make_flow_model(TINY, seed=33, random_head=True)
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)
