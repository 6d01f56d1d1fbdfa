"""Independent oracles and property checks.

Everything here is deliberately brute force: dense finite-difference
Jacobians, per-parameter finite-difference gradients, analytic Gaussian
targets, and histogram distances. None of these paths reuse the analytic
log-determinant or analytic gradients they are checking.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .fields import TokenField, _counter_rng
from .flow import FlowConfig, FlowModel, GuidanceSpec, make_flow_model

FD_STEP = 1e-5
GAUSSIAN_ENTROPY_PER_DIM = 0.5 * math.log(2 * math.pi * math.e)  # ~1.418939


@dataclass
class VerifyReport:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float

    def row(self) -> list:
        return [self.name, "pass" if self.passed else "fail", self.value, self.tolerance, self.seconds]


def jacobian_logdet_oracle(model: FlowModel, field: TokenField, label) -> float:
    """log|det J| of the forward map by central finite differences plus a
    pivoted dense factorization. Requires N*d <= 16 and a float64 model."""
    cfg = model.config
    dim = cfg.N * cfg.d
    if dim > 16:
        raise ValueError("dense oracle limited to N*d <= 16")
    labels = model.labels_tensor(label, 1)

    def fwd(flat: np.ndarray) -> np.ndarray:
        y = torch.from_numpy(flat.reshape(1, cfg.N, cfg.d)).to(torch.float64)
        with torch.no_grad():
            u, _ = model.forward_t(y, labels)
        return u.cpu().numpy().reshape(-1)

    x0 = np.asarray(field.data, dtype=np.float64).reshape(-1)
    jac = np.empty((dim, dim))
    for j in range(dim):
        h = FD_STEP * max(1.0, abs(x0[j]))
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (fwd(xp) - fwd(xm)) / (2 * h)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0 or logabs < -690:
        raise RuntimeError("degenerate transport")
    return float(logabs)


def gradcheck(loss_fn, params, tolerance: float = 1e-4) -> VerifyReport:
    """Analytic gradient (reverse mode) vs per-parameter central finite
    differences. loss_fn() must recompute the scalar loss from params.
    Failures are reported, never thrown."""
    t0 = time.time()
    n_params = sum(p.numel() for p in params)
    if n_params > 500:
        raise ValueError("gradcheck limited to <= 500 parameters")
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [
        torch.zeros_like(p) if g is None else g.detach().clone() for p, g in zip(params, analytic)
    ]
    max_rel = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                h = FD_STEP * max(1.0, abs(orig))
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                a = float(gflat[i])
                denom = max(1e-6, abs(a), abs(fd))
                max_rel = max(max_rel, abs(a - fd) / denom)
    return VerifyReport("gradcheck", max_rel < tolerance, max_rel, tolerance, time.time() - t0)


def check_invertibility(model: FlowModel, n_trials: int, tolerance: float, seed: int) -> VerifyReport:
    """Max over trials of ||inverse(forward(y)) - y||_inf on random fields."""
    t0 = time.time()
    if n_trials < 1:
        raise ValueError("need n_trials >= 1")
    cfg = model.config
    rng = _counter_rng(seed)
    y = torch.from_numpy(rng.standard_normal((n_trials, cfg.N, cfg.d))).to(model.dtype)
    labels = model.labels_tensor(rng.integers(0, cfg.num_classes, n_trials), n_trials)
    with torch.no_grad():
        u, _ = model.forward_t(y, labels)
        back = model.inverse_t(u, labels, w=0.0)
    err = float((back - y).abs().max())
    return VerifyReport("invertibility", err <= tolerance, err, tolerance, time.time() - t0)


def gaussian_nll_check(model: FlowModel, n_samples: int, seed: int, tolerance: float = 0.05) -> VerifyReport:
    """Mean full NLL per dimension on standard-normal data vs the analytic
    Gaussian entropy 0.5*ln(2*pi*e)."""
    t0 = time.time()
    cfg = model.config
    rng = _counter_rng(seed)
    y = torch.from_numpy(rng.standard_normal((n_samples, cfg.N, cfg.d))).to(model.dtype)
    labels = model.labels_tensor(None, n_samples)
    per_dim_vals = []
    with torch.no_grad():
        for lo in range(0, n_samples, 4096):
            chunk = y[lo : lo + 4096]
            vals = model.nll_t(chunk, labels[lo : lo + 4096])
            per_dim_vals.append(vals.cpu().numpy())
    dim = cfg.N * cfg.d
    mean_full = (np.concatenate(per_dim_vals).mean() + 0.5 * dim * math.log(2 * math.pi)) / dim
    dev = abs(float(mean_full) - GAUSSIAN_ENTROPY_PER_DIM)
    return VerifyReport("gaussian_nll", dev <= tolerance, dev, tolerance, time.time() - t0)


def histogram_tv(samples_a: np.ndarray, samples_b: np.ndarray, bins: int, hist_range) -> float:
    """Half the L1 distance between normalized 2D histograms on a common range."""
    a = np.asarray(samples_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(samples_b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample set")
    if bins < 2:
        raise ValueError("need bins >= 2")
    ha, _, _ = np.histogram2d(a[:, 0], a[:, 1], bins=bins, range=hist_range)
    hb, _, _ = np.histogram2d(b[:, 0], b[:, 1], bins=bins, range=hist_range)
    ha = ha / ha.sum() if ha.sum() > 0 else ha
    hb = hb / hb.sum() if hb.sum() > 0 else hb
    return float(0.5 * np.abs(ha - hb).sum())


def _tiny_flow_config(rng: np.random.Generator) -> FlowConfig:
    n_tok = int(rng.integers(1, 5))
    d = int(rng.integers(1, max(2, 8 // n_tok + 1)))
    return FlowConfig(
        N=n_tok,
        d=d,
        K=int(rng.integers(1, 4)),
        shallow_layers=1,
        deep_layers=1,
        width=8,
        heads=2,
        num_classes=3,
    )


def logdet_agreement(model: FlowModel, field: TokenField, label, tolerance: float = 1e-4) -> VerifyReport:
    """Analytic logdet (-sum alpha) vs the dense finite-difference oracle."""
    t0 = time.time()
    from .flow import flow_forward

    _, analytic = flow_forward(field, label, model)
    oracle = jacobian_logdet_oracle(model, field, label)
    rel = abs(analytic - oracle) / max(1.0, abs(oracle))
    return VerifyReport("logdet_exactness", rel < tolerance, rel, tolerance, time.time() - t0)


def standard_suite(seed: int = 0, precision: int = 64) -> list:
    """The fixed oracle battery run by the `verify` CLI command."""
    reports = []
    rng = _counter_rng(seed)
    dtype = torch.float64 if precision == 64 else torch.float32
    inv_tol = 1e-8 if precision == 64 else 1e-3

    # Identity flow: exact round trip and exact Gaussian NLL behaviour.
    cfg = FlowConfig(N=4, d=2, K=2, shallow_layers=1, deep_layers=1, width=16, heads=2, num_classes=2)
    ident = make_flow_model(cfg, seed=seed, dtype=dtype)
    r = check_invertibility(ident, n_trials=16, tolerance=0.0, seed=seed + 1)
    r.name = "identity_invertibility"
    reports.append(r)
    r = gaussian_nll_check(ident, n_samples=10_000, seed=seed + 2, tolerance=0.02)
    r.name = "identity_gaussian_nll"
    reports.append(r)

    # Random flows: round trip at precision-dependent tolerance.
    for trial in range(2):
        model = make_flow_model(cfg, seed=seed + 10 + trial, dtype=dtype, random_head=True)
        r = check_invertibility(model, n_trials=16, tolerance=inv_tol, seed=seed + 20 + trial)
        r.name = f"random_invertibility_{trial}"
        reports.append(r)

    # Log-determinant exactness against the dense oracle (always float64).
    for trial in range(3):
        tcfg = _tiny_flow_config(rng)
        model = make_flow_model(tcfg, seed=seed + 30 + trial, dtype=torch.float64, random_head=True)
        field = TokenField(rng.standard_normal((tcfg.N, tcfg.d)))
        label = int(rng.integers(0, tcfg.num_classes))
        reports.append(logdet_agreement(model, field, label))
        reports[-1].name = f"logdet_exactness_{trial}"

    # Gradient exactness on a <= 500-parameter flow (float64).
    gcfg = FlowConfig(N=2, d=1, K=1, shallow_layers=1, deep_layers=1, width=4, heads=1, num_classes=1)
    gmodel = make_flow_model(gcfg, seed=seed + 40, dtype=torch.float64, random_head=True)
    gparams = [p for p in gmodel.parameters()]
    gy = torch.from_numpy(rng.standard_normal((3, gcfg.N, gcfg.d)))
    glab = gmodel.labels_tensor(0, 3)

    def flow_loss():
        return gmodel.nll_t(gy, glab).mean()

    r = gradcheck(flow_loss, gparams)
    r.name = "flow_gradcheck"
    reports.append(r)

    # Gradient exactness through a one-block compressor (float64).
    from .compressor import SRCConfig, make_src

    scfg = SRCConfig(n=4, d=2, L=1, heads=1, mlp_ratio=2)
    smodel = make_src(scfg, n_tokens=2, seed=seed + 50, dtype=torch.float64)
    sx = torch.from_numpy(rng.standard_normal((3, 2, 4)))
    sparams = list(smodel.parameters())

    def src_loss_fn():
        out = smodel.decode(smodel.encode(sx))
        return torch.mean((out - sx) ** 2)

    r = gradcheck(src_loss_fn, sparams)
    r.name = "src_gradcheck"
    reports.append(r)

    # Histogram TV sanity: identical sets are exactly 0 apart.
    pts = rng.standard_normal((1000, 2))
    tv = histogram_tv(pts, pts, bins=16, hist_range=[[-4, 4], [-4, 4]])
    reports.append(VerifyReport("histogram_tv_identity", tv == 0.0, tv, 0.0, 0.0))
    return reports
