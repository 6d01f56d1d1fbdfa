"""Two-stage training: compressor first, flow second.

Adaptive-moment optimizer with decoupled weight decay (beta1=0.9, beta2=0.95,
eps=1e-8), global gradient-norm clipping, linear-warmup/constant/cosine
learning-rate schedule, and EMA shadow parameters. All randomness (batch
order, noise, label dropout, init) comes from counter-based numpy generators,
so a (seed, config, dataset) triple maps to bit-identical parameters.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
import torch

from .compressor import Compressor, SRCConfig, make_src
from .fields import ChannelStats, NoiseSpec, TokenField, _counter_rng, compute_channel_stats, noise_batch
from .flow import FlowConfig, FlowModel, make_flow_model

BETA1 = 0.9
BETA2 = 0.95
EPS = 1e-8

# on_step(step, lr, loss, logdet_mean, grad_norm)
StepHook = Callable[[int, float, float, float, float], None]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup_epochs: int = 1
    cosine_start_epoch: int = 5
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    seed: int = 0
    noise: NoiseSpec = dc_field(default_factory=NoiseSpec.none)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("need lr > 0")
        if self.cosine_start_epoch > self.epochs:
            raise ValueError("cosine_start_epoch must not exceed epochs")
        if not (0 <= self.ema_decay < 1):
            raise ValueError("need ema_decay in [0, 1)")
        if self.grad_clip <= 0:
            raise ValueError("need grad_clip > 0")


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0


@dataclass
class EMAState:
    shadow: list
    decay: float


def init_optimizer_state(params) -> OptimizerState:
    return OptimizerState(
        m=[torch.zeros_like(p) for p in params],
        v=[torch.zeros_like(p) for p in params],
    )


def optimizer_step(params, grads, state: OptimizerState, config: TrainConfig, lr: Optional[float] = None) -> float:
    """One bias-corrected adaptive-moment update with decoupled weight decay.

    Update rule (per parameter, after global-norm clipping at grad_clip):
        m <- b1 m + (1-b1) g            v <- b2 v + (1-b2) g^2
        p <- p (1 - lr wd)
        p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

    Mutates params and state in place; returns the pre-clip gradient norm.
    """
    if lr is None:
        lr = config.lr
    with torch.no_grad():
        sq = sum(float((g.double() * g.double()).sum()) for g in grads)
        if not math.isfinite(sq):
            raise RuntimeError("non-finite gradient")
        grad_norm = math.sqrt(sq)
        scale = config.grad_clip / grad_norm if grad_norm > config.grad_clip else 1.0
        state.step += 1
        bc1 = 1.0 - BETA1 ** state.step
        bc2 = 1.0 - BETA2 ** state.step
        for p, g, m, v in zip(params, grads, state.m, state.v):
            g = g * scale
            m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
            v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
            if config.weight_decay:
                p.mul_(1.0 - lr * config.weight_decay)
            denom = (v / bc2).sqrt().add_(EPS)
            p.addcdiv_(m / bc1, denom, value=-lr)
    return grad_norm


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup over warmup_epochs, constant until cosine_start_epoch,
    then cosine decay to 0 at total_steps."""
    if not (0 <= step <= total_steps):
        raise ValueError("step out of range")
    if total_steps == 0:
        return config.lr
    warmup = total_steps * config.warmup_epochs / config.epochs
    cosine_start = total_steps * config.cosine_start_epoch / config.epochs
    if step < warmup:
        return config.lr * step / warmup
    if step <= cosine_start or cosine_start >= total_steps:
        return config.lr
    t = (step - cosine_start) / (total_steps - cosine_start)
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * t))


def init_ema(params, decay: float) -> EMAState:
    return EMAState(shadow=[p.detach().clone() for p in params], decay=decay)


def ema_update(ema: EMAState, params) -> EMAState:
    """shadow <- decay * shadow + (1 - decay) * params."""
    if len(ema.shadow) != len(params):
        raise ValueError("shape mismatch: EMA shadow vs params")
    with torch.no_grad():
        for s, p in zip(ema.shadow, params):
            if s.shape != p.shape:
                raise ValueError("shape mismatch: EMA shadow vs params")
            s.mul_(ema.decay).add_(p, alpha=1.0 - ema.decay)
    return ema


def apply_ema(model: torch.nn.Module, ema: EMAState) -> torch.nn.Module:
    """Copy of the model carrying the EMA shadow parameters."""
    out = copy.deepcopy(model)
    with torch.no_grad():
        for p, s in zip(out.parameters(), ema.shadow):
            p.copy_(s)
    return out


def _dataset_array(dataset) -> np.ndarray:
    arr = np.stack([np.asarray(f.data, dtype=np.float64) for f in dataset.fields])
    return arr


def _normalize_arr(arr: np.ndarray, stats: Optional[ChannelStats]) -> np.ndarray:
    if stats is None:
        return arr
    return (arr - stats.mu) / stats.sigma


def train_src(
    dataset,
    rae_stats: ChannelStats,
    src_config: SRCConfig,
    train_config: TrainConfig,
    on_step: Optional[StepHook] = None,
) -> Compressor:
    """Stage 1: denoising reconstruction in normalized token space.

    Inputs are noised per train_config.noise (per-sample uniform by default in
    the pipeline) before normalization; the regression target is the clean
    normalized field. Returns the trained compressor (no EMA).
    """
    raw = _dataset_array(dataset)
    n_examples, n_tokens, _ = raw.shape
    clean = _normalize_arr(raw, rae_stats)
    model = make_src(src_config, n_tokens, seed=train_config.seed)
    params = list(model.parameters())
    state = init_optimizer_state(params)
    rng = _counter_rng(train_config.seed)
    batches = max(1, math.ceil(n_examples / train_config.batch_size))
    total_steps = train_config.epochs * batches
    step = 0
    for epoch in range(train_config.epochs):
        perm = rng.permutation(n_examples)
        for b in range(batches):
            idx = perm[b * train_config.batch_size : (b + 1) * train_config.batch_size]
            noisy = noise_batch(raw[idx], train_config.noise, rng)
            x = torch.from_numpy(_normalize_arr(noisy, rae_stats)).to(torch.float32)
            target = torch.from_numpy(clean[idx]).to(torch.float32)
            out = model.decode(model.encode(x))
            loss = torch.mean((out - target) ** 2)
            if not torch.isfinite(loss):
                raise RuntimeError(f"divergence at step {step}")
            model.zero_grad(set_to_none=False)
            loss.backward()
            grads = [p.grad for p in params]
            lr = lr_schedule(step, total_steps, train_config)
            grad_norm = optimizer_step(params, grads, state, train_config, lr=lr)
            step += 1
            if on_step is not None:
                on_step(step, lr, float(loss.item()), 0.0, grad_norm)
    return model


def compute_compact_stats(
    dataset,
    src_model: Compressor,
    rae_stats: Optional[ChannelStats],
    noise: NoiseSpec,
    seed: int = 0,
) -> ChannelStats:
    """Channel stats of encoder outputs over the (noised, normalized) dataset."""
    raw = _dataset_array(dataset)
    rng = _counter_rng(seed)
    noisy = noise_batch(raw, noise, rng)
    x = torch.from_numpy(_normalize_arr(noisy, rae_stats)).to(torch.float32)
    with torch.no_grad():
        compact = src_model.encode(x).cpu().numpy()
    fields = [TokenField(compact[i]) for i in range(compact.shape[0])]
    return compute_channel_stats(fields)


def train_flow(
    dataset,
    src_model: Optional[Compressor],
    rae_stats: Optional[ChannelStats],
    compact_stats: Optional[ChannelStats],
    flow_config: FlowConfig,
    train_config: TrainConfig,
    on_step: Optional[StepHook] = None,
):
    """Stage 2: maximum likelihood on compact representations.

    Each step noises a batch, normalizes it, encodes it through the frozen
    compressor (skipped when src_model is None, e.g. data that is already
    compact), re-normalizes with compact_stats, applies label dropout, and
    minimizes the mean flow loss. Returns (model, ema_state).
    """
    raw = _dataset_array(dataset)
    n_examples = raw.shape[0]
    labels = None if dataset.labels is None else np.asarray(dataset.labels, dtype=np.int64)
    model = make_flow_model(flow_config, seed=train_config.seed)
    params = list(model.parameters())
    state = init_optimizer_state(params)
    ema = init_ema(params, train_config.ema_decay)
    rng = _counter_rng(train_config.seed)
    batches = max(1, math.ceil(n_examples / train_config.batch_size))
    total_steps = train_config.epochs * batches
    per_dim = flow_config.N * flow_config.d
    step = 0
    for epoch in range(train_config.epochs):
        perm = rng.permutation(n_examples)
        for b in range(batches):
            idx = perm[b * train_config.batch_size : (b + 1) * train_config.batch_size]
            noisy = noise_batch(raw[idx], train_config.noise, rng)
            x = _normalize_arr(noisy, rae_stats)
            if src_model is not None:
                with torch.no_grad():
                    x = src_model.encode(torch.from_numpy(x).to(torch.float32)).cpu().numpy()
            x = _normalize_arr(x, compact_stats)
            if labels is None:
                lab = np.full(len(idx), flow_config.null_label, dtype=np.int64)
            else:
                lab = labels[idx].copy()
                drop = rng.random(len(idx)) < flow_config.label_drop_p
                lab[drop] = flow_config.null_label
            y = torch.from_numpy(np.ascontiguousarray(x)).to(torch.float32)
            u, alpha_sum = model.forward_t(y, torch.from_numpy(lab))
            loss = (0.5 * u.pow(2).sum(dim=(1, 2)) + alpha_sum).mean() / per_dim
            if not torch.isfinite(loss):
                raise RuntimeError(f"divergence at step {step}")
            model.zero_grad(set_to_none=False)
            loss.backward()
            grads = [p.grad for p in params]
            lr = lr_schedule(step, total_steps, train_config)
            grad_norm = optimizer_step(params, grads, state, train_config, lr=lr)
            ema_update(ema, params)
            step += 1
            if on_step is not None:
                logdet_mean = float(-alpha_sum.detach().mean().item())
                on_step(step, lr, float(loss.item()), logdet_mean, grad_norm)
    return model, ema
