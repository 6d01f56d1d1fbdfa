"""Transformer autoregressive flow: K causal affine blocks with exact
log-determinant, forward likelihood evaluation, inverse sequential sampling,
class conditioning, and classifier-free guidance.

Each block runs a causal transformer over the shifted sequence
[class-or-null embedding + start token, token_0, ..., token_{N-2}] and emits
per-token shift mu and log-scale alpha. The forward pass applies
u_i = (y_i - mu_i) * exp(-alpha_i) elementwise, then reverses token order
before the next block; reversals are volume-preserving, so the exact
log-determinant is -sum(alpha) over blocks, tokens, and channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .fields import TokenField, _counter_rng
from .nets import Block, init_linear, zero_linear, init_block


@dataclass(frozen=True)
class FlowConfig:
    N: int = 16
    d: int = 8
    K: int = 6
    shallow_layers: int = 1
    deep_layers: int = 4
    width: int = 128
    heads: int = 4
    num_classes: int = 1
    label_drop_p: float = 0.1
    alpha_clamp: float = 8.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need K >= 1")
        if not (1 <= self.shallow_layers <= self.deep_layers):
            raise ValueError("need deep_layers >= shallow_layers >= 1")
        if not (0 <= self.label_drop_p < 1):
            raise ValueError("need 0 <= label_drop_p < 1")
        if self.alpha_clamp <= 0:
            raise ValueError("need alpha_clamp > 0")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")

    @property
    def null_label(self) -> int:
        """Index of the unconditional (dropped-label) embedding slot."""
        return self.num_classes


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance strength; w = 0 disables guidance."""

    w: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.w) or self.w < 0:
            raise ValueError("guidance strength must be finite and >= 0")


@dataclass(frozen=True)
class AffineParams:
    """Per-token shift and log-scale, each N x d."""

    mu: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if mu.shape != alpha.shape:
            raise ValueError("shape mismatch: mu vs alpha")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(alpha))):
            raise ValueError("affine parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "alpha", alpha)


class FlowBlock(nn.Module):
    """One causal affine block: attention stack plus a 2d-channel head."""

    def __init__(self, config: FlowConfig, n_layers: int):
        super().__init__()
        self.config = config
        w = config.width
        self.in_proj = nn.Linear(config.d, w)
        self.pos = nn.Parameter(torch.zeros(config.N, w))
        self.start = nn.Parameter(torch.zeros(w))
        self.layers = nn.ModuleList(
            Block(w, config.heads, config.mlp_ratio, causal=True) for _ in range(n_layers)
        )
        self.ln_out = nn.LayerNorm(w)
        self.head = nn.Linear(w, 2 * config.d)

    def forward(self, y: torch.Tensor, cls_vec: torch.Tensor):
        """y: (B, N, d); cls_vec: (B, width). Returns (mu, alpha), each (B, N, d)."""
        b, n, d = y.shape
        first = (cls_vec + self.start).unsqueeze(1)
        rest = self.in_proj(y[:, : n - 1])
        h = torch.cat([first, rest], dim=1) + self.pos[:n]
        for layer in self.layers:
            h = layer(h)
        out = self.head(self.ln_out(h))
        mu, raw = out.split(d, dim=-1)
        c = self.config.alpha_clamp
        alpha = c * torch.tanh(raw / c)
        return mu, alpha


class FlowModel(nn.Module):
    """K causal affine blocks plus a class embedding table (last slot =
    null/unconditional label)."""

    def __init__(self, config: FlowConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.class_emb = nn.Embedding(config.num_classes + 1, config.width)
        layers = [config.shallow_layers] * (config.K - 1) + [config.deep_layers]
        self.blocks = nn.ModuleList(FlowBlock(config, nl) for nl in layers)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.class_emb.weight.dtype

    def labels_tensor(self, label, batch: int) -> torch.Tensor:
        """Accepts None (null label), an int, or a length-batch sequence."""
        if label is None:
            label = self.config.null_label
        if np.isscalar(label):
            idx = np.full(batch, int(label), dtype=np.int64)
        else:
            idx = np.asarray(label, dtype=np.int64)
        if np.any(idx < 0) or np.any(idx > self.config.num_classes):
            raise ValueError("unknown label id")
        return torch.from_numpy(idx)

    def block_params_t(self, k: int, y: torch.Tensor, labels: torch.Tensor):
        cls_vec = self.class_emb(labels)
        return self.blocks[k](y, cls_vec)

    def forward_t(self, y: torch.Tensor, labels: torch.Tensor):
        """Data-to-prior map. Returns (u, alpha_sum) with alpha_sum shape (B,);
        logdet per sample = -alpha_sum."""
        alpha_sum = torch.zeros(y.shape[0], dtype=y.dtype, device=y.device)
        for k in range(self.config.K):
            mu, alpha = self.block_params_t(k, y, labels)
            y = (y - mu) * torch.exp(-alpha)
            alpha_sum = alpha_sum + alpha.sum(dim=(1, 2))
            y = torch.flip(y, dims=[1])
        return y, alpha_sum

    def inverse_t(self, u: torch.Tensor, labels: torch.Tensor, w: float = 0.0) -> torch.Tensor:
        """Prior-to-data map: blocks in reverse order, tokens generated
        sequentially. With w > 0 conditional and null-label parameters are
        combined by cfg extrapolation; w = 0 never touches the null path."""
        cfg = self.config
        null_labels = torch.full_like(labels, cfg.null_label)
        n = u.shape[1]
        for k in reversed(range(cfg.K)):
            u = torch.flip(u, dims=[1])
            y = torch.zeros_like(u)
            for i in range(n):
                mu, alpha = self.block_params_t(k, y, labels)
                if w > 0:
                    mu_u, alpha_u = self.block_params_t(k, y, null_labels)
                    mu = mu_u + (1 + w) * (mu - mu_u)
                    alpha = torch.clamp(
                        alpha_u + (1 + w) * (alpha - alpha_u),
                        -cfg.alpha_clamp,
                        cfg.alpha_clamp,
                    )
                y = y.clone()
                y[:, i] = u[:, i] * torch.exp(alpha[:, i]) + mu[:, i]
            u = y
        return u

    def nll_t(self, y: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Per-sample flow loss: 0.5 * ||f(y)||^2 + sum(alpha). The Gaussian
        constant (N d / 2) ln 2 pi is reported separately."""
        u, alpha_sum = self.forward_t(y, labels)
        return 0.5 * u.pow(2).sum(dim=(1, 2)) + alpha_sum


def make_flow_model(
    config: FlowConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    random_head: bool = False,
) -> FlowModel:
    """Build a flow. Heads are zero-initialized by default, so the fresh flow
    is the identity map with logdet 0; random_head=True draws small random
    head weights for a non-trivial transport (used by verification)."""
    model = FlowModel(config, dtype=dtype)
    rng = _counter_rng(seed)
    with torch.no_grad():
        emb = rng.normal(0.0, 0.02, size=tuple(model.class_emb.weight.shape))
        model.class_emb.weight.copy_(torch.from_numpy(emb).to(dtype))
    for block in model.blocks:
        init_linear(block.in_proj, rng)
        with torch.no_grad():
            block.pos.zero_()
            start = rng.normal(0.0, 0.02, size=tuple(block.start.shape))
            block.start.copy_(torch.from_numpy(start).to(dtype))
        for layer in block.layers:
            init_block(layer, rng)
        if random_head:
            init_linear(block.head, rng, std=0.05)
        else:
            zero_linear(block.head)
    return model


def affine_forward(y, mu, alpha):
    """(y - mu) * exp(-alpha), elementwise."""
    return (y - mu) * np.exp(-alpha)


def affine_inverse(u, mu, alpha):
    """u * exp(alpha) + mu, elementwise."""
    return u * np.exp(alpha) + mu


def cfg_combine(cond: AffineParams, uncond: AffineParams, w: float, alpha_clamp: float = 8.0) -> AffineParams:
    """Linear extrapolation from the null-label parameters toward the
    conditional ones; w = 0 returns cond unchanged (bit-identical)."""
    if cond.mu.shape != uncond.mu.shape:
        raise ValueError("shape mismatch")
    if w == 0:
        return cond
    mu = uncond.mu + (1 + w) * (cond.mu - uncond.mu)
    alpha = np.clip(uncond.alpha + (1 + w) * (cond.alpha - uncond.alpha), -alpha_clamp, alpha_clamp)
    return AffineParams(mu=mu, alpha=alpha)


def _check_field(field: TokenField, model: FlowModel):
    cfg = model.config
    if field.data.shape != (cfg.N, cfg.d):
        raise ValueError("shape mismatch: field vs flow config")


def _to_tensor(field: TokenField, model: FlowModel) -> torch.Tensor:
    return torch.from_numpy(np.asarray(field.data)).to(model.dtype).unsqueeze(0)


def block_params(field: TokenField, label, model: FlowModel, block: int = 0) -> AffineParams:
    """Causal per-token (mu, alpha) for one block; token i's parameters depend
    only on tokens with index < i and the label."""
    _check_field(field, model)
    labels = model.labels_tensor(label, 1)
    with torch.no_grad():
        mu, alpha = model.block_params_t(block, _to_tensor(field, model), labels)
    return AffineParams(mu=mu[0].cpu().numpy(), alpha=alpha[0].cpu().numpy())


def flow_forward(field: TokenField, label, model: FlowModel):
    """Map a field to the prior. Returns (u, logdet)."""
    _check_field(field, model)
    labels = model.labels_tensor(label, 1)
    with torch.no_grad():
        u, alpha_sum = model.forward_t(_to_tensor(field, model), labels)
    u = u[0].cpu().numpy()
    if not np.all(np.isfinite(u)):
        raise RuntimeError("numerical overflow")
    return TokenField(u), float(-alpha_sum.item())


def flow_inverse(field: TokenField, label, guidance: GuidanceSpec, model: FlowModel) -> TokenField:
    """Map a prior sample to data space, generating tokens sequentially."""
    _check_field(field, model)
    labels = model.labels_tensor(label, 1)
    with torch.no_grad():
        y = model.inverse_t(_to_tensor(field, model), labels, w=guidance.w)
    y = y[0].cpu().numpy()
    if not np.all(np.isfinite(y)):
        raise RuntimeError("numerical overflow")
    return TokenField(y)


def nll(field: TokenField, label, model: FlowModel) -> float:
    """Flow loss 0.5*||u||^2 + sum(alpha) for one field. Add
    :func:`gaussian_constant` for the full negative log-likelihood."""
    _check_field(field, model)
    labels = model.labels_tensor(label, 1)
    with torch.no_grad():
        val = model.nll_t(_to_tensor(field, model), labels)
    if not torch.isfinite(val).all():
        raise RuntimeError("numerical overflow")
    return float(val.item())


def gaussian_constant(n_tokens: int, d: int) -> float:
    """(N d / 2) ln 2 pi: the prior normalizer excluded from the flow loss."""
    return 0.5 * n_tokens * d * math.log(2 * math.pi)


def nll_batch(data: np.ndarray, labels, model: FlowModel) -> np.ndarray:
    """Per-sample flow loss over an (B, N, d) array."""
    y = torch.from_numpy(np.asarray(data)).to(model.dtype)
    lab = model.labels_tensor(labels, y.shape[0])
    with torch.no_grad():
        val = model.nll_t(y, lab)
    return val.cpu().numpy()


def sample(
    model: FlowModel,
    count: int,
    label,
    guidance: GuidanceSpec,
    seed: int,
    batch_size: int = 1024,
) -> np.ndarray:
    """Draw count samples by inverting standard-normal prior draws.
    Returns (count, N, d). Deterministic given seed."""
    cfg = model.config
    rng = _counter_rng(seed)
    u_all = rng.standard_normal((count, cfg.N, cfg.d))
    out = np.empty_like(u_all)
    for lo in range(0, count, batch_size):
        hi = min(lo + batch_size, count)
        u = torch.from_numpy(u_all[lo:hi]).to(model.dtype)
        lab = model.labels_tensor(label, hi - lo)
        if not np.isscalar(label) and label is not None:
            lab = model.labels_tensor(np.asarray(label)[lo:hi], hi - lo)
        with torch.no_grad():
            y = model.inverse_t(u, lab, w=guidance.w)
        out[lo:hi] = y.cpu().numpy()
    if not np.all(np.isfinite(out)):
        raise RuntimeError("numerical overflow")
    return out
