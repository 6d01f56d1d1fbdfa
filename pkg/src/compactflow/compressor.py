"""Attention-based compressor: token fields go from n channels to d and back.

Encoder: learned positional embedding, L full-attention blocks at width n,
then a token-wise linear projection n -> d. Decoder mirrors it: projection
d -> n, positional embedding, L blocks. Projections initialize to a channel
selector and its transpose, positional tables and residual branches to zero,
so a fresh compressor with d = n is an exact identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .fields import TokenField, _counter_rng
from .nets import Block, init_block, init_linear

TORCH_DTYPES = {32: torch.float32, 64: torch.float64}


@dataclass(frozen=True)
class SRCConfig:
    """Compressor hyperparameters. Attention width is fixed at n."""

    n: int = 64
    d: int = 8
    L: int = 2
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if not (1 <= self.d <= self.n):
            raise ValueError("need 1 <= d <= n")
        if self.L < 1:
            raise ValueError("need L >= 1")
        if self.n % self.heads != 0:
            raise ValueError("width (= n) must be divisible by heads")

    @property
    def width(self) -> int:
        return self.n


def full_scale_config() -> SRCConfig:
    """Full-scale preset (n=768, d=32, L=4); desk runs use the defaults."""
    return SRCConfig(n=768, d=32, L=4, heads=12, mlp_ratio=4)


class Compressor(nn.Module):
    """Encoder/decoder parameter set (C_enc / C_dec)."""

    def __init__(self, config: SRCConfig, n_tokens: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.n_tokens = n_tokens
        n, d = config.n, config.d
        self.pos_enc = nn.Parameter(torch.zeros(n_tokens, n))
        self.pos_dec = nn.Parameter(torch.zeros(n_tokens, n))
        self.enc_blocks = nn.ModuleList(
            Block(n, config.heads, config.mlp_ratio, causal=False) for _ in range(config.L)
        )
        self.proj_down = nn.Linear(n, d)
        self.proj_up = nn.Linear(d, n)
        self.dec_blocks = nn.ModuleList(
            Block(n, config.heads, config.mlp_ratio, causal=False) for _ in range(config.L)
        )
        self.to(dtype)

    def encode(self, z: torch.Tensor) -> torch.Tensor:
        """(B, N, n) -> (B, N, d)."""
        n_tok = z.shape[1]
        if z.shape[-1] != self.config.n or n_tok > self.n_tokens:
            raise ValueError("shape mismatch: encoder input")
        h = z + self.pos_enc[:n_tok]
        for block in self.enc_blocks:
            h = block(h)
        return self.proj_down(h)

    def decode(self, zc: torch.Tensor) -> torch.Tensor:
        """(B, N, d) -> (B, N, n)."""
        n_tok = zc.shape[1]
        if zc.shape[-1] != self.config.d or n_tok > self.n_tokens:
            raise ValueError("shape mismatch: decoder input")
        h = self.proj_up(zc) + self.pos_dec[:n_tok]
        for block in self.dec_blocks:
            h = block(h)
        return h


def make_src(
    config: SRCConfig,
    n_tokens: int,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> Compressor:
    """Build a compressor with identity-preserving initialization."""
    model = Compressor(config, n_tokens, dtype=dtype)
    rng = _counter_rng(seed)
    for block in model.enc_blocks:
        init_block(block, rng)
    for block in model.dec_blocks:
        init_block(block, rng)
    n, d = config.n, config.d
    selector = np.zeros((d, n))
    selector[np.arange(d), np.arange(d)] = 1.0
    with torch.no_grad():
        model.proj_down.weight.copy_(torch.from_numpy(selector).to(dtype))
        model.proj_down.bias.zero_()
        model.proj_up.weight.copy_(torch.from_numpy(selector.T).to(dtype))
        model.proj_up.bias.zero_()
    return model


def _run(model: Compressor, field: TokenField, fn) -> TokenField:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.asarray(field.data)).to(dtype).unsqueeze(0)
    with torch.no_grad():
        out = fn(x)[0]
    out = out.cpu().numpy()
    if not np.all(np.isfinite(out)):
        raise RuntimeError("numerical overflow")
    return TokenField(out)


def src_encode(field: TokenField, model: Compressor) -> TokenField:
    """Compress an N x n field to N x d."""
    if field.n_channels != model.config.n:
        raise ValueError("shape mismatch: expected n input channels")
    return _run(model, field, model.encode)


def src_decode(field: TokenField, model: Compressor) -> TokenField:
    """Reconstruct an N x n field from N x d."""
    if field.n_channels != model.config.d:
        raise ValueError("shape mismatch: expected d input channels")
    return _run(model, field, model.decode)


def src_loss(z: TokenField, z_hat: TokenField) -> float:
    """Mean squared error over all entries."""
    if z.data.shape != z_hat.data.shape:
        raise ValueError("shape mismatch")
    diff = np.asarray(z.data, np.float64) - np.asarray(z_hat.data, np.float64)
    return float(np.mean(diff * diff))
