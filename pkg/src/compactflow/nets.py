"""Shared transformer building blocks.

Pre-norm residual blocks (LayerNorm -> attention -> add; LayerNorm -> MLP ->
add) with the output layer of each residual branch zero-initialized, so a
fresh stack is an exact identity map. All random initialization draws from a
caller-supplied numpy generator; torch's RNG is never used, which keeps model
construction bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

INIT_STD = 0.02


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, causal: bool):
        super().__init__()
        if width % heads != 0:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.head_dim = width // heads
        self.causal = causal
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        b, n, w = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)  # each (b, n, heads, head_dim)
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if self.causal:
            mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
            att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, w)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm residual transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, causal: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads, causal)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.fc2(self.act(self.fc1(self.ln2(x))))
        return x


def init_linear(lin: nn.Linear, rng: np.random.Generator, std: float = INIT_STD):
    with torch.no_grad():
        w = rng.normal(0.0, std, size=tuple(lin.weight.shape))
        lin.weight.copy_(torch.from_numpy(w).to(lin.weight.dtype))
        if lin.bias is not None:
            lin.bias.zero_()


def zero_linear(lin: nn.Linear):
    with torch.no_grad():
        lin.weight.zero_()
        if lin.bias is not None:
            lin.bias.zero_()


def init_block(block: Block, rng: np.random.Generator, std: float = INIT_STD):
    """Random qkv/fc1, zero residual outputs: the block starts as identity."""
    init_linear(block.attn.qkv, rng, std)
    zero_linear(block.attn.proj)
    init_linear(block.fc1, rng, std)
    zero_linear(block.fc2)
