"""Token-field container, channel statistics, normalization, noise injection,
and PCA spectrum analysis.

A token field is an N x c real matrix: one row per spatial token, one column
per channel. All statistics pool tokens across positions and examples, so a
dataset of fields is treated as one big bag of c-dimensional tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Floor for per-channel std: keeps normalize total and invertible on
# zero-variance channels.
SIGMA_FLOOR = 1e-6


def _counter_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) used by every stochastic operation."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class TokenField:
    """An N x c matrix of spatial tokens. Entries must be finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("shape mismatch: token field must be N x c with N, c >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("token field contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and (strictly positive) std."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if len(mu) != len(sigma):
            raise ValueError("shape mismatch: mu and sigma lengths differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("channel stats contain non-finite entries")
        if np.any(sigma < SIGMA_FLOOR):
            raise ValueError(f"sigma below floor {SIGMA_FLOOR}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_channels(self) -> int:
        return len(self.mu)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise-injection policy.

    Modes:
      - "none": identity.
      - "constant": add N(0, sigma^2) to every entry, one draw per entry.
      - "per_sample_uniform": draw sigma_i ~ U(0, sigma) once per field,
        then add N(0, sigma_i^2) per entry.
    """

    mode: str = "none"
    sigma: float = 0.0

    def __post_init__(self):
        if self.mode not in ("none", "constant", "per_sample_uniform"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("noise sigma must be finite and non-negative")
        if self.mode == "per_sample_uniform" and self.sigma <= 0:
            raise ValueError("per-sample noise needs sigma_max > 0")

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls("none", 0.0)

    @classmethod
    def constant(cls, sigma: float) -> "NoiseSpec":
        return cls("constant", float(sigma))

    @classmethod
    def per_sample_uniform(cls, sigma_max: float) -> "NoiseSpec":
        return cls("per_sample_uniform", float(sigma_max))


@dataclass(frozen=True)
class SpectrumReport:
    """Eigenvalue spectrum of the pooled token covariance."""

    eigenvalues: np.ndarray
    cumulative_explained: np.ndarray

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        cum = np.asarray(self.cumulative_explained, dtype=np.float64).reshape(-1)
        if len(ev) != len(cum):
            raise ValueError("shape mismatch: eigenvalues vs cumulative curve")
        if np.any(ev < 0) or np.any(np.diff(ev) > 1e-9 * max(1.0, ev.max(initial=0.0))):
            raise ValueError("eigenvalues must be non-negative and sorted descending")
        if np.any(np.diff(cum) < -1e-12) or cum[0] < -1e-12 or cum[-1] > 1 + 1e-9:
            raise ValueError("cumulative explained variance must be non-decreasing in [0, 1]")
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "cumulative_explained", cum)


def _pool_tokens(dataset: Iterable[TokenField]) -> np.ndarray:
    fields = list(dataset)
    if not fields:
        raise ValueError("no data")
    c = fields[0].n_channels
    if any(f.n_channels != c for f in fields):
        raise ValueError("shape mismatch: fields disagree on channel count")
    return np.concatenate([np.asarray(f.data, dtype=np.float64) for f in fields], axis=0)


def compute_channel_stats(dataset: Sequence[TokenField]) -> ChannelStats:
    """Empirical per-channel mean/std over all tokens of all fields.

    Std uses the population convention (divisor = token count) and is clamped
    below at ``SIGMA_FLOOR``.
    """
    tokens = _pool_tokens(dataset)
    if tokens.shape[0] < 2:
        raise ValueError("no data: need at least 2 tokens")
    mu = tokens.mean(axis=0)
    sigma = np.maximum(tokens.std(axis=0), SIGMA_FLOOR)
    return ChannelStats(mu=mu, sigma=sigma)


def normalize(field: TokenField, stats: ChannelStats) -> TokenField:
    """(x - mu) / sigma, channel-wise."""
    if field.n_channels != stats.n_channels:
        raise ValueError("shape mismatch: field channels vs stats length")
    return TokenField((field.data - stats.mu) / stats.sigma)


def denormalize(field: TokenField, stats: ChannelStats) -> TokenField:
    """x * sigma + mu, channel-wise. Exact inverse of :func:`normalize`."""
    if field.n_channels != stats.n_channels:
        raise ValueError("shape mismatch: field channels vs stats length")
    return TokenField(field.data * stats.sigma + stats.mu)


def add_noise(field: TokenField, spec: NoiseSpec, seed: int) -> TokenField:
    """Inject Gaussian noise per the policy. Deterministic given seed."""
    if spec.mode == "none":
        return field
    rng = _counter_rng(seed)
    data = np.asarray(field.data, dtype=np.float64)
    if spec.mode == "constant":
        return TokenField(data + rng.normal(0.0, spec.sigma, size=data.shape))
    # per_sample_uniform: one sigma per field (per example)
    sigma_i = rng.uniform(0.0, spec.sigma)
    return TokenField(data + sigma_i * rng.standard_normal(data.shape))


def noise_batch(data: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Batched noise over an (examples, N, c) array; one sigma per example in
    per-sample mode. Draws from the caller's stream."""
    if spec.mode == "none":
        return data
    if spec.mode == "constant":
        return data + rng.normal(0.0, spec.sigma, size=data.shape)
    sigma_i = rng.uniform(0.0, spec.sigma, size=(data.shape[0], 1, 1))
    return data + sigma_i * rng.standard_normal(data.shape)


def pca_spectrum(dataset: Sequence[TokenField]) -> SpectrumReport:
    """Eigen-decomposition of the c x c covariance of tokens pooled across
    fields and positions. Caller is expected to pre-normalize."""
    tokens = _pool_tokens(dataset)
    m, c = tokens.shape
    if m < c + 1:
        raise ValueError("insufficient data: need at least c+1 tokens")
    centered = tokens - tokens.mean(axis=0)
    cov = centered.T @ centered / m
    eigenvalues = np.linalg.eigvalsh(cov)[::-1]
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    total = eigenvalues.sum()
    if total <= 0:
        cumulative = np.ones(c)
    else:
        cumulative = np.cumsum(eigenvalues) / total
    return SpectrumReport(eigenvalues=eigenvalues, cumulative_explained=cumulative)


def intrinsic_dim(report: SpectrumReport, threshold: float) -> int:
    """Smallest k (1-based) with cumulative_explained[k-1] >= threshold."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError("threshold out of range (0, 1]")
    cum = report.cumulative_explained
    hits = np.nonzero(cum >= threshold - 1e-12)[0]
    if len(hits) == 0:
        return len(cum)
    return int(hits[0]) + 1
