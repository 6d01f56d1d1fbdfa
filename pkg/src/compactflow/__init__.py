"""Exact-likelihood autoregressive flows on compressed token fields."""

from .fields import (
    ChannelStats,
    NoiseSpec,
    SpectrumReport,
    TokenField,
    add_noise,
    compute_channel_stats,
    denormalize,
    intrinsic_dim,
    normalize,
    pca_spectrum,
)
from .compressor import Compressor, SRCConfig, make_src, src_decode, src_encode, src_loss
from .flow import (
    AffineParams,
    FlowConfig,
    FlowModel,
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
from .training import (
    EMAState,
    OptimizerState,
    TrainConfig,
    compute_compact_stats,
    ema_update,
    lr_schedule,
    optimizer_step,
    train_flow,
    train_src,
)

__all__ = [name for name in dir() if not name.startswith("_")]
