"""Codebooks and shared/private token quantization."""

from h2dilr.quantization.codebook import (
    Codebook,
    QuantizationResult,
    UpdateMode,
    ema_update,
    nearest_code,
    perplexity,
    private_codebook_loss,
    quantize,
    vq_loss,
)
from h2dilr.quantization.h2d import (
    H2DState,
    TokenRouting,
    h2d_loss,
    h2d_quantize,
    h2d_step,
    n_shared,
    partition,
)

__all__ = [
    "Codebook",
    "H2DState",
    "QuantizationResult",
    "TokenRouting",
    "UpdateMode",
    "ema_update",
    "h2d_loss",
    "h2d_quantize",
    "h2d_step",
    "n_shared",
    "nearest_code",
    "partition",
    "perplexity",
    "private_codebook_loss",
    "quantize",
    "vq_loss",
]
