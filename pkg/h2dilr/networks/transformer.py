"""Transformer neural decoder over quantized token sequences."""

import numpy as np

from h2dilr.autodiff import ops
from h2dilr.autodiff.tensor import Parameter, Tensor
from h2dilr.core.errors import ShapeError
from h2dilr.models.config import DecoderHeadConfig
from h2dilr.networks.layers import Conv1d, LayerNorm, Linear, Module


def relative_buckets(length: int, max_distance: int) -> np.ndarray:
    """``(L, L)`` bucket ids of the clipped key-minus-query offset."""
    offsets = np.arange(length)[None, :] - np.arange(length)[:, None]
    return np.clip(offsets, -max_distance, max_distance) + max_distance


class TransformerBlock(Module):
    """Pre-norm multi-head self-attention and GELU feed-forward, both residual."""

    def __init__(self, config: DecoderHeadConfig, rng: np.random.Generator, relative_position: bool):
        e = config.embed_dim
        self.heads = config.heads
        self.dropout = config.dropout
        self.max_distance = config.rel_pos_max_distance
        self.norm_attn = LayerNorm(e)
        self.query = Linear(e, e, rng)
        self.key = Linear(e, e, rng)
        self.value = Linear(e, e, rng)
        self.proj = Linear(e, e, rng)
        self.norm_ffn = LayerNorm(e)
        self.ffn_in = Linear(e, config.ffn_dim, rng)
        self.ffn_out = Linear(config.ffn_dim, e, rng)
        self.rel_bias = Parameter(np.zeros((config.heads, 2 * self.max_distance + 1))) if relative_position else None
        self.attention_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, keep_attention: bool = False) -> Tensor:
        h = self.norm_attn(x)
        q, k, v = self.query(h), self.key(h), self.value(h)
        bias = None
        if self.rel_bias is not None:
            bias = ops.relative_position_bias(self.rel_bias, relative_buckets(x.shape[1], self.max_distance))
        if keep_attention:
            self.attention_weights = ops.attention_probs(q.data, k.data, self.heads, None if bias is None else bias.data)
        attn = self.proj(ops.attention(q, k, v, self.heads, bias))
        x = x + ops.dropout(attn, self.dropout, rng, self.training)
        h = self.ffn_out(ops.gelu(self.ffn_in(self.norm_ffn(x))))
        return x + ops.dropout(h, self.dropout, rng, self.training)


class TransformerClassifier(Module):
    """Patch embedding, transformer blocks, final norm, mean-pool and a linear head."""

    def __init__(self, config: DecoderHeadConfig, rng: np.random.Generator, name: str = "classifier"):
        self.config = config
        self.patch = Conv1d(config.latent_dim, config.embed_dim, config.patch_kernel, config.patch_stride, rng, gain=1.0)
        self.blocks = [
            TransformerBlock(config, rng, relative_position=(i == 0 or config.rel_pos_all_blocks))
            for i in range(config.blocks)
        ]
        self.norm = LayerNorm(config.embed_dim)
        self.head = Linear(config.embed_dim, config.classes, rng)
        self.name_parameters(name)

    def __call__(self, z_hat: Tensor, rng: np.random.Generator | None = None, keep_attention: bool = False) -> Tensor:
        """``(N, L, D)`` -> ``(N, classes)`` logits."""
        if z_hat.ndim != 3 or z_hat.shape[2] != self.config.latent_dim:
            raise ShapeError(f"transformer: expected (N, L, {self.config.latent_dim}) tokens, got {z_hat.shape}")
        if z_hat.shape[1] < self.config.patch_kernel:
            raise ShapeError(f"transformer: {z_hat.shape[1]} tokens cannot fill one patch of {self.config.patch_kernel}")
        h = self.patch(z_hat.transpose(0, 2, 1)).transpose(0, 2, 1)
        for block in self.blocks:
            h = block(h, rng, keep_attention)
        return self.head(self.norm(h).mean(axis=1))

    @property
    def attention_weights(self) -> list[np.ndarray | None]:
        """Per-block ``(N, H, P, P)`` weights from the last call made with ``keep_attention``."""
        return [block.attention_weights for block in self.blocks]


def transformer_classify(
    model: TransformerClassifier,
    z_hat: Tensor,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Class logits for a batch of quantized token sequences."""
    model.train(training)
    return model(z_hat, rng)


def parameter_count(config: DecoderHeadConfig) -> int:
    """Analytic parameter count of a TransformerClassifier."""
    e, f = config.embed_dim, config.ffn_dim
    patch = config.latent_dim * e * config.patch_kernel + e
    block = 2 * 2 * e + 4 * (e * e + e) + (e * f + f) + (f * e + e)
    rel_blocks = config.blocks if config.rel_pos_all_blocks else min(config.blocks, 1)
    rel = rel_blocks * config.heads * (2 * config.rel_pos_max_distance + 1)
    return patch + config.blocks * block + rel + 2 * e + (e * config.classes + config.classes)
