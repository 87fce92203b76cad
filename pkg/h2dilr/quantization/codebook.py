"""Codebooks, nearest-neighbour quantization and the VQ loss terms."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from h2dilr.autodiff import ops
from h2dilr.autodiff.tensor import Parameter, Tensor
from h2dilr.core.errors import RoutingError, ShapeError

logger = logging.getLogger(__name__)

# Rows per distance block; bounds the (rows, K, D) difference tensor.
_CHUNK_ROWS = 256


class UpdateMode(str, Enum):
    """How a codebook learns."""

    EMA = "ema"
    LOSS = "loss"


@dataclass
class Codebook:
    """K learnable D-dimensional code embeddings plus usage statistics."""

    codes: Parameter
    update_mode: UpdateMode
    ema_cluster_size: np.ndarray | None = None
    ema_embed_sum: np.ndarray | None = None
    usage_count: np.ndarray = field(default=None)
    unused_steps: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.codes.ndim != 2 or min(self.codes.shape) < 1:
            raise ShapeError(f"codebook needs K >= 1 and D >= 1, got codes of shape {self.codes.shape}")
        if not np.all(np.isfinite(self.codes.data)):
            raise ShapeError(f"codebook '{self.codes.name}' holds non-finite embeddings")
        self.update_mode = UpdateMode(self.update_mode)
        # EMA books learn from statistics only; gradients never reach them.
        self.codes.requires_grad = self.update_mode is UpdateMode.LOSS
        if self.update_mode is UpdateMode.EMA:
            if self.ema_cluster_size is None:
                self.ema_cluster_size = np.ones(self.size)
            if self.ema_embed_sum is None:
                self.ema_embed_sum = self.codes.data.copy()
        if self.usage_count is None:
            self.usage_count = np.zeros(self.size, dtype=np.int64)
        if self.unused_steps is None:
            self.unused_steps = np.zeros(self.size, dtype=np.int64)

    @classmethod
    def create(
        cls, size: int, dim: int, update_mode: UpdateMode, rng: np.random.Generator, name: str
    ) -> "Codebook":
        """Uniform init in [-1/K, 1/K]."""
        if size < 1 or dim < 1:
            raise ShapeError(f"codebook '{name}': K and D must be >= 1, got K={size}, D={dim}")
        codes = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim))
        return cls(Parameter(codes, name=name), UpdateMode(update_mode))

    @property
    def name(self) -> str:
        return self.codes.name or "codebook"

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def reset_usage(self) -> None:
        self.usage_count[:] = 0

    def count(self, indices: np.ndarray) -> None:
        """Add one use per index."""
        self.usage_count += np.bincount(np.asarray(indices).reshape(-1), minlength=self.size)


class QuantizationResult(NamedTuple):
    """Per-token code index, copied embedding and attained distance."""

    indices: np.ndarray
    quantized: np.ndarray
    distances: np.ndarray


class VQLosses(NamedTuple):
    total: Tensor
    rec: Tensor
    code: Tensor
    commit: Tensor


def nearest_codes(z: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest code for every row of ``z``; ties go to the lowest index."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != codes.shape[1]:
        raise ShapeError(f"nearest_code: query dim {z.shape[-1]} != code dim {codes.shape[1]}")
    lead = z.shape[:-1]
    rows = z.reshape(-1, codes.shape[1])
    indices = np.empty(rows.shape[0], dtype=np.int64)
    squared = np.empty(rows.shape[0])
    for start in range(0, rows.shape[0], _CHUNK_ROWS):
        block = rows[start : start + _CHUNK_ROWS]
        d2 = ((block[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)
        best = d2.argmin(axis=1)
        indices[start : start + block.shape[0]] = best
        squared[start : start + block.shape[0]] = d2[np.arange(block.shape[0]), best]
    return indices.reshape(lead), np.sqrt(squared).reshape(lead)


def nearest_code(z_j: np.ndarray, codebook: Codebook) -> tuple[int, float]:
    """Nearest code to a single latent vector."""
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_j.shape != (codebook.dim,):
        raise ShapeError(f"nearest_code: expected a {codebook.dim}-vector, got shape {z_j.shape}")
    index, distance = nearest_codes(z_j[None, :], codebook.codes.data)
    return int(index[0]), float(distance[0])


def quantize(z: np.ndarray, codebook: Codebook, count: bool = True) -> QuantizationResult:
    """Quantize every row of ``z`` (shape ``(..., D)``) against ``codebook``."""
    indices, distances = nearest_codes(z, codebook.codes.data)
    if count:
        codebook.count(indices)
    return QuantizationResult(indices, codebook.codes.data[indices], distances)


def vq_loss(x: Tensor, x_hat: Tensor, z: Tensor, z_hat: Tensor, beta: float) -> VQLosses:
    """Reconstruction + codebook + beta * commitment, all mean-reduced."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    rec = ops.mse(x, x_hat)
    code = ops.mse(ops.stop_gradient(z), z_hat)
    commit = ops.mse(z, ops.stop_gradient(z_hat))
    return VQLosses(rec + code + commit * beta, rec, code, commit)


def private_codebook_loss(z_private: Tensor, z_hat_private: Tensor, expected: int) -> Tensor:
    """Mean squared distance of private tokens to their codes; only the codes learn.

    ``expected`` is the number of tokens routing sent to private books. An
    empty selection is only legal when that number is zero.
    """
    if z_private.shape != z_hat_private.shape:
        raise ShapeError(f"private_codebook_loss: shapes differ {z_private.shape} vs {z_hat_private.shape}")
    n_tokens = z_private.size // z_private.shape[-1] if z_private.ndim else 0
    if n_tokens != expected:
        raise RoutingError(f"private_codebook_loss: got {n_tokens} private tokens, routing expects {expected}")
    if n_tokens == 0:
        return Tensor(0.0)
    return ops.mse(ops.stop_gradient(z_private), z_hat_private)


def ema_update(
    codebook: Codebook,
    z_rows: np.ndarray,
    indices: np.ndarray,
    alpha: float,
    epsilon: float = 1e-5,
) -> Codebook:
    """Cluster-statistics EMA step: sizes and sums decay by ``alpha``, codes = sum / size."""
    if codebook.update_mode is not UpdateMode.EMA:
        raise ValueError(f"ema_update: codebook '{codebook.name}' is in {codebook.update_mode.value} mode")
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"ema_update: alpha must be in [0, 1), got {alpha}")
    z_rows = np.asarray(z_rows, dtype=np.float64).reshape(-1, codebook.dim)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.shape[0] != z_rows.shape[0]:
        raise ShapeError(f"ema_update: {z_rows.shape[0]} rows but {indices.shape[0]} indices")

    counts = np.bincount(indices, minlength=codebook.size).astype(np.float64)
    sums = np.zeros_like(codebook.ema_embed_sum)
    np.add.at(sums, indices, z_rows)
    codebook.ema_cluster_size = alpha * codebook.ema_cluster_size + (1.0 - alpha) * counts
    codebook.ema_embed_sum = alpha * codebook.ema_embed_sum + (1.0 - alpha) * sums
    codebook.codes.data = codebook.ema_embed_sum / np.maximum(codebook.ema_cluster_size, epsilon)[:, None]
    codebook.unused_steps = np.where(counts > 0, 0, codebook.unused_steps + 1)
    return codebook


def reseed_dead_codes(codebook: Codebook, z_rows: np.ndarray, distances: np.ndarray, after: int) -> list[int]:
    """Move codes unused for ``after`` consecutive updates onto the worst-fit latents of the batch.

    Candidates are taken in descending distance order (stable), one per dead
    code. Returns the reseeded code indices.
    """
    dead = np.flatnonzero(codebook.unused_steps >= after)
    z_rows = np.asarray(z_rows, dtype=np.float64).reshape(-1, codebook.dim)
    if dead.size == 0 or z_rows.shape[0] == 0:
        return []
    order = np.argsort(-np.asarray(distances).reshape(-1), kind="stable")
    reseeded = []
    for k, row in zip(dead, order):
        codebook.codes.data[k] = z_rows[row]
        if codebook.update_mode is UpdateMode.EMA:
            codebook.ema_cluster_size[k] = 1.0
            codebook.ema_embed_sum[k] = z_rows[row]
        codebook.unused_steps[k] = 0
        reseeded.append(int(k))
    logger.debug("reseeded %d dead codes in %s", len(reseeded), codebook.name)
    return reseeded


def init_from_data(codebook: Codebook, z_rows: np.ndarray, rng: np.random.Generator) -> Codebook:
    """Replace the codes with latent rows drawn from one batch (with replacement if short)."""
    z_rows = np.asarray(z_rows, dtype=np.float64).reshape(-1, codebook.dim)
    if z_rows.shape[0] == 0:
        return codebook
    picks = rng.choice(z_rows.shape[0], size=codebook.size, replace=z_rows.shape[0] < codebook.size)
    codebook.codes.data = z_rows[picks].copy()
    if codebook.update_mode is UpdateMode.EMA:
        codebook.ema_cluster_size = np.ones(codebook.size)
        codebook.ema_embed_sum = codebook.codes.data.copy()
    return codebook


def perplexity(usage_count: np.ndarray) -> float:
    """exp(entropy) of the normalised usage; 1 for a single code, K for uniform use."""
    counts = np.asarray(usage_count, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("perplexity: usage counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("perplexity: usage counts are all zero")
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
