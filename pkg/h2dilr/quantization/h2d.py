"""Homogeneity-heterogeneity disentangled quantization.

Tokens whose distance to the shared codebook ranks in the best
``n_shared(nu, L)`` are quantized by the shared (EMA) codebook; the rest get a
fresh nearest-neighbour search in their subject's private (loss-trained)
codebook. Routing arrays carry any number of leading batch axes, with tokens
on the last axis.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from h2dilr.autodiff import ops
from h2dilr.autodiff.tensor import Graph, Parameter, Tensor
from h2dilr.core.errors import RoutingError, ShapeError, SubjectError
from h2dilr.core.seeding import derive_rng
from h2dilr.models.config import H2DConfig, Paradigm
from h2dilr.quantization.codebook import (
    Codebook,
    UpdateMode,
    ema_update,
    nearest_codes,
    perplexity,
    private_codebook_loss,
    reseed_dead_codes,
)

if TYPE_CHECKING:
    from h2dilr.models.records import RecordingSample
    from h2dilr.networks.convnet import SubjectNetworks
    from h2dilr.services.optim import AdamW

logger = logging.getLogger(__name__)


def n_shared(nu: float, n_tokens: int) -> int:
    """Shared-token count, round half up."""
    if not 0.0 <= nu <= 1.0:
        raise ValueError(f"nu must be in [0, 1], got {nu}")
    return math.floor(nu * n_tokens + 0.5)


@dataclass(frozen=True)
class TokenRouting:
    """Shared/private split of one or more token sequences.

    ``rank`` is 1-based and ascending in shared-codebook distance.
    ``private_index`` is -1 for shared tokens and until ``h2d_quantize`` fills it.
    """

    shared_mask: np.ndarray
    rank: np.ndarray
    shared_index: np.ndarray
    shared_distance: np.ndarray
    private_index: np.ndarray
    nu: float

    @property
    def n_tokens(self) -> int:
        return self.shared_mask.shape[-1]

    @property
    def private_mask(self) -> np.ndarray:
        return ~self.shared_mask

    @property
    def n_private(self) -> int:
        return int(self.private_mask.sum())


@dataclass
class H2DState:
    """Shared EMA codebook, per-subject private codebooks and the loss weights."""

    shared: Codebook | None
    privates: dict[int, Codebook]
    nu: float
    alpha: float
    beta: float
    epsilon: float = 1e-5
    paradigm: Paradigm = Paradigm.H2D
    reseed_after: int | None = None

    @classmethod
    def create(cls, config: H2DConfig, subjects: Sequence[int], seed: int) -> "H2DState":
        """Build the codebooks a paradigm needs.

        Every book draws from its own init stream, so a shared book of a given
        size starts identical whichever paradigm created it.
        """
        subjects = sorted(subjects)
        m = len(subjects)
        dim = config.code_dim
        k_private = config.k_private

        def shared_book(size: int) -> Codebook:
            rng = derive_rng(seed, "init", "codebook.shared")
            return Codebook.create(size, dim, UpdateMode.EMA, rng, "codebook.shared")

        def private_books(size: int) -> dict[int, Codebook]:
            return {
                s: Codebook.create(
                    size, dim, UpdateMode.LOSS, derive_rng(seed, "init", "codebook.private", s), f"codebook.private.{s}"
                )
                for s in subjects
            }

        paradigm = Paradigm(config.paradigm)
        if paradigm is Paradigm.UPANT:
            size = config.upant_codebook_size or 2 * m * k_private
            shared, privates, nu = shared_book(size), {}, 1.0
        elif paradigm is Paradigm.HETEROGENEOUS:
            shared, privates, nu = None, private_books(2 * k_private), 0.0
        else:
            shared, privates, nu = shared_book(m * k_private), private_books(k_private), config.nu
        return cls(
            shared=shared,
            privates=privates,
            nu=nu,
            alpha=config.alpha,
            beta=config.beta,
            epsilon=config.epsilon,
            paradigm=paradigm,
            reseed_after=config.reseed_after,
        )

    def private(self, subject: int) -> Codebook:
        """Private book of ``subject``."""
        try:
            return self.privates[subject]
        except KeyError:
            raise SubjectError(
                f"subject {subject} has no private codebook (registered: {sorted(self.privates)})"
            ) from None

    def codebooks(self) -> dict[str, Codebook]:
        """All books keyed by name, shared first."""
        books = {} if self.shared is None else {self.shared.name: self.shared}
        books.update({book.name: book for _, book in sorted(self.privates.items())})
        return books

    def parameters(self) -> list[Parameter]:
        return [book.codes for book in self.codebooks().values()]

    @property
    def total_codes(self) -> int:
        return sum(book.size for book in self.codebooks().values())

    def reset_usage(self) -> None:
        for book in self.codebooks().values():
            book.reset_usage()


class H2DQuantized(NamedTuple):
    """``straight_through`` feeds the VQ decoder; ``z_hat`` carries private-code gradients."""

    straight_through: Tensor
    z_hat: Tensor
    routing: TokenRouting


class H2DLosses(NamedTuple):
    total: Tensor
    rec: Tensor
    pri: Tensor
    commit: Tensor


@dataclass
class StepMetrics:
    """Loss terms and batch-level codebook perplexities of one h2d_step."""

    total: float
    rec: float
    pri: float
    commit: float
    perplexity_shared: float | None = None
    perplexity_private: float | None = None
    grad_norms: dict[str, float] = field(default_factory=dict)


def partition(z: np.ndarray, shared: Codebook | None, nu: float) -> TokenRouting:
    """Rank tokens by distance to their nearest shared code and split at ``n_shared``.

    Ties in distance keep token order. Without a shared book only ``nu == 0``
    is meaningful; ranks then follow token order.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2:
        raise ShapeError(f"partition: expected (..., L, D) latents, got shape {z.shape}")
    count = n_shared(nu, z.shape[-2])
    lead = z.shape[:-1]
    if shared is None:
        if count:
            raise RoutingError(f"partition: nu={nu} routes {count} tokens but there is no shared codebook")
        indices = np.full(lead, -1, dtype=np.int64)
        distances = np.zeros(lead)
    else:
        indices, distances = nearest_codes(z, shared.codes.data)
    order = np.argsort(distances, axis=-1, kind="stable")
    rank = np.empty(lead, dtype=np.int64)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(1, lead[-1] + 1), lead), axis=-1)
    return TokenRouting(
        shared_mask=rank <= count,
        rank=rank,
        shared_index=indices,
        shared_distance=distances,
        private_index=np.full(lead, -1, dtype=np.int64),
        nu=nu,
    )


def h2d_quantize(
    z: Tensor, routing: TokenRouting, state: H2DState, subject: int, count: bool = True
) -> H2DQuantized:
    """Quantize shared tokens from the shared book and the rest from ``subject``'s private book."""
    if z.shape[:-1] != routing.shared_mask.shape:
        raise RoutingError(f"h2d_quantize: latents {z.shape} do not match routing {routing.shared_mask.shape}")
    shared_mask = routing.shared_mask
    private_mask = routing.private_mask
    value = np.zeros(z.shape)
    parts: list[Tensor] = []

    if shared_mask.any():
        if state.shared is None:
            raise RoutingError("h2d_quantize: routing has shared tokens but there is no shared codebook")
        value = np.where(shared_mask[..., None], state.shared.codes.data[np.maximum(routing.shared_index, 0)], 0.0)
        if count:
            state.shared.count(routing.shared_index[shared_mask])

    private_index = np.full(shared_mask.shape, -1, dtype=np.int64)
    if private_mask.any():
        book = state.private(subject)
        fresh, _ = nearest_codes(z.data[private_mask], book.codes.data)
        private_index[private_mask] = fresh
        gathered = ops.take_rows(book.codes, np.maximum(private_index, 0))
        parts.append(ops.zero_mask(gathered, private_mask))
        if count:
            book.count(fresh)
    elif subject not in state.privates and state.privates:
        raise SubjectError(f"subject {subject} has no private codebook (registered: {sorted(state.privates)})")

    z_hat = Tensor(value)
    for part in parts:
        z_hat = z_hat + part
    return H2DQuantized(ops.ste(z, z_hat), z_hat, replace(routing, private_index=private_index))


def h2d_loss(
    x: Tensor, x_hat: Tensor, z: Tensor, z_hat: Tensor, routing: TokenRouting, beta: float
) -> H2DLosses:
    """rec (whole signal) + pri (private tokens) + beta * commit (all tokens)."""
    if z.shape != z_hat.shape or z.shape[:-1] != routing.shared_mask.shape:
        raise RoutingError(
            f"h2d_loss: latents {z.shape}, quantized {z_hat.shape} and routing {routing.shared_mask.shape} disagree"
        )
    private_mask = routing.private_mask
    if np.any(routing.private_index[private_mask] < 0):
        raise RoutingError("h2d_loss: private tokens without a private code index; run h2d_quantize first")
    rec = ops.mse(x, x_hat)
    selected = np.nonzero(private_mask)
    pri = private_codebook_loss(z[selected], z_hat[selected], int(private_mask.sum()))
    commit = ops.mse(z, ops.stop_gradient(z_hat))
    return H2DLosses(rec + pri + commit * beta, rec, pri, commit)


def _batch_perplexity(indices: np.ndarray, size: int) -> float | None:
    if indices.size == 0:
        return None
    return perplexity(np.bincount(indices, minlength=size))


def h2d_step(
    batch: "Sequence[RecordingSample]",
    state: H2DState,
    networks: "SubjectNetworks",
    optimizer: "AdamW",
    lr: float,
    update_shared: bool = True,
) -> StepMetrics:
    """One stage-1 step on a single-subject batch.

    Order: forward, backward, AdamW on the subject's encoder/decoder and
    private codes, then the shared EMA update from this batch's shared tokens.
    """
    if not batch:
        raise ValueError("h2d_step: empty batch")
    subjects = sorted({sample.subject for sample in batch})
    if len(subjects) != 1:
        raise SubjectError(f"h2d_step: batch mixes subjects {subjects}")
    subject = subjects[0]
    x = Tensor(np.stack([sample.signal for sample in batch]))

    with Graph():
        z = networks.encode(x, subject)
        routing = partition(z.data, state.shared, state.nu)
        quantized = h2d_quantize(z, routing, state, subject)
        x_hat = networks.decode_reconstruct(quantized.straight_through, subject, x.shape[1])
        losses = h2d_loss(x, x_hat, z, quantized.z_hat, quantized.routing, state.beta)
        losses.total.backward()

    params = networks.parameters(subject)
    if subject in state.privates:
        params.append(state.privates[subject].codes)
    grad_norms = {p.name: float(np.linalg.norm(p.grad)) for p in params if p.grad is not None}
    optimizer.step(params, lr)

    routing = quantized.routing
    shared_tokens = routing.shared_mask
    if update_shared and state.shared is not None and shared_tokens.any():
        ema_update(state.shared, z.data[shared_tokens], routing.shared_index[shared_tokens], state.alpha, state.epsilon)
        if state.reseed_after:
            # candidates span the whole batch, private-routed tokens included
            reseed_dead_codes(
                state.shared, z.data.reshape(-1, z.shape[-1]), routing.shared_distance.reshape(-1), state.reseed_after
            )

    logger.debug("h2d_step subject=%d total=%.6g rec=%.6g", subject, losses.total.item(), losses.rec.item())
    private_book = state.privates.get(subject)
    return StepMetrics(
        total=losses.total.item(),
        rec=losses.rec.item(),
        pri=losses.pri.item(),
        commit=losses.commit.item(),
        perplexity_shared=(
            _batch_perplexity(routing.shared_index[shared_tokens], state.shared.size) if state.shared else None
        ),
        perplexity_private=(
            _batch_perplexity(routing.private_index[routing.private_mask], private_book.size)
            if private_book
            else None
        ),
        grad_norms=grad_norms,
    )
