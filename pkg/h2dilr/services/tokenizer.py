"""Stage-1 model bundle: per-subject networks plus codebooks, and its checkpoint mapping."""

import logging
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from h2dilr.autodiff.tensor import Tensor
from h2dilr.core.errors import CheckpointError
from h2dilr.models.config import Paradigm, Representation, RunConfig, Stage
from h2dilr.models.records import SubjectDataset
from h2dilr.networks.convnet import SubjectNetworks
from h2dilr.networks.factory import init_parameters
from h2dilr.quantization.codebook import Codebook, UpdateMode
from h2dilr.quantization.h2d import H2DState, TokenRouting, h2d_quantize, partition
from h2dilr.services.checkpoint import Checkpoint
from h2dilr.services.runconfig import flatten_config, unflatten_config

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


@dataclass
class Stage1Model:
    config: RunConfig
    networks: SubjectNetworks
    state: H2DState

    @classmethod
    def create(cls, config: RunConfig, datasets: list[SubjectDataset]) -> "Stage1Model":
        """Fresh networks and codebooks for the subjects in ``datasets``."""
        configs = {d.subject: config.encoder_config(d.channels) for d in datasets}
        networks = init_parameters(configs, None, config.seed).networks
        state = H2DState.create(config.h2d, list(configs), config.seed)
        logger.info(
            "stage-1 model: %d network parameters, %d codes",
            sum(p.size for p in networks.parameters()),
            state.total_codes,
        )
        return cls(config, networks, state)

    @property
    def subjects(self) -> list[int]:
        return list(self.networks.configs)

    def freeze(self) -> "Stage1Model":
        """Stop gradients into every network and codebook."""
        self.networks.requires_grad_(False)
        for param in self.state.parameters():
            param.requires_grad = False
        return self

    def chunks(self, x: np.ndarray) -> Iterator[np.ndarray]:
        for start in range(0, x.shape[0], EVAL_CHUNK):
            yield x[start : start + EVAL_CHUNK]

    def quantize(self, x: np.ndarray, subject: int) -> tuple[np.ndarray, TokenRouting]:
        """Quantized tokens ``(N, L, D)`` and routing for ``(N, T, C_i)`` signals; usage is not counted."""
        z = self.networks.encode(Tensor(x), subject)
        routing = partition(z.data, self.state.shared, self.state.nu)
        quantized = h2d_quantize(z, routing, self.state, subject, count=False)
        return quantized.z_hat.data, quantized.routing

    def features(self, x: np.ndarray, subject: int, representation: Representation) -> np.ndarray:
        """Quantized tokens with the non-selected group's rows zeroed (positions kept)."""
        parts = []
        for block in self.chunks(x):
            z_hat, routing = self.quantize(block, subject)
            if representation is Representation.HOMO_ONLY:
                z_hat = np.where(routing.shared_mask[..., None], z_hat, 0.0)
            elif representation is Representation.HETERO_ONLY:
                z_hat = np.where(routing.private_mask[..., None], z_hat, 0.0)
            parts.append(z_hat.astype(np.float32))
        return np.concatenate(parts) if parts else np.zeros((0, 0, 0), dtype=np.float32)

    def reconstruct(self, x: np.ndarray, subject: int) -> np.ndarray:
        """Encode, quantize and decode ``(N, T, C_i)`` signals without counting usage."""
        out = []
        for block in self.chunks(x):
            z_hat, _ = self.quantize(block, subject)
            out.append(self.networks.decode_reconstruct(Tensor(z_hat), subject, block.shape[1]).data)
        return np.concatenate(out)

    def tensors(self, include_decoders: bool = True) -> dict[str, np.ndarray]:
        """Network and codebook tensors in checkpoint naming."""
        tensors = dict(self.networks.state_dict(include_decoders))
        for name, book in self.state.codebooks().items():
            tensors[f"{name}.codes"] = book.codes.data
            tensors[f"{name}.usage_count"] = book.usage_count.astype(np.float64)
            if book.update_mode is UpdateMode.EMA:
                tensors[f"{name}.ema_cluster_size"] = book.ema_cluster_size
                tensors[f"{name}.ema_embed_sum"] = book.ema_embed_sum
        return tensors

    def to_checkpoint(self, stage: Stage = Stage.H2D, include_decoders: bool = True, **extra: str) -> Checkpoint:
        return Checkpoint(
            stage=stage,
            channels=self.networks.channels,
            config=flatten_config(self.config),
            state={
                "paradigm": self.state.paradigm.value,
                "nu": repr(self.state.nu),
                **{k: str(v) for k, v in extra.items()},
            },
            tensors=self.tensors(include_decoders),
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "Stage1Model":
        """Rebuild networks and codebooks; decoders stay at init when the checkpoint dropped them."""
        config = unflatten_config(checkpoint.config)
        configs = {s: config.encoder_config(c) for s, c in sorted(checkpoint.channels.items())}
        networks = SubjectNetworks(configs, config.seed)
        networks.load_state_dict(checkpoint.tensors)
        state = H2DState.create(config.h2d, list(configs), config.seed)
        if Paradigm(checkpoint.state.get("paradigm", state.paradigm.value)) is not state.paradigm:
            raise CheckpointError("checkpoint paradigm does not match its config snapshot")
        for name, book in state.codebooks().items():
            _load_book(book, name, checkpoint.tensors)
        return cls(config, networks, state)


def _load_book(book: Codebook, name: str, tensors: dict[str, np.ndarray]) -> None:
    try:
        codes = tensors[f"{name}.codes"]
    except KeyError:
        raise CheckpointError(f"checkpoint is missing tensor '{name}.codes'") from None
    if codes.shape != book.codes.shape:
        raise CheckpointError(f"tensor '{name}.codes': shape {codes.shape} != expected {book.codes.shape}")
    book.codes.data = codes.copy()
    if f"{name}.usage_count" in tensors:
        book.usage_count = np.rint(tensors[f"{name}.usage_count"]).astype(np.int64)
    if book.update_mode is UpdateMode.EMA:
        book.ema_cluster_size = tensors.get(f"{name}.ema_cluster_size", np.ones(book.size)).copy()
        book.ema_embed_sum = tensors.get(f"{name}.ema_embed_sum", codes).copy()
