"""Per-subject ConvNet VQ encoders and decoders.

Signals travel as ``(N, T, C_i)`` arrays; the networks work channel-first
internally and emit ``(N, L, D)`` token sequences.
"""

import logging
from collections.abc import Mapping

import numpy as np

from h2dilr.autodiff import ops
from h2dilr.autodiff.tensor import Parameter, Tensor
from h2dilr.core.errors import CheckpointError, ShapeError, SubjectError
from h2dilr.core.seeding import derive_rng
from h2dilr.models.config import EncoderConfig
from h2dilr.networks.layers import Conv1d, ConvTranspose1d, Module

logger = logging.getLogger(__name__)


class ConvEncoder(Module):
    """Stem conv, pooled conv blocks, then a linear conv to the latent width."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.stem = Conv1d(config.in_channels, config.stem_channels, config.kernel, config.stride, rng)
        widths = [config.stem_channels, *config.stage_channels]
        self.blocks = [Conv1d(c_in, c_out, config.kernel, 1, rng) for c_in, c_out in zip(widths, widths[1:])]
        self.head = Conv1d(widths[-1], config.latent_dim, config.kernel, 1, rng, gain=1.0)

    def extents(self, length: int) -> list[int]:
        """Temporal lengths: input, after the stem, then after each pool."""
        lengths = [length, self.stem.output_length(length)]
        for _ in self.blocks:
            lengths.append(lengths[-1] // self.config.pool)
        return lengths

    def token_count(self, length: int) -> int:
        """Tokens per segment of ``length`` samples."""
        return self.extents(length)[-1]

    def __call__(self, x: Tensor) -> Tensor:
        """``(N, C_i, T)`` -> ``(N, D, L)``."""
        length = x.shape[2]
        if length < self.config.min_segment_length:
            raise ShapeError(
                f"encode: segment length {length} is below the receptive minimum {self.config.min_segment_length}"
            )
        h = ops.relu(self.stem(x))
        for block in self.blocks:
            h = ops.avg_pool1d(ops.relu(block(h)), self.config.pool)
        return self.head(h)


class ConvDecoder(Module):
    """Transpose-conv mirror of ConvEncoder; the output layer is linear."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        widths = [config.stem_channels, *config.stage_channels]
        self.head = ConvTranspose1d(config.latent_dim, widths[-1], config.kernel, 1, rng)
        self.blocks = [
            ConvTranspose1d(c_in, c_out, config.kernel, config.pool, rng)
            for c_in, c_out in zip(widths[::-1], widths[-2::-1])
        ]
        self.out = ConvTranspose1d(config.stem_channels, config.in_channels, config.kernel, config.stride, rng, gain=1.0)

    def __call__(self, z: Tensor, extents: list[int]) -> Tensor:
        """``(N, D, L)`` -> ``(N, C_i, T)`` following the encoder's recorded extents."""
        if z.shape[2] != extents[-1]:
            raise ShapeError(f"decode: got {z.shape[2]} tokens, encoder geometry gives {extents[-1]}")
        h = ops.relu(self.head(z, extents[-1]))
        for block, target in zip(self.blocks, extents[-2:0:-1]):
            h = ops.relu(block(h, target))
        return self.out(h, extents[0])


class SubjectNetworks:
    """Encoder/decoder pairs keyed by subject id, plus the channel registry."""

    def __init__(self, configs: Mapping[int, EncoderConfig], seed: int):
        self.configs = dict(sorted(configs.items()))
        self.encoders: dict[int, ConvEncoder] = {}
        self.decoders: dict[int, ConvDecoder] = {}
        for subject, config in self.configs.items():
            self.encoders[subject] = ConvEncoder(config, derive_rng(seed, "init", "encoder", subject))
            self.decoders[subject] = ConvDecoder(config, derive_rng(seed, "init", "decoder", subject))
            self.encoders[subject].name_parameters(f"encoder.{subject}")
            self.decoders[subject].name_parameters(f"decoder.{subject}")

    @property
    def channels(self) -> dict[int, int]:
        return {subject: config.in_channels for subject, config in self.configs.items()}

    def _check(self, subject: int, x: Tensor) -> None:
        if subject not in self.configs:
            raise SubjectError(f"subject {subject} is not registered (registered: {sorted(self.configs)})")
        expected = self.configs[subject].in_channels
        if x.ndim != 3 or x.shape[2] != expected:
            raise ShapeError(f"subject {subject}: expected (N, T, {expected}) signals, got {x.shape}")

    def token_count(self, subject: int, length: int) -> int:
        """Tokens ``subject``'s encoder emits for a segment of ``length`` samples."""
        return self.encoders[subject].token_count(length)

    def encode(self, x: Tensor, subject: int) -> Tensor:
        """``(N, T, C_i)`` -> ``(N, L, D)``."""
        self._check(subject, x)
        return self.encoders[subject](x.transpose(0, 2, 1)).transpose(0, 2, 1)

    def decode_reconstruct(self, z_hat: Tensor, subject: int, length: int) -> Tensor:
        """``(N, L, D)`` -> ``(N, T, C_i)`` for segment length ``length``."""
        if subject not in self.configs:
            raise SubjectError(f"subject {subject} is not registered (registered: {sorted(self.configs)})")
        extents = self.encoders[subject].extents(length)
        if z_hat.ndim != 3 or z_hat.shape[2] != self.configs[subject].latent_dim:
            raise ShapeError(
                f"decode: expected (N, {extents[-1]}, {self.configs[subject].latent_dim}) latents, got {z_hat.shape}"
            )
        return self.decoders[subject](z_hat.transpose(0, 2, 1), extents).transpose(0, 2, 1)

    def parameters(self, subject: int | None = None) -> list[Parameter]:
        """Encoder and decoder parameters of one subject, or of all."""
        subjects = self.configs if subject is None else [subject]
        params: list[Parameter] = []
        for s in subjects:
            params.extend(self.encoders[s].parameters())
            params.extend(self.decoders[s].parameters())
        return params

    def requires_grad_(self, flag: bool) -> "SubjectNetworks":
        for s in self.configs:
            self.encoders[s].requires_grad_(flag)
            self.decoders[s].requires_grad_(flag)
        return self

    def state_dict(self, include_decoders: bool = True) -> dict[str, np.ndarray]:
        """Tensors keyed ``encoder.<s>.*`` and, optionally, ``decoder.<s>.*``."""
        modules = list(self.encoders.values())
        if include_decoders:
            modules += list(self.decoders.values())
        return {p.name: p.data for module in modules for p in module.parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Load encoders (required) and decoders (when present)."""
        for kind, modules in (("encoder", self.encoders), ("decoder", self.decoders)):
            for subject, module in modules.items():
                prefix = f"{kind}.{subject}."
                own = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
                if not own and kind == "decoder":
                    logger.info("no decoder tensors for subject %d; decoder left at init", subject)
                    continue
                if not own:
                    raise CheckpointError(f"checkpoint has no {kind} tensors for subject {subject}")
                module.load_state_dict(own)
                module.name_parameters(f"{kind}.{subject}")
