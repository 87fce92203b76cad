"""Run configuration schemas.

A run is described by one flat key=value document; each dotted prefix maps to
one of the sections below. All sections forbid unknown fields.
"""

from enum import Enum
from typing import Annotated, Any

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator

N_TONES = 4


class Paradigm(str, Enum):
    """Stage-1 learning paradigm."""

    H2D = "h2d"
    UPANT = "upant"
    HETEROGENEOUS = "heterogeneous"


class Stage(str, Enum):
    """Pipeline stage tag."""

    H2D = "h2d"
    DECODE = "decode"
    SUBJECT_PROBE = "subject_probe"


class LabelKind(str, Enum):
    """Target of a stage-2 classifier."""

    TONE = "tone"
    SUBJECT = "subject"


class Representation(str, Enum):
    """Which quantized token groups reach the stage-2 classifier."""

    FULL = "full"
    HOMO_ONLY = "homo_only"
    HETERO_ONLY = "hetero_only"


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _none_token(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("", "none", "null"):
        return None
    return value


IntList = Annotated[list[int], BeforeValidator(_split_csv)]
FloatPair = Annotated[tuple[float, float], BeforeValidator(_split_csv)]
OptionalFloat = Annotated[float | None, BeforeValidator(_none_token)]
OptionalInt = Annotated[int | None, BeforeValidator(_none_token)]
OptionalStr = Annotated[str | None, BeforeValidator(_none_token)]


class Section(BaseModel):
    """Base for config sections."""

    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)


class DataConfig(Section):
    """Synthetic data generation (keys data.*)."""

    channels: IntList = Field(default_factory=lambda: [12, 19, 27, 33])
    segment_length: int = Field(default=1000, ge=16)
    samples_per_class: int = Field(default=250, ge=1)
    snr_db: OptionalFloat = 6.0
    homogeneous_gain: float = Field(default=1.0, ge=0.0)
    signature_gain: float = Field(default=1.0, ge=0.0)
    harmonics: int = Field(default=2, ge=1)
    max_condition: float = Field(default=20.0, gt=1.0)
    subjects_used: OptionalInt = None
    dir: OptionalStr = None

    @property
    def n_sources(self) -> int:
        """Homogeneous source rows: contour plus one chirp per harmonic."""
        return 1 + self.harmonics

    @model_validator(mode="after")
    def _check_channels(self) -> "DataConfig":
        if len(self.channels) < 2:
            raise ValueError("at least 2 subjects are required")
        if len(set(self.channels)) < 2:
            raise ValueError(f"subjects must differ in channel count, got {self.channels}")
        too_small = [c for c in self.channels if c < self.n_sources]
        if too_small:
            raise ValueError(
                f"channel counts {too_small} are below the {self.n_sources} homogeneous sources"
            )
        if self.subjects_used is not None and not 1 <= self.subjects_used <= len(self.channels):
            raise ValueError(f"subjects_used must be in 1..{len(self.channels)}")
        return self


class GenSpec(DataConfig):
    """Data config bound to the run seed."""

    seed: int = 0

    @property
    def n_subjects(self) -> int:
        return len(self.channels)


class EncoderConfig(Section):
    """Per-subject ConvNet VQ encoder geometry."""

    in_channels: int = Field(ge=1)
    stem_channels: int = 64
    stage_channels: IntList = Field(default_factory=lambda: [128, 256, 512])
    kernel: int = 4
    stride: int = 2
    pool: int = 2
    latent_dim: int = 256

    @model_validator(mode="after")
    def _check(self) -> "EncoderConfig":
        if self.kernel < self.stride:
            raise ValueError("kernel must be at least the stride")
        if not self.stage_channels:
            raise ValueError("stage_channels must not be empty")
        return self

    @property
    def min_segment_length(self) -> int:
        return self.stride * self.pool ** len(self.stage_channels)


class DecoderHeadConfig(Section):
    """Transformer neural decoder geometry."""

    latent_dim: int = 256
    patch_kernel: int = 5
    patch_stride: int = 5
    embed_dim: int = 128
    ffn_dim: int = 512
    blocks: int = 4
    heads: int = 4
    classes: int = N_TONES
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    rel_pos_all_blocks: bool = False
    rel_pos_max_distance: int = 16

    @model_validator(mode="after")
    def _check(self) -> "DecoderHeadConfig":
        if self.patch_stride != self.patch_kernel:
            raise ValueError("patches must not overlap: patch_stride must equal patch_kernel")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        return self


class ModelConfig(Section):
    """Network widths and depths (keys model.*)."""

    stem_channels: int = 64
    stage_channels: IntList = Field(default_factory=lambda: [128, 256, 512])
    kernel: int = 4
    stride: int = 2
    patch_kernel: int = 5
    patch_stride: int = 5
    embed_dim: int = 128
    ffn_dim: int = 512
    blocks: int = 4
    heads: int = 4
    dropout: float = 0.1
    rel_pos_all_blocks: bool = False
    rel_pos_max_distance: int = 16


class H2DConfig(Section):
    """Codebooks and disentanglement (keys h2d.*)."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    paradigm: Paradigm = Paradigm.H2D
    nu: float = Field(default=0.5, ge=0.0, le=1.0)
    alpha: float = Field(default=0.99, ge=0.0, lt=1.0)
    beta: float = Field(default=0.25, ge=0.0)
    k_private: int = Field(default=32, ge=1, alias="K_private")
    code_dim: int = Field(default=256, ge=1)
    epsilon: float = Field(default=1e-5, gt=0.0)
    upant_codebook_size: OptionalInt = None
    data_init: bool = False
    reseed_after: OptionalInt = None


class TrainConfig(Section):
    """Optimisation schedule (keys train.*)."""

    stage: Stage = Stage.H2D
    pretrain_epochs: int = Field(default=1000, ge=0)
    decoder_epochs: int = Field(default=40, ge=1)
    batch_size: int = Field(default=32, ge=1)
    pretrain_lr: float = Field(default=5e-5, ge=0.0)
    decoder_lr: float = Field(default=5e-5, ge=0.0)
    betas: FloatPair = (0.9, 0.999)
    weight_decay: float = Field(default=0.01, ge=0.0)
    seeds: IntList = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    include_val: bool = False
    eval_every: int = Field(default=1, ge=1)


class RunConfig(Section):
    """Complete experiment description."""

    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    h2d: H2DConfig = Field(default_factory=H2DConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def gen_spec(self) -> GenSpec:
        """Data section bound to the run seed."""
        return GenSpec(**self.data.model_dump(), seed=self.seed)

    def encoder_config(self, in_channels: int) -> EncoderConfig:
        return EncoderConfig(
            in_channels=in_channels,
            stem_channels=self.model.stem_channels,
            stage_channels=self.model.stage_channels,
            kernel=self.model.kernel,
            stride=self.model.stride,
            latent_dim=self.h2d.code_dim,
        )

    def head_config(self, classes: int) -> DecoderHeadConfig:
        return DecoderHeadConfig(
            latent_dim=self.h2d.code_dim,
            patch_kernel=self.model.patch_kernel,
            patch_stride=self.model.patch_stride,
            embed_dim=self.model.embed_dim,
            ffn_dim=self.model.ffn_dim,
            blocks=self.model.blocks,
            heads=self.model.heads,
            classes=classes,
            dropout=self.model.dropout,
            rel_pos_all_blocks=self.model.rel_pos_all_blocks,
            rel_pos_max_distance=self.model.rel_pos_max_distance,
        )

    def with_updates(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with per-section field updates, re-validated."""
        payload = self.model_dump(by_alias=True)
        for name, updates in sections.items():
            if isinstance(payload.get(name), dict):
                fields = type(getattr(self, name)).model_fields
                payload[name].update(
                    {(fields[k].alias or k) if k in fields else k: v for k, v in updates.items()}
                )
            else:
                payload[name] = updates
        return RunConfig.model_validate(payload)
