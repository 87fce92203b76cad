"""Run configuration and domain records."""

from h2dilr.models.config import (
    DataConfig,
    DecoderHeadConfig,
    EncoderConfig,
    GenSpec,
    H2DConfig,
    LabelKind,
    ModelConfig,
    Paradigm,
    Representation,
    RunConfig,
    Stage,
    TrainConfig,
)
from h2dilr.models.records import CodeAssignment, CodeEntry, RecordingSample, RunMetrics, SubjectDataset

__all__ = [
    "CodeAssignment",
    "CodeEntry",
    "DataConfig",
    "DecoderHeadConfig",
    "EncoderConfig",
    "GenSpec",
    "H2DConfig",
    "LabelKind",
    "ModelConfig",
    "Paradigm",
    "RecordingSample",
    "Representation",
    "RunConfig",
    "RunMetrics",
    "Stage",
    "SubjectDataset",
    "TrainConfig",
]
