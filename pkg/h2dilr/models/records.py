"""Domain records: recordings, datasets, run metrics and code assignments."""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator

from h2dilr.models.config import N_TONES

UNUSED = "unused"


class RecordingSample(BaseModel):
    """One segment: ``signal`` is T x C_i, tone in 1..4."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    signal: np.ndarray
    tone: int = Field(ge=1, le=N_TONES)
    subject: int = Field(ge=0)
    trial: int = Field(ge=0)

    @field_validator("signal")
    @classmethod
    def _two_dimensional(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ValueError(f"signal must be T x C, got shape {value.shape}")
        return value


class SubjectDataset(BaseModel):
    """All recordings of one subject (X_i with labels)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    subject: int = Field(ge=0)
    channels: int = Field(ge=1)
    segment_length: int = Field(ge=1)
    samples: list[RecordingSample] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def signals(self) -> np.ndarray:
        """``(N, T, C_i)`` stack."""
        if not self.samples:
            return np.zeros((0, self.segment_length, self.channels))
        return np.stack([s.signal for s in self.samples])

    def tones(self) -> np.ndarray:
        return np.array([s.tone for s in self.samples], dtype=np.int64)

    def trials(self) -> np.ndarray:
        return np.array([s.trial for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "SubjectDataset":
        """Samples at ``indices``, in that order."""
        return self.model_copy(update={"samples": [self.samples[i] for i in indices]})

    def with_tones(self, tones: np.ndarray) -> "SubjectDataset":
        """Copy with replaced labels (shuffled-label controls)."""
        samples = [s.model_copy(update={"tone": int(t)}) for s, t in zip(self.samples, tones)]
        return self.model_copy(update={"samples": samples})


class RunMetrics(BaseModel):
    """Accuracy over seeds; std is the population std (ddof 0)."""

    seeds: list[int]
    accuracies: list[float]

    @field_validator("accuracies")
    @classmethod
    def _bounded(cls, value: list[float]) -> list[float]:
        if any(not 0.0 <= a <= 1.0 for a in value):
            raise ValueError(f"accuracies must lie in [0, 1], got {value}")
        return value

    @computed_field
    @property
    def n_seeds(self) -> int:
        return len(self.accuracies)

    @computed_field
    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @computed_field
    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else float("nan")

    def describe(self) -> str:
        return f"{100 * self.mean:.2f} ± {100 * self.std:.2f}"


class CodeEntry(BaseModel):
    codebook: str
    index: int
    assigned: int | Literal["unused"]
    histogram: list[int]

    @property
    def count(self) -> int:
        return sum(self.histogram)


class CodeAssignment(BaseModel):
    """Per-code tone histograms and the majority tone (ties to the lower tone)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    entries: list[CodeEntry]
    embeddings: dict[str, np.ndarray] = Field(default_factory=dict)

    def for_book(self, codebook: str) -> list[CodeEntry]:
        return [e for e in self.entries if e.codebook == codebook]

    @property
    def books(self) -> list[str]:
        return list(dict.fromkeys(e.codebook for e in self.entries))

    def total_tokens(self, codebook: str | None = None) -> int:
        entries = self.entries if codebook is None else self.for_book(codebook)
        return sum(e.count for e in entries)
