"""On-disk dataset format.

One directory per subject (``subject_<id>``) holding:

- ``meta``: key=value lines (subject, channels, segment_length, samples, seed)
- ``signals``: little-endian float32, samples ordered by trial, each row-major T x C_i
- ``labels``: ``trial,tone`` header then one row per trial
"""

import csv
import logging
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

from h2dilr.core.errors import DatasetError
from h2dilr.models.records import RecordingSample, SubjectDataset

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f4")


def subject_dir(root: Path, subject: int) -> Path:
    """Directory holding one subject's arrays."""
    return Path(root) / f"subject_{subject}"


def write_dataset(dataset: SubjectDataset, root: Path, seed: int) -> Path:
    """Write one subject's signals, tones and metadata under ``root``."""
    path = subject_dir(root, dataset.subject)
    path.mkdir(parents=True, exist_ok=True)
    ordered = sorted(dataset.samples, key=lambda s: s.trial)
    meta = {
        "subject": dataset.subject,
        "channels": dataset.channels,
        "segment_length": dataset.segment_length,
        "samples": len(ordered),
        "seed": seed,
    }
    (path / "meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    blob = np.stack([s.signal for s in ordered]) if ordered else np.zeros(0)
    (path / "signals").write_bytes(np.ascontiguousarray(blob, dtype=BLOB_DTYPE).tobytes())
    with open(path / "labels", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["trial", "tone"])
        writer.writerows((s.trial, s.tone) for s in ordered)
    logger.info("wrote subject %d (%d samples) to %s", dataset.subject, len(ordered), path)
    return path


def write_datasets(datasets: list[SubjectDataset], root: Path, seed: int) -> list[Path]:
    """Write every subject; returns the subject directories."""
    return [write_dataset(d, root, seed) for d in sorted(datasets, key=lambda d: d.subject)]


def _meta_int(meta: dict, key: str, path: Path) -> int:
    try:
        return int(meta[key])
    except (KeyError, TypeError, ValueError):
        raise DatasetError(f"{path}: meta is missing a valid '{key}'") from None


def read_dataset(path: Path) -> SubjectDataset:
    """Read one subject directory, checking array sizes against its metadata."""
    path = Path(path)
    if not (path / "meta").is_file():
        raise DatasetError(f"{path}: no dataset here (missing meta)")
    meta = dotenv_values(path / "meta")
    subject = _meta_int(meta, "subject", path)
    channels = _meta_int(meta, "channels", path)
    length = _meta_int(meta, "segment_length", path)
    count = _meta_int(meta, "samples", path)

    raw = np.frombuffer((path / "signals").read_bytes(), dtype=BLOB_DTYPE)
    if raw.size != count * length * channels:
        raise DatasetError(
            f"{path}: signals hold {raw.size} floats, meta promises {count} x {length} x {channels}"
        )
    with open(path / "labels", newline="") as handle:
        rows = list(csv.DictReader(handle))
    if len(rows) != count:
        raise DatasetError(f"{path}: labels has {len(rows)} rows, meta promises {count}")
    signals = raw.astype(np.float64).reshape(count, length, channels)
    samples = [
        RecordingSample(signal=signals[i], tone=int(row["tone"]), subject=subject, trial=int(row["trial"]))
        for i, row in enumerate(rows)
    ]
    return SubjectDataset(subject=subject, channels=channels, segment_length=length, samples=samples)


def read_datasets(root: Path) -> list[SubjectDataset]:
    """Every ``subject_<id>`` directory under ``root``, ordered by id."""
    root = Path(root)
    found = [p for p in root.glob("subject_*") if p.name[8:].isdigit()] if root.is_dir() else []
    dirs = sorted(found, key=lambda p: int(p.name[8:]))
    if not dirs:
        raise DatasetError(f"no datasets found under {root} (expected subject_<id> directories)")
    datasets = [read_dataset(d) for d in dirs]
    logger.info("loaded %d subject datasets from %s", len(datasets), root)
    return datasets
