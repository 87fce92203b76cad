"""Checkpoint directories: a human-readable ``manifest`` plus a float32 ``blob``.

Manifest lines, in order::

    stage=h2d
    subject.<id>.channels=<C_i>
    config.<key>=<value>
    state.<key>=<value>
    tensor <name> <shape> <byte offset> <count>

Shapes are ``x``-joined extents (``scalar`` for 0-d). The blob is the
concatenation of every tensor as little-endian float32 in manifest order.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from h2dilr.core.errors import CheckpointError
from h2dilr.models.config import Stage

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f4")
MANIFEST = "manifest"
BLOB = "blob"


@dataclass
class Checkpoint:
    stage: Stage
    channels: dict[int, int]
    config: dict[str, str] = field(default_factory=dict)
    state: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def check_channels(self, expected: Mapping[int, int]) -> None:
        """Fail unless the channel registry matches ``expected`` subject by subject."""
        if dict(expected) != self.channels:
            ours = ", ".join(f"{s}:{c}" for s, c in sorted(self.channels.items()))
            theirs = ", ".join(f"{s}:{c}" for s, c in sorted(expected.items()))
            raise CheckpointError(
                f"channel registry mismatch: checkpoint has subjects [{ours}], data has [{theirs}]"
            )


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(n) for n in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(n) for n in text.split("x"))


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Write the manifest and the float32 blob; tensors are laid out back to back in mapping order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"stage={Stage(checkpoint.stage).value}"]
    lines += [f"subject.{s}.channels={c}" for s, c in sorted(checkpoint.channels.items())]
    lines += [f"config.{k}={v}" for k, v in checkpoint.config.items()]
    lines += [f"state.{k}={v}" for k, v in checkpoint.state.items()]
    chunks = []
    offset = 0
    for name, value in checkpoint.tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name '{name}' contains whitespace")
        data = np.ascontiguousarray(value, dtype=BLOB_DTYPE)
        if not np.all(np.isfinite(data)):
            raise CheckpointError(f"tensor '{name}' holds non-finite values")
        lines.append(f"tensor {name} {_shape_text(data.shape)} {offset} {data.size}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    (path / BLOB).write_bytes(b"".join(chunks))
    logger.info("saved %s checkpoint (%d tensors) to %s", Stage(checkpoint.stage).value, len(chunks), path)
    return path


def load_checkpoint(path: Path, channels: Mapping[int, int] | None = None) -> Checkpoint:
    """Read a checkpoint; with ``channels`` given, also verify the subject registry."""
    path = Path(path)
    if not (path / MANIFEST).is_file() or not (path / BLOB).is_file():
        raise CheckpointError(f"{path}: not a checkpoint (needs {MANIFEST} and {BLOB})")
    blob = (path / BLOB).read_bytes()
    stage = None
    registry: dict[int, int] = {}
    config: dict[str, str] = {}
    state: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    described = 0
    for number, line in enumerate((path / MANIFEST).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("tensor "):
            try:
                _, name, shape_text, offset_text, count_text = line.split()
                shape, offset, count = _parse_shape(shape_text), int(offset_text), int(count_text)
            except ValueError:
                raise CheckpointError(f"{path}: malformed tensor line {number}: {line!r}") from None
            if int(np.prod(shape)) != count:
                raise CheckpointError(f"tensor '{name}': shape {shape} does not hold {count} values")
            end = offset + count * BLOB_DTYPE.itemsize
            if end > len(blob):
                raise CheckpointError(
                    f"tensor '{name}': blob truncated (needs bytes {offset}..{end}, blob has {len(blob)})"
                )
            described = max(described, end)
            data = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset)
            tensors[name] = data.astype(np.float64).reshape(shape)
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed manifest line {number}: {line!r}")
        if key == "stage":
            stage = Stage(value)
        elif key.startswith("subject.") and key.endswith(".channels"):
            registry[int(key[len("subject.") : -len(".channels")])] = int(value)
        elif key.startswith("config."):
            config[key[len("config.") :]] = value
        elif key.startswith("state."):
            state[key[len("state.") :]] = value
        else:
            raise CheckpointError(f"{path}: unknown manifest key '{key}' on line {number}")
    if stage is None:
        raise CheckpointError(f"{path}: manifest has no stage")
    if described != len(blob):
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes but the manifest describes {described}")
    checkpoint = Checkpoint(stage, registry, config, state, tensors)
    if channels is not None:
        checkpoint.check_channels(channels)
    logger.info("loaded %s checkpoint from %s", stage.value, path)
    return checkpoint
