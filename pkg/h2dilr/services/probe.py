"""Evaluation probes: accuracy, reconstruction, code assignment, disentanglement reports and sweeps."""

import csv
import io
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import entropy

from h2dilr.core.errors import ConfigError, DatasetError
from h2dilr.models.config import N_TONES, LabelKind, Paradigm, Representation, RunConfig
from h2dilr.models.records import UNUSED, CodeAssignment, CodeEntry, RunMetrics, SubjectDataset
from h2dilr.quantization.h2d import n_shared
from h2dilr.services.checkpoint import Checkpoint
from h2dilr.services.pipeline import pretrain_h2d, split_all, top1_accuracy, train_decoder
from h2dilr.services.runconfig import apply_overrides
from h2dilr.services.tokenizer import EVAL_CHUNK, Stage1Model

logger = logging.getLogger(__name__)

__all__ = [
    "DisentanglementReport",
    "SweepPoint",
    "assign_codes",
    "compare_paradigms",
    "conditional_tone_entropy",
    "disentanglement_report",
    "export_embeddings",
    "reconstruction_mse",
    "sweep",
    "top1_accuracy",
]

REPORT_REPRESENTATIONS = (Representation.HOMO_ONLY, Representation.HETERO_ONLY, Representation.FULL)
REPORT_LABELS = (LabelKind.TONE, LabelKind.SUBJECT)
DEFAULT_NUS = (0.25, 0.5, 0.75, 1.0)


def _as_list(datasets: SubjectDataset | Sequence[SubjectDataset]) -> list[SubjectDataset]:
    return [datasets] if isinstance(datasets, SubjectDataset) else list(datasets)


def reconstruction_mse(model: Stage1Model, datasets: SubjectDataset | Sequence[SubjectDataset]) -> float:
    """Mean of (x - x_hat)^2 over every sample, timestep and channel."""
    total, count = 0.0, 0
    for dataset in _as_list(datasets):
        if not len(dataset):
            continue
        x = dataset.signals()
        x_hat = model.reconstruct(x, dataset.subject)
        total += float(((x - x_hat) ** 2).sum())
        count += x.size
    if not count:
        raise DatasetError("reconstruction_mse: no samples")
    return total / count


def _entries(name: str, histogram: np.ndarray) -> list[CodeEntry]:
    """One CodeEntry per row of a (K, 4) tone histogram."""
    entries = []
    for index, row in enumerate(histogram):
        assigned = int(np.argmax(row)) + 1 if row.sum() else UNUSED
        entries.append(CodeEntry(codebook=name, index=index, assigned=assigned, histogram=row.tolist()))
    return entries


def assign_codes(model: Stage1Model, datasets: SubjectDataset | Sequence[SubjectDataset]) -> CodeAssignment:
    """Tally which tones each code quantizes, shared and private books separately."""
    books = model.state.codebooks()
    histograms = {name: np.zeros((book.size, N_TONES), dtype=np.int64) for name, book in books.items()}
    shared = model.state.shared
    for dataset in _as_list(datasets):
        tones = dataset.tones() - 1
        for start, x in zip(range(0, len(dataset), EVAL_CHUNK), model.chunks(dataset.signals())):
            _, routing = model.quantize(x, dataset.subject)
            tone = np.broadcast_to(tones[start : start + x.shape[0], None], routing.shared_mask.shape)
            if shared is not None:
                mask = routing.shared_mask
                np.add.at(histograms[shared.name], (routing.shared_index[mask], tone[mask]), 1)
            if dataset.subject in model.state.privates:
                mask = routing.private_mask
                name = model.state.privates[dataset.subject].name
                np.add.at(histograms[name], (routing.private_index[mask], tone[mask]), 1)
    entries = [entry for name, hist in histograms.items() for entry in _entries(name, hist)]
    embeddings = {name: book.codes.data.astype(np.float32) for name, book in books.items()}
    return CodeAssignment(entries=entries, embeddings=embeddings)


def assignments_csv(assignment: CodeAssignment) -> str:
    """One row per code: book, index, majority tone, use count and the tone histogram."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["codebook", "index", "assigned", "count", *(f"tone{t}" for t in range(1, N_TONES + 1))])
    for entry in assignment.entries:
        writer.writerow([entry.codebook, entry.index, entry.assigned, entry.count, *entry.histogram])
    return out.getvalue()


def conditional_tone_entropy(assignment: CodeAssignment, book_prefix: str) -> float:
    """H(tone | code) in bits over the codes of every book whose name starts with ``book_prefix``."""
    entries = [e for e in assignment.entries if e.codebook.startswith(book_prefix) and e.count]
    total = sum(e.count for e in entries)
    if not total:
        raise DatasetError(f"no tokens were quantized by books matching '{book_prefix}'")
    return float(sum(e.count / total * entropy(e.histogram, base=2) for e in entries))


def _format_value(value: float) -> str:
    return np.format_float_positional(np.float32(value), unique=True, trim="-")


def export_embeddings(
    model: Stage1Model, datasets: SubjectDataset | Sequence[SubjectDataset], path: Path
) -> tuple[Path, Path]:
    """Write ``codes.csv`` (one row per code) and ``samples.csv`` (token-pooled representations).

    Values are the shortest decimal strings that parse back to the stored float32.
    """
    datasets = _as_list(datasets)
    path = Path(path)
    assignment = assign_codes(model, datasets)
    dim = model.state.codebooks()[assignment.books[0]].dim
    codes = io.StringIO()
    writer = csv.writer(codes, lineterminator="\n")
    writer.writerow(["codebook", "index", "assigned", *(f"e{j}" for j in range(dim))])
    for entry in assignment.entries:
        vector = assignment.embeddings[entry.codebook][entry.index]
        writer.writerow([entry.codebook, entry.index, entry.assigned, *map(_format_value, vector)])

    samples = io.StringIO()
    writer = csv.writer(samples, lineterminator="\n")
    writer.writerow(["subject", "trial", "tone", *(f"p{j}" for j in range(dim))])
    for dataset in datasets:
        pooled = model.features(dataset.signals(), dataset.subject, Representation.FULL).mean(axis=1)
        for sample, row in zip(dataset.samples, pooled):
            writer.writerow([sample.subject, sample.trial, sample.tone, *map(_format_value, row)])

    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "codes.csv").write_text(codes.getvalue())
        (path / "samples.csv").write_text(samples.getvalue())
    except OSError as exc:
        raise DatasetError(f"cannot write embeddings to {path}: {exc}") from exc
    logger.info("exported %d codes to %s", len(assignment.entries), path)
    return path / "codes.csv", path / "samples.csv"


@dataclass
class DisentanglementReport:
    """Probe accuracies keyed by (nu, representation, label kind); ``None`` marks an impossible cell."""

    cells: dict[tuple[float, Representation, LabelKind], RunMetrics | None] = field(default_factory=dict)
    expected: list[tuple[float, Representation, LabelKind]] = field(default_factory=list)

    @property
    def nus(self) -> list[float]:
        return sorted({key[0] for key in self.expected})

    def cell(self, nu: float, representation: Representation, label: LabelKind) -> RunMetrics | None:
        key = (nu, Representation(representation), LabelKind(label))
        if key not in self.cells:
            raise ConfigError(f"missing probe run: nu={nu} {key[1].value}/{key[2].value}")
        return self.cells[key]

    def check(self) -> None:
        """Fail if an expected cell was never filled."""
        missing = [k for k in self.expected if k not in self.cells]
        if missing:
            listed = ", ".join(f"nu={nu} {r.value}/{lab.value}" for nu, r, lab in missing)
            raise ConfigError(f"missing probe runs: {listed}")

    def to_text(self) -> str:
        """Aligned table, one row per (nu, representation), '-' for impossible cells."""
        self.check()
        header = ["nu", "representation", *(label.value for label in REPORT_LABELS)]
        rows = []
        for nu in self.nus:
            for rep in REPORT_REPRESENTATIONS:
                if not any((nu, rep, label) in self.cells for label in REPORT_LABELS):
                    continue
                values = []
                for label in REPORT_LABELS:
                    metrics = self.cells.get((nu, rep, label))
                    values.append("-" if metrics is None else metrics.describe())
                rows.append([f"{nu:g}", rep.value, *values])
        widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
        lines = ["  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip() for row in [header, *rows]]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        self.check()
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["nu", "representation", "label", "n_seeds", "mean", "std", "accuracies"])
        ordered = sorted(self.cells.items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2].value))
        for (nu, rep, label), metrics in ordered:
            if metrics is None:
                writer.writerow([f"{nu:g}", rep.value, label.value, 0, "-", "-", ""])
            else:
                accuracies = ";".join(f"{a:.6f}" for a in metrics.accuracies)
                writer.writerow(
                    [f"{nu:g}", rep.value, label.value, metrics.n_seeds]
                    + [f"{metrics.mean:.6f}", f"{metrics.std:.6f}", accuracies]
                )
        return out.getvalue()

    def write(self, out_dir: Path) -> tuple[Path, Path]:
        """Write the table and the CSV under ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path, csv_path = out_dir / "report.txt", out_dir / "report.csv"
        text_path.write_text(self.to_text())
        csv_path.write_text(self.to_csv())
        return text_path, csv_path


def _available(representation: Representation, nu: float, n_tokens: int) -> bool:
    """Whether the representation keeps any tokens at this nu."""
    shared = n_shared(nu, n_tokens)
    if representation is Representation.HOMO_ONLY:
        return shared > 0
    if representation is Representation.HETERO_ONLY:
        return shared < n_tokens
    return True


def _probe_cells(
    report: DisentanglementReport,
    config: RunConfig,
    checkpoint: Checkpoint,
    datasets: Sequence[SubjectDataset],
    seeds: Sequence[int],
    representations: Sequence[Representation],
) -> None:
    model = Stage1Model.from_checkpoint(checkpoint)
    per_subject = model.state.paradigm is Paradigm.HETEROGENEOUS
    nu = model.state.nu
    subject = model.subjects[0]
    n_tokens = model.networks.token_count(subject, next(d for d in datasets if d.subject == subject).segment_length)
    for rep in representations:
        for label in REPORT_LABELS:
            report.expected.append((nu, rep, label))
            # per-subject classifiers cannot separate subjects
            if not _available(rep, nu, n_tokens) or (per_subject and label is LabelKind.SUBJECT):
                report.cells[(nu, rep, label)] = None
                continue
            accuracies = [
                train_decoder(config, checkpoint, datasets, label, rep, seed=seed).metrics.test_acc for seed in seeds
            ]
            report.cells[(nu, rep, label)] = RunMetrics(seeds=list(seeds), accuracies=accuracies)
            logger.info("probe nu=%g %s/%s: %s", nu, rep.value, label.value, report.cells[(nu, rep, label)].describe())


def disentanglement_report(
    config: RunConfig,
    checkpoint: Checkpoint,
    datasets: Sequence[SubjectDataset],
    seeds: Sequence[int],
    nus: Sequence[float] | None = None,
) -> DisentanglementReport:
    """{homo_only, hetero_only, full} x {tone, subject} probes on ``checkpoint``.

    With ``nus``, stage 1 is re-run at each partition factor and the homo/hetero
    cells are added per factor; factors that leave a group empty get ``-`` cells.
    """
    if not seeds:
        raise ConfigError("disentanglement_report needs at least one seed")
    report = DisentanglementReport()
    _probe_cells(report, config, checkpoint, datasets, seeds, REPORT_REPRESENTATIONS)
    base_nu = report.expected[0][0]
    for nu in nus or ():
        if nu == base_nu:
            continue
        swept = config.with_updates(h2d={"nu": nu, "paradigm": Paradigm.H2D})
        stage1 = pretrain_h2d(swept, datasets).checkpoint
        _probe_cells(report, swept, stage1, datasets, seeds, REPORT_REPRESENTATIONS[:2])
    report.check()
    return report


def compare_paradigms(
    config: RunConfig, datasets: Sequence[SubjectDataset], seeds: Sequence[int]
) -> dict[Paradigm, RunMetrics]:
    """Tone accuracy per learning paradigm; each seed re-runs both stages."""
    results = {}
    for paradigm in Paradigm:
        accuracies = []
        for seed in seeds:
            run = config.with_updates(seed=seed, h2d={"paradigm": paradigm})
            stage1 = pretrain_h2d(run, datasets).checkpoint
            accuracies.append(train_decoder(run, stage1, datasets).metrics.test_acc)
        results[paradigm] = RunMetrics(seeds=list(seeds), accuracies=accuracies)
        logger.info("paradigm %s: tone acc %s", paradigm.value, results[paradigm].describe())
    return results


@dataclass
class SweepPoint:
    value: Any
    reconstruction: list[float]
    accuracy: RunMetrics

    @property
    def mean_reconstruction(self) -> float:
        return float(np.mean(self.reconstruction))


def sweep(
    config: RunConfig, datasets: Sequence[SubjectDataset], key: str, values: Sequence[Any], seeds: Sequence[int]
) -> list[SweepPoint]:
    """Re-run both stages for each value of one dotted config key.

    Reports held-out (test split) reconstruction MSE and tone accuracy per value.
    """
    points = []
    for value in values:
        mses, accuracies = [], []
        for seed in seeds:
            run = apply_overrides(config, {key: value, "seed": seed})
            result = pretrain_h2d(run, datasets)
            used = [d for d in datasets if d.subject in result.model.networks.configs]
            test = split_all(used, run.seed).test
            mses.append(reconstruction_mse(result.model, list(test.values())))
            accuracies.append(train_decoder(run, result.checkpoint, datasets).metrics.test_acc)
        points.append(SweepPoint(value, mses, RunMetrics(seeds=list(seeds), accuracies=accuracies)))
        point = points[-1]
        logger.info("sweep %s=%s: mse=%.4f acc=%s", key, value, point.mean_reconstruction, point.accuracy.describe())
    return points


def sweep_csv(key: str, points: Sequence[SweepPoint]) -> str:
    """One row per swept value."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow([key, "mse_mean", "acc_mean", "acc_std", "n_seeds"])
    for point in points:
        acc = point.accuracy
        mse = f"{point.mean_reconstruction:.6f}"
        writer.writerow([point.value, mse, f"{acc.mean:.6f}", f"{acc.std:.6f}", acc.n_seeds])
    return out.getvalue()
