"""Subcommand handlers.

Each handler takes the effective RunConfig and the parsed arguments, writes its
artifacts under ``out_dir`` and returns nothing; failures propagate to ``run``,
which maps them to exit codes.
"""

import argparse
import logging
from pathlib import Path

from h2dilr.models.config import LabelKind, Representation, RunConfig
from h2dilr.models.records import SubjectDataset
from h2dilr.services.checkpoint import load_checkpoint
from h2dilr.services.dataset_io import read_datasets, write_datasets
from h2dilr.services.pipeline import pretrain_h2d, split_all, train_decoder
from h2dilr.services.probe import (
    assign_codes,
    assignments_csv,
    compare_paradigms,
    conditional_tone_entropy,
    disentanglement_report,
    export_embeddings,
    reconstruction_mse,
    sweep,
    sweep_csv,
)
from h2dilr.services.synthdata import generate_dataset
from h2dilr.services.tokenizer import Stage1Model

logger = logging.getLogger(__name__)

STAGE1_CHECKPOINT = "checkpoint_h2d"


def data_dir(config: RunConfig, args: argparse.Namespace) -> Path:
    """``--data-dir``, then ``data.dir``, then ``out_dir/data``."""
    if getattr(args, "data_dir", None):
        return Path(args.data_dir)
    return Path(config.data.dir) if config.data.dir else Path(config.out_dir) / "data"


def stage1_path(config: RunConfig, args: argparse.Namespace) -> Path:
    """``--checkpoint`` or ``out_dir/checkpoint_h2d``."""
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    return Path(config.out_dir) / STAGE1_CHECKPOINT


def _load_data(config: RunConfig, args: argparse.Namespace) -> list[SubjectDataset]:
    """Datasets previously written by gen-data."""
    return read_datasets(data_dir(config, args))


def gen_data(config: RunConfig, args: argparse.Namespace) -> None:
    """Generate the synthetic subjects and write them to the data directory."""
    root = data_dir(config, args)
    write_datasets(generate_dataset(config.gen_spec()), root, config.seed)
    print(f"wrote {len(config.data.channels)} subjects to {root}")


def pretrain(config: RunConfig, args: argparse.Namespace) -> None:
    """Stage 1 on the stored datasets."""
    result = pretrain_h2d(config, _load_data(config, args), out_dir=Path(config.out_dir))
    last = next((row for row in reversed(result.history) if row["split"] == "train"), None)
    summary = f"rec={last['loss_rec']:.4f}" if last else "no epochs run"
    print(f"stage 1 done ({summary}); checkpoint in {Path(config.out_dir) / STAGE1_CHECKPOINT}")


def train_decoder_cmd(config: RunConfig, args: argparse.Namespace) -> None:
    """Stage 2 on a stage-1 checkpoint."""
    datasets = _load_data(config, args)
    checkpoint = load_checkpoint(stage1_path(config, args))
    result = train_decoder(
        config,
        checkpoint,
        datasets,
        LabelKind(args.label),
        Representation(args.representation),
        seed=args.seed,
        out_dir=Path(config.out_dir),
    )
    print(f"test top-1 = {result.metrics.test_acc:.4f} (best epoch {result.metrics.best_epoch})")


def probe(config: RunConfig, args: argparse.Namespace) -> None:
    """Held-out reconstruction and code-assignment probes of a stage-1 checkpoint."""
    datasets = _load_data(config, args)
    model = Stage1Model.from_checkpoint(load_checkpoint(stage1_path(config, args))).freeze()
    used = [d for d in datasets if d.subject in model.networks.configs]
    test = list(split_all(used, model.config.seed).test.values())
    assignment = assign_codes(model, test)
    lines = [f"reconstruction_mse={reconstruction_mse(model, test):.6f}"]
    for prefix in ("codebook.shared", "codebook.private"):
        if any(book.startswith(prefix) for book in assignment.books):
            lines.append(f"tone_entropy.{prefix}={conditional_tone_entropy(assignment, prefix):.6f}")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.txt").write_text("\n".join(lines) + "\n")
    (out / "assignments.csv").write_text(assignments_csv(assignment))
    print("\n".join(lines))


def report(config: RunConfig, args: argparse.Namespace) -> None:
    """Disentanglement grid over ``train.seeds`` (and optional nu sweep / paradigm comparison)."""
    datasets = _load_data(config, args)
    checkpoint = load_checkpoint(stage1_path(config, args))
    nus = [float(v) for v in args.nus.split(",")] if args.nus else None
    result = disentanglement_report(config, checkpoint, datasets, config.train.seeds, nus)
    text_path, _ = result.write(Path(config.out_dir))
    print(result.to_text(), end="")
    if args.paradigms:
        metrics = compare_paradigms(config, datasets, config.train.seeds)
        lines = ["paradigm,n_seeds,mean,std"]
        lines += [f"{p.value},{m.n_seeds},{m.mean:.6f},{m.std:.6f}" for p, m in metrics.items()]
        (Path(config.out_dir) / "paradigms.csv").write_text("\n".join(lines) + "\n")
        for paradigm, m in metrics.items():
            print(f"{paradigm.value}: {m.describe()}")
    logger.info("report written to %s", text_path)


def export_codes(config: RunConfig, args: argparse.Namespace) -> None:
    """Codebook embeddings and pooled sample representations as CSV."""
    datasets = _load_data(config, args)
    model = Stage1Model.from_checkpoint(load_checkpoint(stage1_path(config, args))).freeze()
    used = [d for d in datasets if d.subject in model.networks.configs]
    dest = Path(args.dest) if args.dest else Path(config.out_dir) / "embeddings"
    codes, samples = export_embeddings(model, used, dest)
    print(f"wrote {codes} and {samples}")


def sweep_cmd(config: RunConfig, args: argparse.Namespace) -> None:
    """Re-run both stages over the values of one config key."""
    datasets = _load_data(config, args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    points = sweep(config, datasets, args.key, values, config.train.seeds)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = sweep_csv(args.key, points)
    (out / f"sweep_{args.key}.csv").write_text(text)
    print(text, end="")


HANDLERS = {
    "gen-data": gen_data,
    "pretrain": pretrain,
    "train-decoder": train_decoder_cmd,
    "probe": probe,
    "report": report,
    "export-codes": export_codes,
    "sweep": sweep_cmd,
}
