"""Two-stage training: H2D pretraining, then the neural-decoding stage on frozen tokens."""

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from h2dilr.autodiff import ops
from h2dilr.autodiff.tensor import Graph, Tensor
from h2dilr.core.errors import CheckpointError, ConfigError, DatasetError
from h2dilr.core.seeding import derive_rng
from h2dilr.models.config import N_TONES, LabelKind, Paradigm, Representation, RunConfig, Stage
from h2dilr.models.records import SubjectDataset
from h2dilr.networks.factory import build_classifier
from h2dilr.networks.transformer import TransformerClassifier, transformer_classify
from h2dilr.quantization.codebook import init_from_data, perplexity
from h2dilr.quantization.h2d import h2d_loss, h2d_quantize, h2d_step, partition
from h2dilr.services.checkpoint import Checkpoint, save_checkpoint
from h2dilr.services.optim import AdamW, cosine_lr
from h2dilr.services.synthdata import select_subjects, split
from h2dilr.services.tokenizer import Stage1Model

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "loss_rec", "loss_pri", "loss_commit", "loss_total", "acc", "perplexity_shared"]


@dataclass
class Splits:
    train: dict[int, SubjectDataset]
    val: dict[int, SubjectDataset]
    test: dict[int, SubjectDataset]


@dataclass
class PretrainResult:
    model: Stage1Model
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


@dataclass
class DecodeMetrics:
    best_epoch: int
    val_acc: float
    test_acc: float
    test_count: int
    history: list[dict] = field(default_factory=list)


@dataclass
class DecodeResult:
    checkpoint: Checkpoint
    metrics: DecodeMetrics


def split_all(datasets: Sequence[SubjectDataset], seed: int) -> Splits:
    """Stratified train/val/test split of every subject, keyed by subject."""
    if not datasets:
        raise DatasetError("no subject datasets given")
    splits = Splits({}, {}, {})
    for dataset in datasets:
        if not len(dataset):
            raise DatasetError(f"subject {dataset.subject} has an empty dataset")
        train, val, test = split(dataset, seed)
        splits.train[dataset.subject] = train
        splits.val[dataset.subject] = val
        splits.test[dataset.subject] = test
    return splits


def metric_columns(subjects: Sequence[int]) -> list[str]:
    """CSV columns of the training metrics file."""
    return METRIC_COLUMNS + [f"perplexity_private_{s}" for s in subjects] + ["lr"]


def write_metrics(rows: list[dict], columns: list[str], path: Path) -> Path:
    """CSV, one row per (epoch, split); missing values are blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in columns})
    return path


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def round_robin(batches: dict[int, list[np.ndarray]]) -> list[tuple[int, np.ndarray]]:
    """Interleave per-subject batches in subject-id order; shorter lists recycle."""
    rounds = max((len(b) for b in batches.values()), default=0)
    order = []
    for r in range(rounds):
        for subject in sorted(batches):
            if batches[subject]:
                order.append((subject, batches[subject][r % len(batches[subject])]))
    return order


def _epoch_batches(sizes: dict[int, int], batch_size: int, seed: int, epoch: int) -> dict[int, list[np.ndarray]]:
    """Shuffled index batches per subject for one epoch."""
    batches = {}
    for subject, n in sizes.items():
        perm = derive_rng(seed, "shuffle", "pretrain", epoch, subject).permutation(n)
        batches[subject] = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return batches


def _book_perplexity(book) -> float | None:
    return perplexity(book.usage_count) if book is not None and book.usage_count.sum() > 0 else None


def evaluate_stage1(model: Stage1Model, datasets: dict[int, SubjectDataset]) -> dict[str, float]:
    """Token- and element-weighted mean losses over held-out data (no training, no usage counting)."""
    totals = {"loss_rec": 0.0, "loss_pri": 0.0, "loss_commit": 0.0, "loss_total": 0.0}
    weight = 0
    for subject, dataset in sorted(datasets.items()):
        x_all = dataset.signals()
        for x in model.chunks(x_all):
            z = model.networks.encode(Tensor(x), subject)
            routing = partition(z.data, model.state.shared, model.state.nu)
            quantized = h2d_quantize(z, routing, model.state, subject, count=False)
            x_hat = model.networks.decode_reconstruct(quantized.straight_through, subject, x.shape[1])
            losses = h2d_loss(Tensor(x), x_hat, z, quantized.z_hat, quantized.routing, model.state.beta)
            n = x.shape[0]
            for key, value in zip(("loss_total", "loss_rec", "loss_pri", "loss_commit"), losses):
                totals[key] += value.item() * n
            weight += n
    return {k: v / weight for k, v in totals.items()} if weight else totals


def _data_init(model: Stage1Model, train: dict[int, SubjectDataset], batch_size: int) -> None:
    """Seed every codebook from the latents of each subject's first training batch."""
    rng = derive_rng(model.config.seed, "init", "data_init")
    latents = {}
    for subject, dataset in sorted(train.items()):
        z = model.networks.encode(Tensor(dataset.signals()[:batch_size]), subject).data
        latents[subject] = z.reshape(-1, z.shape[-1])
        if subject in model.state.privates:
            init_from_data(model.state.privates[subject], latents[subject], rng)
    if model.state.shared is not None:
        init_from_data(model.state.shared, np.concatenate(list(latents.values())), rng)


def pretrain_h2d(
    config: RunConfig, datasets: Sequence[SubjectDataset], out_dir: Path | None = None
) -> PretrainResult:
    """Stage 1: unsupervised H2D training over all subjects with round-robin per-subject batches."""
    if Stage(config.train.stage) is not Stage.H2D:
        raise ConfigError(f"pretrain needs train.stage=h2d, got {config.train.stage.value}")
    datasets = select_subjects(list(datasets), config.data.subjects_used)
    splits = split_all(datasets, config.seed)
    train = {s: d for s, d in splits.train.items()}
    if config.train.include_val:
        train = {s: d.model_copy(update={"samples": d.samples + splits.val[s].samples}) for s, d in train.items()}
    signals = {s: d.signals() for s, d in train.items()}

    model = Stage1Model.create(config, datasets)
    for subject, dataset in train.items():
        minimum = model.networks.encoders[subject].config.min_segment_length
        if dataset.segment_length < minimum:
            raise DatasetError(f"subject {subject}: segment length {dataset.segment_length} < minimum {minimum}")
    if config.h2d.data_init:
        _data_init(model, train, config.train.batch_size)

    epochs = config.train.pretrain_epochs
    sizes = {s: x.shape[0] for s, x in signals.items()}
    steps_per_epoch = len(round_robin(_epoch_batches(sizes, config.train.batch_size, config.seed, 0)))
    total_steps = max(epochs * steps_per_epoch, 1)
    optimizer = AdamW(betas=tuple(config.train.betas), weight_decay=config.train.weight_decay)
    subjects = model.subjects
    history: list[dict] = []
    step_losses: list[float] = []
    step = 0
    lr = config.train.pretrain_lr

    for epoch in range(1, epochs + 1):
        model.state.reset_usage()
        sums = {"loss_rec": 0.0, "loss_pri": 0.0, "loss_commit": 0.0, "loss_total": 0.0}
        for subject, indices in round_robin(_epoch_batches(sizes, config.train.batch_size, config.seed, epoch)):
            lr = cosine_lr(step, total_steps, config.train.pretrain_lr)
            batch = [train[subject].samples[i] for i in indices]
            metrics = h2d_step(batch, model.state, model.networks, optimizer, lr)
            sums["loss_rec"] += metrics.rec
            sums["loss_pri"] += metrics.pri
            sums["loss_commit"] += metrics.commit
            sums["loss_total"] += metrics.total
            step_losses.append(metrics.total)
            step += 1
        row = {"epoch": epoch, "split": "train", "lr": lr, **{k: v / steps_per_epoch for k, v in sums.items()}}
        row["perplexity_shared"] = _book_perplexity(model.state.shared)
        for s in subjects:
            row[f"perplexity_private_{s}"] = _book_perplexity(model.state.privates.get(s))
        history.append(row)
        logger.info(
            "pretrain epoch %d/%d rec=%.4f pri=%.4f commit=%.4f total=%.4f ppl_shared=%s lr=%.3g",
            epoch,
            epochs,
            row["loss_rec"],
            row["loss_pri"],
            row["loss_commit"],
            row["loss_total"],
            _cell(row["perplexity_shared"]) or "-",
            lr,
        )
        if epoch % config.train.eval_every == 0 or epoch == epochs:
            history.append({"epoch": epoch, "split": "val", "lr": lr, **evaluate_stage1(model, splits.val)})

    checkpoint = model.to_checkpoint(Stage.H2D, epochs=epochs, steps=step)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_metrics(history, metric_columns(subjects), out_dir / "metrics_pretrain.csv")
        save_checkpoint(checkpoint, out_dir / "checkpoint_h2d")
    return PretrainResult(model, checkpoint, history, step_losses)


def _labels(dataset: SubjectDataset, label_kind: LabelKind, subjects: list[int]) -> np.ndarray:
    """Zero-based tone labels, or subject positions in ``subjects``."""
    if label_kind is LabelKind.SUBJECT:
        return np.full(len(dataset), subjects.index(dataset.subject), dtype=np.int64)
    return dataset.tones() - 1


def _stack(model: Stage1Model, parts: dict[int, SubjectDataset], label_kind, representation, subjects):
    """Frozen-tokenizer features and labels of several subjects, stacked."""
    feats, labels = [], []
    for subject, dataset in sorted(parts.items()):
        if not len(dataset):
            continue
        feats.append(model.features(dataset.signals(), subject, representation))
        labels.append(_labels(dataset, label_kind, subjects))
    if not feats:
        raise DatasetError("no samples to build decoder features from")
    return np.concatenate(feats), np.concatenate(labels)


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"top1_accuracy: {logits.shape[0]} predictions for {labels.shape[0]} labels")
    if not labels.size:
        raise DatasetError("top1_accuracy: no samples")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def predict(classifier: TransformerClassifier, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits in evaluation mode, in batches."""
    logits = [
        transformer_classify(classifier, Tensor(features[i : i + batch_size])).data
        for i in range(0, features.shape[0], batch_size)
    ]
    return np.concatenate(logits)


def _fit_classifier(
    classifier: TransformerClassifier,
    data: dict[str, tuple[np.ndarray, np.ndarray]],
    config: RunConfig,
    seed: int,
    tag: str,
) -> tuple[DecodeMetrics, dict[str, np.ndarray]]:
    """Train on data['train']; keep the epoch with the best validation accuracy (earliest on ties)."""
    x_train, y_train = data["train"]
    epochs = config.train.decoder_epochs
    batch_size = config.train.batch_size
    steps_per_epoch = math.ceil(x_train.shape[0] / batch_size)
    total_steps = epochs * steps_per_epoch
    optimizer = AdamW(betas=tuple(config.train.betas), weight_decay=config.train.weight_decay)
    params = classifier.parameters()
    best = (-1.0, 0, {}, 0.0)
    history = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = derive_rng(seed, "shuffle", "decoder", epoch).permutation(x_train.shape[0])
        dropout_rng = derive_rng(seed, "shuffle", "dropout", epoch)
        loss_sum = 0.0
        lr = config.train.decoder_lr
        for start in range(0, x_train.shape[0], batch_size):
            idx = order[start : start + batch_size]
            lr = cosine_lr(step, total_steps, config.train.decoder_lr)
            with Graph():
                logits = transformer_classify(classifier, Tensor(x_train[idx]), dropout_rng, training=True)
                loss = ops.cross_entropy(logits, y_train[idx])
                loss.backward()
            optimizer.step(params, lr)
            loss_sum += loss.item()
            step += 1
        val_acc = top1_accuracy(predict(classifier, data["val"][0]), data["val"][1])
        test_acc = top1_accuracy(predict(classifier, data["test"][0]), data["test"][1])
        history.append({"epoch": epoch, "split": "train", "loss_total": loss_sum / steps_per_epoch, "lr": lr})
        history.append({"epoch": epoch, "split": "val", "acc": val_acc, "lr": lr})
        history.append({"epoch": epoch, "split": "test", "acc": test_acc, "lr": lr})
        logger.info("%s epoch %d/%d loss=%.4f val_acc=%.4f", tag, epoch, epochs, loss_sum / steps_per_epoch, val_acc)
        if val_acc > best[0]:
            best = (val_acc, epoch, {n: p.data.copy() for n, p in classifier.named_parameters()}, test_acc)
    val_acc, best_epoch, snapshot, test_acc = best
    classifier.load_state_dict(snapshot)
    metrics = DecodeMetrics(best_epoch, val_acc, test_acc, data["test"][0].shape[0], history)
    return metrics, {p.name: p.data for p in classifier.parameters()}


def train_decoder(
    config: RunConfig,
    checkpoint: Checkpoint,
    datasets: Sequence[SubjectDataset],
    label_kind: LabelKind = LabelKind.TONE,
    representation: Representation = Representation.FULL,
    seed: int | None = None,
    out_dir: Path | None = None,
) -> DecodeResult:
    """Stage 2: train only the transformer on frozen quantized tokens and report test top-1.

    Splits follow the stage-1 seed stored in the checkpoint; ``seed`` drives the
    classifier's init, shuffling and dropout.
    """
    if Stage(checkpoint.stage) is not Stage.H2D:
        raise CheckpointError(f"train_decoder needs a stage-1 (h2d) checkpoint, got {Stage(checkpoint.stage).value}")
    label_kind, representation = LabelKind(label_kind), Representation(representation)
    model = Stage1Model.from_checkpoint(checkpoint).freeze()
    subjects = model.subjects
    datasets = [d for d in datasets if d.subject in checkpoint.channels]
    checkpoint.check_channels({d.subject: d.channels for d in datasets})
    if label_kind is LabelKind.SUBJECT and len(subjects) < 2:
        raise ConfigError("subject classification needs at least 2 subjects")
    seed = config.seed if seed is None else seed
    splits = split_all(datasets, model.config.seed)
    head = config.head_config(len(subjects) if label_kind is LabelKind.SUBJECT else N_TONES)

    groups: list[tuple[str, list[int]]]
    if model.state.paradigm is Paradigm.HETEROGENEOUS:
        if label_kind is LabelKind.SUBJECT:
            raise ConfigError("per-subject classifiers cannot be trained on subject labels")
        groups = [(f"classifier.s{s}", [s]) for s in subjects]
    else:
        groups = [("classifier", subjects)]

    tensors = dict(model.tensors(include_decoders=False))
    per_group: list[DecodeMetrics] = []
    for tag, members in groups:
        data = {
            name: _stack(model, {s: getattr(splits, name)[s] for s in members}, label_kind, representation, subjects)
            for name in ("train", "val", "test")
        }
        classifier = build_classifier(head, seed, tag, name=tag)
        metrics, trained = _fit_classifier(classifier, data, config, seed, tag)
        tensors.update(trained)
        per_group.append(metrics)

    test_count = sum(m.test_count for m in per_group)
    metrics = DecodeMetrics(
        best_epoch=per_group[0].best_epoch if len(per_group) == 1 else -1,
        val_acc=float(np.mean([m.val_acc for m in per_group])),
        test_acc=sum(m.test_acc * m.test_count for m in per_group) / test_count,
        test_count=test_count,
        history=_merge_history(per_group),
    )
    out = Checkpoint(
        stage=Stage.DECODE if label_kind is LabelKind.TONE else Stage.SUBJECT_PROBE,
        channels=model.networks.channels,
        config=checkpoint.config,
        state={
            **checkpoint.state,
            "label_kind": label_kind.value,
            "representation": representation.value,
            "decoder_seed": str(seed),
            "best_epoch": str(metrics.best_epoch),
            "test_acc": repr(metrics.test_acc),
        },
        tensors=tensors,
    )
    logger.info(
        "decoder (%s, %s) test_acc=%.4f over %d samples",
        label_kind.value,
        representation.value,
        metrics.test_acc,
        test_count,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        suffix = f"{label_kind.value}_{representation.value}"
        write_metrics(metrics.history, metric_columns(subjects), out_dir / f"metrics_decoder_{suffix}.csv")
        save_checkpoint(out, out_dir / f"checkpoint_{suffix}")
    return DecodeResult(out, metrics)


def _merge_history(groups: list[DecodeMetrics]) -> list[dict]:
    """Per-epoch means across per-subject classifiers."""
    merged = []
    for i, row in enumerate(groups[0].history):
        values = [g.history[i] for g in groups]
        combined = dict(row)
        if row.get("acc") is not None:
            combined["acc"] = float(np.mean([v["acc"] for v in values]))
        if row.get("loss_total") is not None:
            combined["loss_total"] = float(np.mean([v["loss_total"] for v in values]))
        merged.append(combined)
    return merged
