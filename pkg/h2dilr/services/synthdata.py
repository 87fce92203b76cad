"""Synthetic multi-subject recordings with planted shared and subject-specific structure.

A sample of subject i with tone k is

    x = homogeneous_gain * A_i s(k) + signature_gain * B_i eta_i + noise

z-scored per channel. ``s(k)`` stacks the tone's pitch contour with harmonic
chirps whose instantaneous frequency follows the contour; every subject draws
it from the same process. ``A_i`` (C_i x sources) and ``B_i`` (C_i x 2) are
fixed per subject; ``eta_i`` is a cos/sin pair in a band unique to subject i.
All draws come from streams keyed by (seed, subject[, trial]), so any subset of
subjects or trials regenerates bit-exactly.
"""

import logging
import math

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.signal import periodogram

from h2dilr.core.errors import DatasetError, SubjectError
from h2dilr.core.seeding import derive_rng
from h2dilr.models.config import N_TONES, GenSpec
from h2dilr.models.records import RecordingSample, SubjectDataset

logger = logging.getLogger(__name__)

BASE_FREQUENCY = 5.0
SWEEP = 20.0
# Subject bands as a fraction of the sampling rate: 0.08, 0.11, 0.14, ...
SIGNATURE_START = 0.08
SIGNATURE_STEP = 0.03
SIGNATURE_JITTER = 0.002
BAND_HALF_WIDTH = 0.004
DIP_AT = 0.45
MIN_PER_CLASS = 5
_MAX_MIXING_DRAWS = 1000


def tone_template(tone: int, length: int) -> np.ndarray:
    """Pitch contour in [0, 1]: level, rising, dip, falling."""
    if tone not in range(1, N_TONES + 1):
        raise ValueError(f"tone must be in 1..{N_TONES}, got {tone}")
    if length < 2:
        raise ValueError(f"template length must be >= 2, got {length}")
    t = np.linspace(0.0, 1.0, length)
    if tone == 1:
        return np.full(length, 0.8)
    if tone == 2:
        return 0.1 + 0.8 * t
    if tone == 3:
        depth = np.where(t < DIP_AT, (DIP_AT - t) / DIP_AT, (t - DIP_AT) / (1.0 - DIP_AT))
        return 0.1 + 0.8 * depth**2
    return 0.9 - 0.8 * t


def tone_sources(tone: int, length: int, harmonics: int) -> np.ndarray:
    """Homogeneous source rows: centred contour, then sin(h * phase) for h = 1..harmonics."""
    contour = tone_template(tone, length)
    t = np.linspace(0.0, 1.0, length)
    phase = 2.0 * np.pi * cumulative_trapezoid(BASE_FREQUENCY + SWEEP * contour, t, initial=0.0)
    rows = [2.0 * (contour - contour.mean())]
    rows += [np.sin(h * phase) for h in range(1, harmonics + 1)]
    return np.stack(rows)


def signature_frequency(subject: int) -> float:
    """Centre of subject ``subject``'s band, in cycles per sample."""
    return SIGNATURE_START + SIGNATURE_STEP * subject


def _check_subject(spec: GenSpec, subject: int) -> None:
    if not 0 <= subject < spec.n_subjects:
        raise SubjectError(f"subject {subject} is not in the spec (subjects 0..{spec.n_subjects - 1})")


def mixing_matrix(spec: GenSpec, subject: int) -> np.ndarray:
    """A_i with condition number <= spec.max_condition (reject and redraw)."""
    _check_subject(spec, subject)
    rng = derive_rng(spec.seed, "data", "mixing", subject)
    shape = (spec.channels[subject], spec.n_sources)
    for _ in range(_MAX_MIXING_DRAWS):
        a = rng.normal(0.0, 1.0 / math.sqrt(spec.n_sources), size=shape)
        if np.linalg.cond(a) <= spec.max_condition:
            return a
    raise DatasetError(f"subject {subject}: no mixing matrix with condition <= {spec.max_condition}")


def signature_pattern(spec: GenSpec, subject: int) -> np.ndarray:
    """Per-channel cosine and sine gains of the subject's signature band."""
    _check_subject(spec, subject)
    rng = derive_rng(spec.seed, "data", "signature", subject)
    return rng.normal(0.0, 1.0 / math.sqrt(2.0), size=(spec.channels[subject], 2))


def _zscore(x: np.ndarray) -> np.ndarray:
    centred = x - x.mean(axis=1, keepdims=True)
    return centred / np.maximum(centred.std(axis=1, keepdims=True), 1e-12)


def generate_sample(
    spec: GenSpec, subject: int, trial: int, tone: int, mixing: np.ndarray, pattern: np.ndarray
) -> RecordingSample:
    length = spec.segment_length
    rng = derive_rng(spec.seed, "data", subject, trial)
    homogeneous = mixing @ tone_sources(tone, length, spec.harmonics)

    frequency = signature_frequency(subject) + rng.uniform(-SIGNATURE_JITTER, SIGNATURE_JITTER)
    theta = 2.0 * np.pi * frequency * np.arange(length) + rng.uniform(0.0, 2.0 * np.pi)
    signature = pattern @ np.stack([np.cos(theta), np.sin(theta)])

    x = spec.homogeneous_gain * homogeneous + spec.signature_gain * signature
    if spec.snr_db is not None:
        noise_power = np.mean(homogeneous**2) / 10.0 ** (spec.snr_db / 10.0)
        x = x + rng.normal(0.0, math.sqrt(noise_power), size=x.shape)
    return RecordingSample(signal=_zscore(x).T, tone=tone, subject=subject, trial=trial)


def trial_tones(spec: GenSpec, subject: int) -> np.ndarray:
    """Balanced tone labels in a per-subject shuffled trial order."""
    tones = np.repeat(np.arange(1, N_TONES + 1), spec.samples_per_class)
    return derive_rng(spec.seed, "data", "order", subject).permutation(tones)


def generate_subject(spec: GenSpec, subject: int) -> SubjectDataset:
    """Every trial of one subject, balanced over tones."""
    mixing = mixing_matrix(spec, subject)
    pattern = signature_pattern(spec, subject)
    samples = [
        generate_sample(spec, subject, trial, int(tone), mixing, pattern)
        for trial, tone in enumerate(trial_tones(spec, subject))
    ]
    logger.info(
        "generated subject %d: %d samples, %d channels, T=%d",
        subject,
        len(samples),
        spec.channels[subject],
        spec.segment_length,
    )
    return SubjectDataset(
        subject=subject, channels=spec.channels[subject], segment_length=spec.segment_length, samples=samples
    )


def generate_dataset(spec: GenSpec) -> list[SubjectDataset]:
    """One dataset per subject, ordered by subject id."""
    if SIGNATURE_START + SIGNATURE_STEP * (spec.n_subjects - 1) + SIGNATURE_JITTER >= 0.5:
        raise DatasetError(f"{spec.n_subjects} subjects push signature bands past the Nyquist frequency")
    return [generate_subject(spec, subject) for subject in range(spec.n_subjects)]


def select_subjects(datasets: list[SubjectDataset], count: int | None) -> list[SubjectDataset]:
    """The first ``count`` subjects by id (all when None)."""
    ordered = sorted(datasets, key=lambda d: d.subject)
    return ordered if count is None else ordered[:count]


def split(dataset: SubjectDataset, seed: int) -> tuple[SubjectDataset, SubjectDataset, SubjectDataset]:
    """Tone-stratified train/val/test split: 20% test, then 20% of the rest for validation."""
    if not len(dataset):
        raise DatasetError(f"subject {dataset.subject}: cannot split an empty dataset")
    rng = derive_rng(seed, "shuffle", "split", dataset.subject)
    tones = dataset.tones()
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for tone in np.unique(tones):
        members = np.flatnonzero(tones == tone)
        if members.size < MIN_PER_CLASS:
            raise DatasetError(
                f"subject {dataset.subject}: tone {tone} has {members.size} samples, need {MIN_PER_CLASS} to stratify"
            )
        members = rng.permutation(members)
        n_test = math.floor(0.2 * members.size + 0.5)
        n_val = math.floor(0.2 * (members.size - n_test) + 0.5)
        parts[2].extend(members[:n_test])
        parts[1].extend(members[n_test : n_test + n_val])
        parts[0].extend(members[n_test + n_val :])
    train, val, test = (dataset.subset(sorted(int(i) for i in part)) for part in parts)
    return train, val, test


def _explained_fraction(estimate: np.ndarray, templates: np.ndarray) -> float:
    design = np.column_stack([templates.T, np.ones(templates.shape[1])])
    coef, *_ = np.linalg.lstsq(design, estimate.T, rcond=None)
    residual = estimate.T - design @ coef
    centred = estimate.T - estimate.T.mean(axis=0)
    return 1.0 - float((residual**2).sum() / max((centred**2).sum(), 1e-300))


def oracle_classify(sample: RecordingSample, spec: GenSpec) -> int:
    """Tone whose template rows best explain the pinv(A_i)-unmixed sources."""
    _check_subject(spec, sample.subject)
    if sample.signal.shape != (spec.segment_length, spec.channels[sample.subject]):
        raise DatasetError(f"sample shape {sample.signal.shape} does not match subject {sample.subject} of the spec")
    estimate = np.linalg.pinv(mixing_matrix(spec, sample.subject)) @ sample.signal.T
    scores = [
        _explained_fraction(estimate, tone_sources(tone, spec.segment_length, spec.harmonics))
        for tone in range(1, N_TONES + 1)
    ]
    return int(np.argmax(scores)) + 1


def oracle_subject(sample: RecordingSample, spec: GenSpec) -> int:
    """Subject whose signature band carries the most power in the sample."""
    frequencies, power = periodogram(sample.signal, axis=0)
    total = power.sum(axis=1)
    half_width = max(BAND_HALF_WIDTH, 1.0 / sample.signal.shape[0])
    scores = [
        total[np.abs(frequencies - signature_frequency(s)) <= half_width].mean()
        for s in range(spec.n_subjects)
    ]
    return int(np.argmax(scores))
