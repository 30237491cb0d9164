"""Synthetic drifting-domain streams: corruptions, schedules, source datasets.

Feature-space analogs of image corruption benchmarks.  Each corruption
kind maps severity 1-5 onto a fixed magnitude ladder; a schedule strings
(corruption, severity) segments together and the stream generator draws
reshuffled held-out samples through them, corrupting freshly per batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CsvFormatError
from .network import Batch, FloatArray, IntArray

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_dropout",
    "rotation",
    "scaling",
    "shear",
    "smoothing",
    "contrast",
)

SEVERITIES = (1, 2, 3, 4, 5)

# Magnitude ladders per kind.  Additive noise doubles per level; the
# geometric transforms grow linearly; contrast shrinks toward zero.
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": tuple(0.1 * 2.0 ** (s - 1) for s in SEVERITIES),   # additive std
    "shot_noise": tuple(0.08 * 2.0 ** (s - 1) for s in SEVERITIES),      # multiplicative std
    "impulse_dropout": tuple(0.05 * s for s in SEVERITIES),              # zeroing probability
    "rotation": tuple(math.radians(9.0 * s) for s in SEVERITIES),        # plane angle
    "scaling": tuple(0.3 * s for s in SEVERITIES),                       # per-feature log-gain std
    "shear": tuple(0.5 * s for s in SEVERITIES),                         # plane shear coefficient
    "smoothing": tuple(0.12 * s for s in SEVERITIES),                    # blend toward feature mean
    "contrast": tuple(1.0 / (1.0 + 0.4 * s) for s in SEVERITIES),        # global scale
}

SCHEDULE_MODES = ("standard", "shuffled", "gradual", "rounds")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be 1..5, got {self.severity}")

    @property
    def magnitude(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    @property
    def tag(self) -> str:
        return f"{self.kind}:{self.severity}"


@dataclass(frozen=True)
class DomainSchedule:
    """Ordered (corruption, num_batches) segments plus the batch size."""

    segments: tuple[tuple[CorruptionSpec, int], ...]
    mode: str
    batch_size: int = 200

    def __post_init__(self):
        if not self.segments:
            raise ValueError("schedule has no segments")
        if any(n < 1 for _, n in self.segments):
            raise ValueError("each segment needs num_batches >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def total_batches(self) -> int:
        return sum(n for _, n in self.segments)


def corrupt(batch: Batch, spec: CorruptionSpec, rng: np.random.Generator) -> Batch:
    """Apply one corruption at its severity-table magnitude; labels pass through.

    The geometric kinds (rotation, scaling, shear) are fixed operators: their
    directions are a deterministic function of the kind, so every batch of a
    given corruption sees the same transform and revisiting a domain means
    revisiting the same domain.  The noise kinds draw fresh randomness from
    ``rng`` per batch.
    """
    x = batch.inputs
    m = spec.magnitude
    kind = spec.kind
    if kind == "gaussian_noise":
        out = x + rng.normal(0.0, m, x.shape)
    elif kind == "shot_noise":
        out = x * (1.0 + m * rng.standard_normal(x.shape))
    elif kind == "impulse_dropout":
        out = np.where(rng.random(x.shape) < m, 0.0, x)
    elif kind == "rotation":
        u, v = _kind_plane(kind, x.shape[1])
        out = _rotate_plane(x, m, u, v)
    elif kind == "scaling":
        out = x * np.exp(m * _kind_directions(kind, x.shape[1]))
    elif kind == "shear":
        u, v = _kind_plane(kind, x.shape[1])
        out = x + m * np.outer(x @ v, u)
    elif kind == "smoothing":
        row_mean = x.mean(axis=1, keepdims=True)
        out = (1.0 - m) * x + m * row_mean
    elif kind == "contrast":
        out = x * m
    else:  # unreachable given CorruptionSpec validation
        raise ValueError(f"unknown corruption kind {kind!r}")
    labels = None if batch.labels is None else batch.labels.copy()
    return Batch(out, labels, spec.tag)


def _kind_rng(kind: str) -> np.random.Generator:
    return np.random.default_rng(1000 + CORRUPTION_KINDS.index(kind))


def _kind_directions(kind: str, dim: int) -> FloatArray:
    return _kind_rng(kind).standard_normal(dim)


def _kind_plane(kind: str, dim: int) -> tuple[FloatArray, FloatArray]:
    if dim < 2:
        raise ValueError("need at least 2 features")
    r = _kind_rng(kind)
    u = r.standard_normal(dim)
    u /= np.linalg.norm(u)
    v = r.standard_normal(dim)
    v -= u * (u @ v)
    v /= np.linalg.norm(v)
    return u, v


def _rotate_plane(x: FloatArray, angle: float, u: FloatArray, v: FloatArray) -> FloatArray:
    """Rotate every row by `angle` inside the (u, v) plane (an isometry)."""
    xu = x @ u
    xv = x @ v
    c, s = math.cos(angle), math.sin(angle)
    return x + np.outer((c - 1.0) * xu - s * xv, u) + np.outer(s * xu + (c - 1.0) * xv, v)


def build_schedule(mode: str, kinds: tuple[str, ...] = CORRUPTION_KINDS,
                   batches_per_domain: int = 10, batch_size: int = 200,
                   seed: int = 0, severity: int = 5, num_rounds: int = 3) -> DomainSchedule:
    """Assemble the four experimental protocols.

    standard: the kinds in canonical order at the given severity;
    shuffled: a seed-permuted order; gradual: per-kind severity ramp
    1..5..1; rounds: the standard list repeated num_rounds times.
    """
    kinds = tuple(kinds)
    if mode not in SCHEDULE_MODES:
        raise ValueError(f"unknown schedule mode {mode!r}")
    if not kinds:
        raise ValueError("empty corruption list")
    segments: list[tuple[CorruptionSpec, int]] = []
    if mode == "standard":
        ordered = kinds
    elif mode == "shuffled":
        order = np.random.default_rng(seed).permutation(len(kinds))
        ordered = tuple(kinds[i] for i in order)
    elif mode == "rounds":
        ordered = kinds * num_rounds
    else:  # gradual
        ramp = (1, 2, 3, 4, 5, 4, 3, 2, 1)
        for kind in kinds:
            for s in ramp:
                segments.append((CorruptionSpec(kind, s), batches_per_domain))
        return DomainSchedule(tuple(segments), mode, batch_size)
    for kind in ordered:
        segments.append((CorruptionSpec(kind, severity), batches_per_domain))
    return DomainSchedule(tuple(segments), mode, batch_size)


def stream_batches(schedule: DomainSchedule, pool: Batch, rng: np.random.Generator):
    """Yield freshly corrupted batches drawn from the held-out pool.

    The pool is reshuffled at each segment start (and whenever exhausted);
    ground-truth labels ride along for metric computation only.
    """
    n = pool.size
    for spec, num_batches in schedule.segments:
        order = rng.permutation(n)
        cursor = 0
        for _ in range(num_batches):
            idx = []
            while len(idx) < schedule.batch_size:
                if cursor == n:
                    order = rng.permutation(n)
                    cursor = 0
                take = min(schedule.batch_size - len(idx), n - cursor)
                idx.extend(order[cursor:cursor + take])
                cursor += take
            idx = np.asarray(idx)
            clean = Batch(pool.inputs[idx],
                          None if pool.labels is None else pool.labels[idx])
            yield corrupt(clean, spec, rng)


# ---------------------------------------------------------------------------
# source datasets


@dataclass
class SourceConfig:
    """Labeled source data: generated Gaussian blobs or an external CSV."""

    kind: str = "gaussian_blobs"
    num_classes: int = 3
    input_dim: int = 8
    class_separation: float = 4.0
    seed: int = 0
    train_size: int = 600
    heldout_size: int = 200
    batch_size: int = 50
    csv_path: str | None = None
    label_column: str | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian_blobs", "csv"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "csv" and (self.csv_path is None or self.label_column is None):
            raise ValueError("csv source needs csv_path and label_column")


def _balanced_labels(n: int, num_classes: int) -> IntArray:
    base = n // num_classes
    counts = [base + (1 if c < n % num_classes else 0) for c in range(num_classes)]
    return np.concatenate([np.full(cnt, c, dtype=np.int64) for c, cnt in enumerate(counts)])


def _blob_split(cfg: SourceConfig, rng: np.random.Generator, n: int) -> tuple[FloatArray, IntArray]:
    if cfg.num_classes > cfg.input_dim:
        raise ValueError("gaussian_blobs needs num_classes <= input_dim")
    labels = _balanced_labels(n, cfg.num_classes)
    # axis-aligned means a fixed pairwise distance apart; unit within-class noise
    means = np.zeros((cfg.num_classes, cfg.input_dim))
    for c in range(cfg.num_classes):
        means[c, c] = cfg.class_separation / math.sqrt(2.0)
    X = means[labels] + rng.standard_normal((n, cfg.input_dim))
    perm = rng.permutation(n)
    return X[perm], labels[perm]


def _read_csv(cfg: SourceConfig) -> tuple[FloatArray, IntArray]:
    with open(cfg.csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file: header row required") from None
        if cfg.label_column not in header:
            raise CsvFormatError(f"label column {cfg.label_column!r} not in header")
        label_idx = header.index(cfg.label_column)
        feature_cols = [(i, name) for i, name in enumerate(header) if i != label_idx]
        rows, labels = [], []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(
                    f"expected {len(header)} fields, found {len(row)}", row=row_num)
            feats = []
            for i, name in feature_cols:
                cell = row[i].strip()
                if cell == "":
                    raise CsvFormatError("missing value", row=row_num, column=name)
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"non-numeric value {cell!r}", row=row_num, column=name) from None
            cell = row[label_idx].strip()
            if cell == "":
                raise CsvFormatError("missing label", row=row_num, column=cfg.label_column)
            try:
                labels.append(int(cell))
            except ValueError:
                raise CsvFormatError(
                    f"non-integer label {cell!r}", row=row_num, column=cfg.label_column) from None
            rows.append(feats)
    if not rows:
        raise CsvFormatError("no data rows")
    X = np.asarray(rows, dtype=np.float64)
    raw = np.asarray(labels, dtype=np.int64)
    # remap arbitrary integer labels onto 0..C-1 in sorted order
    classes = np.unique(raw)
    remap = {int(c): i for i, c in enumerate(classes)}
    y = np.asarray([remap[int(v)] for v in raw], dtype=np.int64)
    return X, y


def make_source(cfg: SourceConfig) -> tuple[list[Batch], Batch]:
    """Build (train mini-batches, held-out batch), standardized by train statistics."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "gaussian_blobs":
        X_train, y_train = _blob_split(cfg, rng, cfg.train_size)
        X_held, y_held = _blob_split(cfg, rng, cfg.heldout_size)
    else:
        X, y = _read_csv(cfg)
        need = cfg.train_size + cfg.heldout_size
        if X.shape[0] < need:
            raise ValueError(f"csv has {X.shape[0]} rows, need {need}")
        train_idx, held_idx = _stratified_split(y, cfg.train_size, cfg.heldout_size, rng)
        X_train, y_train = X[train_idx], y[train_idx]
        X_held, y_held = X[held_idx], y[held_idx]
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    X_train = (X_train - mu) / sd
    X_held = (X_held - mu) / sd
    train_batches = [
        Batch(X_train[i:i + cfg.batch_size], y_train[i:i + cfg.batch_size], "source")
        for i in range(0, X_train.shape[0], cfg.batch_size)
    ]
    return train_batches, Batch(X_held, y_held, "source-heldout")


def _stratified_split(y: IntArray, train_size: int, heldout_size: int,
                      rng: np.random.Generator) -> tuple[IntArray, IntArray]:
    n = y.size
    train_idx, held_idx = [], []
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        n_train = int(round(train_size * members.size / n))
        train_idx.extend(members[:n_train])
        held_idx.extend(members[n_train:])
    train_idx = np.asarray(train_idx[:train_size], dtype=np.int64)
    held_idx = np.asarray(held_idx[:heldout_size], dtype=np.int64)
    return train_idx, held_idx
