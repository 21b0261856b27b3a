"""Task streams, the on-disk feature format, and the benchmark metrics.

A stream is an ordered list of class-disjoint tasks, each with train and
test token batches. Streams come from a synthetic Gaussian-cluster
generator or from an EKFT feature file produced by an exporter. Metrics are
the usual continual-learning quartet: final all-seen accuracy, mean
per-session accuracy, average forgetting, and the drift-magnitude trace.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import Array, SeededRng

FEATURE_MAGIC = b"EKFT"
FEATURE_VERSION = 1


class FeatureFileError(ValueError):
    """Malformed EKFT file; message names the failing byte offset."""


class StreamError(ValueError):
    """Invalid task-stream construction."""


@dataclass
class Task:
    class_ids: tuple[int, ...]
    train_x: Array  # (n, d_t, d) float64
    train_y: Array  # (n,) int64
    test_x: Array
    test_y: Array


@dataclass
class TaskStream:
    tasks: list[Task]
    d_t: int
    d: int
    n_classes: int
    # original dataset label -> engine class id (identity for synthetic)
    label_map: dict[int, int] = field(default_factory=dict)

    def check_disjoint(self) -> None:
        seen: set[int] = set()
        for k, task in enumerate(self.tasks):
            overlap = seen.intersection(task.class_ids)
            if overlap:
                raise StreamError(f"task {k} reuses classes {sorted(overlap)}")
            seen.update(task.class_ids)


def _split_counts(n: int) -> tuple[int, int]:
    # 80/20 with at least one sample on each side.
    n_train = int(round(0.8 * n))
    n_train = max(1, min(n - 1, n_train))
    return n_train, n - n_train


def make_synthetic_stream(tasks: int, classes_per_task: int, d_t: int, d: int,
                          cluster_spread: float, seed: int,
                          samples_per_class: int = 50) -> TaskStream:
    """Gaussian cluster per class in token space, 80/20 train/test split.

    Each class has a random anchor; token rows are anchor + spread * noise,
    and row 0 (the CLS slot) is the mean of the content rows. Fully
    determined by the seed.
    """
    if tasks < 1 or classes_per_task < 1 or samples_per_class < 2:
        raise StreamError("need tasks >= 1, classes_per_task >= 1, samples_per_class >= 2")
    rng = SeededRng(seed, stream=11)
    n_classes = tasks * classes_per_task
    anchors = rng.derive(0).standard_normal((n_classes, d))
    out_tasks = []
    for k in range(tasks):
        ids = tuple(range(k * classes_per_task, (k + 1) * classes_per_task))
        xs, ys = [], []
        for c in ids:
            crng = rng.derive(1, c)
            n_content = max(1, d_t - 1)
            toks = anchors[c][None, None, :] + cluster_spread * crng.standard_normal(
                (samples_per_class, n_content, d))
            if d_t > 1:
                cls_row = toks.mean(axis=1, keepdims=True)
                toks = np.concatenate([cls_row, toks], axis=1)
            xs.append(toks)
            ys.append(np.full(samples_per_class, c, dtype=np.int64))
        x = np.concatenate(xs, axis=0)
        y = np.concatenate(ys)
        # interleave classes so every batch sees a mix
        order = rng.derive(2, k).permutation(x.shape[0])
        x, y = x[order], y[order]
        tr_ix, te_ix = [], []
        for c in ids:
            where = np.flatnonzero(y == c)
            n_train, _ = _split_counts(where.shape[0])
            tr_ix.append(where[:n_train])
            te_ix.append(where[n_train:])
        tr = np.concatenate(tr_ix)
        te = np.concatenate(te_ix)
        tr = np.sort(tr)
        te = np.sort(te)
        out_tasks.append(Task(ids, x[tr], y[tr], x[te], y[te]))
    stream = TaskStream(out_tasks, d_t, d, n_classes,
                        {c: c for c in range(n_classes)})
    stream.check_disjoint()
    return stream


# --- EKFT feature file ------------------------------------------------------
#
# magic "EKFT" | u32 version | u32 sample count | u32 d_t | u32 d
# | u32 class count, then per sample: u32 label, d_t*d little-endian f32
# row-major tokens.

_FEAT_HEADER = struct.Struct("<4sIIIII")


def write_feature_file(path, tokens: Array, labels: Array, n_classes: int) -> None:
    """tokens (N, d_t, d) stored as f32; labels u32 in [0, n_classes)."""
    tokens = np.ascontiguousarray(tokens, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    if tokens.ndim != 3 or labels.shape != (tokens.shape[0],):
        raise ValueError("tokens must be (N, d_t, d) with one label per sample")
    if labels.size and labels.max() >= n_classes:
        raise ValueError("label outside class count")
    n, d_t, d = tokens.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d_t, d, n_classes))
        for i in range(n):
            fh.write(struct.pack("<I", int(labels[i])))
            fh.write(tokens[i].astype("<f4").tobytes())


def read_feature_file(path) -> tuple[Array, Array, int]:
    """Returns (tokens f32 (N, d_t, d), labels int64, class count), bit-exact."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FEAT_HEADER.size:
        raise FeatureFileError(f"truncated header at byte {len(raw)}")
    magic, version, n, d_t, d, n_classes = _FEAT_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r} at byte 0")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported version {version} at byte 4")
    record = 4 + d_t * d * 4
    expected = _FEAT_HEADER.size + n * record
    if len(raw) != expected:
        offset = min(len(raw), expected)
        raise FeatureFileError(
            f"payload ends at byte {len(raw)}, expected {expected} (error at byte {offset})")
    tokens = np.empty((n, d_t, d), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    offset = _FEAT_HEADER.size
    for i in range(n):
        (label,) = struct.unpack_from("<I", raw, offset)
        if label >= n_classes:
            raise FeatureFileError(f"label {label} out of range at byte {offset}")
        labels[i] = label
        offset += 4
        tokens[i] = np.frombuffer(raw, dtype="<f4", count=d_t * d,
                                  offset=offset).reshape(d_t, d)
        offset += d_t * d * 4
    return tokens, labels, n_classes


def load_feature_stream(path, tasks: int, seed: int,
                        samples_per_class: int | None = None) -> TaskStream:
    """EKFT file -> stream: classes shuffled by seed, split evenly into tasks.

    Original labels are remapped to engine ids in learning order (task 0
    holds ids 0..classes_per_task-1, and so on); the mapping is kept on the
    stream. Engine-side arrays are float64.
    """
    tokens, labels, n_classes = read_feature_file(path)
    if tasks < 1:
        raise StreamError("need at least one task")
    if n_classes % tasks != 0:
        raise StreamError(f"{n_classes} classes do not split evenly into {tasks} tasks")
    per_task = n_classes // tasks
    rng = SeededRng(seed, stream=13)
    order = rng.derive(0).permutation(n_classes)
    label_map = {int(orig): new for new, orig in enumerate(order)}
    x64 = tokens.astype(np.float64)
    y = np.array([label_map[int(v)] for v in labels], dtype=np.int64)
    out_tasks = []
    for k in range(tasks):
        ids = tuple(range(k * per_task, (k + 1) * per_task))
        tr_ix, te_ix = [], []
        for c in ids:
            where = np.flatnonzero(y == c)
            if where.shape[0] < 2:
                raise StreamError(f"class {c} has {where.shape[0]} samples; need >= 2")
            if samples_per_class is not None:
                where = where[:samples_per_class]
            perm = rng.derive(1, c).permutation(where.shape[0])
            where = where[perm]
            n_train, _ = _split_counts(where.shape[0])
            tr_ix.append(where[:n_train])
            te_ix.append(where[n_train:])
        tr = np.sort(np.concatenate(tr_ix))
        te = np.sort(np.concatenate(te_ix))
        out_tasks.append(Task(ids, x64[tr], y[tr], x64[te], y[te]))
    stream = TaskStream(out_tasks, tokens.shape[1], tokens.shape[2], n_classes, label_map)
    stream.check_disjoint()
    return stream


# --- metrics ----------------------------------------------------------------

def accuracy(pred: Array, truth: Array) -> float:
    """Percent correct."""
    if pred.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return 100.0 * float((pred == truth).mean())


def average_forgetting(acc_matrix: list[list[float]]) -> float:
    """AF = mean over tasks t < T of (accuracy right after t - final accuracy)."""
    t_total = len(acc_matrix)
    if t_total < 2:
        raise ValueError("average forgetting needs at least two sessions")
    for t, row in enumerate(acc_matrix):
        if len(row) != t + 1:
            raise ValueError("accuracy matrix must be lower-triangular")
    final = acc_matrix[-1]
    drops = [acc_matrix[t][t] - final[t] for t in range(t_total - 1)]
    return float(np.mean(drops))


def summarize(acc_matrix: list[list[float]], weights: list[float] | None = None
              ) -> tuple[float, float]:
    """(A_Last, A_Avg) from the lower-triangular accuracy matrix.

    Per-session all-seen accuracy is the weighted mean of that session's row
    (weights default to equal, i.e. equal-size test sets).
    """
    if not acc_matrix:
        raise ValueError("empty accuracy matrix")
    session_acc = []
    for t, row in enumerate(acc_matrix):
        if len(row) != t + 1:
            raise ValueError("accuracy matrix must be lower-triangular")
        w = None if weights is None else np.asarray(weights[:t + 1], dtype=np.float64)
        session_acc.append(float(np.average(row, weights=w)))
    return session_acc[-1], float(np.mean(session_acc))


@dataclass
class MetricsReport:
    acc_matrix: list[list[float]]
    seen_acc: list[float]          # per-session all-seen accuracy (weighted)
    a_last: float
    a_avg: float
    af: float | None
    sdv_trace: list[float | None]
    config: dict
    seed: int

    def to_records(self) -> list[dict]:
        records = []
        for t, row in enumerate(self.acc_matrix):
            records.append({
                "record": "session",
                "session": t,
                "per_task_acc": [round(v, 10) for v in row],
                "seen_acc": round(self.seen_acc[t], 10),
                "sdv": None if self.sdv_trace[t] is None else round(self.sdv_trace[t], 12),
            })
        records.append({
            "record": "summary",
            "a_last": round(self.a_last, 10),
            "a_avg": round(self.a_avg, 10),
            "af": None if self.af is None else round(self.af, 10),
            "sdv_trace": [None if v is None else round(v, 12) for v in self.sdv_trace],
            "seed": self.seed,
            "config": self.config,
        })
        return records


def write_metrics(path, report: MetricsReport) -> None:
    """Line-delimited JSON, stable key order; byte-identical across reruns."""
    with open(path, "w") as fh:
        for rec in report.to_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
