"""Semantic drift: estimation, trainable penalty, prototype compensation,
and unified-classifier retraining from Gaussian replay.

When the extractor adapts to a new task, stored old-class prototypes go
stale. Drift of each old class is estimated from current-task data as a
weighted mean of per-sample feature changes between the previous and current
extractor, the weight being each sample's Gaussian affinity to the stored
prototype under the previous extractor. The squared drift magnitude doubles
as a training penalty; after convergence the prototypes are shifted by the
final estimate and a fresh linear head is trained on features sampled from
the compensated class Gaussians.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .importance import EPS_VAR, ClassStats
from .model import (BackboneSnapshot, LinearHead, forward_features,
                    linear_softmax_loss, sgd_step)
from .numerics import Array, SeededRng, as_f64, sample_diag_gaussian

PROTOTYPE_MAGIC = b"EKPP"
PROTOTYPE_VERSION = 1


class PrototypeStoreError(ValueError):
    """Malformed or truncated prototype store file."""


@dataclass
class Prototype:
    """Per-class feature Gaussian: mean, std, diagonal covariance, count."""

    class_id: int
    mean: Array   # (d,)
    std: Array    # (d,)
    cov: Array    # (d,) diagonal
    count: int
    task_origin: int

    def __post_init__(self):
        if (self.std < 0.0).any() or (self.cov < 0.0).any():
            raise ValueError("negative std/cov entry")

    @classmethod
    def from_stats(cls, stats: ClassStats, task_origin: int) -> "Prototype":
        return cls(stats.class_id, stats.mean.copy(), np.sqrt(stats.var),
                   stats.var.copy(), stats.count, task_origin)

    def copy(self) -> "Prototype":
        return Prototype(self.class_id, self.mean.copy(), self.std.copy(),
                         self.cov.copy(), self.count, self.task_origin)


@dataclass
class DriftEstimate:
    """Estimated drift per old class plus the weights needed for its gradient.

    alphas[i, c] is sample i's affinity to old class c under the previous
    extractor; mass[c] their sum. Classes whose weight mass underflowed to
    zero carry drift 0 and a low_confidence flag.
    """

    class_ids: Array       # (C,) int64
    deltas: Array          # (C, d)
    mass: Array            # (C,)
    alphas: Array          # (B, C)
    low_confidence: Array  # (C,) bool


def drift_from_features(prev_feats: Array, curr_feats: Array,
                        protos: list[Prototype], eps: float = EPS_VAR) -> DriftEstimate:
    """Drift of each old prototype from already-extracted feature pairs.

    Per sample i: delta_i = f_prev_i - f_curr_i. Per old class c the scalar
    weight is exp(-mean_k (f_prev_{i,k} - mean_{c,k})^2 / (2 std_{c,k}^2 + eps))
    and the class drift is the weighted mean of the delta_i.
    """
    if not protos:
        raise ValueError("no old prototypes")
    prev = as_f64(prev_feats, "previous features")
    curr = as_f64(curr_feats, "current features")
    if prev.shape != curr.shape or prev.ndim != 2 or prev.shape[0] == 0:
        raise ValueError("feature batches must be equal nonempty (B, d)")
    deltas_i = prev - curr
    n_c = len(protos)
    b = prev.shape[0]
    alphas = np.empty((b, n_c), dtype=np.float64)
    for j, p in enumerate(protos):
        diff = prev - p.mean[None, :]
        quad = (diff ** 2 / (2.0 * p.std[None, :] ** 2 + eps)).mean(axis=1)
        alphas[:, j] = np.exp(-quad)
    mass = alphas.sum(axis=0)
    low = mass == 0.0
    deltas = np.zeros((n_c, prev.shape[1]), dtype=np.float64)
    ok = ~low
    if ok.any():
        deltas[ok] = (alphas[:, ok].T @ deltas_i) / mass[ok, None]
    return DriftEstimate(
        class_ids=np.array([p.class_id for p in protos], dtype=np.int64),
        deltas=deltas, mass=mass, alphas=alphas, low_confidence=low)


def estimate_drift(x: Array, bb_prev: BackboneSnapshot, bb_curr: BackboneSnapshot,
                   protos: list[Prototype], eps: float = EPS_VAR) -> DriftEstimate:
    """Drift estimate from raw current-task inputs (two forward passes)."""
    prev_feats = forward_features(x, bb_prev).features
    curr_feats = forward_features(x, bb_curr).features
    return drift_from_features(prev_feats, curr_feats, protos, eps)


def tsd_loss(drift: DriftEstimate) -> tuple[float, Array]:
    """Squared drift magnitude summed over old classes, plus feature gradient.

    Returns (loss, grad wrt the current features that produced the drift).
    Previous-extractor features and the affinity weights are constants, so
    the only gradient path is the -f_curr inside each delta:

        dL/df_curr_i = -sum_c 2 (alpha_{i,c} / mass_c) delta_c
    """
    loss = float((drift.deltas ** 2).sum())
    scale = np.zeros_like(drift.alphas)
    ok = ~drift.low_confidence
    if ok.any():
        scale[:, ok] = drift.alphas[:, ok] / drift.mass[ok][None, :]
    dfeat = -2.0 * scale @ drift.deltas
    return loss, dfeat


def sdv_metric(drift: DriftEstimate) -> float:
    """Mean L2 drift magnitude over old classes."""
    if drift.deltas.shape[0] == 0:
        raise ValueError("empty drift estimate")
    return float(np.linalg.norm(drift.deltas, axis=1).mean())


def compensate_prototypes(protos: list[Prototype], drift: DriftEstimate,
                          current_stats: list[ClassStats], task_index: int
                          ) -> list[Prototype]:
    """Shift old prototype means by the estimated drift; add new classes.

    Old std/cov stay as captured at the class's origin task; only the mean
    moves. New-class prototypes are built fresh from the current statistics.
    """
    by_id = {int(c): j for j, c in enumerate(drift.class_ids)}
    out = []
    for p in protos:
        if p.class_id not in by_id:
            raise ValueError(f"drift estimate missing class {p.class_id}")
        q = p.copy()
        q.mean = q.mean + drift.deltas[by_id[p.class_id]]
        out.append(q)
    for st in current_stats:
        out.append(Prototype.from_stats(st, task_index))
    return out


def sample_replay_set(protos: list[Prototype], n_per_class: int, rng: SeededRng
                      ) -> tuple[Array, Array]:
    """n_per_class Gaussian draws per prototype, labeled with the class ids."""
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    if not protos:
        raise ValueError("no prototypes to sample from")
    feats = []
    labels = []
    for p in sorted(protos, key=lambda p: p.class_id):
        feats.append(sample_diag_gaussian(p.mean, p.cov, n_per_class, rng.derive(p.class_id)))
        labels.append(np.full(n_per_class, p.class_id, dtype=np.int64))
    return np.concatenate(feats, axis=0), np.concatenate(labels)


def train_unified_classifier(protos: list[Prototype], head: LinearHead,
                             epochs: int, rng: SeededRng,
                             lr: float = 0.01, weight_decay: float = 0.0005,
                             batch_size: int = 48, n_per_class: int = 64
                             ) -> LinearHead:
    """Retrain the unified head on Gaussian replay of all (compensated) classes.

    Only the head's parameters change. Gradients are the summed cross entropy
    rescaled by batch size before each SGD step.
    """
    if not protos:
        raise ValueError("no prototypes")
    head = head.copy()
    feats, labels = sample_replay_set(protos, n_per_class, rng.derive(7001))
    n = feats.shape[0]
    for epoch in range(epochs):
        order = rng.derive(7002, epoch).permutation(n)
        for lo in range(0, n, batch_size):
            ix = order[lo:lo + batch_size]
            _, g_w, g_b = linear_softmax_loss(head, feats[ix], labels[ix])
            scale = 1.0 / ix.shape[0]
            sgd_step([head.weights, head.bias], [g_w * scale, g_b * scale],
                     lr, weight_decay)
    return head


# --- prototype store -------------------------------------------------------
#
# Layout (little-endian): magic "EKPP" | u32 version | u32 d | u32 count,
# then per class: u32 class_id | u32 task_origin | u64 n_c,
# f_c (d f64), sigma_c (d f64), Sigma_c (d f64).

_PROTO_HEADER = struct.Struct("<4sIII")
_PROTO_RECORD = struct.Struct("<IIQ")


def write_prototypes(path, protos: list[Prototype]) -> None:
    if not protos:
        raise ValueError("refusing to write an empty prototype store")
    d = protos[0].mean.shape[0]
    with open(path, "wb") as fh:
        fh.write(_PROTO_HEADER.pack(PROTOTYPE_MAGIC, PROTOTYPE_VERSION, d, len(protos)))
        for p in sorted(protos, key=lambda p: p.class_id):
            fh.write(_PROTO_RECORD.pack(p.class_id, p.task_origin, p.count))
            fh.write(p.mean.astype("<f8").tobytes())
            fh.write(p.std.astype("<f8").tobytes())
            fh.write(p.cov.astype("<f8").tobytes())


def read_prototypes(path) -> list[Prototype]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PROTO_HEADER.size:
        raise PrototypeStoreError(f"truncated header: {len(raw)} bytes")
    magic, version, d, count = _PROTO_HEADER.unpack_from(raw)
    if magic != PROTOTYPE_MAGIC:
        raise PrototypeStoreError(f"bad magic {magic!r}")
    if version != PROTOTYPE_VERSION:
        raise PrototypeStoreError(f"unsupported version {version}")
    offset = _PROTO_HEADER.size
    protos = []
    for _ in range(count):
        if offset + _PROTO_RECORD.size + 3 * d * 8 > len(raw):
            raise PrototypeStoreError(f"truncated record at byte {offset}")
        class_id, task_origin, n_c = _PROTO_RECORD.unpack_from(raw, offset)
        offset += _PROTO_RECORD.size
        vecs = []
        for _k in range(3):
            vecs.append(np.frombuffer(raw, dtype="<f8", count=d, offset=offset).astype(np.float64))
            offset += d * 8
        protos.append(Prototype(class_id, vecs[0], vecs[1], vecs[2], n_c, task_origin))
    if offset != len(raw):
        raise PrototypeStoreError(f"{len(raw) - offset} trailing bytes")
    return protos
