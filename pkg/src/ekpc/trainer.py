"""Per-task orchestration: adapter + head training under the combined loss,
importance refresh, drift compensation, and unified-classifier retraining.

The per-task cosine heads drive the training losses; evaluation always goes
through the unified linear head, and task identity is never consulted at
test time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bench import MetricsReport, Task, TaskStream, accuracy, average_forgetting, summarize
from .drift import (Prototype, compensate_prototypes, drift_from_features,
                    sdv_metric, train_unified_classifier, tsd_loss)
from .importance import ImportanceState, class_stats, ipr_loss, run_importance_pass
from .model import (BackboneSnapshot, CosineClassifier, LinearHead,
                    backward_features, cosine_margin_loss, extract_features,
                    forward_features, init_backbone, sgd_step)
from .numerics import Array, SeededRng


class ProtocolError(ValueError):
    """Violation of the class-incremental protocol."""


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference recipe."""

    lr: float = 0.01
    weight_decay: float = 0.0005
    batch_size: int = 48
    epochs_first: int = 30
    epochs_rest: int = 15
    epochs_unified: int = 5
    s: float = 20.0           # cosine logit scale
    m: float = 0.01           # cosine margin
    eta1: float = 100.0       # up-matrix importance scale
    eta2: float = 1.0         # down-matrix importance scale
    w1: float = 1.0           # importance-regularizer weight
    w2: float = 1.0           # drift-penalty weight
    eps: float = 1e-8         # variance floor
    n_replay: int = 64        # Gaussian replay samples per class
    seed: int = 0
    tsdc: bool = True         # drift estimation + prototype compensation
    normalize_importance: bool = False  # per-task max-normalization of fused importance
    cosine_decay: bool = False

    def validate(self) -> None:
        positive = ["lr", "batch_size", "epochs_first", "epochs_rest",
                    "epochs_unified", "s", "n_replay"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        nonneg = ["weight_decay", "m", "eta1", "eta2", "w1", "w2", "eps"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class TaskGradients:
    g_down: Array  # (L, d, d_h)
    g_up: Array    # (L, d_h, d)
    g_clf: Array   # (K, d)


@dataclass
class ContinualState:
    """Everything that survives between tasks. No raw samples, ever."""

    backbone: BackboneSnapshot
    previous: BackboneSnapshot | None
    importance: ImportanceState
    prototypes: list[Prototype]
    classifier: CosineClassifier
    unified: LinearHead | None
    task_index: int = 0
    sdv_trace: list[float | None] = field(default_factory=list)

    def seen_classes(self) -> set[int]:
        return {p.class_id for p in self.prototypes}


def init_state(d: int, d_h: int, d_t: int, n_layers: int, cfg: TrainConfig,
               serial: bool = False) -> ContinualState:
    cfg.validate()
    rng = SeededRng(cfg.seed)
    bb = init_backbone(d, d_h, d_t, n_layers, rng.derive(1), serial)
    clf = CosineClassifier(np.zeros((0, d), dtype=np.float64), cfg.s, cfg.m)
    return ContinualState(
        backbone=bb, previous=None,
        importance=ImportanceState.zeros(d, d_h, n_layers),
        prototypes=[], classifier=clf, unified=None)


def total_loss(x: Array, y: Array, state: ContinualState, cfg: TrainConfig
               ) -> tuple[float, dict, TaskGradients]:
    """Combined loss on one batch: cosine + w1 * importance + w2 * drift.

    For the first task both regularizers are identically zero. Returns the
    scalar loss, its components, and gradients for every trainable tensor.
    """
    trace = forward_features(x, state.backbone)
    feats = trace.features
    loss_cos, g_clf, dfeat = cosine_margin_loss(feats, y, state.classifier)
    parts = {"cos": loss_cos, "ipr": 0.0, "tsd": 0.0}
    g_down_extra = None
    g_up_extra = None
    if state.previous is not None and cfg.w1 > 0.0:
        loss_i, g_down_extra, g_up_extra = ipr_loss(state.backbone, state.previous,
                                                    state.importance)
        parts["ipr"] = loss_i
    if (state.previous is not None and cfg.tsdc and cfg.w2 > 0.0
            and state.prototypes):
        prev_feats = forward_features(x, state.previous).features
        drift = drift_from_features(prev_feats, feats, state.prototypes, cfg.eps)
        loss_t, dfeat_t = tsd_loss(drift)
        parts["tsd"] = loss_t
        dfeat = dfeat + cfg.w2 * dfeat_t
    g_down, g_up = backward_features(dfeat, trace, state.backbone)
    if g_down_extra is not None:
        g_down += cfg.w1 * g_down_extra
        g_up += cfg.w1 * g_up_extra
    loss = parts["cos"] + cfg.w1 * parts["ipr"] + cfg.w2 * parts["tsd"]
    return loss, parts, TaskGradients(g_down, g_up, g_clf)


def _check_task_classes(state: ContinualState, task: Task) -> None:
    seen = state.seen_classes()
    overlap = seen.intersection(task.class_ids)
    if overlap:
        raise ProtocolError(f"task reuses classes {sorted(overlap)}")
    k = state.classifier.n_classes
    expected = tuple(range(k, k + len(task.class_ids)))
    if tuple(sorted(task.class_ids)) != expected:
        raise ProtocolError(
            f"task classes {sorted(task.class_ids)} must be the next dense block {expected}")


def train_task(state: ContinualState, task: Task, cfg: TrainConfig) -> ContinualState:
    """Run one full incremental session, mutating and returning the state.

    Order: SGD epochs on the combined loss; snapshot the converged extractor;
    importance refresh on the finished task's data; drift estimation on a
    clean full pass, prototype compensation, new-class prototypes; unified
    classifier retraining from Gaussian replay.
    """
    cfg.validate()
    _check_task_classes(state, task)
    t = state.task_index
    rng = SeededRng(cfg.seed)
    state.classifier.grow(len(task.class_ids), rng.derive(5, t))
    epochs = cfg.epochs_first if t == 0 else cfg.epochs_rest
    n = task.train_x.shape[0]
    for epoch in range(epochs):
        lr = cfg.lr
        if cfg.cosine_decay:
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        order = rng.derive(3, t, epoch).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            ix = order[lo:lo + cfg.batch_size]
            _, _, grads = total_loss(task.train_x[ix], task.train_y[ix], state, cfg)
            sgd_step([state.backbone.w_down, state.backbone.w_up, state.classifier.weights],
                     [grads.g_down, grads.g_up, grads.g_clf],
                     lr, cfg.weight_decay)
    converged = state.backbone.copy()

    # importance refresh (Algorithm: one inference pass with the converged extractor)
    state.importance = run_importance_pass(
        task.train_x, task.train_y, converged, state.importance,
        cfg.eta1, cfg.eta2, cfg.eps, cfg.normalize_importance)

    # prototype bookkeeping: drift-compensate old classes, record new ones
    feats = extract_features(task.train_x, converged)
    stats = [class_stats(feats[task.train_y == c], int(c))
             for c in sorted(set(int(v) for v in task.train_y))]
    sdv: float | None = None
    if state.previous is not None and cfg.tsdc and state.prototypes:
        prev_feats = extract_features(task.train_x, state.previous)
        drift = drift_from_features(prev_feats, feats, state.prototypes, cfg.eps)
        state.prototypes = compensate_prototypes(state.prototypes, drift, stats, t)
        sdv = sdv_metric(drift)
    else:
        state.prototypes = [p.copy() for p in state.prototypes]
        state.prototypes.extend(Prototype.from_stats(st, t) for st in stats)
    state.sdv_trace.append(sdv)

    state.previous = converged

    # unified classifier: start from the concatenated cosine-head directions
    # (row norms carry no meaning for cosine heads), retrain on replay
    rows = state.classifier.weights
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    head = LinearHead.from_rows(rows / np.where(norms == 0.0, 1.0, norms))
    state.unified = train_unified_classifier(
        state.prototypes, head, cfg.epochs_unified, rng.derive(9, t),
        cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.n_replay)
    state.task_index = t + 1
    return state


def evaluate(state: ContinualState, test_tasks: list[Task]) -> list[float]:
    """Percent accuracy per task via the unified head; task identity unused."""
    if state.task_index < 1 or state.unified is None:
        raise ProtocolError("no trained task to evaluate")
    out = []
    for task in test_tasks:
        feats = extract_features(task.test_x, state.backbone)
        pred = state.unified.predict(feats)
        out.append(accuracy(pred, task.test_y))
    return out


def run_stream(stream: TaskStream, cfg: TrainConfig, d_h: int, n_layers: int,
               serial: bool = False, config_echo: dict | None = None
               ) -> tuple[ContinualState, MetricsReport]:
    """Train the whole stream and assemble the metrics report."""
    stream.check_disjoint()
    cfg.validate()
    state = init_state(stream.d, d_h, stream.d_t, n_layers, cfg, serial)
    acc_matrix: list[list[float]] = []
    seen_acc: list[float] = []
    weights = [float(t.test_x.shape[0]) for t in stream.tasks]
    for k, task in enumerate(stream.tasks):
        state = train_task(state, task, cfg)
        row = evaluate(state, stream.tasks[:k + 1])
        acc_matrix.append(row)
        seen_acc.append(float(np.average(row, weights=weights[:k + 1])))
    a_last, a_avg = summarize(acc_matrix, weights)
    af = average_forgetting(acc_matrix) if len(acc_matrix) >= 2 else None
    report = MetricsReport(
        acc_matrix=acc_matrix, seen_acc=seen_acc, a_last=a_last, a_avg=a_avg,
        af=af, sdv_trace=list(state.sdv_trace),
        config=config_echo or {}, seed=cfg.seed)
    return state, report
