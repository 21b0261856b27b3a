"""Parameter importance: global per-channel scores, local per-hidden-unit
scores, their fusion into per-weight matrices, and the resulting
anchored-quadratic regularizer.

Global importance of a feature channel is |mean| / variance, accumulated
class by class: channels with high stable activation dominate a linear
decision score, so moving the weights that feed them is what destroys old
tasks. Local importance ranks an adapter's hidden units by how strongly a
perturbation there moves the final feature: the unit's routed activation,
optionally scaled by its outgoing |W_up| mass. The outer product of the two
gives one non-negative importance per scalar weight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import BackboneSnapshot, BatchTrace, forward_features
from .numerics import Array, as_f64

EPS_VAR = 1e-8

IMPORTANCE_MAGIC = b"EKPI"
IMPORTANCE_VERSION = 1


class ImportanceStoreError(ValueError):
    """Malformed or truncated importance store file."""


@dataclass
class ClassStats:
    """Mean, biased per-channel variance, and count of one class's features."""

    class_id: int
    mean: Array      # (d,)
    var: Array       # (d,), biased (1/n)
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("class stats need at least one sample")
        if (self.var < 0.0).any():
            raise ValueError("negative variance")


@dataclass
class ImportanceState:
    """Accumulated global/local importance and the fused per-weight matrices.

    All entries are >= 0 and non-decreasing across tasks; fusion is
    recomputed from the accumulators after every task.
    """

    g: Array      # (d,)
    l_dm: Array   # (L, d_h)
    l_um: Array   # (L, d_h)
    i_dm: Array   # (L, d, d_h)
    i_um: Array   # (L, d, d_h)
    task_index: int = 0

    @classmethod
    def zeros(cls, d: int, d_h: int, n_layers: int) -> "ImportanceState":
        return cls(
            g=np.zeros(d),
            l_dm=np.zeros((n_layers, d_h)),
            l_um=np.zeros((n_layers, d_h)),
            i_dm=np.zeros((n_layers, d, d_h)),
            i_um=np.zeros((n_layers, d, d_h)),
            task_index=0,
        )

    def copy(self) -> "ImportanceState":
        return ImportanceState(self.g.copy(), self.l_dm.copy(), self.l_um.copy(),
                               self.i_dm.copy(), self.i_um.copy(), self.task_index)


def class_stats(features, class_id: int = 0) -> ClassStats:
    """Mean and biased (1/n) per-channel variance of one class's features."""
    f = as_f64(features, "features")
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError("need a nonempty (n, d) feature matrix")
    mean = f.mean(axis=0)
    var = ((f - mean) ** 2).mean(axis=0)
    return ClassStats(class_id, mean, var, f.shape[0])


def update_global_importance(g_prev: Array, stats: list[ClassStats], eps: float = EPS_VAR) -> Array:
    """G <- G + mean over classes of |mean_c| / (var_c + eps), per channel."""
    if not stats:
        raise ValueError("no class stats")
    acc = np.zeros_like(g_prev)
    for st in stats:
        acc += np.abs(st.mean) / (st.var + eps)
    return g_prev + acc / len(stats)


def router_weighted_unit(u_tilde: Array) -> Array:
    """Condense (d_t, d_h) adapter intermediates to one vector.

    Each token row is weighted by its cosine similarity to the CLS row
    (row 0) and summed. Zero-norm rows get weight 0; a zero-norm CLS row
    zeroes the whole result.
    """
    u = np.asarray(u_tilde, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError("expected a (d_t, d_h) matrix")
    norms = np.linalg.norm(u, axis=1)
    if norms[0] == 0.0:
        return np.zeros(u.shape[1])
    dots = u @ u[0]
    w = np.zeros_like(norms)
    ok = norms > 0.0
    w[ok] = np.clip(dots[ok] / (norms[ok] * norms[0]), -1.0, 1.0)
    return w @ u


def router_weighted_units_batch(u_tildes: Array) -> Array:
    """router_weighted_unit over a (B, d_t, d_h) stack, vectorized."""
    u = np.asarray(u_tildes, dtype=np.float64)
    norms = np.linalg.norm(u, axis=2)                       # (B, d_t)
    cls = u[:, 0, :]                                        # (B, d_h)
    dots = np.einsum("bth,bh->bt", u, cls)
    denom = norms * norms[:, 0:1]
    w = np.zeros_like(dots)
    ok = denom > 0.0
    w[ok] = np.clip(dots[ok] / denom[ok], -1.0, 1.0)
    return np.einsum("bt,bth->bh", w, u)


def update_local_importance_down(l_prev: Array, units: Array, n_t: int | None = None) -> Array:
    """L <- L + mean over the task's routed units."""
    units = np.asarray(units, dtype=np.float64)
    if units.ndim != 2 or units.shape[0] == 0:
        raise ValueError("need a nonempty (N, d_h) unit stack")
    n = units.shape[0] if n_t is None else n_t
    return l_prev + units.sum(axis=0) / n


def weighted_up_unit(u: Array, w_up: Array) -> Array:
    """Scale routed units by each hidden unit's outgoing |W_up| mass."""
    u = np.asarray(u, dtype=np.float64)
    w_up = np.asarray(w_up, dtype=np.float64)
    if w_up.shape[0] != u.shape[-1]:
        raise ValueError(f"W_up {w_up.shape} does not match units {u.shape}")
    return u * np.abs(w_up).sum(axis=1)


def update_local_importance_up(l_prev: Array, hat_units: Array, n_t: int | None = None) -> Array:
    """Same accumulation as the down variant, over weight-scaled units."""
    return update_local_importance_down(l_prev, hat_units, n_t)


def fuse_importance(g: Array, l_dm: Array, l_um: Array,
                    eta1: float = 100.0, eta2: float = 1.0,
                    normalize: bool = False) -> tuple[Array, Array]:
    """Outer products G x L, one (d, d_h) importance matrix per adapter matrix.

    With normalize=True both scaled matrices are divided by their joint
    maximum, so the largest importance entry is exactly 1 each task while the
    up/down ratio set by eta1/eta2 is preserved. Off by default: raw
    accumulation suits short streams, but over many tasks the raw magnitudes
    (growing roughly quadratically with the task count) make the anchored
    quadratic stiffer than SGD at the default learning rate can tolerate.
    """
    i_dm = eta2 * np.outer(g, l_dm)
    i_um = eta1 * np.outer(g, l_um)
    if normalize:
        top = max(i_dm.max(), i_um.max())
        if top > 0.0:
            i_dm = i_dm / top
            i_um = i_um / top
    return i_dm, i_um


def ipr_loss(current: BackboneSnapshot, previous: BackboneSnapshot,
             imp: ImportanceState) -> tuple[float, Array, Array]:
    """Importance-weighted quadratic anchor of current adapters to previous.

    loss = sum_l <I_dm, (down_prev - down_cur)^2>
         + sum_l <I_um, (up_prev^T - up_cur^T)^2>

    Returns (loss, grad wrt current w_down (L,d,d_h), grad wrt current w_up
    (L,d_h,d)). The previous snapshot and the importance matrices are
    constants.
    """
    if (current.w_down.shape != previous.w_down.shape
            or current.w_up.shape != previous.w_up.shape):
        raise ValueError("snapshot architectures differ")
    d_down = current.w_down - previous.w_down                  # (L, d, d_h)
    d_up_t = np.swapaxes(current.w_up - previous.w_up, 1, 2)   # (L, d, d_h)
    loss = float((imp.i_dm * d_down ** 2).sum() + (imp.i_um * d_up_t ** 2).sum())
    g_down = 2.0 * imp.i_dm * d_down
    g_up = np.swapaxes(2.0 * imp.i_um * d_up_t, 1, 2)
    return loss, g_down, g_up


def run_importance_pass(x: Array, y: Array, bb_prev: BackboneSnapshot,
                        imp_prev: ImportanceState,
                        eta1: float = 100.0, eta2: float = 1.0,
                        eps: float = EPS_VAR, normalize: bool = False,
                        chunk: int = 256) -> ImportanceState:
    """One inference pass over a finished task's data -> new ImportanceState.

    Global update from per-class feature statistics, local updates from the
    routed adapter intermediates, then fusion. imp_prev is never mutated;
    bb_prev is the converged extractor of the task that just ended.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    n = x.shape[0]
    n_layers = bb_prev.n_layers
    feats = np.empty((n, bb_prev.d), dtype=np.float64)
    unit_sums = np.zeros((n_layers, bb_prev.d_h), dtype=np.float64)
    hat_sums = np.zeros((n_layers, bb_prev.d_h), dtype=np.float64)
    up_mass = np.abs(bb_prev.w_up).sum(axis=2)  # (L, d_h)
    for lo in range(0, n, chunk):
        trace: BatchTrace = forward_features(x[lo:lo + chunk], bb_prev)
        feats[lo:lo + chunk] = trace.features
        for l in range(n_layers):
            units = router_weighted_units_batch(trace.u_tildes[l])
            unit_sums[l] += units.sum(axis=0)
            hat_sums[l] += (units * up_mass[l]).sum(axis=0)
    stats = [class_stats(feats[y == c], int(c)) for c in np.unique(y)]
    g = update_global_importance(imp_prev.g, stats, eps)
    l_dm = imp_prev.l_dm + unit_sums / n
    l_um = imp_prev.l_um + hat_sums / n
    i_dm = np.empty_like(imp_prev.i_dm)
    i_um = np.empty_like(imp_prev.i_um)
    for l in range(n_layers):
        i_dm[l], i_um[l] = fuse_importance(g, l_dm[l], l_um[l], eta1, eta2, normalize)
    return ImportanceState(g, l_dm, l_um, i_dm, i_um, imp_prev.task_index + 1)


# --- persistence and reporting --------------------------------------------

_STORE_HEADER = struct.Struct("<4sIIIII")


def write_importance(path, imp: ImportanceState) -> None:
    """Binary store: header then G, per layer L_dm, L_um, I_dm, I_um (LE f64)."""
    n_layers, d_h = imp.l_dm.shape
    d = imp.g.shape[0]
    with open(path, "wb") as fh:
        fh.write(_STORE_HEADER.pack(IMPORTANCE_MAGIC, IMPORTANCE_VERSION,
                                    d, d_h, n_layers, imp.task_index))
        fh.write(imp.g.astype("<f8").tobytes())
        for l in range(n_layers):
            fh.write(imp.l_dm[l].astype("<f8").tobytes())
            fh.write(imp.l_um[l].astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(imp.i_dm[l]).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(imp.i_um[l]).astype("<f8").tobytes())


def read_importance(path) -> ImportanceState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _STORE_HEADER.size:
        raise ImportanceStoreError(f"truncated header: {len(raw)} bytes")
    magic, version, d, d_h, n_layers, task_index = _STORE_HEADER.unpack_from(raw)
    if magic != IMPORTANCE_MAGIC:
        raise ImportanceStoreError(f"bad magic {magic!r}")
    if version != IMPORTANCE_VERSION:
        raise ImportanceStoreError(f"unsupported version {version}")
    offset = _STORE_HEADER.size

    def take(count, shape, what):
        nonlocal offset
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise ImportanceStoreError(f"truncated {what} at byte {offset}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr.astype(np.float64)

    g = take(d, (d,), "G")
    l_dm = np.empty((n_layers, d_h))
    l_um = np.empty((n_layers, d_h))
    i_dm = np.empty((n_layers, d, d_h))
    i_um = np.empty((n_layers, d, d_h))
    for l in range(n_layers):
        l_dm[l] = take(d_h, (d_h,), f"L_dm[{l}]")
        l_um[l] = take(d_h, (d_h,), f"L_um[{l}]")
        i_dm[l] = take(d * d_h, (d, d_h), f"I_dm[{l}]")
        i_um[l] = take(d * d_h, (d, d_h), f"I_um[{l}]")
    if offset != len(raw):
        raise ImportanceStoreError(f"{len(raw) - offset} trailing bytes")
    return ImportanceState(g, l_dm, l_um, i_dm, i_um, task_index)


def format_importance_report(imp: ImportanceState, full: bool = False) -> str:
    """Self-describing key=value blocks, one per layer, blank-line separated."""
    lines = [
        "format=importance-report",
        "version=1",
        f"task_index={imp.task_index}",
        f"layers={imp.l_dm.shape[0]}",
        f"g_min={float(imp.g.min())!r}",
        f"g_mean={float(imp.g.mean())!r}",
        f"g_max={float(imp.g.max())!r}",
    ]
    for l in range(imp.l_dm.shape[0]):
        lines.append("")
        lines.append(f"layer={l}")
        for name, mat in (("i_dm", imp.i_dm[l]), ("i_um", imp.i_um[l])):
            lines.append(f"{name}_min={float(mat.min())!r}")
            lines.append(f"{name}_mean={float(mat.mean())!r}")
            lines.append(f"{name}_max={float(mat.max())!r}")
            if full:
                flat = ",".join(repr(float(v)) for v in mat.ravel())
                lines.append(f"{name}={flat}")
    return "\n".join(lines) + "\n"
