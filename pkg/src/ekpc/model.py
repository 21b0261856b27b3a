"""Frozen layered backbone with per-block adapters, plus the classifier heads.

The backbone is a stack of fixed orthogonal-initialized blocks with tanh
nonlinearity; the only trainable extractor parameters are the bottleneck
adapters (W_down, W_up, no biases) attached to each block. The forward pass
records per-layer inputs and post-ReLU adapter intermediates so the
importance machinery can consume them; the backward pass is analytic and
checked against central differences.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import Array, DegenerateVectorError, SeededRng, as_f64, check_finite

CHECKPOINT_MAGIC = b"EKPC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


@dataclass
class Adapter:
    """Trainable bottleneck: down-project, ReLU, up-project. No biases."""

    w_down: Array  # (d, d_h)
    w_up: Array    # (d_h, d)

    def __post_init__(self):
        d, d_h = self.w_down.shape
        if self.w_up.shape != (d_h, d):
            raise ValueError(f"w_up shape {self.w_up.shape} does not match w_down {self.w_down.shape}")
        if d_h >= d:
            raise ValueError(f"hidden dim {d_h} must be smaller than feature dim {d}")


@dataclass
class BackboneSnapshot:
    """Full extractor state: frozen block weights plus per-layer adapters.

    w_blocks are never updated after construction; training touches only
    w_down / w_up. `serial` switches adapter placement from the default
    parallel branch to one applied after the frozen block output.
    """

    w_blocks: Array  # (L, d, d), frozen
    w_down: Array    # (L, d, d_h)
    w_up: Array      # (L, d_h, d)
    d_t: int
    serial: bool = False

    @property
    def n_layers(self) -> int:
        return self.w_blocks.shape[0]

    @property
    def d(self) -> int:
        return self.w_blocks.shape[1]

    @property
    def d_h(self) -> int:
        return self.w_down.shape[2]

    def adapters(self) -> list[Adapter]:
        return [Adapter(self.w_down[l], self.w_up[l]) for l in range(self.n_layers)]

    def copy(self) -> "BackboneSnapshot":
        return BackboneSnapshot(
            self.w_blocks.copy(), self.w_down.copy(), self.w_up.copy(),
            self.d_t, self.serial,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.w_blocks, self.w_down, self.w_up):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def frozen_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.w_blocks).tobytes()).hexdigest()


@dataclass
class ForwardTrace:
    """Per-layer record of one sample's forward pass.

    inputs[l] is the token matrix entering layer l, hidden[l] the post-ReLU
    adapter intermediate (always >= 0), feature the CLS row of the output.
    """

    inputs: Array   # (L, d_t, d)
    hidden: Array   # (L, d_t, d_h)
    output: Array   # (d_t, d)
    feature: Array  # (d,)


@dataclass
class BatchTrace:
    xs: Array        # (L+1, B, d_t, d)
    u_tildes: Array  # (L, B, d_t, d_h)
    tanhs: Array     # (L, B, d_t, d)

    @property
    def features(self) -> Array:
        return self.xs[-1][:, 0, :]


def orthogonal_matrix(d: int, rng: SeededRng) -> Array:
    """Deterministic orthogonal d x d matrix (sign-fixed QR of a Gaussian)."""
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_backbone(d: int, d_h: int, d_t: int, n_layers: int, rng: SeededRng,
                  serial: bool = False) -> BackboneSnapshot:
    """Fresh backbone: orthogonal frozen blocks, small-uniform W_down, zero W_up.

    Zero W_up means the adapters contribute nothing before training, so the
    first task starts from the frozen-backbone feature exactly.
    """
    if d_h >= d:
        raise ValueError("d_h must be smaller than d")
    w_blocks = np.stack([orthogonal_matrix(d, rng.derive(100 + l)) for l in range(n_layers)])
    bound = 1.0 / np.sqrt(d)
    w_down = np.stack([rng.derive(200 + l).uniform(-bound, bound, (d, d_h)) for l in range(n_layers)])
    w_up = np.zeros((n_layers, d_h, d), dtype=np.float64)
    return BackboneSnapshot(w_blocks, w_down, w_up, d_t, serial)


def adapter_forward(x: Array, adapter: Adapter) -> tuple[Array, Array]:
    """y = relu(x @ W_down) @ W_up; also returns the post-ReLU intermediate."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != adapter.w_down.shape[0]:
        raise ValueError(f"token matrix {x.shape} does not match W_down {adapter.w_down.shape}")
    u_tilde = np.maximum(x @ adapter.w_down, 0.0)
    y = u_tilde @ adapter.w_up
    return y, u_tilde


def forward_features(x_batch: Array, bb: BackboneSnapshot) -> BatchTrace:
    """Batched forward through the selected kernel backend."""
    x_batch = np.ascontiguousarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 3 or x_batch.shape[1] != bb.d_t or x_batch.shape[2] != bb.d:
        raise ValueError(f"expected (B, {bb.d_t}, {bb.d}) tokens, got {x_batch.shape}")
    xs, u_tildes, tanhs = kernels.forward_batch(
        x_batch, bb.w_blocks, bb.w_down, bb.w_up, bb.serial)
    check_finite(xs[-1], "backbone output")
    return BatchTrace(xs, u_tildes, tanhs)


def extract_features(x_batch: Array, bb: BackboneSnapshot, chunk: int = 256) -> Array:
    """CLS features for a large batch without keeping the traces around."""
    x_batch = np.ascontiguousarray(x_batch, dtype=np.float64)
    out = np.empty((x_batch.shape[0], bb.d), dtype=np.float64)
    for lo in range(0, x_batch.shape[0], chunk):
        out[lo:lo + chunk] = forward_features(x_batch[lo:lo + chunk], bb).features
    return out


def backbone_forward(x0: Array, bb: BackboneSnapshot) -> ForwardTrace:
    """Single-sample forward returning the full per-layer trace."""
    trace = forward_features(np.asarray(x0, dtype=np.float64)[None], bb)
    return ForwardTrace(
        inputs=trace.xs[:-1, 0],
        hidden=trace.u_tildes[:, 0],
        output=trace.xs[-1, 0],
        feature=trace.features[0].copy(),
    )


def backward_features(dfeat: Array, trace: BatchTrace, bb: BackboneSnapshot) -> tuple[Array, Array]:
    """Adapter gradients for a (B, d) gradient on the CLS features."""
    return kernels.backward_batch(
        np.ascontiguousarray(dfeat, dtype=np.float64),
        trace.xs, trace.u_tildes, trace.tanhs,
        bb.w_blocks, bb.w_down, bb.w_up, bb.serial)


@dataclass
class CosineClassifier:
    """Per-class weight rows scored by scaled, margin-shifted cosine."""

    weights: Array  # (K, d)
    s: float = 20.0
    m: float = 0.01

    def __post_init__(self):
        if self.s <= 0.0:
            raise ValueError("scale s must be positive")
        if self.m < 0.0:
            raise ValueError("margin m must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def grow(self, n_new: int, rng: SeededRng, bound: float = 0.01) -> None:
        """Append rows for new classes, small-uniform initialized."""
        d = self.weights.shape[1]
        new = rng.uniform(-bound, bound, (n_new, d))
        self.weights = np.concatenate([self.weights, new], axis=0)

    def copy(self) -> "CosineClassifier":
        return CosineClassifier(self.weights.copy(), self.s, self.m)


def cosine_margin_loss(features: Array, labels: Array, clf: CosineClassifier
                       ) -> tuple[float, Array, Array]:
    """Margin softmax over cosine logits.

    Per sample with true class y: z_y = exp(s (cos_y - m)) competes against
    exp(s cos_i) for every other class; the loss is the batch mean of
    -log(z_y / (z_y + sum_i exp(s cos_i))). Returns (loss, grad wrt classifier
    weights, grad wrt features); both gradients go through the cosine
    normalization, so scaling a feature leaves the logits unchanged.
    """
    f = as_f64(features, "features")
    labels = np.asarray(labels, dtype=np.int64)
    w = clf.weights
    if f.ndim != 2 or f.shape[1] != w.shape[1]:
        raise ValueError(f"features {f.shape} do not match classifier dim {w.shape[1]}")
    if labels.shape != (f.shape[0],):
        raise ValueError("labels must be one id per feature row")
    if labels.min() < 0 or labels.max() >= clf.n_classes:
        raise ValueError("label outside classifier range")
    nf = np.linalg.norm(f, axis=1)
    nw = np.linalg.norm(w, axis=1)
    if (nf == 0.0).any():
        raise DegenerateVectorError("zero-norm feature in cosine loss")
    if (nw == 0.0).any():
        raise DegenerateVectorError("zero-norm classifier row in cosine loss")
    b = f.shape[0]
    f_hat = f / nf[:, None]
    w_hat = w / nw[:, None]
    cos = np.clip(f_hat @ w_hat.T, -1.0, 1.0)  # (B, K)
    onehot = np.zeros_like(cos)
    onehot[np.arange(b), labels] = 1.0
    logits = clf.s * (cos - clf.m * onehot)
    logits -= logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    p = ex / ex.sum(axis=1, keepdims=True)
    loss = float(-np.log(p[np.arange(b), labels]).sum() / b)
    # dL/dcos, then chain through the normalization of both sides.
    d_cos = clf.s * (p - onehot) / b
    row = (d_cos * cos).sum(axis=1)
    col = (d_cos * cos).sum(axis=0)
    grad_f = (d_cos @ w_hat - f_hat * row[:, None]) / nf[:, None]
    grad_w = (d_cos.T @ f_hat - w_hat * col[:, None]) / nw[:, None]
    check_finite(grad_f, "cosine loss feature gradient")
    return loss, grad_w, grad_f


@dataclass
class LinearHead:
    """Plain linear-softmax head used as the unified classifier."""

    weights: Array  # (K, d)
    bias: Array     # (K,)

    @classmethod
    def from_rows(cls, rows: Array) -> "LinearHead":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows.copy(), np.zeros(rows.shape[0], dtype=np.float64))

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def logits(self, features: Array) -> Array:
        return features @ self.weights.T + self.bias

    def predict(self, features: Array) -> Array:
        return np.argmax(self.logits(features), axis=1)

    def copy(self) -> "LinearHead":
        return LinearHead(self.weights.copy(), self.bias.copy())


def linear_softmax_loss(head: LinearHead, features: Array, labels: Array
                        ) -> tuple[float, Array, Array]:
    """Summed cross entropy of the linear head over a feature batch.

    Returns (loss, grad wrt weights, grad wrt bias). The sum (not mean) form
    is what the gradient tests pin down; SGD callers rescale per batch.
    """
    f = as_f64(features, "features")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= head.n_classes:
        raise ValueError("label outside head range")
    logits = head.logits(f)
    logits = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    p = ex / ex.sum(axis=1, keepdims=True)
    b = f.shape[0]
    loss = float(-np.log(p[np.arange(b), labels]).sum())
    dlogits = p.copy()
    dlogits[np.arange(b), labels] -= 1.0
    grad_w = dlogits.T @ f
    grad_b = dlogits.sum(axis=0)
    return loss, grad_w, grad_b


def sgd_step(params, grads, lr: float, weight_decay: float = 0.0) -> None:
    """In-place p <- p - lr (g + weight_decay p) over matching array lists."""
    if isinstance(params, np.ndarray):
        params, grads = [params], [grads]
    for p, g in zip(params, grads, strict=True):
        if p.shape != g.shape:
            raise ValueError(f"parameter {p.shape} / gradient {g.shape} shape mismatch")
        p -= lr * (g + weight_decay * p)


# --- checkpoint file -------------------------------------------------------
#
# Layout (all little-endian):
#   magic "EKPC" | u32 version | u32 d | u32 d_h | u32 d_t | u32 n_layers
#   | u32 n_classes | u32 serial | f64 s | f64 m
#   then per layer: W_block (d*d f64), W_down (d*d_h f64), W_up (d_h*d f64)
#   then classifier rows (n_classes*d f64), row-major.

_HEADER = struct.Struct("<4sIIIIIIIdd")


def write_checkpoint(path, bb: BackboneSnapshot, clf: CosineClassifier) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bb.d, bb.d_h, bb.d_t,
            bb.n_layers, clf.n_classes, int(bb.serial), clf.s, clf.m))
        for l in range(bb.n_layers):
            fh.write(np.ascontiguousarray(bb.w_blocks[l]).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(bb.w_down[l]).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(bb.w_up[l]).astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(clf.weights).astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[BackboneSnapshot, CosineClassifier]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"truncated header: {len(raw)} bytes")
    magic, version, d, d_h, d_t, n_layers, n_classes, serial, s, m = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    offset = _HEADER.size

    def take(count, shape, what):
        nonlocal offset
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"truncated {what} at byte {offset}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr.astype(np.float64)

    w_blocks = np.empty((n_layers, d, d), dtype=np.float64)
    w_down = np.empty((n_layers, d, d_h), dtype=np.float64)
    w_up = np.empty((n_layers, d_h, d), dtype=np.float64)
    for l in range(n_layers):
        w_blocks[l] = take(d * d, (d, d), f"W_block[{l}]")
        w_down[l] = take(d * d_h, (d, d_h), f"W_down[{l}]")
        w_up[l] = take(d_h * d, (d_h, d), f"W_up[{l}]")
    rows = take(n_classes * d, (n_classes, d), "classifier rows")
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after classifier rows")
    bb = BackboneSnapshot(w_blocks, w_down, w_up, d_t, bool(serial))
    return bb, CosineClassifier(rows, s, m)
