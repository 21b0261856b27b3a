"""Dense float64 primitives shared by the whole engine.

Everything here is deliberately small: a counter-based seeded RNG with
derivable substreams, cosine similarity, diagonal-Gaussian sampling, and the
central-difference gradient oracle used by every gradient test.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_MASK64 = (1 << 64) - 1


class DegenerateVectorError(ValueError):
    """A vector that must be nonzero has zero norm."""


class NonFiniteError(ValueError):
    """A computation produced NaN or Inf."""


def as_f64(a, name: str = "array") -> Array:
    """Coerce to a C-contiguous float64 array, rejecting non-finite entries."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return out


def check_finite(a: Array, name: str = "result") -> Array:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def _splitmix64(x: int) -> int:
    # Standard splitmix64 scramble; stable across platforms, unlike hash().
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class SeededRng:
    """Counter-based random stream keyed by (seed, stream).

    Philox is counter-based, so substreams derived from the same seed with
    different stream words never overlap and do not depend on draw order.
    `derive` folds extra indices into the stream word, giving each task,
    epoch, or worker its own independent stream.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *indices: int) -> "SeededRng":
        word = self.stream
        for ix in indices:
            word = _splitmix64(word ^ _splitmix64(int(ix) & _MASK64))
        return SeededRng(self.seed, word)

    # Thin passthroughs so call sites do not reach for .generator everywhere.
    def standard_normal(self, shape) -> Array:
        return self.generator.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> Array:
        return self.generator.uniform(low, high, shape)

    def permutation(self, n: int) -> Array:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, shape=None):
        return self.generator.integers(low, high, shape)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def cosine_similarity(a, b) -> float:
    """cos(a, b) = a.b / (|a||b|), clamped to [-1, 1] against rounding.

    Raises DegenerateVectorError on a zero-norm input; callers that want a
    zero-weight fallback (the similarity router) handle that themselves.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def sample_diag_gaussian(mean, var, n: int, rng: SeededRng) -> Array:
    """Draw n i.i.d. samples from N(mean, diag(var)); var = 0 reproduces mean."""
    mean = as_f64(mean, "mean")
    var = as_f64(var, "var")
    if mean.shape != var.shape or mean.ndim != 1:
        raise ValueError(f"mean/var shape mismatch: {mean.shape} vs {var.shape}")
    if (var < 0.0).any():
        raise ValueError("negative variance entry")
    if n < 0:
        raise ValueError("sample count must be >= 0")
    z = rng.standard_normal((n, mean.shape[0]))
    return mean[None, :] + np.sqrt(var)[None, :] * z


def finite_diff_gradient(f: Callable[[Array], float], x, h: float = 1e-5) -> Array:
    """Central-difference gradient (f(x+h e_k) - f(x-h e_k)) / 2h per coordinate.

    The independent oracle for every analytic gradient in the engine; it only
    calls f, never any backward code.
    """
    x = as_f64(x, "x")
    if h <= 0.0:
        raise ValueError("step h must be positive")
    grad = np.empty_like(x)
    for k in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_on(f: Callable[[], float], arrays: Sequence[Array], h: float = 1e-5) -> list[Array]:
    """finite_diff_gradient over a list of parameter arrays edited in place.

    Convenience wrapper for checking gradients of losses that read their
    parameters from live model state rather than a flat vector.
    """
    grads = []
    for arr in arrays:
        flat = arr.reshape(-1)
        g = np.empty_like(flat)
        for k in range(flat.shape[0]):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f())
            flat[k] = orig - h
            fm = float(f())
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value at coordinate {k}")
            g[k] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(arr.shape))
    return grads
