"""Dense float32 kernels used by every other module.

Vectors and matrices are plain numpy arrays (1-D and C-contiguous 2-D,
``float32``). The kernels are written so that their results do not depend
on where a row sits inside a matrix or on the order of a vector's entries:

* :func:`matvec` reduces each row independently, so gathering rows into a
  new matrix reproduces the corresponding outputs bit for bit.
* :func:`softmax` sums the exponentials in sorted order, so permuting the
  logits permutes the probabilities without changing any of them.

Both properties are what make pruned and full-vocabulary exits agree
exactly when nothing is actually pruned.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, NumericError

DTYPE = np.float32
LN_EPS = 1e-6


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=DTYPE)
    if v.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(x: np.ndarray, name: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains NaN or Inf")
    return x


def matvec(W: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Return ``W @ h`` with a fixed per-row summation order."""
    W = as_matrix(W, "W")
    h = as_vector(h, "h")
    if W.shape[1] != h.shape[0]:
        raise InvalidInputError(
            f"dimension mismatch: W is {W.shape[0]}x{W.shape[1]}, h has length {h.shape[0]}"
        )
    # Not W @ h: BLAS may block rows differently depending on their offset.
    return (W * h).sum(axis=1, dtype=DTYPE)


def softmax(logits: np.ndarray) -> np.ndarray:
    l = as_vector(logits, "logits")
    if l.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    check_finite(l, "logits")
    e = np.exp(l - l.max())
    return e / np.sort(e).sum(dtype=DTYPE)


def top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, largest first.

    Equal values are ordered by ascending index, which makes the result a
    pure function of the input. ``top_k(v, len(v))`` is the stable
    descending argsort.
    """
    v = as_vector(values, "values")
    n = v.shape[0]
    k = int(k)
    if not 1 <= k <= n:
        raise InvalidInputError(f"top_k needs 1 <= K <= {n}, got K={k}")
    if k == n:
        return np.argsort(-v, kind="stable")
    # kth-largest value is the cut; everything strictly above it is kept,
    # ties at the cut are filled lowest-index first.
    cut = np.partition(v, n - k)[n - k]
    above = np.flatnonzero(v > cut)
    at_cut = np.flatnonzero(v == cut)[: k - above.size]
    chosen = np.concatenate([above, at_cut])
    order = np.lexsort((chosen, -v[chosen]))
    return chosen[order]


def argmax(values: np.ndarray) -> int:
    # np.argmax already returns the first (lowest-index) maximum.
    return int(np.argmax(values))


def layer_norm(h: np.ndarray, gain: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    h = as_vector(h, "h")
    gain = as_vector(gain, "gain")
    if h.size == 0:
        raise InvalidInputError("layer_norm of an empty vector")
    if gain.shape != h.shape:
        raise InvalidInputError(f"gain length {gain.size} != input length {h.size}")
    # statistics in float64: a float32 mean leaves residue that 1/sqrt(eps) amplifies
    centered = h.astype(np.float64) - h.mean(dtype=np.float64)
    var = (centered * centered).mean()
    return (centered / np.sqrt(var + eps)).astype(DTYPE) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    c = DTYPE(np.sqrt(2.0 / np.pi))
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(c * (x + DTYPE(0.044715) * x * x * x)))
