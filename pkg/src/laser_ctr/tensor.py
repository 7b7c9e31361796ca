"""Dense float32 kernels shared by the attention model and the baselines.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float32. Every kernel
checks shapes up front and raises :class:`ShapeError` naming both operands.
``matmul`` accepts leading batch axes so the same kernel serves the batched
training path.

A thread-local operation counter can be switched on with :func:`count_ops`;
matmul records multiply-adds and scalar FLOPs (one per multiply, one per add).
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from scipy import sparse

DTYPE = np.float32
LN_EPS = 1e-5
MASK_FILL = -1e9


class ShapeError(ValueError):
    pass


@dataclass
class OpCounter:
    macs: int = 0
    flops: int = 0

    def add_matmul(self, batch, m, k, n):
        self.macs += batch * m * k * n
        # k multiplies and k-1 adds per output element
        self.flops += batch * m * n * (2 * k - 1)


_local = threading.local()


@contextlib.contextmanager
def count_ops():
    """Count matmul work done on this thread inside the block."""
    prev = getattr(_local, "counter", None)
    counter = OpCounter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _counter():
    return getattr(_local, "counter", None)


def as_matrix(x, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with a shape check; leading axes of ``a`` are batch axes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    c = _counter()
    if c is not None:
        k = a.shape[-1]
        n = b.shape[-1] if b.ndim > 1 else 1
        m = a.shape[-2] if a.ndim > 1 else 1
        batch = int(np.prod(out.shape)) // max(m * n, 1) if out.size else 0
        c.add_matmul(batch, m, k, n)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function that never overflows."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, DTYPE))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; ``mask`` marks the entries that take part.

    Masked entries get exactly zero weight. A row with no unmasked entry is an
    error.
    """
    x = np.asarray(x)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row is fully masked")
        x = np.where(mask, x, MASK_FILL)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    """Normalise the last axis (population variance), then scale and shift."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gain + bias


def reshape_segments(x: np.ndarray, w: int) -> np.ndarray:
    """View rows of ``x`` as ``(rows // w, w, cols)``; leading batch axes kept."""
    x = np.asarray(x)
    if w < 1 or x.shape[-2] % w:
        raise ShapeError(f"cannot split {x.shape[-2]} rows into segments of {w}")
    return x.reshape(*x.shape[:-2], x.shape[-2] // w, w, x.shape[-1])


def max_pool_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"max_pool_rows needs at least one row, got {x.shape}")
    return x.max(axis=0)


def ffn_forward(x, w1, b1, w2, b2):
    """Two-layer ReLU feed-forward block applied row-wise."""
    w1 = np.asarray(w1)
    w2 = np.asarray(w2)
    if w1.shape[1] != np.shape(b1)[0] or w2.shape[0] != w1.shape[1] or w2.shape[1] != np.shape(b2)[0]:
        raise ShapeError(
            f"ffn shapes inconsistent: w1 {w1.shape}, b1 {np.shape(b1)}, "
            f"w2 {w2.shape}, b2 {np.shape(b2)}"
        )
    return matmul(relu(matmul(x, w1) + b1), w2) + b2


def outer_sum(a, b):
    """``sum_n a[n]^T b[n]`` over all leading axes, i.e. a weight gradient."""
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    return matmul(a2.T, b2)


def scatter_add(out, idx, vals):
    """``out[idx[n]] += vals[n]`` with repeated indices accumulated (in place)."""
    idx = np.asarray(idx).ravel()
    if idx.size == 0:
        return out
    vals = vals.reshape(idx.size, -1)
    onehot = sparse.csr_matrix(
        (np.ones(idx.size, vals.dtype), (idx, np.arange(idx.size))), shape=(out.shape[0], idx.size)
    )
    out += (onehot @ vals).reshape(out.shape).astype(out.dtype, copy=False)
    return out
