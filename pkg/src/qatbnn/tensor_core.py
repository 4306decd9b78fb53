"""Dense numerical core: shapes, linear algebra, convolution, pooling,
activations, loss and a counter-based random stream.

Tensors are plain float64 numpy arrays. Functions here take and return
arrays; none of them mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError

_MASK64 = (1 << 64) - 1
PROB_FLOOR = 1e-12


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """A (seed, stream_id) key into the Philox counter-based generator.

    The stream is a value, not a cursor: every call to :meth:`generator`
    restarts the same sequence. Use :meth:`child` to derive sub-streams.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def child(self, *path: int) -> "RngStream":
        sid = self.stream_id
        for idx in path:
            sid = _splitmix64(sid ^ _splitmix64((int(idx) + 1) & _MASK64))
        return RngStream(self.seed, sid)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def gaussian_sample(rng: RngStream, dims) -> np.ndarray:
    """I.i.d. standard normal draws, reproducible per (seed, stream_id)."""
    return rng.generator().standard_normal(tuple(dims))


def _as2d(a, name):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = _as2d(a, "a")
    b = _as2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return kernels.matmul(a, b)


def conv_output_shape(h, w, kh, kw, stride):
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def conv2d_batch(x, kernels_, stride=1) -> np.ndarray:
    """Valid cross-correlation of a batch (N, C, H, W) with (F, C, kh, kw)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(kernels_, dtype=np.float64)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv2d expects (N,C,H,W) input and (F,C,kh,kw) kernels")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, kernels {k.shape[1]}")
    if k.shape[2] > x.shape[2] or k.shape[3] > x.shape[3]:
        raise ShapeError(f"kernel {k.shape[2:]} larger than input {x.shape[2:]}")
    if stride < 1:
        raise ShapeError("stride must be positive")
    return kernels.conv2d_forward(x, k, int(stride))


def conv2d_batch_backward(x, kernels_, dout, stride=1):
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(kernels_, dtype=np.float64)
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    return kernels.conv2d_backward(x, k, dout, int(stride))


def conv2d(inp, kernels_, stride=1) -> np.ndarray:
    """Single-example convolution: (C, H, W) * (F, C, kh, kw) -> (F, H', W')."""
    inp = np.asarray(inp, dtype=np.float64)
    if inp.ndim != 3:
        raise ShapeError(f"conv2d input must be (C,H,W), got {inp.shape}")
    return conv2d_batch(inp[None], kernels_, stride)[0]


def maxpool_pairs(x, axis):
    """Max over non-overlapping pairs along ``axis``; a trailing odd entry is dropped.

    Returns (pooled, argmax) where argmax in {0, 1} picks the winning element
    of each pair (first element on ties).
    """
    n = x.shape[axis]
    if n < 2:
        raise ShapeError(f"pooling axis has length {n} < 2")
    half = n // 2
    a = np.take(x, np.arange(0, 2 * half, 2), axis=axis)
    b = np.take(x, np.arange(1, 2 * half, 2), axis=axis)
    pick = b > a
    return np.where(pick, b, a), pick


def maxpool_pairs_backward(dout, pick, axis, length):
    shape = list(dout.shape)
    shape[axis] = length
    dx = np.zeros(shape, dtype=np.float64)
    half = dout.shape[axis]
    idx_a = [slice(None)] * dout.ndim
    idx_b = [slice(None)] * dout.ndim
    idx_a[axis] = slice(0, 2 * half, 2)
    idx_b[axis] = slice(1, 2 * half, 2)
    dx[tuple(idx_a)] = np.where(pick, 0.0, dout)
    dx[tuple(idx_b)] = np.where(pick, dout, 0.0)
    return dx


def maxpool_2x1(inp) -> np.ndarray:
    """(C, H, W) -> (C, H//2, W), max over row pairs."""
    inp = np.asarray(inp, dtype=np.float64)
    if inp.ndim != 3:
        raise ShapeError(f"maxpool_2x1 input must be (C,H,W), got {inp.shape}")
    return maxpool_pairs(inp, axis=1)[0]


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits, axis=-1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[axis] < 1:
        raise ShapeError("softmax needs at least one entry")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
