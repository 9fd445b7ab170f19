"""Dense numerics shared by every other module: row normalization, stable
reductions and seeded, stream-splittable randomness.

All arrays are float64.
"""

from __future__ import annotations

import numpy as np


class DivergedError(ArithmeticError):
    """A training or fitting loop produced a non-finite value."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def row_norms(m) -> np.ndarray:
    """Euclidean row norms, scaled by the row max so tiny entries do not underflow."""
    m = as_matrix(m)
    top = np.max(np.abs(m), axis=1) if m.shape[1] else np.zeros(m.shape[0])
    safe = np.where(top > 0.0, top, 1.0)
    scaled = m / safe[:, None]
    return top * np.sqrt(np.einsum("ij,ij->i", scaled, scaled))


def l2_normalize_rows(m) -> np.ndarray:
    """Scale every nonzero row to unit Euclidean norm.

    Zero rows are returned unchanged (an untrained encoder may legitimately
    emit them and they must not turn into NaN).
    """
    m = as_matrix(m)
    norms = row_norms(m)
    safe = np.where(norms > 0.0, norms, 1.0)
    return m / safe[:, None]


def l2_normalize_rows_backward(raw, grad_normalized) -> np.ndarray:
    """Pull a gradient through ``l2_normalize_rows``.

    For y = z/|z| the Jacobian-vector product is (g - y (y.g)) / |z|.
    Zero rows pass the gradient through unchanged, matching the identity
    used in the forward direction.
    """
    raw = as_matrix(raw)
    g = as_matrix(grad_normalized)
    norms = row_norms(raw)
    safe = np.where(norms > 0.0, norms, 1.0)
    y = raw / safe[:, None]
    proj = np.einsum("ij,ij->i", y, g)
    out = (g - y * proj[:, None]) / safe[:, None]
    zero = norms == 0.0
    if zero.any():
        out[zero] = g[zero]
    return out


def log_sum_exp(v, axis=None):
    """log(sum(exp(v))) by max-shift.

    With ``axis=None`` the input is treated as one flat vector and a float is
    returned; otherwise the reduction runs along ``axis``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise ValueError("empty reduction")
    if axis is None:
        top = float(np.max(v))
        return top + float(np.log(np.sum(np.exp(v - top))))
    top = np.max(v, axis=axis, keepdims=True)
    out = top + np.log(np.sum(np.exp(v - top), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(logits, axis=-1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    lse = log_sum_exp(logits, axis=axis)
    return logits - np.expand_dims(lse, axis)


class RngStream:
    """A reproducible random stream keyed by ``(master_seed, stream_id)``.

    Streams are derived with ``numpy.random.SeedSequence`` feeding a Philox
    counter-based generator, so two streams with different ids never share
    state and a given key always produces the same sequence, no matter how
    many other streams exist or in which order they are consumed.
    Sub-streams are keyed by extra integers via :meth:`child`.
    """

    def __init__(self, master_seed: int, stream_id: int = 0, *path: int):
        if master_seed < 0 or stream_id < 0 or any(p < 0 for p in path):
            raise ValueError("seeds and stream ids must be non-negative")
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(self.stream_id, *self.path)
        )
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"RngStream({self.master_seed}, {self.stream_id}, path={self.path})"

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_id, *self.path, *keys)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def gaussian(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choose(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in random order."""
        if k > n:
            raise ValueError("sample larger than population")
        if k < 0:
            raise ValueError("sample size must be non-negative")
        return self._gen.permutation(n)[:k]
