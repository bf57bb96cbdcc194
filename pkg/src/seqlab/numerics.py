"""Deterministic numeric foundations: checked linear algebra, stable
activations and log-space sums, and a seeded counter-based random source.

Everything is double precision. Matrices are 2-D float64 arrays (row major),
vectors are 1-D float64 arrays. Values are immutable by convention: no
function here mutates its inputs, and Rng is the only stateful object.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={m.ndim}")
    return m


def as_vector(v) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a vector, got ndim={x.ndim}")
    return x


def matmul(a, b) -> np.ndarray:
    """Checked matrix product. Summation order is fixed by the BLAS build,
    so repeated runs on one machine produce bit-identical results."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} times "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def logistic(x):
    """Numerically stable elementwise logistic sigmoid.

    Split by sign so the exponential argument is never positive: saturates
    cleanly to 1.0 / tiny denormal-range values instead of overflowing.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(v, kind: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if kind == "logistic":
        return logistic(v)
    if kind == "tanh":
        return np.tanh(v)
    raise ValueError(f"unknown activation kind: {kind!r}")


def log_sum_exp(terms) -> float:
    """log(sum(exp(terms))) via max-shifting; -inf iff every term is -inf."""
    t = np.asarray(terms, dtype=np.float64)
    if t.size == 0:
        raise ValueError("log_sum_exp of empty input")
    m = np.max(t)
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.sum(np.exp(t - m))))


def log_add(a: float, b: float) -> float:
    """Two-term log-space addition, tolerant of -inf operands."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + np.log1p(np.exp(b - a))


class Rng:
    """Seeded random source with an explicitly serialisable state.

    Backed by the Philox4x64-10 counter-based generator: the 64-bit seed
    becomes key word 0 (key word 1 and the counter start at zero), so the
    stream is a pure function of the seed, identical across platforms and
    runs. The generator state (counter, key, output buffer and partial-word
    bookkeeping) round-trips through `state_vector`/`restore` so training
    can be checkpointed and resumed mid-stream.
    """

    STATE_LEN = 23  # 10 uint64 words as hi/lo halves + 3 small ints

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bg = np.random.Philox(key=np.uint64(self.seed))
        self._gen = np.random.Generator(self._bg)

    def uniform(self, lo: float, hi: float, n: int) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=n)

    def gaussian(self, mean: float, sigma: float, n: int) -> np.ndarray:
        if sigma < 0:
            raise ValueError(f"gaussian requires sigma >= 0, got {sigma}")
        if sigma == 0:
            return np.full(n, float(mean))
        return self._gen.normal(mean, sigma, size=n)

    def integer(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi] inclusive."""
        return int(self._gen.integers(lo, hi + 1))

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        return self._gen.integers(lo, hi + 1, size=n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # -- state serialisation (fixed layout, all values exact in float64) --

    def state_vector(self) -> np.ndarray:
        st = self._bg.state
        words = np.concatenate(
            [
                np.asarray(st["state"]["counter"], dtype=np.uint64),
                np.asarray(st["state"]["key"], dtype=np.uint64),
                np.asarray(st["buffer"], dtype=np.uint64),
            ]
        )
        out = np.empty(self.STATE_LEN, dtype=np.float64)
        # each uint64 split into two 32-bit halves, both exact as doubles
        out[0:20:2] = (words >> np.uint64(32)).astype(np.float64)
        out[1:20:2] = (words & np.uint64(0xFFFFFFFF)).astype(np.float64)
        out[20] = float(st["buffer_pos"])
        out[21] = float(st["has_uint32"])
        out[22] = float(st["uinteger"])
        return out

    def restore(self, vec) -> None:
        vec = as_vector(vec)
        if vec.shape[0] != self.STATE_LEN:
            raise ValueError(
                f"rng state length mismatch: expected {self.STATE_LEN}, "
                f"got {vec.shape[0]}"
            )
        hi = vec[0:20:2].astype(np.uint64)
        lo = vec[1:20:2].astype(np.uint64)
        words = (hi << np.uint64(32)) | lo
        st = self._bg.state
        st["state"]["counter"] = words[0:4]
        st["state"]["key"] = words[4:6]
        st["buffer"] = words[6:10]
        st["buffer_pos"] = int(vec[20])
        st["has_uint32"] = int(vec[21])
        st["uinteger"] = int(vec[22])
        self._bg.state = st
