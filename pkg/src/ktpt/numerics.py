"""Dense matrices and the PCG32 generator.

Matrices are plain ``numpy`` float64 arrays of rank 2 (row-major). A single
logit vector is a 1xK matrix and a minibatch is a stack of rows.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from .errors import NumericError, ShapeError

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF
PCG_MULT = 6364136223846793005


def as_matrix(x, *, name="matrix") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 2-D array, checking finiteness."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _pcg_output(old):
    """XSH-RR output permutation, vectorised over uint64 states."""
    xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & np.uint64(MASK32)
    rot = old >> np.uint64(59)
    left = (np.uint64(32) - rot) & np.uint64(31)
    out = (xorshifted >> rot) | ((xorshifted << left) & np.uint64(MASK32))
    return out.astype(np.uint32)


class Pcg32:
    """PCG32 (XSH-RR, 64-bit state) seeded the same way as ``pcg32_srandom_r``.

    Not thread-safe; give each consumer its own ``stream``.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.state = 0
        self.inc = ((stream << 1) | 1) & MASK64
        self.next_u32()
        self.state = (self.state + seed) & MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * PCG_MULT + self.inc) & MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & MASK32

    def next_u32_array(self, n: int) -> np.ndarray:
        """``n`` outputs, bit-identical to ``n`` calls of :meth:`next_u32`.

        The k-th state is ``A_k * s + C_k (mod 2**64)``; the (A, C) tables are
        built by repeated doubling so the work is O(log n) numpy calls.
        """
        if n <= 0:
            return np.zeros(0, dtype=np.uint32)
        a_m, c_m = PCG_MULT, self.inc
        A = np.array([1], dtype=np.uint64)
        C = np.array([0], dtype=np.uint64)
        while A.size < n:
            am = np.uint64(a_m)
            cm = np.uint64(c_m)
            A = np.concatenate([A, A * am])
            C = np.concatenate([C, C * am + cm])
            a_m, c_m = (a_m * a_m) & MASK64, (a_m * c_m + c_m) & MASK64
        A = A[:n]
        C = C[:n]
        states = A * np.uint64(self.state) + C
        out = _pcg_output(states)
        last = int(states[-1])
        self.state = (last * PCG_MULT + self.inc) & MASK64
        return out

    def uniform(self, size=None):
        """Uniform draws on [0, 1) with 32-bit resolution."""
        if size is None:
            return self.next_u32() / 4294967296.0
        n = int(np.prod(size))
        return (self.next_u32_array(n).astype(np.float64) / 4294967296.0).reshape(size)

    def normal(self, mean: float = 0.0, stddev: float = 1.0, size=None):
        """Gaussian draws by Box-Muller; each draw consumes two outputs.

        The sine branch is discarded so that a draw depends only on the
        generator state at the moment of the call.
        """
        if stddev < 0:
            raise ValueError(f"stddev must be non-negative, got {stddev}")
        n = 1 if size is None else int(np.prod(size))
        raw = self.next_u32_array(2 * n).astype(np.float64)
        u1 = (raw[0::2] + 1.0) / 4294967296.0
        u2 = raw[1::2] / 4294967296.0
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        if stddev == 0:
            z = np.zeros_like(z)
        z = mean + stddev * z
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def bounded(self, bound: int) -> int:
        """Unbiased integer in [0, bound), as ``pcg32_boundedrand_r``."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = ((1 << 32) - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of ``range(n)`` from 64-bit sort keys."""
        raw = self.next_u32_array(2 * n).astype(np.uint64)
        keys = (raw[0::2] << np.uint64(32)) | raw[1::2]
        return np.argsort(keys, kind="stable")


def rng_next_u32(rng: Pcg32) -> int:
    return rng.next_u32()


def rng_gaussian(rng: Pcg32, mean: float, stddev: float) -> float:
    return rng.normal(mean, stddev)


def stream_id(label: str) -> int:
    """Stable stream number for a text label (CRC-32, platform independent)."""
    return zlib.crc32(label.encode("utf-8"))


def rng_for(seed: int, label: str) -> Pcg32:
    return Pcg32(seed, stream_id(label))
