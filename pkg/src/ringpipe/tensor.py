"""Deterministic tensor primitives and a counter-based random stream.

Tensors are plain C-contiguous float64 ndarrays of rank 1..3.  All public
operations are pure, raise instead of propagating non-finite values, and
return byte-identical results for equal inputs.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class DimensionError(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


def mix64(*parts):
    """Hash integers into a well-mixed 64-bit value (splitmix64 finalizer)."""
    h = 0
    for p in parts:
        h = (h + (int(p) & MASK64) * _GOLDEN) & MASK64
        h ^= h >> 30
        h = (h * _MIX1) & MASK64
        h ^= h >> 27
        h = (h * _MIX2) & MASK64
        h ^= h >> 31
    return h


def _mix_u64(x):
    # vectorized splitmix64 finalizer; numpy uint64 arithmetic wraps mod 2^64
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MIX1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MIX2)
    x ^= x >> np.uint64(31)
    return x


@dataclass
class SeededRng:
    """Counter-based uniform generator.

    The value at any (seed, position) is a pure function of those two
    numbers, so a stream can be replayed or entered at a random offset
    without generating the prefix.  Output bytes are platform-independent.
    """

    seed: int
    position: int = 0

    def uniform(self, shape):
        """Uniform [0,1) tensor; advances the stream by its element count."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        idx = np.arange(self.position, self.position + n, dtype=np.uint64)
        word = (np.uint64(self.seed) + (idx + np.uint64(1)) * np.uint64(_GOLDEN))
        u = _mix_u64(word) >> np.uint64(11)
        self.position += n
        return (u * (1.0 / (1 << 53))).reshape(shape)

    def uniform_signed(self, shape, scale):
        """Uniform (-scale, scale), the weight-init convenience form."""
        return (self.uniform(shape) * 2.0 - 1.0) * scale

    def at(self, position):
        """Same stream, repositioned; does not touch this instance."""
        return SeededRng(self.seed, position)

    def derive(self, *tags):
        """Independent child stream keyed by integer tags."""
        return SeededRng(mix64(self.seed, *tags))


def as_tensor(x):
    """Validate/coerce to a C-contiguous float64 array of rank 1..3."""
    t = np.ascontiguousarray(x, dtype=np.float64)
    if not 1 <= t.ndim <= 3:
        raise DimensionError(f"tensor rank must be 1..3, got {t.ndim}")
    return t


def check_finite(x, context=""):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {context or 'tensor'}")
    return x


def matmul(a, b):
    """2-d product with fixed left-to-right accumulation over the inner dim.

    Bit-identical to `c[i][j] = sum_p a[i][p]*b[p][j]` evaluated as a naive
    triple loop, which is what lets two differently-scheduled executions of
    the same math be compared bitwise.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dims disagree: {a.shape} x {b.shape}")
    return check_finite(kernels.mm(a, b), "matmul result")


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op, a, b):
    """Elementwise add/sub/mul of equal-shape tensors, or `scale` by a scalar."""
    a = as_tensor(a)
    if op == "scale":
        if np.ndim(b) != 0:
            raise DimensionError("scale takes a scalar second operand")
        return check_finite(a * float(b), "scale result")
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.ndim(b) == 0:
        return check_finite(_ELEMENTWISE[op](a, float(b)), f"{op} result")
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return check_finite(_ELEMENTWISE[op](a, b), f"{op} result")
