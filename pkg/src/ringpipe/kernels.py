"""Deterministic dense matmul kernels.

Every kernel accumulates each output element strictly left-to-right over the
inner dimension, so results are bit-identical to a naive triple loop.  BLAS
is deliberately avoided: blocked/FMA reductions reorder the sum and break
the bitwise-replay guarantees the rest of the engine is built on.

The numba kernels are compiled without fastmath, which keeps IEEE semantics
and stops LLVM from reassociating the reduction; only the independent output
lanes get vectorized.  Set RINGPIPE_NO_NUMBA=1 to force the (slow, equally
exact) numpy fallback.
"""

import os

import numpy as np

_USE_NUMBA = os.environ.get("RINGPIPE_NO_NUMBA", "") != "1"

if _USE_NUMBA:
    import numba

    @numba.njit("f8[:,::1](f8[:,::1], f8[:,::1], f8[:,::1])", cache=True, nogil=True)
    def _mm2(a, b, out):
        m, kk = a.shape
        n = b.shape[1]
        for i in range(m):
            for j in range(n):
                out[i, j] = 0.0
            for p in range(kk):
                aip = a[i, p]
                for j in range(n):
                    out[i, j] += aip * b[p, j]
        return out

    @numba.njit("f8[:,:,::1](f8[:,:,::1], f8[:,:,::1], f8[:,:,::1])", cache=True, nogil=True)
    def _bmm3(a, b, out):
        nb, m, kk = a.shape
        n = b.shape[2]
        for s in range(nb):
            for i in range(m):
                for j in range(n):
                    out[s, i, j] = 0.0
                for p in range(kk):
                    aip = a[s, i, p]
                    for j in range(n):
                        out[s, i, j] += aip * b[s, p, j]
        return out

else:

    def _mm2(a, b, out):
        out[:] = 0.0
        for p in range(a.shape[1]):
            out += np.multiply.outer(a[:, p], b[p, :])
        return out

    def _bmm3(a, b, out):
        for s in range(a.shape[0]):
            _mm2(a[s], b[s], out[s])
        return out


def _as_c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def mm(a, b):
    """C = A @ B for 2-d float64 arrays, naive-loop accumulation order."""
    a = _as_c64(a)
    b = _as_c64(b)
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    return _mm2(a, b, out)


def bmm(a, b):
    """Batched matmul over the leading axis of two rank-3 arrays."""
    a = _as_c64(a)
    b = _as_c64(b)
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=np.float64)
    return _bmm3(a, b, out)


def warmup():
    """Trigger JIT compilation so timed sections do not pay for it."""
    e = np.eye(2)
    mm(e, e)
    bmm(e[None, :, :], e[None, :, :])
