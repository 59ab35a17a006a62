"""Hot pointwise kernels on (z_e1, z_e2, R) arrays.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
fallback with identical semantics. The numba path is used when numba
imports cleanly, unless ``ICEC1D_KERNELS=numpy`` is set in the
environment. Reductions accumulate one partial per leading index and
sum those serially, so results do not depend on the thread count.
"""
import os

import numpy as np

__all__ = [
    "BACKEND",
    "potential_phase",
    "kinetic_phase",
    "pair_marginals",
    "exchange_residual",
    "entropy_sum",
    "norm2",
    "set_threads",
]


# ---------------------------------------------------------------------------
# numpy fallback

def _potential_phase_np(psi, a, b, c):
    n1 = psi.shape[0]
    part = np.empty(n1)
    for i in range(n1):
        f = a[i][None, :] * a * b[i][:, None] * c[None, :]
        psi[i] *= f
        part[i] = np.sum(psi[i].real ** 2 + psi[i].imag ** 2)
    return float(np.sum(part))


def _kinetic_phase_np(psi, e1, e2):
    outer = e1[:, None] * e2[None, :]
    for k in range(psi.shape[2]):
        psi[:, :, k] *= outer


def _pair_marginals_np(psi):
    p = psi.real ** 2 + psi.imag ** 2
    return p.sum(axis=2), p.sum(axis=1)


def _exchange_residual_np(psi, sign):
    n1 = psi.shape[0]
    part = np.empty(n1)
    for i in range(n1):
        d = psi[i] - sign * psi[:, i, :]
        part[i] = np.sum(d.real ** 2 + d.imag ** 2)
    return float(np.sum(part))


def _entropy_sum_np(rho, w, floor):
    rho = np.ravel(rho)
    w = np.broadcast_to(w, np.shape(rho)) if np.ndim(w) else np.full(rho.shape, w)
    w = np.ravel(w)
    m = rho > floor
    return float(-np.sum(w[m] * rho[m] * np.log2(rho[m])))


def _norm2_np(psi):
    flat = psi.reshape(psi.shape[0], -1)
    part = np.sum(flat.real ** 2 + flat.imag ** 2, axis=1)
    return float(np.sum(part))


# ---------------------------------------------------------------------------
# numba

_numba_kernels = None
if os.environ.get("ICEC1D_KERNELS", "numba").lower() != "numpy":
    try:
        import numba
        from numba import njit, prange

        # skip probing TBB (often too old); OpenMP/workqueue give the same results
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    except ImportError:  # pragma: no cover - depends on environment
        numba = None
    else:

        @njit(parallel=True, cache=True)
        def _potential_phase_nb(psi, a, b, c):
            n1, n2, n3 = psi.shape
            part = np.zeros(n1)
            for i in prange(n1):
                s = 0.0
                for j in range(n2):
                    bij = b[i, j]
                    for k in range(n3):
                        v = psi[i, j, k] * (a[i, k] * a[j, k] * bij * c[k])
                        psi[i, j, k] = v
                        s += v.real * v.real + v.imag * v.imag
                part[i] = s
            tot = 0.0
            for i in range(n1):
                tot += part[i]
            return tot

        @njit(parallel=True, cache=True)
        def _kinetic_phase_nb(psi, e1, e2):
            n1, n2, n3 = psi.shape
            for i in prange(n1):
                for j in range(n2):
                    f = e1[i] * e2[j]
                    for k in range(n3):
                        psi[i, j, k] *= f

        @njit(parallel=True, cache=True)
        def _pair_marginals_nb(psi):
            n1, n2, n3 = psi.shape
            r12 = np.zeros((n1, n2))
            r1k = np.zeros((n1, n3))
            for i in prange(n1):
                for j in range(n2):
                    s = 0.0
                    for k in range(n3):
                        v = psi[i, j, k]
                        p = v.real * v.real + v.imag * v.imag
                        s += p
                        r1k[i, k] += p
                    r12[i, j] = s
            return r12, r1k

        @njit(parallel=True, cache=True)
        def _exchange_residual_nb(psi, sign):
            n1, n2, n3 = psi.shape
            part = np.zeros(n1)
            for i in prange(n1):
                s = 0.0
                for j in range(n2):
                    for k in range(n3):
                        d = psi[i, j, k] - sign * psi[j, i, k]
                        s += d.real * d.real + d.imag * d.imag
                part[i] = s
            tot = 0.0
            for i in range(n1):
                tot += part[i]
            return tot

        @njit(cache=True)
        def _entropy_sum_nb(rho, w, floor):
            s = 0.0
            for i in range(rho.size):
                r = rho[i]
                if r > floor:
                    s -= w[i] * r * np.log2(r)
            return s

        @njit(parallel=True, cache=True)
        def _norm2_nb(flat):
            n1, n2 = flat.shape
            part = np.zeros(n1)
            for i in prange(n1):
                s = 0.0
                for j in range(n2):
                    v = flat[i, j]
                    s += v.real * v.real + v.imag * v.imag
                part[i] = s
            tot = 0.0
            for i in range(n1):
                tot += part[i]
            return tot

        _numba_kernels = numba

BACKEND = "numba" if _numba_kernels is not None else "numpy"


def set_threads(n):
    """Set the worker count for the numba kernels (no-op on numpy)."""
    if _numba_kernels is not None and n:
        _numba_kernels.set_num_threads(max(1, min(int(n), _numba_kernels.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# public dispatch

def potential_phase(psi, a, b, c):
    """In place ``psi[i,j,k] *= a[i,k] a[j,k] b[i,j] c[k]``; returns sum |psi|^2."""
    if BACKEND == "numba":
        return float(_potential_phase_nb(psi, a, b, c))
    return _potential_phase_np(psi, a, b, c)


def kinetic_phase(psi, e1, e2):
    """In place ``psi[i,j,k] *= e1[i] e2[j]``."""
    if BACKEND == "numba":
        _kinetic_phase_nb(psi, e1, e2)
    else:
        _kinetic_phase_np(psi, e1, e2)


def pair_marginals(psi):
    """Unweighted partial sums of |psi|^2: over k -> (n1, n2), over j -> (n1, n3)."""
    if BACKEND == "numba":
        return _pair_marginals_nb(psi)
    return _pair_marginals_np(psi)


def exchange_residual(psi, sign):
    """sum |psi[i,j,k] - sign*psi[j,i,k]|^2."""
    if BACKEND == "numba":
        return float(_exchange_residual_nb(psi, complex(sign)))
    return _exchange_residual_np(psi, sign)


def entropy_sum(rho, w, floor=1e-30):
    """-sum w*rho*log2(rho) over entries with rho > floor."""
    rho = np.asarray(rho, dtype=float)
    w = np.ascontiguousarray(np.broadcast_to(w, rho.shape), dtype=float).ravel()
    rho = np.ascontiguousarray(rho).ravel()
    if BACKEND == "numba":
        return float(_entropy_sum_nb(rho, w, floor))
    return _entropy_sum_np(rho, w, floor)


def norm2(psi):
    """Unweighted sum |psi|^2 with a thread-count independent reduction order."""
    flat = np.ascontiguousarray(psi).reshape(psi.shape[0], -1)
    if BACKEND == "numba":
        return float(_norm2_nb(flat))
    return _norm2_np(flat)
