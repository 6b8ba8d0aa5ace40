# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled likelihood kernels.

Hot loop over (observation row, integration node) cells.  Each cell reads a
cubic-Hermite table of the per-(item, level) log category probability as a
function of the latent value; cells outside the table range or hitting
non-finite nodes use the exact erfc-based path.

Determinism contract: parallelism is over subjects, each subject's
accumulator rows are written by exactly one thread in a fixed row order, so
results are bit-identical for any thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport INFINITY, erfc, exp, isfinite, log, log1p

cdef double LOG_SQRT_2PI = 0.9189385332046727
cdef double INV_SQRT2 = 0.7071067811865476

name = "compiled"


cdef inline double _log_ndtr(double x) noexcept nogil:
    cdef double x2
    if x > 8.0:
        return log1p(-0.5 * erfc(x * INV_SQRT2))
    elif x >= -37.0:
        return log(0.5 * erfc(-x * INV_SQRT2))
    else:
        x2 = x * x
        return -0.5 * x2 - LOG_SQRT_2PI - log(-x) + log1p(-1.0 / x2 + 3.0 / (x2 * x2))


cdef inline double _log_prob_diff(double u, double v) noexcept nogil:
    # log(Phi(u) - Phi(v)) for u >= v; works in the smaller tail
    cdef double big, small, lb, x
    if v == -INFINITY:
        if u == INFINITY:
            return 0.0
        return _log_ndtr(u)
    if u == INFINITY:
        return _log_ndtr(-v)
    if u + v <= 0.0:
        big = u
        small = v
    else:
        big = -v
        small = -u
    lb = _log_ndtr(big)
    x = _log_ndtr(small) - lb
    if x >= 0.0:
        return -INFINITY
    return lb + log1p(-exp(x))


cdef void _accum_group(
    double[:, ::1] S,
    Py_ssize_t sid,
    Py_ssize_t r0,
    Py_ssize_t r1,
    const double[:, ::1] T,
    const double[::1] a,
    const long[::1] level,
    const double[:, ::1] tab_v,
    const double[:, ::1] tab_m,
    double grid_lo,
    double inv_h,
    Py_ssize_t n_grid,
    double s,
    const double[::1] eta_pad,
    bint use_tables,
) noexcept nogil:
    cdef Py_ssize_t r, q, j, l, nq = S.shape[1]
    cdef double ar, mu, x, t, v0, v1, m0, m1, c2, c3, val
    for r in range(r0, r1):
        ar = a[r]
        l = level[r]
        for q in range(nq):
            mu = ar + T[r, q]
            if use_tables:
                x = (mu - grid_lo) * inv_h
                if x >= 0.0 and x < n_grid - 1:
                    j = <Py_ssize_t> x
                    v0 = tab_v[l, j]
                    v1 = tab_v[l, j + 1]
                    if isfinite(v0) and isfinite(v1):
                        t = x - j
                        m0 = tab_m[l, j]
                        m1 = tab_m[l, j + 1]
                        c2 = -3.0 * v0 - 2.0 * m0 + 3.0 * v1 - m1
                        c3 = 2.0 * v0 + m0 - 2.0 * v1 + m1
                        val = v0 + t * (m0 + t * (c2 + t * c3))
                        if val > 0.0:
                            val = 0.0
                        S[sid, q] += val
                        continue
            S[sid, q] += _log_prob_diff(
                s * (eta_pad[l + 1] - mu), s * (eta_pad[l] - mu)
            )


def block_accumulate(
    double[:, ::1] S,
    const long[::1] subj_ids,
    const long[::1] row_start,
    const double[:, ::1] T,
    const double[::1] a,
    const long[::1] level,
    const double[:, ::1] tab_v,
    const double[:, ::1] tab_m,
    double s,
    const double[::1] eta_pad,
    bint use_tables,
    int threads,
):
    """Add one item's per-(subject, node) log-probability sums into S."""
    from . import tables as _tab
    cdef double grid_lo = _tab.GRID_LO
    cdef double inv_h = _tab.INV_GRID_H
    cdef Py_ssize_t n_grid = tab_v.shape[1]
    cdef Py_ssize_t g = subj_ids.shape[0]
    cdef Py_ssize_t gi
    if threads > 1:
        for gi in prange(g, nogil=True, schedule="static", num_threads=threads):
            _accum_group(
                S, subj_ids[gi], row_start[gi], row_start[gi + 1], T, a, level,
                tab_v, tab_m, grid_lo, inv_h, n_grid, s, eta_pad, use_tables,
            )
    else:
        with nogil:
            for gi in range(g):
                _accum_group(
                    S, subj_ids[gi], row_start[gi], row_start[gi + 1], T, a, level,
                    tab_v, tab_m, grid_lo, inv_h, n_grid, s, eta_pad, use_tables,
                )


def rows_logsumexp(const double[:, ::1] S, double[::1] out, int threads):
    """out[i] = log sum_q exp(S[i, q]); -inf rows stay -inf."""
    cdef Py_ssize_t n = S.shape[0], nq = S.shape[1]
    cdef Py_ssize_t i
    if threads > 1:
        for i in prange(n, nogil=True, schedule="static", num_threads=threads):
            out[i] = _row_lse(S, i, nq)
    else:
        with nogil:
            for i in range(n):
                out[i] = _row_lse(S, i, nq)


cdef inline double _combined_row_lse(
    const cnp.intp_t[::1] ptrs, Py_ssize_t nblocks, Py_ssize_t i, Py_ssize_t nq,
    double* scratch,
) noexcept nogil:
    cdef Py_ssize_t k, q
    cdef const double* block
    cdef double m = -INFINITY, acc = 0.0, v
    block = (<const double*> ptrs[0]) + i * nq
    for q in range(nq):
        scratch[q] = block[q]
    for k in range(1, nblocks):
        block = (<const double*> ptrs[k]) + i * nq
        for q in range(nq):
            scratch[q] += block[q]
    for q in range(nq):
        if scratch[q] > m:
            m = scratch[q]
    if m == -INFINITY:
        return -INFINITY
    for q in range(nq):
        acc += exp(scratch[q] - m)
    return m + log(acc)


def combine_logsumexp(blocks, double[::1] out, int threads):
    """out[i] = log sum_q exp(sum_k blocks[k][i, q]), blocks summed in list
    order.  All blocks must be C-contiguous (N, nq) float64 arrays."""
    import numpy as _np
    cdef Py_ssize_t nblocks = len(blocks)
    if nblocks == 0:
        raise ValueError("need at least one block")
    first = blocks[0]
    cdef Py_ssize_t n = first.shape[0], nq = first.shape[1]
    for b in blocks:
        if b.shape != (n, nq) or not b.flags["C_CONTIGUOUS"] or b.dtype != _np.float64:
            raise ValueError("blocks must be matching C-contiguous float64 arrays")
    ptr_arr = _np.array([b.ctypes.data for b in blocks], dtype=_np.intp)
    cdef cnp.intp_t[::1] ptrs = ptr_arr
    scratch_arr = _np.empty(nq * (threads if threads > 1 else 1), dtype=_np.float64)
    cdef double[::1] scratch = scratch_arr
    cdef Py_ssize_t i
    if threads > 1:
        for i in prange(n, nogil=True, schedule="static", num_threads=threads):
            out[i] = _combined_row_lse(ptrs, nblocks, i, nq, &scratch[_openmp_tid() * nq])
    else:
        with nogil:
            for i in range(n):
                out[i] = _combined_row_lse(ptrs, nblocks, i, nq, &scratch[0])


cdef extern from "omp.h":
    int omp_get_thread_num() nogil


cdef inline int _openmp_tid() noexcept nogil:
    return omp_get_thread_num()


cdef inline double _row_lse(const double[:, ::1] S, Py_ssize_t i, Py_ssize_t nq) noexcept nogil:
    cdef Py_ssize_t q
    cdef double m = -INFINITY, acc = 0.0
    for q in range(nq):
        if S[i, q] > m:
            m = S[i, q]
    if m == -INFINITY:
        return -INFINITY
    for q in range(nq):
        acc += exp(S[i, q] - m)
    return m + log(acc)
