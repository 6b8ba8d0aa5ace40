"""Pure-NumPy likelihood kernels; algorithmically identical to the compiled
extension and selected automatically when it is unavailable."""

from __future__ import annotations

import numpy as np

from . import tables as _tab

name = "numpy"


def block_accumulate(
    S: np.ndarray,
    subj_ids: np.ndarray,
    row_start: np.ndarray,
    T: np.ndarray,
    a: np.ndarray,
    level: np.ndarray,
    tab_v: np.ndarray,
    tab_m: np.ndarray,
    s: float,
    eta_pad: np.ndarray,
    use_tables: bool,
    threads: int,
) -> None:
    """Add one item's per-(subject, node) log-probability sums into S.

    Rows are grouped by subject: group g covers rows
    row_start[g]..row_start[g+1] and belongs to subject subj_ids[g].
    """
    mu = a[:, None] + T
    lvl = np.broadcast_to(level[:, None], mu.shape)
    if use_tables:
        x = (mu - _tab.GRID_LO) * _tab.INV_GRID_H
        j = np.floor(x).astype(np.int64)
        in_grid = (j >= 0) & (j < _tab.N_GRID - 1)
        jc = np.clip(j, 0, _tab.N_GRID - 2)
        t = x - jc
        v0 = tab_v[lvl, jc]
        v1 = tab_v[lvl, jc + 1]
        m0 = tab_m[lvl, jc]
        m1 = tab_m[lvl, jc + 1]
        c2 = -3.0 * v0 - 2.0 * m0 + 3.0 * v1 - m1
        c3 = 2.0 * v0 + m0 - 2.0 * v1 + m1
        val = v0 + t * (m0 + t * (c2 + t * c3))
        np.minimum(val, 0.0, out=val)
        ok = in_grid & np.isfinite(v0) & np.isfinite(v1)
        if not ok.all():
            bad = ~ok
            val[bad] = _tab.exact_cells(mu[bad], lvl[bad], s, eta_pad)
    else:
        val = _tab.exact_cells(mu, lvl, s, eta_pad)

    sums = np.add.reduceat(val, row_start[:-1], axis=0)
    S[subj_ids] += sums


def rows_logsumexp(S: np.ndarray, out: np.ndarray, threads: int) -> None:
    """out[i] = log sum_q exp(S[i, q]); -inf rows stay -inf."""
    m = S.max(axis=1)
    finite = np.isfinite(m)
    with np.errstate(invalid="ignore"):
        shifted = np.exp(S - np.where(finite, m, 0.0)[:, None])
    acc = shifted.sum(axis=1)
    out[:] = np.where(finite, m + np.log(acc), -np.inf)


def combine_logsumexp(blocks, out: np.ndarray, threads: int) -> None:
    """out[i] = log sum_q exp(sum_k blocks[k][i, q]), summed in list order."""
    if not blocks:
        raise ValueError("need at least one block")
    S = blocks[0].copy()
    for b in blocks[1:]:
        S += b
    rows_logsumexp(S, out, threads)
