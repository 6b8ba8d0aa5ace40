"""Marginal log-likelihood by quasi Monte-Carlo integration over the random
effects, with numeric gradient and Hessian.

The total log-likelihood sums per-subject contributions

    log (1/n_qmc) sum_q prod_obs P(Y = l_obs | mu = x'beta + xd'gamma_k + z'C'u_q)

evaluated in the log domain (per-node log-probability sums, then a
log-sum-exp over nodes).  The same node set is reused across subjects and
optimizer iterations, so the objective is a fixed deterministic function of
the parameters.

Evaluation is organized in per-item blocks: each block accumulates an
(N, n_qmc) matrix of log-probability sums.  Blocks are cached keyed on the
bytes of the parameter slices they depend on, which makes finite-difference
probes that perturb a single item's parameters cost roughly 1/K of a full
evaluation.  Cached or not, a block is always computed by the same code in
the same order, so caching never changes results.

Determinism: subjects are processed in sorted-id order with a fixed-order
reduction; totals are bit-identical across reruns, thread counts and input
row orderings.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from . import _kernels
from ._kernels import tables as _tab
from .dataset import LongDataset
from .parameters import (
    LayoutError,
    NaturalParams,
    ParameterLayout,
    cholesky_factor,
    fd_steps,
    unpack,
)
from .timebasis import ModelSpec, SpecificationError, design_matrices

logger = logging.getLogger(__name__)


class NonFiniteObjectiveError(RuntimeError):
    """A finite-difference probe stayed non-finite after step shrinking."""

    def __init__(self, coordinate: int):
        super().__init__(
            f"objective non-finite at probes of coordinate {coordinate} "
            "even after shrinking the step"
        )
        self.coordinate = coordinate


@dataclass(frozen=True)
class QmcNodes:
    """Standard-normal low-discrepancy nodes: scrambled Sobol points mapped
    through the inverse normal CDF.  Deterministic given (p, n_qmc, seed)."""

    nodes: np.ndarray  # (n_qmc, p)
    n_qmc: int
    p: int
    seed: int


def qmc_nodes(p: int, n_qmc: int = 1000, seed: int = 0) -> QmcNodes:
    if p < 1 or n_qmc < 1:
        raise ValueError("p and n_qmc must be >= 1")
    sob = qmc.Sobol(d=p, scramble=True, seed=seed)
    with warnings.catch_warnings():
        # the balance warning for non-power-of-two sizes is expected here
        warnings.filterwarnings("ignore", message=".*balance properties.*")
        pts = sob.random(n_qmc)
    tiny = np.finfo(float).tiny
    pts = np.clip(pts, tiny, np.nextafter(1.0, 0.0))
    nodes = np.ascontiguousarray(ndtri(pts))
    return QmcNodes(nodes=nodes, n_qmc=n_qmc, p=p, seed=seed)


@dataclass(frozen=True)
class ItemBlock:
    """Precomputed per-item observation data, rows grouped by subject."""

    item_idx: int
    levels: np.ndarray  # (rows,) int64
    X: np.ndarray  # (rows, n_fixed)
    Z: np.ndarray  # (rows, p)
    XD: np.ndarray  # (rows, n_dif)
    subj_ids: np.ndarray  # (groups,) global subject indices, ascending
    row_start: np.ndarray  # (groups + 1,) CSR offsets into the rows


class PreparedData:
    """Design rows and indices for likelihood evaluation.

    Subjects are ordered by sorted id; within an item block rows are ordered
    by (subject, time, level) so evaluation order is canonical regardless of
    the input row order.
    """

    def __init__(self, spec: ModelSpec, subjects: list[str], blocks: list[ItemBlock]):
        self.spec = spec
        self.subjects = subjects
        self.blocks = blocks
        self.N = len(subjects)
        self.K = len(spec.items)
        self.p = spec.n_random

    @classmethod
    def from_dataset(cls, ds: LongDataset, spec: ModelSpec) -> "PreparedData":
        item_index = {it.item_id: k for k, it in enumerate(spec.items)}
        for it in spec.items:
            if it.item_id not in ds.item_map:
                raise SpecificationError(f"item {it.item_id!r} not present in the dataset")
        subjects = sorted({o.subject_id for o in ds.observations})
        subj_index = {s: i for i, s in enumerate(subjects)}
        cov_names = spec.covariate_names()

        per_item: list[list[tuple]] = [[] for _ in spec.items]
        for obs, rowcov in zip(ds.observations, ds.row_covariates):
            k = item_index.get(obs.item_id)
            if k is None:
                continue  # item outside the model spec
            covs = {}
            subj_cov = ds.subject_covariates.get(obs.subject_id, {})
            for name in cov_names:
                if name in rowcov:
                    covs[name] = rowcov[name]
                elif name in subj_cov:
                    covs[name] = subj_cov[name]
                else:
                    raise SpecificationError(
                        f"covariate {name!r} missing for subject {obs.subject_id!r}"
                    )
            per_item[k].append(
                (subj_index[obs.subject_id], obs.time, obs.response, covs)
            )

        blocks = []
        for k, rows in enumerate(per_item):
            if not rows:
                continue
            rows.sort(key=lambda r: (r[0], r[1], r[2]))
            sidx = np.array([r[0] for r in rows], dtype=np.int64)
            times = np.array([r[1] for r in rows])
            levels = np.array([r[2] for r in rows], dtype=np.int64)
            covs = {
                name: np.array([r[3][name] for r in rows]) for name in cov_names
            }
            X, Z, XD = design_matrices(spec, times, covs)
            boundaries = np.flatnonzero(np.diff(sidx)) + 1
            row_start = np.concatenate(([0], boundaries, [len(rows)])).astype(np.int64)
            subj_ids = sidx[row_start[:-1]]
            blocks.append(
                ItemBlock(
                    item_idx=k,
                    levels=levels,
                    X=np.ascontiguousarray(X),
                    Z=np.ascontiguousarray(Z),
                    XD=np.ascontiguousarray(XD),
                    subj_ids=np.ascontiguousarray(subj_ids),
                    row_start=np.ascontiguousarray(row_start),
                )
            )
        return cls(spec, subjects, blocks)

    def for_subject(self, subject_id: str) -> "PreparedData":
        """Restriction to a single subject (for per-subject computations)."""
        if subject_id not in self.subjects:
            return PreparedData(self.spec, [subject_id], [])
        i = self.subjects.index(subject_id)
        blocks = []
        for b in self.blocks:
            pos = np.flatnonzero(b.subj_ids == i)
            if pos.size == 0:
                continue
            g = int(pos[0])
            r0, r1 = int(b.row_start[g]), int(b.row_start[g + 1])
            blocks.append(
                ItemBlock(
                    item_idx=b.item_idx,
                    levels=b.levels[r0:r1].copy(),
                    X=b.X[r0:r1].copy(),
                    Z=b.Z[r0:r1].copy(),
                    XD=b.XD[r0:r1].copy(),
                    subj_ids=np.array([0], dtype=np.int64),
                    row_start=np.array([0, r1 - r0], dtype=np.int64),
                )
            )
        return PreparedData(self.spec, [subject_id], blocks)

    @property
    def n_observations(self) -> int:
        return sum(b.levels.size for b in self.blocks)


def _safe_factor(B: np.ndarray) -> np.ndarray:
    """A factor C with C'C = B; Cholesky when possible, eigen-based for
    singular positive semi-definite B (e.g. the no-random-effect limit)."""
    try:
        return np.linalg.cholesky(B).T
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(B)
        if np.any(w < -1e-10 * max(1.0, np.max(np.abs(w), initial=0.0))):
            raise np.linalg.LinAlgError("B is not positive semi-definite")
        w = np.clip(w, 0.0, None)
        return (Q * np.sqrt(w)).T


class LikelihoodEngine:
    """Evaluates the marginal log-likelihood for prepared data.

    ``loglik``/``subject_logliks`` take the packed parameter vector and use
    block caching; the ``*_natural`` variants take NaturalParams directly
    (arbitrary symmetric PSD B) and do not cache.
    """

    def __init__(
        self,
        prepared: PreparedData,
        nodes: QmcNodes,
        *,
        layout: ParameterLayout | None = None,
        backend=None,
        use_tables: bool = True,
        threads: int = 1,
        cache_size: int = 5,
    ):
        if nodes.p != prepared.p:
            raise ValueError(
                f"nodes dimension {nodes.p} != number of random effects {prepared.p}"
            )
        self.prepared = prepared
        self.nodes = nodes
        self.layout = layout or ParameterLayout.from_spec(prepared.spec)
        self.backend = backend if backend is not None else _kernels.get_backend()
        self.use_tables = use_tables
        self.threads = int(threads)
        self._UT = np.ascontiguousarray(nodes.nodes.T)  # (p, n_qmc)
        self._struct_idx = self.layout.structural_indices()
        self._block_idx = [
            self.layout.block_indices(b.item_idx) for b in prepared.blocks
        ]
        self._cache: list[OrderedDict] = [OrderedDict() for _ in prepared.blocks]
        self._table_cache: list[OrderedDict] = [OrderedDict() for _ in prepared.blocks]
        self._cache_size = cache_size
        self._pinned: list[tuple | None] = [None for _ in prepared.blocks]
        # persistent GEMM outputs and a recycling pool for block matrices:
        # large allocations otherwise dominate the evaluation cost
        self._T_bufs = [
            np.empty((b.levels.size, nodes.n_qmc)) for b in prepared.blocks
        ]
        self._S_free: list[np.ndarray] = []
        self._lse_buf = np.empty(prepared.N)
        self.n_evaluations = 0

    def _new_S(self) -> np.ndarray:
        if self._S_free:
            S = self._S_free.pop()
            S.fill(0.0)
            return S
        return np.zeros((self.prepared.N, self.nodes.n_qmc))

    # -- natural-parameter path (uncached) --------------------------------

    def _block_S_natural(
        self, bi: int, beta: np.ndarray, C: np.ndarray, natural: NaturalParams
    ) -> np.ndarray:
        b = self.prepared.blocks[bi]
        item = natural.items[b.item_idx]
        s = item.discrimination
        eta_pad = item.padded_thresholds()
        gamma_k = (
            natural.gammas[b.item_idx]
            if natural.gammas.size
            else np.zeros(b.XD.shape[1])
        )
        return self._run_kernel(bi, b, beta, C, gamma_k, s, eta_pad, None)

    def subject_logliks_natural(self, natural: NaturalParams) -> np.ndarray:
        C = _safe_factor(natural.B)
        blocks = [
            self._block_S_natural(bi, natural.beta, C, natural)
            for bi in range(len(self.prepared.blocks))
        ]
        return self._combine(blocks)

    def loglik_natural(self, natural: NaturalParams) -> float:
        return float(np.sum(self.subject_logliks_natural(natural)))

    # -- packed-parameter path (cached) ------------------------------------

    def _theta_keys(self, theta: np.ndarray, bi: int) -> tuple[bytes, bytes]:
        return (
            theta[self._struct_idx].tobytes(),
            theta[self._block_idx[bi]].tobytes(),
        )

    def set_reference(self, theta: np.ndarray) -> None:
        """Pin the cache entries of a reference point (the center of a
        finite-difference sweep) so they survive eviction."""
        theta = np.asarray(theta, dtype=float)
        for bi in range(len(self.prepared.blocks)):
            self._pinned[bi] = self._theta_keys(theta, bi)

    def _block_S_packed(self, theta: np.ndarray, natural: NaturalParams, bi: int) -> np.ndarray:
        key = self._theta_keys(theta, bi)
        cache = self._cache[bi]
        hit = cache.get(key)
        if hit is not None:
            cache.move_to_end(key)
            return hit
        b = self.prepared.blocks[bi]
        item = natural.items[b.item_idx]
        C = cholesky_factor(theta, self.layout)
        gamma_k = (
            natural.gammas[b.item_idx]
            if natural.gammas.size
            else np.zeros(b.XD.shape[1])
        )
        S = self._run_kernel(
            bi, b, natural.beta, C, gamma_k, item.discrimination,
            item.padded_thresholds(), key[1],
        )
        cache[key] = S
        while len(cache) > self._cache_size:
            evicted = None
            for k in cache:
                if k != self._pinned[bi]:
                    evicted = k
                    break
            if evicted is None:
                break
            self._S_free.append(cache.pop(evicted))
        return S

    def subject_logliks(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.layout.size,):
            raise LayoutError(
                f"theta has length {theta.size}, layout expects {self.layout.size}"
            )
        natural = unpack(theta, self.layout)
        blocks = [
            self._block_S_packed(theta, natural, bi)
            for bi in range(len(self.prepared.blocks))
        ]
        return self._combine(blocks)

    def loglik(self, theta: np.ndarray) -> float:
        return float(np.sum(self.subject_logliks(theta)))

    # -- shared machinery ---------------------------------------------------

    def _tables_for(self, bi: int, s: float, eta_pad: np.ndarray, item_key):
        if item_key is None:
            return _tab.build_tables(s, eta_pad)
        cache = self._table_cache[bi]
        hit = cache.get(item_key)
        if hit is not None:
            cache.move_to_end(item_key)
            return hit
        tabs = _tab.build_tables(s, eta_pad)
        cache[item_key] = tabs
        while len(cache) > self._cache_size:
            cache.popitem(last=False)
        return tabs

    def _run_kernel(self, bi, b: ItemBlock, beta, C, gamma_k, s, eta_pad, item_key):
        a = b.X @ beta
        if b.XD.shape[1]:
            a = a + b.XD @ gamma_k
        M = b.Z @ C.T
        T = np.matmul(M, self._UT, out=self._T_bufs[bi])
        S = self._new_S()
        if self.use_tables:
            tab_v, tab_m = self._tables_for(bi, s, eta_pad, item_key)
        else:
            tab_v = tab_m = np.zeros((1, 1))
        self.backend.block_accumulate(
            S, b.subj_ids, b.row_start, T,
            np.ascontiguousarray(a), b.levels, tab_v, tab_m,
            float(s), np.ascontiguousarray(eta_pad), self.use_tables, self.threads,
        )
        return S

    def _combine(self, blocks: list[np.ndarray]) -> np.ndarray:
        self.n_evaluations += 1
        n, nq = self.prepared.N, self.nodes.n_qmc
        if not blocks:
            return np.zeros(n)
        self.backend.combine_logsumexp(blocks, self._lse_buf, self.threads)
        return self._lse_buf - math.log(nq)


def subject_loglik(subject: PreparedData, params: NaturalParams, nodes: QmcNodes, **kw) -> float:
    """Log-likelihood contribution of a single prepared subject.

    Returns -inf (with a diagnostic naming the subject and item) when an
    observed category has zero probability at every node.
    """
    if subject.N != 1:
        raise ValueError("subject_loglik expects data prepared for one subject")
    engine = LikelihoodEngine(subject, nodes, **kw)
    ll = float(engine.subject_logliks_natural(params)[0])
    if ll == -np.inf:
        items = _zero_probability_items(subject, params)
        logger.warning(
            "subject %r: observed category has zero probability at all nodes "
            "(items: %s)", subject.subjects[0], ", ".join(items) or "?",
        )
    return ll


def total_loglik(prepared: PreparedData, params: NaturalParams, nodes: QmcNodes, **kw) -> float:
    """Total log-likelihood (fixed-order sum over sorted subjects)."""
    engine = LikelihoodEngine(prepared, nodes, **kw)
    ll = engine.subject_logliks_natural(params)
    if np.isneginf(ll).any():
        bad = [prepared.subjects[i] for i in np.flatnonzero(np.isneginf(ll))]
        logger.warning("zero-probability observations for subject(s): %s", ", ".join(bad))
    return float(np.sum(ll))


def _zero_probability_items(subject: PreparedData, params: NaturalParams) -> list[str]:
    names = []
    for b in subject.blocks:
        item = params.items[b.item_idx]
        pad = item.padded_thresholds()
        width = pad[b.levels + 1] - pad[b.levels]
        if np.any(width <= 0):
            names.append(subject.spec.items[b.item_idx].item_id)
    return names


def _central_pair(objective, theta: np.ndarray, j: int, h: float) -> tuple[float, float, float]:
    """Evaluate the +/- probes of one coordinate, shrinking the step once
    (by 10x) if either side is non-finite."""
    for attempt in range(2):
        step = h if attempt == 0 else h / 10.0
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += step
        tm[j] -= step
        fp = objective(tp)
        fm = objective(tm)
        if math.isfinite(fp) and math.isfinite(fm):
            return fp, fm, step
    raise NonFiniteObjectiveError(j)


def numeric_gradient(theta: np.ndarray, objective, steps: np.ndarray | None = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if steps is None:
        steps = fd_steps(theta)
    g = np.empty(theta.size)
    for j in range(theta.size):
        fp, fm, step = _central_pair(objective, theta, j, steps[j])
        g[j] = (fp - fm) / (2.0 * step)
    return g


def numeric_gradient_hessian(theta: np.ndarray, objective) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient; Hessian by forward differences of
    central gradients, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    steps = fd_steps(theta)
    g = numeric_gradient(theta, objective, steps)
    d = theta.size
    H = np.empty((d, d))
    for j in range(d):
        tj = theta.copy()
        tj[j] += steps[j]
        gj = numeric_gradient(tj, objective, steps)
        H[:, j] = (gj - g) / steps[j]
    return g, 0.5 * (H + H.T)
