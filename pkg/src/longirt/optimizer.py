"""Marquardt-Levenberg maximization with stringent tri-criteria convergence.

The iteration solves (-H + inflation) delta = g and proposes theta + delta,
accepting only steps that increase the objective; the damping lambda shrinks
(x0.1) on acceptance and grows (x10, capped at 1e8) on rejection.  Diagonal
inflation multiplies entries by (1 + lambda), with an additive lambda
fallback for near-zero diagonals.

Convergence requires all three of
  1. squared parameter change / dim        < eps_param
  2. |objective change|                    < eps_fn
  3. g' (-H)^-1 g / dim  (distance to max) < eps_rdm
evaluated with fresh derivatives at the accepted point.  The Hessian used
for the variance of the estimates is that final uninflated matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernels import get_backend
from .dataset import LongDataset
from .likelihood import (
    LikelihoodEngine,
    PreparedData,
    numeric_gradient_hessian,
    qmc_nodes,
)
from .parameters import (
    NaturalParams,
    ParameterLayout,
    delta_method_se,
    initial_theta,
    unpack,
)
from .timebasis import ModelSpec


class InitializationError(RuntimeError):
    """Objective non-finite at the starting point."""


class OptimizationFailure(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class FitOptions:
    eps_param: float = 1e-4
    eps_fn: float = 1e-4
    eps_rdm: float = 1e-4
    max_iter: int = 100
    n_qmc: int = 1000
    seed: int = 0
    lambda_init: float = 1e-3
    lambda_max: float = 1e8
    threads: int = 1
    use_tables: bool = True
    backend: str | None = None

    def __post_init__(self):
        if min(self.eps_param, self.eps_fn, self.eps_rdm) <= 0:
            raise ValueError("tolerances must be > 0")


@dataclass(frozen=True)
class CriteriaValues:
    param: float
    fn: float
    rdm: float  # inf when -H is singular / not positive

    def passed(self, options: FitOptions) -> tuple[bool, bool, bool]:
        return (
            self.param < options.eps_param,
            self.fn < options.eps_fn,
            self.rdm < options.eps_rdm,
        )

    def all_passed(self, options: FitOptions) -> bool:
        return all(self.passed(options))


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    loglik: float
    lam: float
    crit_param: float
    crit_fn: float
    crit_rdm: float


def convergence_check(
    theta_prev: np.ndarray,
    theta: np.ndarray,
    loglik_prev: float,
    loglik: float,
    g: np.ndarray,
    H: np.ndarray,
    options: FitOptions,
) -> CriteriaValues:
    """Criterion values for one accepted step; criterion 3 is reported as
    failed (inf) rather than raising when -H cannot be solved."""
    d = theta.size
    crit_param = float(np.sum((theta - theta_prev) ** 2) / d)
    crit_fn = abs(loglik - loglik_prev)
    try:
        x = np.linalg.solve(-H, g)
        rdm = float(g @ x) / d
        if not math.isfinite(rdm) or rdm < 0:
            rdm = math.inf
    except np.linalg.LinAlgError:
        rdm = math.inf
    return CriteriaValues(param=crit_param, fn=crit_fn, rdm=rdm)


def _inflate(A: np.ndarray, lam: float) -> np.ndarray:
    """Marquardt diagonal inflation of the (positive-definite-targeted)
    matrix A = -H."""
    out = A.copy()
    diag = np.diag(A).copy()
    small = np.abs(diag) < 1e-10
    diag = np.where(small, diag + lam, diag * (1.0 + lam))
    np.fill_diagonal(out, diag)
    return out


@dataclass
class MaximizeResult:
    theta: np.ndarray
    loglik: float
    gradient: np.ndarray
    hessian: np.ndarray  # of the objective, at theta, uninflated
    n_iter: int
    converged: bool
    criteria: CriteriaValues
    trace: list[IterationRecord] = field(default_factory=list)


def maximize(
    objective: Callable[[np.ndarray], float],
    theta0: np.ndarray,
    options: FitOptions,
    *,
    gradient_hessian: Callable | None = None,
    set_reference: Callable | None = None,
    trace_callback: Callable[[IterationRecord], None] | None = None,
) -> MaximizeResult:
    """Maximize a generic objective; raises InitializationError for a
    non-finite start and OptimizationFailure when lambda escalation cannot
    produce an improving step."""
    theta = np.asarray(theta0, dtype=float).copy()
    ll = objective(theta)
    if not math.isfinite(ll):
        raise InitializationError(f"objective is {ll} at the starting point")
    gh = gradient_hessian or (lambda t: numeric_gradient_hessian(t, objective))
    if set_reference is not None:
        set_reference(theta)
    g, H = gh(theta)

    lam = options.lambda_init
    trace: list[IterationRecord] = []
    converged = False
    n_iter = 0

    # a start that already sits at a maximum (e.g. refitting from previous
    # estimates) satisfies the derivative criterion with nothing to change
    criteria = convergence_check(theta, theta, ll, ll, g, H, options)
    if criteria.all_passed(options):
        record = IterationRecord(
            iteration=0, loglik=ll, lam=lam,
            crit_param=criteria.param, crit_fn=criteria.fn, crit_rdm=criteria.rdm,
        )
        trace.append(record)
        if trace_callback is not None:
            trace_callback(record)
        return MaximizeResult(
            theta=theta, loglik=ll, gradient=g, hessian=H,
            n_iter=0, converged=True, criteria=criteria, trace=trace,
        )
    criteria = CriteriaValues(math.inf, math.inf, math.inf)

    for it in range(1, options.max_iter + 1):
        n_iter = it
        A = -H
        accepted = False
        while True:
            try:
                delta = np.linalg.solve(_inflate(A, lam), g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                theta_new = theta + delta
                ll_new = objective(theta_new)
                if math.isfinite(ll_new) and ll_new > ll:
                    accepted = True
                    break
            lam *= 10.0
            if lam > options.lambda_max:
                break
        if not accepted:
            raise OptimizationFailure(
                f"no improving step at iteration {it} "
                f"(lambda escalated past {options.lambda_max:g}, loglik {ll:.6f})",
                trace,
            )
        lam = max(lam / 10.0, 1e-12)
        if set_reference is not None:
            set_reference(theta_new)
        g, H = gh(theta_new)
        criteria = convergence_check(theta, theta_new, ll, ll_new, g, H, options)
        theta, ll = theta_new, ll_new
        record = IterationRecord(
            iteration=it, loglik=ll, lam=lam,
            crit_param=criteria.param, crit_fn=criteria.fn, crit_rdm=criteria.rdm,
        )
        trace.append(record)
        if trace_callback is not None:
            trace_callback(record)
        if criteria.all_passed(options):
            converged = True
            break

    return MaximizeResult(
        theta=theta, loglik=ll, gradient=g, hessian=H,
        n_iter=n_iter, converged=converged, criteria=criteria, trace=trace,
    )


def variance_of_estimates(H: np.ndarray) -> tuple[np.ndarray, bool]:
    """V = (-H)^-1, symmetrized; returns (V, is_positive_definite).

    When -H is not positive definite the pseudo-inverse of the
    eigenvalue-clipped matrix is returned and flagged; affected directions
    have no meaningful standard error.
    """
    A = -np.asarray(H, dtype=float)
    A = 0.5 * (A + A.T)
    try:
        L = np.linalg.cholesky(A)
        identity = np.eye(A.shape[0])
        Linv = np.linalg.solve(L, identity)
        V = Linv.T @ Linv
        pd = True
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(A)
        w_inv = np.where(w > 1e-12 * max(1.0, w.max(initial=0.0)), 1.0 / np.clip(w, 1e-300, None), 0.0)
        V = (Q * w_inv) @ Q.T
        pd = False
    return 0.5 * (V + V.T), pd


@dataclass(frozen=True)
class NaturalTable:
    """Natural-scale estimates with delta-method standard errors."""

    names: tuple[str, ...]
    estimates: np.ndarray
    ses: np.ndarray
    clamped: np.ndarray


@dataclass
class FitResult:
    spec: ModelSpec
    layout: ParameterLayout
    options: FitOptions
    theta: np.ndarray
    V: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    criteria: CriteriaValues
    criteria_passed: tuple[bool, bool, bool]
    hessian_pd: bool
    natural: NaturalParams
    natural_table: NaturalTable
    trace: list[IterationRecord]
    n_parameters: int
    n_subjects: int
    n_observations: int

    def se(self) -> np.ndarray:
        """Packed-scale standard errors (sqrt of the diagonal of V)."""
        return np.sqrt(np.clip(np.diag(self.V), 0.0, None))


def _natural_transform(layout: ParameterLayout):
    """theta -> identified natural quantities (beta, free B entries,
    discriminations, thresholds), with matching names."""
    names: list[str] = [f"beta:{t}" for t in layout.fixed_names]
    p = layout.n_random
    for j in range(p):
        for i in range(j + 1):
            if (i, j) != (0, 0):
                names.append(f"B:{i + 1},{j + 1}")
    for item_id, levels in zip(layout.item_ids, layout.item_levels):
        names.append(f"item:{item_id}:discrimination")
        names.extend(f"item:{item_id}:eta{l}" for l in range(1, levels))

    def transform(theta: np.ndarray) -> np.ndarray:
        nat = unpack(theta, layout)
        out = list(nat.beta)
        for j in range(p):
            for i in range(j + 1):
                if (i, j) != (0, 0):
                    out.append(nat.B[i, j])
        for item in nat.items:
            out.append(item.discrimination)
            out.extend(item.thresholds)
        return np.asarray(out)

    return tuple(names), transform


def natural_se_table(theta: np.ndarray, V: np.ndarray, layout: ParameterLayout) -> NaturalTable:
    """Delta-method table of all identified natural quantities, plus the
    contrasts.  The derived last contrast's variance is computed exactly as
    the variance of minus the sum of the free ones."""
    names, transform = _natural_transform(layout)
    est, se, clamped = delta_method_se(theta, V, transform)
    names = list(names)
    est = list(est)
    se = list(se)
    clamped = list(clamped)
    K = layout.n_items
    for t, term in enumerate(layout.dif_term_names):
        sl = layout.dif_term_slice(t)
        free = theta[sl]
        idx = np.arange(sl.start, sl.stop)
        Vg = V[np.ix_(idx, idx)]
        for k in range(K - 1):
            names.append(f"contrast:{term}:{layout.item_ids[k]}")
            est.append(free[k])
            se.append(math.sqrt(max(Vg[k, k], 0.0)))
            clamped.append(Vg[k, k] < 0)
        names.append(f"contrast:{term}:{layout.item_ids[-1]} (derived)")
        est.append(-free.sum())
        var_last = float(np.sum(Vg))  # Var(-1'gamma) = 1' V_gamma 1
        se.append(math.sqrt(max(var_last, 0.0)))
        clamped.append(var_last < 0)
    return NaturalTable(
        names=tuple(names),
        estimates=np.asarray(est),
        ses=np.asarray(se),
        clamped=np.asarray(clamped, dtype=bool),
    )


def fit(
    ds: LongDataset,
    spec: ModelSpec,
    options: FitOptions = FitOptions(),
    init: np.ndarray | None = None,
    *,
    trace_callback: Callable[[IterationRecord], None] | None = None,
) -> FitResult:
    """Maximum-likelihood fit of the longitudinal graded-response model."""
    prepared = PreparedData.from_dataset(ds, spec)
    layout = ParameterLayout.from_spec(spec)
    nodes = qmc_nodes(spec.n_random, options.n_qmc, options.seed)
    engine = LikelihoodEngine(
        prepared, nodes,
        layout=layout,
        backend=None if options.backend is None else get_backend(options.backend),
        use_tables=options.use_tables,
        threads=options.threads,
    )
    theta0 = np.asarray(init, dtype=float) if init is not None else initial_theta(ds, spec)
    if theta0.shape != (layout.size,):
        raise ValueError(f"init has length {theta0.size}, layout expects {layout.size}")

    try:
        result = maximize(
            engine.loglik, theta0, options,
            gradient_hessian=lambda t: numeric_gradient_hessian(t, engine.loglik),
            set_reference=engine.set_reference,
            trace_callback=trace_callback,
        )
    except InitializationError as exc:
        raise InitializationError(
            f"log-likelihood non-finite at the initial parameters: {exc}"
        ) from exc

    V, pd = variance_of_estimates(result.hessian)
    natural = unpack(result.theta, layout)
    table = natural_se_table(result.theta, V, layout)
    return FitResult(
        spec=spec,
        layout=layout,
        options=options,
        theta=result.theta,
        V=V,
        loglik=result.loglik,
        n_iter=result.n_iter,
        converged=result.converged,
        criteria=result.criteria,
        criteria_passed=result.criteria.passed(options),
        hessian_pd=pd,
        natural=natural,
        natural_table=table,
        trace=result.trace,
        n_parameters=layout.size,
        n_subjects=prepared.N,
        n_observations=prepared.n_observations,
    )
