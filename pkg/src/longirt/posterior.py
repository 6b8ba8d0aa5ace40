"""Post-fit quantities: latent and item trajectories with Monte-Carlo
confidence bands, and empirical-Bayes random effects.

Bands approximate the posterior of any derived quantity by drawing
parameters from N(theta_hat, V_hat) (2000 draws by default, fixed seed) and
taking pointwise percentiles, which handles nonlinear transforms uniformly.
Random effects are predicted by the mode of their posterior given the
subject's responses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import ndtr

from .dataset import LongDataset
from .likelihood import PreparedData, qmc_nodes
from .measurement import ItemParams
from .optimizer import FitResult
from .parameters import NaturalParams, unpack
from .timebasis import design_matrices

Profile = Mapping[str, float] | Callable[[float], Mapping[str, float]]


class PosteriorError(RuntimeError):
    pass


@dataclass(frozen=True)
class PosteriorSummary:
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    n_draws: int = 0

    def __post_init__(self):
        if self.lower is not None:
            if np.any(self.lower - self.estimate > 1e-9) or np.any(self.estimate - self.upper > 1e-9):
                raise ValueError("bands must bracket the point estimate")


def _profile_covariates(profile: Profile, grid: np.ndarray) -> dict[str, np.ndarray]:
    if callable(profile):
        rows = [profile(float(t)) for t in grid]
        names = set()
        for r in rows:
            names.update(r)
        return {n: np.array([float(r[n]) for r in rows]) for n in names}
    return {n: np.full(grid.size, float(v)) for n, v in profile.items()}


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or not np.all(np.isfinite(grid)):
        raise ValueError("grid must be a finite 1-d array")
    return grid


def _parameter_draws(fit: FitResult, n_draws: int, seed: int) -> np.ndarray:
    """Draws from N(theta_hat, V_hat); V is projected to PSD if needed."""
    rng = np.random.default_rng(seed)
    V = 0.5 * (fit.V + fit.V.T)
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(V)
        L = Q * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n_draws, fit.theta.size))
    return fit.theta[None, :] + z @ L.T


def marginal_trajectory(
    fit: FitResult,
    profile: Profile,
    grid,
    *,
    n_draws: int = 2000,
    seed: int = 2000,
    level: float = 0.95,
) -> PosteriorSummary:
    """Population-level latent trajectory x(t)'beta with percentile bands."""
    grid = _check_grid(grid)
    covs = _profile_covariates(profile, grid)
    X, _, _ = design_matrices(fit.spec, grid, covs)
    estimate = X @ fit.natural.beta

    draws = _parameter_draws(fit, n_draws, seed)
    beta_sl = fit.layout.beta_slice
    values = draws[:, beta_sl] @ X.T  # (n_draws, grid)
    alpha = 100.0 * (1.0 - level) / 2.0
    lower = np.percentile(values, alpha, axis=0)
    upper = np.percentile(values, 100.0 - alpha, axis=0)
    lower = np.minimum(lower, estimate)
    upper = np.maximum(upper, estimate)
    return PosteriorSummary(grid=grid, estimate=estimate, lower=lower, upper=upper, n_draws=n_draws)


def _subject_rows(ds: LongDataset, fit: FitResult, subject_id: str):
    prepared = PreparedData.from_dataset(ds, fit.spec).for_subject(subject_id)
    levels, X, Z, item_idx = [], [], [], []
    for b in prepared.blocks:
        levels.append(b.levels)
        X.append(b.X)
        Z.append(b.Z)
        item_idx.append(np.full(b.levels.size, b.item_idx))
    if not levels:
        return None
    gam = fit.natural.gammas
    offsets = []
    for b in prepared.blocks:
        g = gam[b.item_idx] if gam.size else np.zeros(b.XD.shape[1])
        offsets.append(b.XD @ g if b.XD.shape[1] else np.zeros(b.levels.size))
    return (
        np.concatenate(levels),
        np.vstack(X),
        np.vstack(Z),
        np.concatenate(item_idx),
        np.concatenate(offsets),
    )


def eb_random_effects(
    ds: LongDataset,
    fit: FitResult,
    subject_id: str,
    *,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> np.ndarray:
    """Posterior-mode random effects for one subject.

    Newton iterations with step-halving line search on the log posterior;
    numeric derivatives.  A subject with no observations sits at the prior
    mode 0.
    """
    rows = _subject_rows(ds, fit, subject_id)
    p = fit.spec.n_random
    if rows is None:
        return np.zeros(p)
    levels, X, Z, item_idx, dif_offset = rows
    natural = fit.natural
    base = X @ natural.beta + dif_offset
    Binv = np.linalg.inv(natural.B)

    def logpost(b):
        lam = base + Z @ b
        ll = 0.0
        for k in np.unique(item_idx):
            item = natural.items[k]
            mask = item_idx == k
            pad = item.padded_thresholds()
            s = item.discrimination
            lv = levels[mask]
            mu = lam[mask]
            prob = ndtr(s * (pad[lv + 1] - mu)) - ndtr(s * (pad[lv] - mu))
            if np.any(prob <= 0):
                return -np.inf
            ll += float(np.sum(np.log(prob)))
        return ll - 0.5 * float(b @ Binv @ b)

    b = np.zeros(p)
    f = logpost(b)
    h = 1e-5
    for _ in range(max_iter):
        g = np.empty(p)
        H = np.empty((p, p))
        for j in range(p):
            ep = np.zeros(p)
            ep[j] = h
            g[j] = (logpost(b + ep) - logpost(b - ep)) / (2 * h)
        for j in range(p):
            ej = np.zeros(p)
            ej[j] = h
            for i in range(j, p):
                ei = np.zeros(p)
                ei[i] = h
                H[i, j] = H[j, i] = (
                    logpost(b + ei + ej) - logpost(b + ei) - logpost(b + ej) + f
                ) / (h * h)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = g
        if not np.all(np.isfinite(step)):
            step = g
        # damped line search; falls back to bisecting the step
        scale = 1.0
        improved = False
        for _ in range(40):
            cand = b + scale * step
            fc = logpost(cand)
            if fc > f:
                b, f = cand, fc
                improved = True
                break
            scale *= 0.5
        gnorm = float(np.max(np.abs(g)))
        if gnorm < 1e-6 or (not improved and gnorm < 1e-4):
            return b
        if not improved:
            if float(np.sum((scale * step) ** 2)) < tol:
                return b
    raise PosteriorError(
        f"posterior mode did not converge for subject {subject_id!r} after {max_iter} iterations"
    )


def individual_trajectory(
    ds: LongDataset,
    fit: FitResult,
    subject_id: str,
    grid,
) -> PosteriorSummary:
    """Subject-level latent trajectory X(t)'beta + Z(t)'b_hat."""
    grid = _check_grid(grid)
    covs = ds.subject_covariates.get(subject_id, {})
    cov_arrays = {n: np.full(grid.size, float(v)) for n, v in covs.items()}
    X, Z, _ = design_matrices(fit.spec, grid, cov_arrays)
    b_hat = eb_random_effects(ds, fit, subject_id)
    estimate = X @ fit.natural.beta + Z @ b_hat
    return PosteriorSummary(grid=grid, estimate=estimate)


def _item_expectation_matrix(item: ItemParams, lam: np.ndarray) -> np.ndarray:
    """E(Y | latent) for an array of latent values of any shape."""
    s = item.discrimination
    out = np.full(lam.shape, float(item.n_levels - 1))
    for thr in item.thresholds:
        out -= ndtr(s * (thr - lam))
    return out


def item_trajectory(
    fit: FitResult,
    item_id: str,
    profile: Profile,
    grid,
    *,
    n_draws: int = 2000,
    n_qmc: int = 1000,
    seed: int = 2000,
    level: float = 0.95,
) -> PosteriorSummary:
    """Expected item score over time for a covariate profile, integrating
    the graded-response expectation over the random effects by QMC.

    Bands re-evaluate the full integral at each parameter draw (no
    first-order shortcut).
    """
    grid = _check_grid(grid)
    item_ids = [it.item_id for it in fit.spec.items]
    if item_id not in item_ids:
        raise ValueError(f"unknown item {item_id!r}")
    k = item_ids.index(item_id)
    covs = _profile_covariates(profile, grid)
    X, Z, XD = design_matrices(fit.spec, grid, covs)
    nodes = qmc_nodes(fit.spec.n_random, n_qmc, seed)

    def expected_curve(natural: NaturalParams) -> np.ndarray:
        try:
            C = np.linalg.cholesky(natural.B).T
        except np.linalg.LinAlgError:
            w, Q = np.linalg.eigh(natural.B)
            C = (Q * np.sqrt(np.clip(w, 0.0, None))).T
        gamma_k = natural.gammas[k] if natural.gammas.size else np.zeros(XD.shape[1])
        base = X @ natural.beta + (XD @ gamma_k if XD.shape[1] else 0.0)
        lam = base[:, None] + (Z @ C.T) @ nodes.nodes.T  # (grid, n_qmc)
        return _item_expectation_matrix(natural.items[k], lam).mean(axis=1)

    estimate = expected_curve(fit.natural)
    draws = _parameter_draws(fit, n_draws, seed + 1)
    values = np.empty((n_draws, grid.size))
    for d in range(n_draws):
        values[d] = expected_curve(unpack(draws[d], fit.layout))
    alpha = 100.0 * (1.0 - level) / 2.0
    lower = np.minimum(np.percentile(values, alpha, axis=0), estimate)
    upper = np.maximum(np.percentile(values, 100.0 - alpha, axis=0), estimate)
    return PosteriorSummary(grid=grid, estimate=estimate, lower=lower, upper=upper, n_draws=n_draws)


def latent_population_interval(
    fit: FitResult,
    profiles: list[Mapping[str, float]],
    grid,
    *,
    n_per_profile: int = 10000,
    seed: int = 77,
    quantiles: tuple[float, ...] = (0.025, 0.1, 0.9, 0.975),
) -> dict[float, float]:
    """Latent-level quantiles in a hypothetical population observed on a
    time grid.

    Assumptions: parameters fixed at the estimates (no estimation
    uncertainty), profiles equally weighted, every subject observed at every
    grid time; the spread mixes covariate effects, time and random-effect
    variability.
    """
    grid = _check_grid(grid)
    rng = np.random.default_rng(seed)
    C = np.linalg.cholesky(fit.natural.B).T
    samples = []
    for prof in profiles:
        covs = {n: np.full(grid.size, float(v)) for n, v in prof.items()}
        X, Z, _ = design_matrices(fit.spec, grid, covs)
        mean = X @ fit.natural.beta
        b = rng.standard_normal((n_per_profile, fit.spec.n_random)) @ C
        samples.append(mean[None, :] + b @ Z.T)
    flat = np.concatenate([s.ravel() for s in samples])
    return {float(q): float(np.quantile(flat, q)) for q in quantiles}
