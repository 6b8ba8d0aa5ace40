"""Packed parameter vector and its mapping to natural parameters.

Layout of the unconstrained vector theta, in order:

  1. fixed effects (one per fixed term, no intercept)
  2. upper-triangular Cholesky entries of the random-effect factor C,
     column by column, with C[0,0] fixed at 1 and excluded
     (B = C'C, so B[0,0] == 1 exactly)
  3. per item: sigma, then the L-1 raw threshold parameters
     (eta_1 = eta*_1, eta_l = eta*_1 + sum_{m=2..l} eta*_m^2)
  4. per contrast term: the K-1 free item contrasts
     (the last item's contrast is minus the sum of the others)

Only |sigma| and the squared threshold increments are identified; pack()
chooses the non-negative representatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

from .dataset import LongDataset
from .measurement import ItemParams
from .timebasis import ModelSpec


class LayoutError(ValueError):
    """theta length does not match the model layout."""


@dataclass(frozen=True)
class ParameterLayout:
    n_fixed: int
    n_random: int
    item_levels: tuple[int, ...]
    n_dif_terms: int
    fixed_names: tuple[str, ...]
    item_ids: tuple[str, ...]
    dif_term_names: tuple[str, ...]

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "ParameterLayout":
        return cls(
            n_fixed=spec.n_fixed,
            n_random=spec.n_random,
            item_levels=tuple(it.n_levels for it in spec.items),
            n_dif_terms=spec.n_dif,
            fixed_names=spec.fixed_terms,
            item_ids=tuple(it.item_id for it in spec.items),
            dif_term_names=spec.dif_terms,
        )

    @property
    def n_items(self) -> int:
        return len(self.item_levels)

    @property
    def n_chol(self) -> int:
        p = self.n_random
        return p * (p + 1) // 2 - 1

    @property
    def size(self) -> int:
        return (
            self.n_fixed
            + self.n_chol
            + sum(self.item_levels)
            + self.n_dif_terms * (self.n_items - 1)
        )

    @property
    def beta_slice(self) -> slice:
        return slice(0, self.n_fixed)

    @property
    def chol_slice(self) -> slice:
        return slice(self.n_fixed, self.n_fixed + self.n_chol)

    def item_slice(self, k: int) -> slice:
        start = self.n_fixed + self.n_chol + sum(self.item_levels[:k])
        return slice(start, start + self.item_levels[k])

    @property
    def dif_slice(self) -> slice:
        start = self.n_fixed + self.n_chol + sum(self.item_levels)
        return slice(start, self.size)

    def dif_term_slice(self, term_idx: int) -> slice:
        """Free contrasts gamma_1..gamma_{K-1} of one contrast term."""
        base = self.n_fixed + self.n_chol + sum(self.item_levels)
        kfree = self.n_items - 1
        return slice(base + term_idx * kfree, base + (term_idx + 1) * kfree)

    @property
    def names(self) -> tuple[str, ...]:
        out = [f"beta:{t}" for t in self.fixed_names]
        p = self.n_random
        for j in range(p):
            for i in range(j + 1):
                if (i, j) != (0, 0):
                    out.append(f"chol:{i + 1},{j + 1}")
        for item_id, levels in zip(self.item_ids, self.item_levels):
            out.append(f"item:{item_id}:sigma")
            out.extend(f"item:{item_id}:eta*{l}" for l in range(1, levels))
        for term in self.dif_term_names:
            out.extend(
                f"contrast:{term}:{item_id}" for item_id in self.item_ids[:-1]
            )
        return tuple(out)

    def structural_indices(self) -> np.ndarray:
        """Indices of parameters entering the latent process (beta + Cholesky)."""
        return np.arange(0, self.n_fixed + self.n_chol)

    def block_indices(self, k: int) -> np.ndarray:
        """Indices whose perturbation changes item k's measurement block.

        The last item's contrast is derived from all the free ones, so every
        contrast coordinate affects it.
        """
        idx = list(range(self.item_slice(k).start, self.item_slice(k).stop))
        kfree = self.n_items - 1
        if self.n_dif_terms:
            base = self.dif_slice.start
            for t in range(self.n_dif_terms):
                if k < kfree:
                    idx.append(base + t * kfree + k)
                else:
                    idx.extend(range(base + t * kfree, base + (t + 1) * kfree))
        return np.asarray(idx, dtype=np.intp)


@dataclass(frozen=True)
class NaturalParams:
    """Natural-scale parameters.

    ``gammas`` has shape (K, n_dif_terms) with columns summing to zero.
    When produced by :func:`unpack`, B[0,0] == 1 exactly; direct
    construction (e.g. for likelihood evaluation at arbitrary B) does not
    enforce that constraint.
    """

    beta: np.ndarray
    B: np.ndarray
    items: tuple[ItemParams, ...]
    gammas: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ValueError("B must be a square matrix")
        if not np.allclose(B, B.T, atol=1e-12):
            raise ValueError("B must be symmetric")
        gam = np.asarray(self.gammas, dtype=float)
        if gam.size and gam.shape[0] != len(self.items):
            raise ValueError("gammas must have one row per item")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "gammas", gam)

    @property
    def n_random(self) -> int:
        return self.B.shape[0]


def _chol_from_packed(values: np.ndarray, p: int) -> np.ndarray:
    C = np.zeros((p, p))
    C[0, 0] = 1.0
    pos = 0
    for j in range(p):
        for i in range(j + 1):
            if (i, j) == (0, 0):
                continue
            C[i, j] = values[pos]
            pos += 1
    return C


def _packed_from_chol(C: np.ndarray) -> np.ndarray:
    p = C.shape[0]
    out = []
    for j in range(p):
        for i in range(j + 1):
            if (i, j) != (0, 0):
                out.append(C[i, j])
    return np.asarray(out)


def unpack(theta: np.ndarray, layout: ParameterLayout) -> NaturalParams:
    """Map the packed unconstrained vector to natural parameters."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.size,):
        raise LayoutError(f"theta has length {theta.size}, layout expects {layout.size}")
    beta = theta[layout.beta_slice].copy()
    C = _chol_from_packed(theta[layout.chol_slice], layout.n_random)
    B = C.T @ C

    items = []
    for k, levels in enumerate(layout.item_levels):
        block = theta[layout.item_slice(k)]
        sigma = block[0]
        raw = block[1:]
        thr = np.empty(levels - 1)
        thr[0] = raw[0]
        if levels > 2:
            thr[1:] = raw[0] + np.cumsum(raw[1:] ** 2)
        items.append(ItemParams(sigma=sigma, thresholds=thr))

    K = layout.n_items
    gam = np.zeros((K, layout.n_dif_terms))
    for t in range(layout.n_dif_terms):
        free = theta[layout.dif_term_slice(t)]
        gam[: K - 1, t] = free
        gam[K - 1, t] = -free.sum()
    return NaturalParams(beta=beta, B=B, items=tuple(items), gammas=gam)


def cholesky_factor(theta: np.ndarray, layout: ParameterLayout) -> np.ndarray:
    """Upper-triangular C with B = C'C, straight from the packed vector."""
    return _chol_from_packed(np.asarray(theta, dtype=float)[layout.chol_slice], layout.n_random)


def pack(natural: NaturalParams, layout: ParameterLayout) -> np.ndarray:
    """Inverse of unpack, choosing non-negative sign representatives.

    Raises np.linalg.LinAlgError for non-positive-definite B, ValueError for
    B[0,0] != 1 or decreasing thresholds.
    """
    if natural.n_random != layout.n_random or len(natural.items) != layout.n_items:
        raise LayoutError("natural parameters do not match the layout")
    if abs(natural.B[0, 0] - 1.0) > 1e-12:
        raise ValueError("B[0,0] must equal 1 in the packed parameterization")
    L = np.linalg.cholesky(natural.B)  # raises LinAlgError if not PD
    C = L.T

    theta = np.empty(layout.size)
    theta[layout.beta_slice] = natural.beta
    theta[layout.chol_slice] = _packed_from_chol(C)
    for k, item in enumerate(natural.items):
        thr = item.thresholds
        diffs = np.diff(thr)
        if np.any(diffs < 0):
            raise ValueError(f"item {layout.item_ids[k]!r}: thresholds must be non-decreasing")
        block = np.empty(layout.item_levels[k])
        block[0] = abs(item.sigma)
        block[1] = thr[0]
        if thr.size > 1:
            block[2:] = np.sqrt(diffs)
        theta[layout.item_slice(k)] = block
    for t in range(layout.n_dif_terms):
        theta[layout.dif_term_slice(t)] = natural.gammas[: layout.n_items - 1, t]
    return theta


def fd_steps(theta: np.ndarray, scale: float = 1e-5) -> np.ndarray:
    """Finite-difference steps h_j = max(scale, scale*|theta_j|)."""
    theta = np.asarray(theta, dtype=float)
    return np.maximum(scale, scale * np.abs(theta))


def delta_method_se(
    theta_hat: np.ndarray,
    V: np.ndarray,
    transform: Callable[[np.ndarray], np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard errors of transform(theta_hat) by first-order propagation.

    The Jacobian is computed by central differences with the shared step
    rule.  Returns (values, standard errors, clamped flags); variances that
    come out negative under roundoff are clamped to 0 and flagged.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.shape != (theta_hat.size, theta_hat.size):
        raise ValueError("V must be square with dimension matching theta")
    values = np.atleast_1d(np.asarray(transform(theta_hat), dtype=float))
    steps = fd_steps(theta_hat)
    J = np.empty((theta_hat.size, values.size))
    for j in range(theta_hat.size):
        tp = theta_hat.copy()
        tm = theta_hat.copy()
        tp[j] += steps[j]
        tm[j] -= steps[j]
        J[j] = (
            np.atleast_1d(np.asarray(transform(tp), dtype=float))
            - np.atleast_1d(np.asarray(transform(tm), dtype=float))
        ) / (2 * steps[j])
    var = np.einsum("jo,jk,ko->o", J, V, J)
    clamped = var < 0
    se = np.sqrt(np.where(clamped, 0.0, var))
    return values, se, clamped


def initial_theta(ds: LongDataset, spec: ModelSpec) -> np.ndarray:
    """Well-conditioned default start.

    beta = 0, C = identity, sigma = 1, thresholds from the probit of the
    empirical cumulative category proportions (with a small floor between
    consecutive thresholds so no category starts degenerate), contrasts 0.
    """
    layout = ParameterLayout.from_spec(spec)
    theta = np.zeros(layout.size)
    p = layout.n_random
    chol = _packed_from_chol(np.eye(p))
    theta[layout.chol_slice] = chol

    counts = {it.item_id: np.zeros(it.n_levels) for it in spec.items}
    for obs in ds.observations:
        if obs.item_id in counts:
            counts[obs.item_id][obs.response] += 1

    for k, item in enumerate(spec.items):
        c = counts[item.item_id]
        total = c.sum()
        if total > 0:
            cum = np.cumsum(c)[:-1] / total
            eps = 1.0 / (2.0 * total + 2.0)
            thr = ndtri(np.clip(cum, eps, 1.0 - eps))
            # keep every category alive at the start
            for l in range(1, thr.size):
                thr[l] = max(thr[l], thr[l - 1] + 1e-3)
        else:
            thr = np.linspace(-1.0, 1.0, item.n_levels - 1)
        block = np.empty(layout.item_levels[k])
        block[0] = 1.0
        block[1] = thr[0]
        if thr.size > 1:
            block[2:] = np.sqrt(np.diff(thr))
        theta[layout.item_slice(k)] = block
    return theta
