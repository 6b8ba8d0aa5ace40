"""Graded-response probit measurement model.

Category probabilities, expected item scores and Fisher information for an
ordinal item, all as functions of the latent construct level.  An item with
L levels (coded 0..L-1) is described by an error scale ``sigma`` and L-1
ordered thresholds; the discrimination is 1/|sigma|.  Virtual thresholds
-inf and +inf close the first and last categories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def norm_pdf(x):
    """Standard normal density; exact zeros at +/-inf."""
    x = np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    # inf*inf -> inf, exp(-inf) -> 0, so only nan inputs stay nan
    return out


@dataclass(frozen=True)
class ItemParams:
    """Measurement parameters of one ordinal item.

    ``sigma`` is the measurement-error scale; only its magnitude is
    identified.  ``thresholds`` are the L-1 interior thresholds, required
    non-decreasing.  Equal thresholds are allowed and give a zero-probability
    category.
    """

    sigma: float
    thresholds: np.ndarray

    def __post_init__(self):
        thr = np.asarray(self.thresholds, dtype=float)
        if thr.ndim != 1 or thr.size < 1:
            raise ValueError("thresholds must be a 1-d array with >= 1 entry")
        if np.any(np.diff(thr) < 0):
            raise ValueError("thresholds must be non-decreasing")
        if self.sigma == 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be finite and non-zero")
        object.__setattr__(self, "thresholds", thr)

    @property
    def n_levels(self) -> int:
        return self.thresholds.size + 1

    @property
    def discrimination(self) -> float:
        return 1.0 / abs(self.sigma)

    def padded_thresholds(self) -> np.ndarray:
        """Thresholds with the virtual -inf / +inf endpoints prepended/appended."""
        return np.concatenate(([-np.inf], self.thresholds, [np.inf]))


def _check_level(item: ItemParams, level: int) -> None:
    if not 0 <= level <= item.n_levels - 1:
        raise ValueError(
            f"level {level} out of range for item with {item.n_levels} levels"
        )


def cum_prob(item: ItemParams, level: int, lam):
    """P(Y <= level | latent = lam); equals 1 for the top level."""
    _check_level(item, level)
    lam = np.asarray(lam, dtype=float)
    s = item.discrimination
    if level == item.n_levels - 1:
        out = np.ones_like(lam)
    else:
        out = ndtr(s * (item.thresholds[level] - lam))
    return float(out) if out.ndim == 0 else out


def category_prob(item: ItemParams, level: int, lam):
    """P(Y = level | latent = lam)."""
    _check_level(item, level)
    lam = np.asarray(lam, dtype=float)
    s = item.discrimination
    pad = item.padded_thresholds()
    upper = ndtr(s * (pad[level + 1] - lam)) if level < item.n_levels - 1 else np.ones_like(lam)
    lower = ndtr(s * (pad[level] - lam)) if level > 0 else np.zeros_like(lam)
    out = upper - lower
    return float(out) if out.ndim == 0 else out


def item_expectation(item: ItemParams, lam):
    """Expected item score E(Y | latent = lam), strictly increasing in lam."""
    lam = np.asarray(lam, dtype=float)
    s = item.discrimination
    # L-1 minus the sum of the L-1 cumulative probabilities below the top
    args = s * (item.thresholds.reshape((-1,) + (1,) * lam.ndim) - lam)
    out = (item.n_levels - 1) - ndtr(args).sum(axis=0)
    return float(out) if out.ndim == 0 else out


def category_information(item: ItemParams, level: int, lam):
    """Information contribution of one category at latent level lam.

    Returns (dP/dlam)^2 / P, the category's share of the Fisher information
    of the categorical response; summing over categories gives the item
    information.  Degenerate categories (probability below 1e-300)
    contribute 0 by convention.
    """
    _check_level(item, level)
    lam = np.asarray(lam, dtype=float)
    s = item.discrimination
    pad = item.padded_thresholds()
    w_lo = s * (pad[level] - lam)
    w_up = s * (pad[level + 1] - lam)
    p = category_prob(item, level, lam)
    p = np.asarray(p, dtype=float)
    dp = s * (norm_pdf(w_lo) - norm_pdf(w_up))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(p > 1e-300, dp * dp / np.where(p > 1e-300, p, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def item_information(item: ItemParams, lam):
    """Fisher information of the item at latent level lam (non-negative)."""
    lam = np.asarray(lam, dtype=float)
    total = np.zeros_like(lam, dtype=float)
    for level in range(item.n_levels):
        total = total + category_information(item, level, lam)
    return float(total) if total.ndim == 0 else total
