"""Hypothesis tests and the measurement-invariance workflow.

Multivariate Wald tests on linear combinations of the packed parameters,
likelihood-ratio tests between nested fits, and a report that fits the
constrained and contrast models side by side with global and per-item
invariance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import chi2

from .dataset import LongDataset
from .optimizer import FitOptions, FitResult, fit
from .timebasis import ModelSpec


class NestingError(ValueError):
    """The two fits are not nested (one layout is not a sub-layout of the other)."""


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: int
    p_value: float
    kind: str  # "wald" | "lrt"


def wald_test(
    theta: np.ndarray,
    V: np.ndarray,
    *,
    L: np.ndarray | None = None,
    indices=None,
    r=0.0,
) -> TestResult:
    """Wald test of L theta = r (or theta[indices] = r).

    A single constraint reduces to the two-sided z test; the statistic is
    then the signed z value.  Raises for a singular L V L'.
    """
    theta = np.asarray(theta, dtype=float)
    V = np.asarray(V, dtype=float)
    if (L is None) == (indices is None):
        raise ValueError("provide exactly one of L or indices")
    if indices is not None:
        indices = np.atleast_1d(np.asarray(indices, dtype=int))
        L = np.zeros((indices.size, theta.size))
        L[np.arange(indices.size), indices] = 1.0
    L = np.atleast_2d(np.asarray(L, dtype=float))
    r_vec = np.broadcast_to(np.asarray(r, dtype=float), (L.shape[0],))
    diff = L @ theta - r_vec
    cov = L @ V @ L.T

    if L.shape[0] == 1:
        se = math.sqrt(cov[0, 0])
        if se == 0.0 or not math.isfinite(se):
            raise np.linalg.LinAlgError("degenerate variance for the tested combination")
        z = diff[0] / se
        p = 2.0 * ndtr(-abs(z))
        return TestResult(statistic=float(z), df=1, p_value=float(p), kind="wald")

    try:
        sol = np.linalg.solve(cov, diff)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"L V L' is singular for the tested combination (rank {np.linalg.matrix_rank(cov)})"
        ) from exc
    W = float(diff @ sol)
    df = int(np.linalg.matrix_rank(cov))
    return TestResult(statistic=W, df=df, p_value=float(chi2.sf(W, df)), kind="wald")


def wald_test_fit(fit_result: FitResult, **kw) -> TestResult:
    return wald_test(fit_result.theta, fit_result.V, **kw)


def _check_nested(full: FitResult, reduced: FitResult) -> None:
    full_names = set(full.layout.names)
    reduced_names = set(reduced.layout.names)
    if not reduced_names <= full_names:
        raise NestingError(
            "reduced model parameters are not a subset of the full model's: "
            + ", ".join(sorted(reduced_names - full_names)[:5])
        )


def lrt(fit_a: FitResult, fit_b: FitResult) -> TestResult:
    """Likelihood-ratio test between nested fits (order-insensitive).

    The statistic is clamped at 0 (with the negative value kept out of the
    p-value) when the nominally larger model fits worse.
    """
    full, reduced = (
        (fit_a, fit_b) if fit_a.n_parameters >= fit_b.n_parameters else (fit_b, fit_a)
    )
    _check_nested(full, reduced)
    df = full.n_parameters - reduced.n_parameters
    if df == 0:
        return TestResult(statistic=0.0, df=0, p_value=1.0, kind="lrt")
    stat = 2.0 * (full.loglik - reduced.loglik)
    stat = max(stat, 0.0)
    return TestResult(statistic=float(stat), df=df, p_value=float(chi2.sf(stat, df)), kind="lrt")


@dataclass(frozen=True)
class ItemContrastTest:
    item_id: str
    derived: bool
    estimates: np.ndarray  # one per contrast term
    ses: np.ndarray
    test: TestResult


@dataclass
class InvarianceReport:
    mode: str  # "dif" | "rs"
    contrast_terms: tuple[str, ...]
    global_test: TestResult
    global_test_kind: str
    lrt_test: TestResult
    item_tests: list[ItemContrastTest]
    fit_without: FitResult
    fit_with: FitResult
    structural_names: tuple[str, ...]
    structural_without: np.ndarray
    structural_without_se: np.ndarray
    structural_with: np.ndarray
    structural_with_se: np.ndarray

    def to_json_dict(self) -> dict:
        def test_dict(t: TestResult) -> dict:
            return {"statistic": t.statistic, "df": t.df, "p_value": t.p_value, "kind": t.kind}

        return {
            "mode": self.mode,
            "contrast_terms": list(self.contrast_terms),
            "global_test": test_dict(self.global_test),
            "global_test_kind": self.global_test_kind,
            "lrt": test_dict(self.lrt_test),
            "items": [
                {
                    "item": t.item_id,
                    "derived": t.derived,
                    "estimates": t.estimates.tolist(),
                    "ses": t.ses.tolist(),
                    **test_dict(t.test),
                }
                for t in self.item_tests
            ],
            "structural": {
                "names": list(self.structural_names),
                "without_contrasts": {
                    "estimate": self.structural_without.tolist(),
                    "se": self.structural_without_se.tolist(),
                },
                "with_contrasts": {
                    "estimate": self.structural_with.tolist(),
                    "se": self.structural_with_se.tolist(),
                },
            },
            "note": "the last item's contrast is not estimated; it is derived as minus the sum of the others",
        }

    def to_text(self) -> str:
        lines = []
        lines.append(f"Measurement invariance report (mode: {self.mode})")
        lines.append(
            f"Global test ({self.global_test_kind}): statistic {self.global_test.statistic:.3f}, "
            f"df {self.global_test.df}, p {self.global_test.p_value:.4g}"
        )
        lines.append(
            f"Likelihood ratio: statistic {self.lrt_test.statistic:.3f}, "
            f"df {self.lrt_test.df}, p {self.lrt_test.p_value:.4g}"
        )
        lines.append("")
        lines.append("Structural coefficients (without | with contrasts):")
        lines.append(f"{'term':>18} {'est':>9} {'se':>8}   {'est':>9} {'se':>8}")
        lines.append(f"{'intercept':>18} {0.0:>9.3f} {'-':>8}   {0.0:>9.3f} {'-':>8}")
        for name, e0, s0, e1, s1 in zip(
            self.structural_names,
            self.structural_without,
            self.structural_without_se,
            self.structural_with,
            self.structural_with_se,
        ):
            lines.append(f"{name:>18} {e0:>9.3f} {s0:>8.3f}   {e1:>9.3f} {s1:>8.3f}")
        lines.append("")
        lines.append(f"Per-item contrasts on: {', '.join(self.contrast_terms)}")
        for t in self.item_tests:
            est = ", ".join(f"{v:.3f}" for v in t.estimates)
            ses = ", ".join(f"{v:.3f}" for v in t.ses)
            tag = "  (derived as minus the sum of the others)" if t.derived else ""
            lines.append(
                f"  {t.item_id}: est [{est}]  se [{ses}]  "
                f"W {t.test.statistic:.3f} df {t.test.df} p {t.test.p_value:.4g}{tag}"
            )
        return "\n".join(lines)


def item_contrast_tests(fit_result: FitResult) -> list[ItemContrastTest]:
    """Per-item multivariate Wald tests of the contrast block, including the
    derived last item via the exact linear transform."""
    layout = fit_result.layout
    K = layout.n_items
    n_terms = layout.n_dif_terms
    if n_terms == 0:
        return []
    tests = []
    for k in range(K):
        L = np.zeros((n_terms, layout.size))
        for t in range(n_terms):
            sl = layout.dif_term_slice(t)
            if k < K - 1:
                L[t, sl.start + k] = 1.0
            else:
                L[t, sl.start:sl.stop] = -1.0
        est = L @ fit_result.theta
        cov = L @ fit_result.V @ L.T
        test = wald_test(fit_result.theta, fit_result.V, L=L)
        tests.append(
            ItemContrastTest(
                item_id=layout.item_ids[k],
                derived=(k == K - 1),
                estimates=est,
                ses=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
                test=test,
            )
        )
    return tests


def invariance_report(
    ds: LongDataset,
    spec: ModelSpec,
    options: FitOptions = FitOptions(),
    mode: str = "dif",
    *,
    global_test_kind: str | None = None,
    init=None,
) -> InvarianceReport:
    """Fit the constrained (no-contrast) and contrast models and test
    measurement invariance.

    The global test defaults to the multivariate Wald on all free contrasts
    for differential functioning across groups ("dif") and to the
    likelihood-ratio test for shift over time ("rs"); either can be forced
    with global_test_kind.
    """
    if mode not in ("dif", "rs"):
        raise ValueError("mode must be 'dif' or 'rs'")
    if not spec.dif_terms:
        raise ValueError("spec has no contrast terms")
    if global_test_kind is None:
        global_test_kind = "wald" if mode == "dif" else "lrt"
    if global_test_kind not in ("wald", "lrt"):
        raise ValueError("global_test_kind must be 'wald' or 'lrt'")

    spec0 = spec.without_contrasts()
    fit0 = fit(ds, spec0, options)
    fit1 = fit(ds, spec, options, init=init)

    sl = fit1.layout.dif_slice
    free_idx = np.arange(sl.start, sl.stop)
    wald_global = wald_test(fit1.theta, fit1.V, indices=free_idx)
    lrt_global = lrt(fit1, fit0)
    global_test = wald_global if global_test_kind == "wald" else lrt_global

    n_struct = fit1.layout.n_fixed
    se0 = fit0.se()[:n_struct]
    se1 = fit1.se()[:n_struct]
    return InvarianceReport(
        mode=mode,
        contrast_terms=spec.dif_terms,
        global_test=global_test,
        global_test_kind=global_test_kind,
        lrt_test=lrt_global,
        item_tests=item_contrast_tests(fit1),
        fit_without=fit0,
        fit_with=fit1,
        structural_names=spec.fixed_terms,
        structural_without=fit0.theta[:n_struct].copy(),
        structural_without_se=se0,
        structural_with=fit1.theta[:n_struct].copy(),
        structural_with_se=se1,
    )
