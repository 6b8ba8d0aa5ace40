"""Time bases and design-row assembly.

Natural cubic splines are built from the truncated-power construction with
explicit linear tails (no orthogonalization), so basis values are
bit-reproducible; columns are rescaled by powers of the boundary span to
keep them O(1).  Every basis column vanishes at the lower boundary knot, so
with no intercept in the fixed effects the latent mean is exactly 0 at that
time for the reference covariate profile.

Terms are written as explicit strings: a time-function name ("ns1", "t",
...), a covariate name ("group"), or a product "ns1:group".  "1" denotes
the intercept and is only valid in random-effect terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .dataset import ItemDef


class SpecificationError(ValueError):
    """A model term cannot be resolved (unknown name, missing covariate)."""


@dataclass(frozen=True)
class TimeBasis:
    kind: str  # "ncs" | "polynomial" | "identity"
    internal_knots: tuple[float, ...] = ()
    boundary_knots: tuple[float, float] | None = None
    degree: int = 1

    def __post_init__(self):
        if self.kind not in ("ncs", "polynomial", "identity"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        object.__setattr__(self, "internal_knots", tuple(float(k) for k in self.internal_knots))
        if self.kind == "ncs":
            if self.boundary_knots is None:
                raise ValueError("ncs basis requires boundary knots")
            lo, hi = (float(b) for b in self.boundary_knots)
            if not lo < hi:
                raise ValueError("boundary knots must be increasing")
            knots = self.internal_knots
            if any(not lo < k < hi for k in knots):
                raise ValueError("internal knots must lie strictly inside the boundary knots")
            if any(k2 <= k1 for k1, k2 in zip(knots, knots[1:])):
                raise ValueError("internal knots must be strictly increasing")
            object.__setattr__(self, "boundary_knots", (lo, hi))
        elif self.kind == "polynomial":
            if self.degree < 1:
                raise ValueError("polynomial degree must be >= 1")

    @property
    def n_columns(self) -> int:
        if self.kind == "ncs":
            return len(self.internal_knots) + 1
        if self.kind == "polynomial":
            return self.degree
        return 1

    @property
    def column_names(self) -> tuple[str, ...]:
        if self.kind == "ncs":
            return tuple(f"ns{i + 1}" for i in range(self.n_columns))
        if self.kind == "polynomial":
            return tuple("t" if i == 0 else f"t{i + 1}" for i in range(self.degree))
        return ("t",)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "ncs":
            out["internal_knots"] = list(self.internal_knots)
            out["boundary_knots"] = list(self.boundary_knots)
        elif self.kind == "polynomial":
            out["degree"] = self.degree
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "TimeBasis":
        kind = d["kind"]
        if kind == "ncs":
            return cls(kind, tuple(d["internal_knots"]), tuple(d["boundary_knots"]))
        if kind == "polynomial":
            return cls(kind, degree=int(d["degree"]))
        return cls(kind)


def basis_matrix(t, basis: TimeBasis) -> np.ndarray:
    """Evaluate all basis columns at times t; shape (len(t), n_columns)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if basis.kind == "identity":
        return t[:, None].copy()
    if basis.kind == "polynomial":
        return np.column_stack([t**d for d in range(1, basis.degree + 1)])

    lo, hi = basis.boundary_knots
    knots = np.array((lo, *basis.internal_knots, hi))
    span = hi - lo
    m = knots.size  # total knots, >= 2

    def d_term(j: int) -> np.ndarray:
        # ((t - tau_j)+^3 - (t - tau_last)+^3) / (tau_last - tau_j)
        a = np.clip(t - knots[j], 0.0, None) ** 3
        b = np.clip(t - knots[-1], 0.0, None) ** 3
        return (a - b) / (knots[-1] - knots[j])

    cols = [(t - lo) / span]
    if m >= 3:
        d_last = d_term(m - 2)
        for j in range(m - 2):
            cols.append((d_term(j) - d_last) / span**2)
    return np.column_stack(cols)


def ncs_basis(t: float, basis: TimeBasis) -> np.ndarray:
    """Natural-cubic-spline basis values at a single time point."""
    if basis.kind != "ncs":
        raise ValueError("ncs_basis requires an ncs TimeBasis")
    return basis_matrix(np.array([t]), basis)[0]


def tertile_knots(times) -> tuple[float, float]:
    """Internal-knot helper: tertiles of the observed measurement times.

    Knot placement is never silent; callers pass the result to TimeBasis
    explicitly.
    """
    times = np.asarray(times, dtype=float)
    q1, q2 = np.quantile(times, [1 / 3, 2 / 3])
    return float(q1), float(q2)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model definition.

    fixed_terms must not contain the intercept "1" (identifiability);
    random_terms must be non-empty with the intercept "1" first.  dif_terms
    are per-item contrast terms (covariates for group-differential
    functioning, time functions for shift over time).
    """

    items: tuple[ItemDef, ...]
    basis: TimeBasis
    fixed_terms: tuple[str, ...]
    random_terms: tuple[str, ...] = ("1",)
    dif_terms: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "random_terms", tuple(self.random_terms))
        object.__setattr__(self, "dif_terms", tuple(self.dif_terms))
        if len({it.item_id for it in self.items}) != len(self.items):
            raise ValueError("item ids must be unique")
        if not self.items:
            raise ValueError("at least one item is required")
        if "1" in self.fixed_terms:
            raise SpecificationError("fixed_terms must not include the intercept '1'")
        if not self.random_terms or self.random_terms[0] != "1":
            raise SpecificationError("random_terms must start with the intercept '1'")
        if "1" in self.dif_terms:
            raise SpecificationError("dif_terms must not include the intercept '1'")

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_terms)

    @property
    def n_random(self) -> int:
        return len(self.random_terms)

    @property
    def n_dif(self) -> int:
        return len(self.dif_terms)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def covariate_names(self) -> tuple[str, ...]:
        """Covariate names referenced by any term, in first-use order."""
        time_cols = set(self.basis.column_names) | {"1"}
        names: list[str] = []
        for term in self.fixed_terms + self.random_terms + self.dif_terms:
            for part in term.split(":"):
                if part not in time_cols and part not in names:
                    names.append(part)
        return tuple(names)

    def to_dict(self) -> dict:
        return {
            "items": [
                {"id": it.item_id, "levels": it.n_levels, "reversed": it.reversed}
                for it in self.items
            ],
            "basis": self.basis.to_dict(),
            "fixed": list(self.fixed_terms),
            "random": list(self.random_terms),
            "dif": list(self.dif_terms),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        items = tuple(
            ItemDef(str(i["id"]), int(i["levels"]), bool(i.get("reversed", False)))
            for i in d["items"]
        )
        return cls(
            items=items,
            basis=TimeBasis.from_dict(d["basis"]),
            fixed_terms=tuple(d["fixed"]),
            random_terms=tuple(d.get("random", ["1"])),
            dif_terms=tuple(d.get("dif", [])),
        )

    def without_contrasts(self) -> "ModelSpec":
        return replace(self, dif_terms=())


def _term_columns(
    terms: Sequence[str],
    basis_cols: np.ndarray,
    col_index: Mapping[str, int],
    covariates: Mapping[str, np.ndarray],
    n: int,
) -> np.ndarray:
    out = np.ones((n, len(terms)))
    for j, term in enumerate(terms):
        col = out[:, j]
        for part in term.split(":"):
            if part == "1":
                continue
            if part in col_index:
                col *= basis_cols[:, col_index[part]]
            elif part in covariates:
                col *= covariates[part]
            else:
                raise SpecificationError(
                    f"term {term!r}: {part!r} is neither a time function nor a covariate"
                )
    return out


def design_matrices(
    spec: ModelSpec,
    times,
    covariates: Mapping[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized design matrices (X, Z, X_dif) for aligned times/covariates.

    X excludes the intercept; Z starts with the intercept column; X_dif has
    one column per dif term (empty second dimension when there are none).
    """
    times = np.asarray(times, dtype=float)
    n = times.size
    cols = basis_matrix(times, spec.basis)
    idx = {name: i for i, name in enumerate(spec.basis.column_names)}
    covariates = {k: np.broadcast_to(np.asarray(v, dtype=float), (n,)) for k, v in covariates.items()}
    x = _term_columns(spec.fixed_terms, cols, idx, covariates, n)
    z = _term_columns(spec.random_terms, cols, idx, covariates, n)
    xd = _term_columns(spec.dif_terms, cols, idx, covariates, n)
    return x, z, xd


def design_rows(
    spec: ModelSpec,
    covariates: Mapping[str, float],
    t: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Design rows (x, z, x_dif) for one subject profile at one time."""
    cov_arrays = {k: np.array([float(v)]) for k, v in covariates.items()}
    x, z, xd = design_matrices(spec, [t], cov_arrays)
    return x[0], z[0], xd[0]
