"""Spline-basis and design-row checks.

The natural-spline oracle below evaluates the textbook truncated-power
construction directly (independent of the library's vectorized path) with
the same documented span rescaling.
"""

import numpy as np
import pytest

from longirt import (
    ItemDef,
    ModelSpec,
    SpecificationError,
    TimeBasis,
    basis_matrix,
    design_matrices,
    design_rows,
    ncs_basis,
    tertile_knots,
)

BASIS = TimeBasis("ncs", internal_knots=(7.0, 15.0), boundary_knots=(0.0, 60.0))


def oracle_ncs(t: float, internal, boundary) -> np.ndarray:
    """Reference truncated-power natural-spline evaluation at one point."""
    lo, hi = boundary
    tau = [lo, *internal, hi]
    span = hi - lo
    m = len(tau)

    def pos_cube(x):
        return max(x, 0.0) ** 3

    def d(j):
        return (pos_cube(t - tau[j]) - pos_cube(t - tau[m - 1])) / (tau[m - 1] - tau[j])

    cols = [(t - lo) / span]
    d_last = d(m - 2)
    for j in range(m - 2):
        cols.append((d(j) - d_last) / span**2)
    return np.array(cols)


class TestNcsBasis:
    def test_dimension_is_internal_knots_plus_one(self):
        assert BASIS.n_columns == 3
        assert len(ncs_basis(3.0, BASIS)) == 3
        one_knot = TimeBasis("ncs", internal_knots=(5.0,), boundary_knots=(0.0, 10.0))
        assert one_knot.n_columns == 2

    @pytest.mark.parametrize("t", [0.0, 3.0, 7.0, 11.2, 15.0, 40.0, 60.0, 72.0])
    def test_matches_truncated_power_oracle(self, t):
        got = ncs_basis(t, BASIS)
        want = oracle_ncs(t, (7.0, 15.0), (0.0, 60.0))
        assert got == pytest.approx(want, abs=1e-10)

    def test_second_derivative_zero_outside_boundaries(self):
        h = 1e-3
        for t in (-5.0, 61.0, 70.0):
            d2 = (
                basis_matrix([t - h], BASIS)[0]
                - 2 * basis_matrix([t], BASIS)[0]
                + basis_matrix([t + h], BASIS)[0]
            ) / h**2
            assert d2 == pytest.approx(np.zeros(3), abs=1e-6)

    def test_linear_extrapolation_beyond_boundary(self):
        # exactly linear: values at 62, 66, 70 lie on a line
        v = basis_matrix([62.0, 66.0, 70.0], BASIS)
        assert v[1] == pytest.approx(0.5 * (v[0] + v[2]), abs=1e-12)
        v = basis_matrix([-9.0, -6.0, -3.0], BASIS)
        assert v[1] == pytest.approx(0.5 * (v[0] + v[2]), abs=1e-12)

    def test_columns_vanish_at_lower_boundary(self):
        assert ncs_basis(0.0, BASIS) == pytest.approx(np.zeros(3), abs=1e-15)

    def test_gram_matrix_nonsingular(self):
        t = np.linspace(0.5, 59.5, 40)
        X = basis_matrix(t, BASIS)
        gram = X.T @ X
        assert np.linalg.cond(gram) < 1e8

    def test_continuity_inside_knots(self):
        t = np.linspace(1.0, 59.0, 233)
        vals = basis_matrix(t, BASIS)
        jumps = np.abs(np.diff(vals, axis=0)).max()
        assert jumps < 0.05  # locally Lipschitz on a fine grid

    def test_deterministic(self):
        a = basis_matrix(np.linspace(0, 60, 50), BASIS)
        b = basis_matrix(np.linspace(0, 60, 50), BASIS)
        assert np.array_equal(a, b)

    def test_validation(self):
        with pytest.raises(ValueError):
            TimeBasis("ncs", internal_knots=(0.0, 15.0), boundary_knots=(0.0, 60.0))
        with pytest.raises(ValueError):
            TimeBasis("ncs", internal_knots=(15.0, 7.0), boundary_knots=(0.0, 60.0))
        with pytest.raises(ValueError):
            TimeBasis("ncs", internal_knots=(7.0,), boundary_knots=(60.0, 0.0))
        with pytest.raises(ValueError):
            ncs_basis(1.0, TimeBasis("identity"))

    def test_tertile_knots(self):
        times = np.concatenate([np.zeros(100), np.full(100, 7.0), np.full(100, 15.0)])
        k1, k2 = tertile_knots(times)
        assert 0 < k1 <= 7.0
        assert 7.0 <= k2 <= 15.0


ITEMS = tuple(ItemDef(f"i{k}", 4) for k in range(3))
SPEC = ModelSpec(
    items=ITEMS,
    basis=BASIS,
    fixed_terms=("ns1", "ns2", "ns3", "group", "ns1:group", "ns2:group", "ns3:group"),
    random_terms=("1", "ns1", "ns2", "ns3"),
)


class TestDesignRows:
    def test_seven_fixed_effects_no_intercept(self):
        x, z, xd = design_rows(SPEC, {"group": 1.0}, 10.0)
        assert x.shape == (7,)
        assert xd.shape == (0,)
        # no constant column: at t=0 every fixed column vanishes
        x0, _, _ = design_rows(SPEC, {"group": 0.0}, 0.0)
        assert x0 == pytest.approx(np.zeros(7), abs=1e-15)

    def test_reference_group_zeroes_interactions(self):
        x, _, _ = design_rows(SPEC, {"group": 0.0}, 23.0)
        assert x[3] == 0.0
        assert x[4:] == pytest.approx(np.zeros(3), abs=1e-15)

    def test_random_row_has_intercept_first(self):
        _, z, _ = design_rows(SPEC, {"group": 1.0}, 23.0)
        assert z.shape == (4,)
        assert z[0] == 1.0
        assert z[1:] == pytest.approx(ncs_basis(23.0, BASIS))

    def test_interactions_are_products(self):
        x1, _, _ = design_rows(SPEC, {"group": 1.0}, 23.0)
        basis = ncs_basis(23.0, BASIS)
        assert x1[:3] == pytest.approx(basis)
        assert x1[4:] == pytest.approx(basis)

    def test_missing_covariate_names_term(self):
        with pytest.raises(SpecificationError, match="group"):
            design_rows(SPEC, {}, 5.0)

    def test_unknown_term_part_rejected(self):
        spec = ModelSpec(items=ITEMS, basis=BASIS, fixed_terms=("ns9",), random_terms=("1",))
        with pytest.raises(SpecificationError, match="ns9"):
            design_rows(spec, {}, 5.0)

    def test_deterministic_and_pure(self):
        a = design_rows(SPEC, {"group": 1.0}, 17.3)
        b = design_rows(SPEC, {"group": 1.0}, 17.3)
        for u, v in zip(a, b):
            assert np.array_equal(u, v)

    def test_dif_terms_built(self):
        spec = ModelSpec(
            items=ITEMS, basis=BASIS,
            fixed_terms=("ns1", "group"), random_terms=("1",),
            dif_terms=("group",),
        )
        _, _, xd = design_rows(spec, {"group": 1.0}, 3.0)
        assert xd == pytest.approx([1.0])

    def test_vectorized_matches_rowwise(self):
        t = np.array([0.0, 5.5, 31.0])
        g = np.array([0.0, 1.0, 1.0])
        X, Z, XD = design_matrices(SPEC, t, {"group": g})
        for i in range(3):
            x, z, xd = design_rows(SPEC, {"group": g[i]}, t[i])
            assert X[i] == pytest.approx(x)
            assert Z[i] == pytest.approx(z)


class TestModelSpecValidation:
    def test_intercept_rejected_in_fixed(self):
        with pytest.raises(SpecificationError):
            ModelSpec(items=ITEMS, basis=BASIS, fixed_terms=("1", "ns1"), random_terms=("1",))

    def test_random_must_start_with_intercept(self):
        with pytest.raises(SpecificationError):
            ModelSpec(items=ITEMS, basis=BASIS, fixed_terms=("ns1",), random_terms=("ns1",))

    def test_roundtrip_through_dict(self):
        spec = ModelSpec(
            items=ITEMS, basis=BASIS,
            fixed_terms=("ns1", "group"), random_terms=("1", "ns1"),
            dif_terms=("group",),
        )
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_covariate_names(self):
        spec = ModelSpec(
            items=ITEMS, basis=BASIS,
            fixed_terms=("ns1", "group", "ns1:age"), random_terms=("1",),
        )
        assert spec.covariate_names() == ("group", "age")
