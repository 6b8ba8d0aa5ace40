"""Posterior-quantity checks: trajectories, bands, empirical-Bayes effects.

Band calibration is checked against the analytic normal band for a linear
transform; the empirical-Bayes mode is checked against a grid search.
"""

import numpy as np
import pytest
from scipy.special import ndtr

from longirt import (
    FitOptions,
    ItemDef,
    ItemParams,
    LongDataset,
    ModelSpec,
    NaturalParams,
    Observation,
    TimeBasis,
    eb_random_effects,
    individual_trajectory,
    item_expectation,
    item_trajectory,
    latent_population_interval,
    marginal_trajectory,
    simulate_dataset,
)
from longirt.optimizer import FitResult, natural_se_table
from longirt.parameters import ParameterLayout, pack
from longirt.posterior import PosteriorSummary

from test_optimizer import small_design


def synthetic_fit(spec, natural, V_scale=0.0, seed=0) -> FitResult:
    """FitResult built directly from parameters (no optimization).

    The packed vector pins B[0,0] at 1, so for degenerate-B limit tests the
    packed theta is built from a normalized copy; the natural parameters are
    stored as given.
    """
    layout = ParameterLayout.from_spec(spec)
    packable = natural
    if abs(natural.B[0, 0] - 1.0) > 1e-12:
        packable = NaturalParams(
            beta=natural.beta, B=np.eye(natural.n_random),
            items=natural.items, gammas=natural.gammas,
        )
    theta = pack(packable, layout)
    rng = np.random.default_rng(seed)
    if V_scale > 0:
        A = rng.normal(size=(layout.size, layout.size)) * V_scale
        V = A @ A.T
    else:
        V = np.zeros((layout.size, layout.size))
    from longirt.optimizer import CriteriaValues

    return FitResult(
        spec=spec,
        layout=layout,
        options=FitOptions(),
        theta=theta,
        V=V,
        loglik=0.0,
        n_iter=0,
        converged=True,
        criteria=CriteriaValues(0.0, 0.0, 0.0),
        criteria_passed=(True, True, True),
        hessian_pd=True,
        natural=natural,
        natural_table=natural_se_table(theta, V, layout),
        trace=[],
        n_parameters=layout.size,
        n_subjects=0,
        n_observations=0,
    )


ITEMS = (ItemDef("i0", 3), ItemDef("i1", 4))
SPEC = ModelSpec(
    items=ITEMS,
    basis=TimeBasis("polynomial", degree=2),
    fixed_terms=("t", "t2"),
    random_terms=("1",),
)
NAT = NaturalParams(
    beta=np.array([1.0, 2.0]),
    B=np.eye(1),
    items=(
        ItemParams(1.0, np.array([-0.5, 0.6])),
        ItemParams(0.8, np.array([-0.4, 0.3, 1.2])),
    ),
)


class TestMarginalTrajectory:
    def test_point_prediction_exact(self):
        fit = synthetic_fit(SPEC, NAT)
        out = marginal_trajectory(fit, {}, [1.0], n_draws=50)
        # beta = (1, 2), x(1) = (1, 1) -> 3
        assert out.estimate[0] == pytest.approx(3.0, abs=1e-12)

    def test_zero_variance_gives_zero_width(self):
        fit = synthetic_fit(SPEC, NAT, V_scale=0.0)
        out = marginal_trajectory(fit, {}, np.linspace(0, 2, 5), n_draws=200)
        assert out.lower == pytest.approx(out.estimate, abs=1e-12)
        assert out.upper == pytest.approx(out.estimate, abs=1e-12)

    def test_band_matches_analytic_normal_band(self):
        fit = synthetic_fit(SPEC, NAT, V_scale=0.05, seed=4)
        grid = np.array([0.5, 1.0, 1.7])
        out = marginal_trajectory(fit, {}, grid, n_draws=2000, seed=16)
        from longirt import design_matrices

        X, _, _ = design_matrices(SPEC, grid, {})
        Vb = fit.V[fit.layout.beta_slice, fit.layout.beta_slice]
        half = 1.959963984540054 * np.sqrt(np.einsum("ij,jk,ik->i", X, Vb, X))
        mc_half = 0.5 * (out.upper - out.lower)
        assert mc_half == pytest.approx(half, rel=0.03)

    def test_doubling_beta_doubles_prediction(self):
        nat2 = NaturalParams(beta=2 * NAT.beta, B=NAT.B, items=NAT.items)
        f1 = synthetic_fit(SPEC, NAT)
        f2 = synthetic_fit(SPEC, nat2)
        grid = np.linspace(0.0, 2.0, 7)
        a = marginal_trajectory(f1, {}, grid, n_draws=10)
        b = marginal_trajectory(f2, {}, grid, n_draws=10)
        assert b.estimate == pytest.approx(2 * a.estimate)

    def test_reference_profile_zero_at_time_zero(self):
        basis = TimeBasis("ncs", internal_knots=(3.0,), boundary_knots=(0.0, 10.0))
        spec = ModelSpec(
            items=ITEMS, basis=basis,
            fixed_terms=("ns1", "ns2", "group"), random_terms=("1",),
        )
        nat = NaturalParams(
            beta=np.array([0.7, -0.3, 0.5]), B=np.eye(1), items=NAT.items
        )
        fit = synthetic_fit(spec, nat)
        out = marginal_trajectory(fit, {"group": 0.0}, [0.0], n_draws=10)
        assert out.estimate[0] == 0.0

    def test_band_order_equivariant_with_grid(self):
        fit = synthetic_fit(SPEC, NAT, V_scale=0.05, seed=4)
        g1 = np.array([0.2, 0.8, 1.5])
        a = marginal_trajectory(fit, {}, g1, n_draws=500, seed=3)
        b = marginal_trajectory(fit, {}, g1[::-1].copy(), n_draws=500, seed=3)
        assert a.estimate == pytest.approx(b.estimate[::-1])
        assert a.lower == pytest.approx(b.lower[::-1])


class TestEbRandomEffects:
    def test_no_observations_gives_prior_mode(self):
        design = small_design(seed=1)
        ds, _ = simulate_dataset(design)
        fit = synthetic_fit(design.spec, design.truth)
        b = eb_random_effects(ds, fit, "not-in-data")
        assert b == pytest.approx(np.zeros(1))

    def test_single_binary_observation_matches_grid_search(self):
        items = (ItemDef("b", 2),)
        spec = ModelSpec(items=items, basis=TimeBasis("identity"), fixed_terms=("t",))
        nat = NaturalParams(
            beta=np.zeros(1), B=np.eye(1), items=(ItemParams(1.0, np.array([0.0])),)
        )
        for response, sign in ((0, -1.0), (1, 1.0)):
            ds = LongDataset(
                items=items,
                observations=(Observation("s", "b", 0.0, response),),
                subject_covariates={"s": {}},
            )
            fit = synthetic_fit(spec, nat)
            b_hat = eb_random_effects(ds, fit, "s")
            # dense grid search oracle on the 1-d log posterior
            grid = np.linspace(-3, 3, 120001)
            p = ndtr(-grid) if response == 0 else ndtr(grid)
            logpost = np.log(p) - 0.5 * grid**2
            b_grid = grid[np.argmax(logpost)]
            assert np.sign(b_hat[0]) == sign
            assert b_hat[0] == pytest.approx(b_grid, abs=1e-4)

    def test_unrelated_subjects_do_not_change_mode(self):
        design = small_design(seed=2, n_subjects=12)
        ds, _ = simulate_dataset(design)
        fit = synthetic_fit(design.spec, design.truth)
        sid = ds.observations[0].subject_id
        b_full = eb_random_effects(ds, fit, sid)
        keep = tuple(o for o in ds.observations if o.subject_id == sid)
        ds_single = LongDataset(
            items=ds.items, observations=keep,
            subject_covariates={sid: ds.subject_covariates[sid]},
        )
        b_single = eb_random_effects(ds_single, fit, sid)
        assert b_full == pytest.approx(b_single, abs=1e-10)


class TestIndividualTrajectory:
    def test_reduces_to_marginal_when_mode_is_zero(self):
        design = small_design(seed=3)
        fit = synthetic_fit(design.spec, design.truth)
        ds = LongDataset(items=design.spec.items, observations=(), subject_covariates={"s": {"group": 1.0}})
        grid = np.linspace(0.0, 2.0, 5)
        ind = individual_trajectory(ds, fit, "s", grid)
        marg = marginal_trajectory(fit, {"group": 1.0}, grid, n_draws=10)
        assert ind.estimate == pytest.approx(marg.estimate)

    def test_high_responses_raise_the_curve(self):
        items = (ItemDef("i", 4),)
        spec = ModelSpec(items=items, basis=TimeBasis("identity"), fixed_terms=("t",))
        nat = NaturalParams(
            beta=np.array([0.1]), B=np.eye(1),
            items=(ItemParams(1.0, np.array([-0.5, 0.5, 1.5])),),
        )
        fit = synthetic_fit(spec, nat)
        times = [0.0, 1.0, 2.0]
        low = LongDataset(
            items=items,
            observations=tuple(Observation("s", "i", t, 0) for t in times),
            subject_covariates={"s": {}},
        )
        high = LongDataset(
            items=items,
            observations=tuple(Observation("s", "i", t, 3) for t in times),
            subject_covariates={"s": {}},
        )
        grid = np.linspace(0, 2, 9)
        t_low = individual_trajectory(low, fit, "s", grid)
        t_high = individual_trajectory(high, fit, "s", grid)
        assert np.all(t_high.estimate > t_low.estimate)

    def test_continuity_on_fine_grid(self):
        design = small_design(seed=4)
        ds, _ = simulate_dataset(design)
        fit = synthetic_fit(design.spec, design.truth)
        sid = ds.observations[0].subject_id
        grid = np.linspace(0.0, 2.0, 201)
        out = individual_trajectory(ds, fit, sid, grid)
        assert np.abs(np.diff(out.estimate)).max() < 0.05


class TestItemTrajectory:
    def test_degenerate_random_effects_reduce_to_expectation(self):
        nat = NaturalParams(
            beta=NAT.beta, B=np.array([[1e-18]]), items=NAT.items
        )
        fit = synthetic_fit(SPEC, nat)
        grid = np.array([0.0, 0.5, 1.0])
        out = item_trajectory(fit, "i1", {}, grid, n_draws=10, n_qmc=64)
        lam = grid * nat.beta[0] + grid**2 * nat.beta[1]
        want = item_expectation(nat.items[1], lam)
        assert out.estimate == pytest.approx(want, abs=1e-6)

    def test_against_gauss_hermite(self):
        fit = synthetic_fit(SPEC, NAT)
        grid = np.array([0.3, 1.1])
        out = item_trajectory(fit, "i0", {}, grid, n_draws=10, n_qmc=4096)
        x, w = np.polynomial.hermite.hermgauss(80)
        for gi, t in enumerate(grid):
            lam0 = NAT.beta[0] * t + NAT.beta[1] * t * t
            vals = item_expectation(NAT.items[0], lam0 + np.sqrt(2.0) * x)
            oracle = float(np.sum(w * vals) / np.sqrt(np.pi))
            assert out.estimate[gi] == pytest.approx(oracle, abs=1e-3)

    def test_bounded_by_score_range(self):
        # grid kept where the tails have not saturated in float64
        fit = synthetic_fit(SPEC, NAT, V_scale=0.03, seed=9)
        grid = np.linspace(0.0, 1.2, 11)
        out = item_trajectory(fit, "i1", {}, grid, n_draws=300, n_qmc=128)
        for arr in (out.estimate, out.lower, out.upper):
            assert np.all(arr > 0.0) and np.all(arr < 3.0)

    def test_unknown_item_rejected(self):
        fit = synthetic_fit(SPEC, NAT)
        with pytest.raises(ValueError):
            item_trajectory(fit, "nope", {}, [0.0], n_draws=5, n_qmc=16)


class TestSummaryInvariants:
    def test_band_must_bracket_estimate(self):
        with pytest.raises(ValueError):
            PosteriorSummary(
                grid=np.array([0.0]),
                estimate=np.array([1.0]),
                lower=np.array([2.0]),
                upper=np.array([3.0]),
            )


class TestPopulationInterval:
    def test_quantiles_ordered_and_reproducible(self):
        design = small_design(seed=5)
        fit = synthetic_fit(design.spec, design.truth)
        grid = np.linspace(0.0, 2.0, 5)
        q1 = latent_population_interval(fit, [{"group": 0.0}, {"group": 1.0}], grid, n_per_profile=2000)
        q2 = latent_population_interval(fit, [{"group": 0.0}, {"group": 1.0}], grid, n_per_profile=2000)
        assert q1 == q2
        keys = sorted(q1)
        assert all(q1[a] <= q1[b] for a, b in zip(keys, keys[1:]))
