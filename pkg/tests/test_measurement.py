"""Measurement-model checks against high-precision normal-CDF oracles.

Frozen expected values were computed with mpmath at 40 digits.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longirt import (
    ItemParams,
    category_information,
    category_prob,
    cum_prob,
    item_expectation,
    item_information,
)

# example-scale parameters: (discrimination, thresholds)
TABLE_ITEMS = {
    "item2": (1.29, (-0.46, 0.77, 1.52)),
    "item4": (1.56, (-0.26, 0.74, 1.91)),
    "item6": (0.85, (-0.48, 1.58, 3.34)),
    "item8": (0.95, (-1.51, 0.40, 1.69)),
    "item10": (0.88, (-0.05, 1.00, 2.27)),
    "item12": (1.46, (-0.32, 0.72, 1.82)),
    "item14": (0.56, (0.83, 3.18, 4.11)),
}


def make_item(name: str) -> ItemParams:
    disc, thr = TABLE_ITEMS[name]
    return ItemParams(sigma=1.0 / disc, thresholds=np.array(thr))


@st.composite
def random_items(draw):
    n_levels = draw(st.integers(2, 6))
    disc = draw(st.floats(0.2, 3.0))
    base = draw(st.floats(-2.0, 2.0))
    gaps = [draw(st.floats(0.0, 2.0)) for _ in range(n_levels - 2)]
    thr = np.concatenate(([base], base + np.cumsum(gaps))) if gaps else np.array([base])
    return ItemParams(sigma=1.0 / disc, thresholds=thr)


class TestCumProb:
    def test_at_threshold_is_half(self):
        item = make_item("item2")
        for level, thr in enumerate(item.thresholds):
            assert cum_prob(item, level, thr) == pytest.approx(0.5, abs=1e-14)

    def test_top_level_is_one(self):
        item = make_item("item6")
        assert cum_prob(item, 3, 1.7) == 1.0

    def test_item2_level0_at_zero(self):
        # mpmath oracle: Phi(1.29 * -0.46)
        assert cum_prob(make_item("item2"), 0, 0.0) == pytest.approx(0.276456744448, abs=1e-10)

    def test_level_out_of_range(self):
        item = make_item("item2")
        with pytest.raises(ValueError):
            cum_prob(item, 4, 0.0)
        with pytest.raises(ValueError):
            cum_prob(item, -1, 0.0)

    def test_nondecreasing_in_level(self):
        item = make_item("item8")
        for lam in (-3.0, 0.0, 2.5):
            probs = [cum_prob(item, l, lam) for l in range(item.n_levels)]
            assert np.all(np.diff(probs) >= 0)


class TestCategoryProb:
    def test_item2_level1_at_zero(self):
        # 0.8397 - 0.2765 per the oracle
        assert category_prob(make_item("item2"), 1, 0.0) == pytest.approx(0.563261366774, abs=1e-10)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            thr = np.sort(rng.normal(size=3))
            item = ItemParams(sigma=rng.uniform(0.3, 3.0), thresholds=thr)
            lam = rng.normal(scale=2.0)
            total = sum(category_prob(item, l, lam) for l in range(4))
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_low_latent_gives_category_zero(self):
        item = make_item("item4")
        assert category_prob(item, 0, -40.0) == pytest.approx(1.0, abs=1e-12)

    def test_vectorized_matches_scalar(self):
        item = make_item("item12")
        lam = np.linspace(-4, 4, 9)
        vec = category_prob(item, 2, lam)
        assert vec == pytest.approx([category_prob(item, 2, x) for x in lam])


class TestItemExpectation:
    def test_item2_at_zero(self):
        assert item_expectation(make_item("item2"), 0.0) == pytest.approx(
            0.908776323363, abs=1e-10
        )

    def test_limits(self):
        item = make_item("item10")
        assert item_expectation(item, 40.0) == pytest.approx(3.0, abs=1e-12)
        assert item_expectation(item, -40.0) == pytest.approx(0.0, abs=1e-12)

    def test_equals_weighted_category_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            thr = np.sort(rng.normal(size=rng.integers(1, 5)))
            item = ItemParams(sigma=rng.uniform(0.3, 2.5), thresholds=thr)
            lam = rng.normal(scale=2.0)
            direct = sum(l * category_prob(item, l, lam) for l in range(item.n_levels))
            assert item_expectation(item, lam) == pytest.approx(direct, abs=1e-12)

    @given(random_items(), st.floats(-5, 5), st.floats(1e-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_monotone_increasing(self, item, lam, gap):
        lo = item_expectation(item, lam)
        hi = item_expectation(item, lam + gap)
        assert hi >= lo
        # strictly increasing wherever the tails have not saturated in float64
        saturated = min(lo, hi) < 1e-12 or max(lo, hi) > item.n_levels - 1 - 1e-12
        if not saturated:
            assert hi > lo

    def test_derivative_matches_finite_difference(self):
        item = make_item("item4")
        s = item.discrimination
        for lam in (-2.0, 0.0, 1.5):
            h = 1e-6
            fd = (item_expectation(item, lam + h) - item_expectation(item, lam - h)) / (2 * h)
            from longirt.measurement import norm_pdf

            analytic = sum(s * norm_pdf(s * (t - lam)) for t in item.thresholds)
            assert fd == pytest.approx(analytic, abs=1e-6)
            assert analytic >= 0


class TestInformation:
    def test_binary_probit_closed_form(self):
        item = ItemParams(sigma=1.0, thresholds=np.array([0.0]))
        # phi(0)^2 / (Phi(0)(1 - Phi(0))) = 2/pi
        assert item_information(item, 0.0) == pytest.approx(0.636619772368, abs=1e-10)

    def test_symmetric_thresholds_give_symmetric_information(self):
        item = ItemParams(sigma=0.8, thresholds=np.array([-0.9, 0.9]))
        lam = np.linspace(0.1, 4.0, 17)
        assert item_information(item, lam) == pytest.approx(item_information(item, -lam))

    def test_matches_expected_negative_log_curvature(self):
        # sum_l (-d2 log P_l) P_l by central differences of log category_prob
        rng = np.random.default_rng(11)
        for _ in range(10):
            thr = np.sort(rng.normal(size=3))
            item = ItemParams(sigma=rng.uniform(0.5, 2.0), thresholds=thr)
            lam = rng.uniform(-2, 2)
            h = 1e-4
            total = 0.0
            for l in range(item.n_levels):
                lp = np.log([
                    category_prob(item, l, lam - h),
                    category_prob(item, l, lam),
                    category_prob(item, l, lam + h),
                ])
                d2 = (lp[0] - 2 * lp[1] + lp[2]) / h**2
                total += -d2 * category_prob(item, l, lam)
            assert item_information(item, lam) == pytest.approx(total, abs=1e-5)

    def test_nonnegative_on_grid(self):
        lam = np.linspace(-6, 6, 121)
        for name in TABLE_ITEMS:
            assert np.all(item_information(make_item(name), lam) >= 0)

    def test_degenerate_category_contributes_zero(self):
        item = ItemParams(sigma=1.0, thresholds=np.array([0.3, 0.3]))
        assert category_information(item, 1, 0.0) == 0.0

    def test_table_information_ranking_at_zero(self):
        info = {name: item_information(make_item(name), 0.0) for name in TABLE_ITEMS}
        top3 = sorted(info, key=info.get, reverse=True)[:3]
        assert set(top3) == {"item2", "item4", "item12"}

    def test_item14_peaks_at_largest_latent(self):
        lam = np.linspace(-6, 6, 1201)
        peaks = {
            name: lam[np.argmax(item_information(make_item(name), lam))]
            for name in TABLE_ITEMS
        }
        assert peaks["item14"] == max(peaks.values())
        assert all(peaks["item14"] > v for k, v in peaks.items() if k != "item14")


class TestScaleAndValidation:
    def test_sigma_sign_is_irrelevant(self):
        thr = np.array([-0.5, 0.4, 1.2])
        pos = ItemParams(sigma=0.7, thresholds=thr)
        neg = ItemParams(sigma=-0.7, thresholds=thr)
        lam = np.linspace(-3, 3, 7)
        assert np.array_equal(item_expectation(pos, lam), item_expectation(neg, lam))
        assert np.array_equal(item_information(pos, lam), item_information(neg, lam))
        for l in range(4):
            assert np.array_equal(category_prob(pos, l, lam), category_prob(neg, l, lam))

    def test_decreasing_thresholds_rejected(self):
        with pytest.raises(ValueError):
            ItemParams(sigma=1.0, thresholds=np.array([0.5, 0.1]))

    def test_zero_sigma_rejected(self):
        with pytest.raises(ValueError):
            ItemParams(sigma=0.0, thresholds=np.array([0.0]))

    @given(random_items(), st.floats(-6, 6))
    @settings(max_examples=60, deadline=None)
    def test_probabilities_valid_and_normalized(self, item, lam):
        probs = np.array([category_prob(item, l, lam) for l in range(item.n_levels)])
        assert np.all(probs >= 0) and np.all(probs <= 1)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
