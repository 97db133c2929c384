"""Direct estimation: Hajek ratios, design variances, delta method, GFR."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saedisagg.direct import (
    SurveyDataset,
    design_variance,
    direct_estimate,
    gfr,
    hajek_estimate,
    transform_delta,
)
from saedisagg.errors import BoundaryEstimateError, EstimationError


def make_dataset(weight, outcome, exposure=None, cluster=None, stratum=None,
                 area=None, group=None):
    n = len(weight)
    return SurveyDataset(
        unit_id=np.arange(n),
        cluster=np.array(cluster if cluster is not None else [f"c{i}" for i in range(n)]),
        stratum=np.array(stratum if stratum is not None else ["h1"] * n),
        area=np.array(area if area is not None else ["a1"] * n),
        group=np.array(group if group is not None else ["all"] * n),
        weight=np.asarray(weight, dtype=float),
        outcome=np.asarray(outcome, dtype=float),
        exposure=np.asarray(exposure if exposure is not None else np.ones(n), dtype=float),
    )


class TestHajek:
    def test_equal_weights_reduce_to_mean(self):
        data = make_dataset([1, 1, 1], [0, 1, 1])
        assert hajek_estimate(data, "a1") == pytest.approx(2 / 3, abs=1e-15)

    def test_weighted_ratio(self):
        data = make_dataset([2, 1], [1, 0])
        assert hajek_estimate(data, "a1") == pytest.approx(2 / 3, abs=1e-15)

    def test_rate_uses_exposure_denominator(self):
        data = make_dataset([1, 1], [2, 0], exposure=[10, 10])
        assert hajek_estimate(data, "a1", outcome_type="rate") == pytest.approx(0.1)

    def test_zero_total_weight(self):
        data = make_dataset([0, 0], [1, 0])
        with pytest.raises(EstimationError):
            hajek_estimate(data, "a1")

    def test_empty_cell_returns_none(self):
        data = make_dataset([1], [1])
        assert hajek_estimate(data, "a2") is None

    @given(st.floats(min_value=0.01, max_value=100.0))
    @settings(max_examples=30, deadline=None)
    def test_weight_scale_invariance(self, c):
        w = np.array([1.0, 2.0, 0.5, 3.0])
        y = np.array([0.0, 1.0, 1.0, 0.0])
        base = make_dataset(w, y)
        scaled = make_dataset(w * c, y)
        assert hajek_estimate(scaled, "a1") == pytest.approx(
            hajek_estimate(base, "a1"), rel=1e-12
        )


class TestDesignVariance:
    def test_constant_outcomes_zero_variance(self):
        data = make_dataset(
            [1, 1, 1, 1], [1, 1, 1, 1], cluster=["c1", "c1", "c2", "c2"]
        )
        assert design_variance(data, "a1").value == pytest.approx(0.0, abs=1e-15)

    def test_two_cluster_against_jackknife(self):
        # Equal weights, cluster means 0 and 1: both the linearized estimator
        # and the delete-one-cluster jackknife give 0.25.
        data = make_dataset(
            [1, 1, 1, 1], [0, 0, 1, 1], cluster=["c1", "c1", "c2", "c2"]
        )
        v = design_variance(data, "a1").value

        # brute-force two-cluster jackknife
        thetas = []
        for drop in ("c1", "c2"):
            keep = data.cluster != drop
            thetas.append(
                float(data.weight[keep] @ data.outcome[keep]) / float(data.weight[keep].sum())
            )
        thetas = np.array(thetas)
        v_jk = (len(thetas) - 1) / len(thetas) * float(((thetas - thetas.mean()) ** 2).sum())
        assert v == pytest.approx(v_jk, rel=0.10)
        assert v == pytest.approx(0.25, abs=1e-12)

    def test_single_cluster_flagged(self):
        data = make_dataset([1, 1], [0, 1], cluster=["c1", "c1"])
        est = design_variance(data, "a1")
        assert est.unreliable
        assert est.value == 0.0

    def test_singleton_stratum_collapsed(self):
        # stratum h1 has one cluster; it must merge with h2 instead of
        # contributing a degenerate term
        data = make_dataset(
            [1, 1, 1, 1, 1, 1],
            [0, 1, 0, 1, 1, 1],
            cluster=["c1", "c1", "c2", "c2", "c3", "c3"],
            stratum=["h1", "h1", "h2", "h2", "h2", "h2"],
        )
        est = design_variance(data, "a1")
        assert not est.unreliable
        assert np.isfinite(est.value)
        assert est.value >= 0

    def test_non_negative_random(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = 30
            data = make_dataset(
                rng.uniform(0.5, 3.0, n),
                rng.integers(0, 2, n).astype(float),
                cluster=[f"c{i % 6}" for i in range(n)],
                stratum=[f"h{i % 2}" for i in range(n)],
            )
            assert design_variance(data, "a1").value >= 0


class TestDeltaMethod:
    def test_logit_at_half(self):
        lam, v = transform_delta(0.5, 0.01, "logit")
        assert lam == pytest.approx(0.0, abs=1e-15)
        assert v == pytest.approx(0.16, abs=1e-15)

    def test_log_at_one(self):
        lam, v = transform_delta(1.0, 0.37, "log")
        assert lam == pytest.approx(0.0, abs=1e-15)
        assert v == pytest.approx(0.37, abs=1e-15)

    def test_identity_unchanged(self):
        lam, v = transform_delta(2.5, 0.3, "identity")
        assert (lam, v) == (2.5, 0.3)

    def test_boundary_signals(self):
        with pytest.raises(BoundaryEstimateError):
            transform_delta(0.0, 0.1, "logit")
        with pytest.raises(BoundaryEstimateError):
            transform_delta(1.0, 0.1, "logit")
        with pytest.raises(BoundaryEstimateError):
            transform_delta(0.0, 0.1, "log")

    def test_backtransformed_interval_contains_estimate(self):
        mu, v = 0.3, 0.004
        lam, v_lam = transform_delta(mu, v, "logit")
        lo, hi = lam - 1.645 * np.sqrt(v_lam), lam + 1.645 * np.sqrt(v_lam)
        from scipy.special import expit
        assert expit(lo) < mu < expit(hi)


class TestGfr:
    def test_worked_example(self):
        assert gfr([10, 20], [1200, 2400]) == pytest.approx(100.0, abs=1e-12)

    def test_zero_births(self):
        assert gfr([0, 0], [100, 100]) == 0.0

    def test_single_age_group(self):
        assert gfr([1], [12]) == pytest.approx(1000.0, abs=1e-12)

    def test_zero_exposure_rejected(self):
        with pytest.raises(ValueError):
            gfr([1], [0])


class TestDirectEstimate:
    def test_full_cell(self):
        data = make_dataset(
            [1, 1, 2, 1], [0, 1, 1, 0], cluster=["c1", "c1", "c2", "c2"]
        )
        est = direct_estimate(data, "a1", link="logit")
        assert est.estimate == pytest.approx(3 / 5)
        assert est.usable
        assert est.ess == pytest.approx(25 / 7)

    def test_boundary_cell_flagged(self):
        data = make_dataset([1, 1], [1, 1], cluster=["c1", "c2"])
        est = direct_estimate(data, "a1", link="logit")
        assert est.boundary and not est.usable
