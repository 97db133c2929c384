"""Model validation, design assembly, and the nonlinear predictor."""

import numpy as np
import pandas as pd
import pytest

from saedisagg.errors import SpecError
from saedisagg.geography import build_hierarchy, scaled_structure
from saedisagg.modelspec import (
    AggregationMap,
    GroupFactor,
    LatentFieldSpec,
    ModelSpec,
    NonlinearPredictor,
    build_aggregation,
    build_design,
    predictor_eval,
    predictor_jacobian,
    validate,
)
from saedisagg.geography import PopulationTable


def two_subarea_design(covariate=None, factors=(), bym2=True):
    hier, graph = build_hierarchy(
        [("s1", "c1"), ("s2", "c1")], [("s1", "s2")]
    )
    scaled = scaled_structure(graph)
    cov = pd.DataFrame(index=["s1", "s2"])
    names = ()
    if covariate is not None:
        cov["x"] = covariate
        names = ("x",)
    spec = ModelSpec(
        family="poisson",
        link="log",
        latent=LatentFieldSpec(covariates=names, bym2=bym2, factors=tuple(factors)),
        aggregated=True,
    )
    design = build_design(spec, hier, cov, scaled)
    return spec, hier, design


def fd_jacobian(pred, u0, h=1e-6):
    """Central finite differences of the exact predictor."""
    u0 = np.asarray(u0, dtype=float)
    cols = []
    for k in range(len(u0)):
        up, dn = u0.copy(), u0.copy()
        up[k] += h
        dn[k] -= h
        cols.append((pred.eval(up) - pred.eval(dn)) / (2 * h))
    return np.column_stack(cols)


class TestValidate:
    def test_poisson_log_aggregation_accepted(self):
        spec = ModelSpec(family="poisson", link="log", aggregated=True)
        assert validate(spec).family == "poisson"

    def test_poisson_identity_aggregation_rejected(self):
        spec = ModelSpec(family="poisson", link="identity", aggregated=True)
        with pytest.raises(SpecError) as err:
            validate(spec)
        assert err.value.rule in ("identity-link-aggregation", "family-link")

    def test_gaussian_identity_aggregation_allowed(self):
        spec = ModelSpec(family="gaussian-fixed-variance", link="identity",
                         aggregated=True)
        assert validate(spec).family == "gaussian"

    def test_non_normalized_weights_rejected(self):
        with pytest.raises(SpecError) as err:
            AggregationMap.from_rows([[(0, 0.6), (1, 0.6)]], n_latent_rows=2)
        assert err.value.rule == "aggregation-weights-normalize"

    def test_binomial_requires_logit(self):
        with pytest.raises(SpecError):
            validate(ModelSpec(family="binomial", link="log"))


class TestBuildDesign:
    def test_single_subarea_intercept_only(self):
        hier, _ = build_hierarchy([("s1", "c1")], [])
        spec = ModelSpec(
            family="poisson", link="log",
            latent=LatentFieldSpec(bym2=False),
        )
        design = build_design(spec, hier, pd.DataFrame(index=["s1"]))
        np.testing.assert_array_equal(design.A.toarray(), [[1.0]])

    def test_two_subareas_with_covariate(self):
        _, _, design = two_subarea_design(covariate=[1.0, 3.0])
        dense = design.A.toarray()
        # standardized covariate is (-1, +1)
        np.testing.assert_allclose(dense[:, 0], [1, 1])
        np.testing.assert_allclose(dense[:, 1], [-1, 1])
        # BYM2 blocks: unstructured then structured indicators
        np.testing.assert_allclose(dense[:, 2:4], np.eye(2))
        np.testing.assert_allclose(dense[:, 4:6], np.eye(2))

    def test_fixed_factor_contrasts_match_sum_coded_oracle(self):
        factor = GroupFactor(name="age", levels=("a", "b", "c"))
        _, hier, design = two_subarea_design(factors=[factor], bym2=False)
        block = design.layout.slice("factor:age")
        assert block.stop - block.start == 2
        # treatment coding with intercept spans the same predictor space as
        # sum coding with intercept: compare fitted values of a least-squares
        # fit on an arbitrary target
        labels = np.repeat([0, 1, 2], 2)
        X_treat = np.column_stack(
            [np.ones(6)] + [(labels == k).astype(float) for k in (1, 2)]
        )
        sum_code = np.zeros((6, 2))
        sum_code[labels == 1, 0] = 1
        sum_code[labels == 2, 1] = 1
        sum_code[labels == 0] = -1
        X_sum = np.column_stack([np.ones(6), sum_code])
        y = np.array([0.3, 0.3, 1.2, 1.2, -0.5, -0.5])
        fit_t = X_treat @ np.linalg.lstsq(X_treat, y, rcond=None)[0]
        fit_s = X_sum @ np.linalg.lstsq(X_sum, y, rcond=None)[0]
        np.testing.assert_allclose(fit_t, fit_s, atol=1e-10)
        # the design's factor block is the treatment-coded indicator block;
        # rows are cell-major: cells (a, b, c) each over 2 subareas
        dense = design.A.toarray()
        icol = design.layout.slice("intercept").start
        np.testing.assert_allclose(dense[:, icol], 1.0)
        expect = np.zeros((6, 2))
        expect[2:4, 0] = 1
        expect[4:6, 1] = 1
        np.testing.assert_allclose(dense[:, block], expect)

    def test_missing_covariate_value(self):
        hier, graph = build_hierarchy([("s1", "c1"), ("s2", "c1")], [("s1", "s2")])
        cov = pd.DataFrame({"x": [1.0]}, index=["s1"])
        spec = ModelSpec(family="poisson", link="log",
                         latent=LatentFieldSpec(covariates=("x",)))
        from saedisagg.errors import DataError
        with pytest.raises(DataError, match="s2"):
            build_design(spec, hier, cov, scaled_structure(graph))


class TestPredictorEval:
    def make_predictor(self, link="log"):
        spec, hier, design = two_subarea_design(bym2=True)
        pop = PopulationTable.from_records([("s1", "all", 50), ("s2", "all", 50)])
        rows = build_aggregation(design, ["c1"], ["all"], pop, "coarse")
        return design, NonlinearPredictor(design, rows, link)

    def test_equal_latent_values_fixed_point(self):
        design, pred = self.make_predictor("log")
        # intercept-only u: both subareas share predictor c
        u = np.zeros(design.layout.dim)
        u[0] = 0.7
        assert predictor_eval(pred, u)[0] == pytest.approx(0.7, abs=1e-12)

    def test_log_link_weighted_mixture(self):
        design, pred = self.make_predictor("log")
        u = np.zeros(design.layout.dim)
        # set bym2_e so subarea predictors are (0, log 3)
        e = design.layout.slice("bym2_e")
        u[e.start + 1] = np.log(3.0)
        assert predictor_eval(pred, u)[0] == pytest.approx(np.log(2.0), abs=1e-12)

    def test_degenerate_weight_is_exact(self):
        spec, hier, design = two_subarea_design(bym2=True)
        pop = PopulationTable.from_records([("s1", "all", 80), ("s2", "all", 0)])
        rows = build_aggregation(design, ["c1"], ["all"], pop, "coarse")
        pred = NonlinearPredictor(design, rows, "logit")
        u = np.zeros(design.layout.dim)
        u[0] = 1.234567891
        assert predictor_eval(pred, u)[0] == 1.234567891

    def test_linear_case_is_matrix_product(self):
        spec, hier, design = two_subarea_design(bym2=True)
        rows = build_aggregation(design, ["s1", "s2"], ["all", "all"], None, "fine")
        pred = NonlinearPredictor(design, rows, "log")
        assert pred.is_linear
        rng = np.random.default_rng(3)
        u = rng.normal(size=design.layout.dim)
        np.testing.assert_array_equal(pred.eval(u), design.A @ u)

    def test_monotonicity(self):
        for link in ("log", "logit"):
            design, pred = self.make_predictor(link)
            u = np.zeros(design.layout.dim)
            base = pred.eval(u)[0]
            e = design.layout.slice("bym2_e")
            u[e.start] = 0.4
            assert pred.eval(u)[0] > base


class TestPredictorJacobian:
    def test_fine_row_equals_design_row(self):
        spec, hier, design = two_subarea_design(bym2=True)
        rows = build_aggregation(design, ["s2"], ["all"], None, "fine")
        pred = NonlinearPredictor(design, rows, "log")
        B = predictor_jacobian(pred, np.zeros(design.layout.dim))
        np.testing.assert_array_equal(B.toarray()[0], design.A.toarray()[1])

    def test_log_link_sensitivities(self):
        spec, hier, design = two_subarea_design(bym2=True)
        pop = PopulationTable.from_records([("s1", "all", 50), ("s2", "all", 50)])
        rows = build_aggregation(design, ["c1"], ["all"], pop, "coarse")
        pred = NonlinearPredictor(design, rows, "log")
        u = np.zeros(design.layout.dim)
        e = design.layout.slice("bym2_e")
        u[e.start + 1] = np.log(3.0)
        S = pred.sensitivity_matrix(u).toarray()
        np.testing.assert_allclose(S[0], [0.25, 0.75], atol=1e-12)

    def test_sensitivities_sum_to_one_log_link(self):
        spec, hier, design = two_subarea_design(bym2=True)
        pop = PopulationTable.from_records([("s1", "all", 30), ("s2", "all", 70)])
        rows = build_aggregation(design, ["c1"], ["all"], pop, "coarse")
        pred = NonlinearPredictor(design, rows, "log")
        rng = np.random.default_rng(11)
        for _ in range(5):
            u = rng.normal(size=design.layout.dim)
            S = pred.sensitivity_matrix(u).toarray()
            assert S.min() >= 0
            assert S[0].sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("link", ["log", "logit"])
    def test_matches_finite_differences(self, link):
        spec, hier, design = two_subarea_design(covariate=[0.5, 2.0])
        # mixed coarse (aggregated) and fine rows
        rows = AggregationMap.from_rows(
            [[(0, 0.35), (1, 0.65)], 0], design.n_latent_rows
        )
        pred = NonlinearPredictor(design, rows, link)
        rng = np.random.default_rng(5)
        for _ in range(5):
            u = rng.normal(scale=0.8, size=design.layout.dim)
            B = pred.jacobian(u).toarray()
            B_fd = fd_jacobian(pred, u)
            scale = max(1.0, np.abs(B).max())
            assert np.abs(B - B_fd).max() / scale < 1e-6
