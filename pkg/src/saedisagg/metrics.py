"""Evaluation metrics: within-group R2 and correlation, interval scores, bias.

All metrics compare subarea-level predictions to known truths.  The
"within-group" metrics pool squared errors and deviations within each coarse
area, so they measure how well a method resolves variation inside coarse
areas rather than between them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricUndefinedError

INTERVAL_SCORE_VARIANTS = ("paper", "standard")


@dataclass(frozen=True)
class PearsonResult:
    mean_r: float
    n_groups_used: int
    n_groups_excluded: int


@dataclass(frozen=True)
class BiasResult:
    bias: float
    abs_rel_bias_pct: float
    n_excluded: int


@dataclass(frozen=True)
class IntervalResult:
    score: float
    coverage: float
    mean_width: float


def _group_indices(grouping):
    grouping = np.asarray(grouping)
    groups = {}
    for k, g in enumerate(grouping):
        groups.setdefault(g, []).append(k)
    return {g: np.array(idx) for g, idx in groups.items()}


def within_group_r2(truth, predictions, grouping) -> float:
    """1 - SSE / SST_within, both summed over all coarse-area groups.

    Groups with a single subarea contribute to SSE but have no within-group
    deviation, so they add nothing to SST.
    """
    truth = np.asarray(truth, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if truth.shape != predictions.shape:
        raise ValueError("truth and predictions must align")
    sse = float(((truth - predictions) ** 2).sum())
    sst = 0.0
    for idx in _group_indices(grouping).values():
        if len(idx) >= 2:
            mu = truth[idx]
            sst += float(((mu - mu.mean()) ** 2).sum())
    if sst == 0.0:
        raise MetricUndefinedError("within-group truth variance is zero")
    return 1.0 - sse / sst


def within_group_pearson(truth, predictions, grouping) -> PearsonResult:
    """Mean of per-group Pearson correlations over valid groups.

    Groups need at least two subareas and non-constant truth and prediction
    vectors; others are excluded and counted.
    """
    truth = np.asarray(truth, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    rs = []
    excluded = 0
    for idx in _group_indices(grouping).values():
        if len(idx) < 2:
            excluded += 1
            continue
        t, p = truth[idx], predictions[idx]
        st, sp_ = t.std(), p.std()
        if st == 0.0 or sp_ == 0.0:
            excluded += 1
            continue
        rs.append(float(np.corrcoef(t, p)[0, 1]))
    if not rs:
        raise MetricUndefinedError("no group with computable correlation")
    return PearsonResult(
        mean_r=float(np.mean(rs)), n_groups_used=len(rs), n_groups_excluded=excluded
    )


def interval_metrics(truth, lower, upper, alpha=0.10, variant="paper") -> IntervalResult:
    """Interval score, empirical coverage and mean width.

    The ``paper`` variant penalizes misses with a factor alpha/2; the
    ``standard`` variant uses the 2/alpha penalty of the proper scoring rule
    literature.
    """
    truth = np.asarray(truth, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    if variant not in INTERVAL_SCORE_VARIANTS:
        raise ValueError(f"unknown interval score variant {variant!r}")
    penalty = alpha / 2.0 if variant == "paper" else 2.0 / alpha
    width = upper - lower
    below = truth < lower
    above = truth > upper
    score = width.copy()
    score[below] += penalty * (lower[below] - truth[below])
    score[above] += penalty * (truth[above] - upper[above])
    inside = (~below) & (~above)
    return IntervalResult(
        score=float(score.mean()),
        coverage=float(inside.mean()),
        mean_width=float(width.mean()),
    )


def bias_metrics(truth, predictions) -> BiasResult:
    """Signed bias and mean absolute relative bias (as a percentage).

    Elements with zero truth are excluded from the relative part and counted.
    """
    truth = np.asarray(truth, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    bias = float((predictions - truth).mean())
    nonzero = truth != 0
    n_excluded = int((~nonzero).sum())
    if not nonzero.any():
        raise MetricUndefinedError("all truths are zero; relative bias undefined")
    arb = float(
        (np.abs(predictions[nonzero] - truth[nonzero]) / truth[nonzero]).mean() * 100.0
    )
    return BiasResult(bias=bias, abs_rel_bias_pct=arb, n_excluded=n_excluded)


def evaluate_predictions(truth, predictions, lower, upper, grouping,
                         alpha=0.10, variant="paper") -> dict:
    """All metrics for one method on one replicate, as a flat dict."""
    pearson = within_group_pearson(truth, predictions, grouping)
    interval = interval_metrics(truth, lower, upper, alpha=alpha, variant=variant)
    bias = bias_metrics(truth, predictions)
    return {
        "r2": within_group_r2(truth, predictions, grouping),
        "pearson": pearson.mean_r,
        "interval_score": interval.score,
        "bias": bias.bias,
        "abs_rel_bias": bias.abs_rel_bias_pct,
        "coverage": interval.coverage,
        "width": interval.mean_width,
    }


METRIC_COLUMNS = [
    "r2", "pearson", "interval_score", "bias", "abs_rel_bias", "coverage", "width",
]
