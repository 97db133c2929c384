"""Design-based direct estimation: Hajek ratios, linearized variances, GFR.

Estimates are survey-weighted ratios within (area, group) cells.  Variances
use the stratified with-replacement PSU linearization: unit residuals of the
ratio estimator are summed to cluster totals and the between-cluster variance
is accumulated within strata.  Strata left with a single sampled cluster are
collapsed with the adjacent stratum in sorted order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .errors import BoundaryEstimateError, EstimationError, StructuralError
from .links import get_link

GEO_LEVELS = ("fine", "coarse")


@dataclass(frozen=True)
class SurveyDataset:
    """Survey records as parallel arrays plus the geo-indexing level."""

    unit_id: np.ndarray
    cluster: np.ndarray
    stratum: np.ndarray
    area: np.ndarray
    group: np.ndarray
    weight: np.ndarray
    outcome: np.ndarray
    exposure: np.ndarray
    geo_level: str = "fine"

    def __post_init__(self):
        n = len(self.unit_id)
        for name in ("cluster", "stratum", "area", "group", "weight", "outcome", "exposure"):
            if len(getattr(self, name)) != n:
                raise StructuralError(f"column {name} has wrong length")
        if self.geo_level not in GEO_LEVELS:
            raise StructuralError(f"geo_level must be one of {GEO_LEVELS}")
        if not np.all(np.isfinite(self.weight)) or np.any(self.weight < 0):
            raise StructuralError("weights must be finite and non-negative")
        if not np.all(np.isfinite(self.exposure)) or np.any(self.exposure <= 0):
            raise StructuralError("exposures must be positive")

    def __len__(self):
        return len(self.unit_id)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, geo_level="fine"):
        cols = ["unit_id", "cluster_id", "stratum_id", "area_id", "group",
                "weight", "outcome", "exposure"]
        missing = [c for c in cols if c not in df.columns]
        if missing:
            raise StructuralError(f"survey data missing columns {missing}")
        return cls(
            unit_id=df["unit_id"].to_numpy(),
            cluster=df["cluster_id"].astype(str).to_numpy(),
            stratum=df["stratum_id"].astype(str).to_numpy(),
            area=df["area_id"].astype(str).to_numpy(),
            group=df["group"].astype(str).to_numpy(),
            weight=df["weight"].to_numpy(dtype=float),
            outcome=df["outcome"].to_numpy(dtype=float),
            exposure=df["exposure"].to_numpy(dtype=float),
            geo_level=geo_level,
        )

    @classmethod
    def from_csv(cls, path, geo_level="fine"):
        return cls.from_frame(pd.read_csv(path), geo_level=geo_level)

    def validate_areas(self, hierarchy):
        """Check every record's area id against the hierarchy at this level."""
        known = set(
            hierarchy.subareas if self.geo_level == "fine" else hierarchy.coarse_areas
        )
        unknown = sorted(set(self.area) - known)
        if unknown:
            raise StructuralError(
                f"survey rows reference unknown {self.geo_level} areas: {unknown[:5]}"
            )

    def cell_mask(self, area, group=None):
        mask = self.area == area
        if group is not None:
            mask &= self.group == group
        return mask


@dataclass(frozen=True)
class DirectEstimate:
    """One cell's Hajek estimate with its delta-method transform."""

    area: str
    estimate: float
    transformed: float
    variance: float
    ess: float
    group: Optional[str] = None
    n: int = 0
    n_clusters: int = 0
    boundary: bool = False
    unreliable: bool = False

    @property
    def usable(self):
        """Whether the cell can enter an FH likelihood."""
        return not (self.boundary or self.unreliable)


@dataclass(frozen=True)
class VarianceEstimate:
    value: float
    unreliable: bool
    n_clusters: int


def _denominator(data, mask, outcome_type):
    if outcome_type == "prevalence":
        return np.ones(int(mask.sum()))
    if outcome_type == "rate":
        return data.exposure[mask]
    raise ValueError(f"unknown outcome_type {outcome_type!r}")


def hajek_estimate(data: SurveyDataset, area, group=None, outcome_type="prevalence"):
    """Weighted ratio estimate for one cell; None when the cell is empty."""
    mask = data.cell_mask(area, group)
    if not mask.any():
        return None
    w = data.weight[mask]
    y = data.outcome[mask]
    t = _denominator(data, mask, outcome_type)
    denom = float(w @ t)
    if denom <= 0:
        raise EstimationError(f"no effective sample in cell ({area!r}, {group!r})")
    return float(w @ y) / denom


def _collapse_strata(strata_sorted, cluster_counts):
    """Group sorted strata so every merged group has >= 2 clusters.

    Singleton-cluster strata are merged forward; a trailing singleton run is
    absorbed into the previous group.
    """
    groups = []
    carry = []
    for s in strata_sorted:
        carry.append(s)
        if sum(cluster_counts[x] for x in carry) >= 2:
            groups.append(tuple(carry))
            carry = []
    if carry:
        if groups:
            groups[-1] = groups[-1] + tuple(carry)
        else:
            groups.append(tuple(carry))
    return groups


def design_variance(data: SurveyDataset, area, group=None, outcome_type="prevalence"):
    """Linearized design variance of the Hajek ratio for one cell.

    Returns a VarianceEstimate; a cell with a single sampled cluster is
    flagged unreliable (value 0) so callers can exclude it from model input.
    """
    mask = data.cell_mask(area, group)
    if not mask.any():
        return None
    w = data.weight[mask]
    y = data.outcome[mask]
    t = _denominator(data, mask, outcome_type)
    denom = float(w @ t)
    if denom <= 0:
        raise EstimationError(f"no effective sample in cell ({area!r}, {group!r})")
    mu = float(w @ y) / denom
    z = w * (y - mu * t) / denom

    clusters = data.cluster[mask]
    strata = data.stratum[mask]
    # cluster residual totals and each cluster's stratum
    totals = {}
    cluster_stratum = {}
    for zk, c, h in zip(z, clusters, strata):
        totals[c] = totals.get(c, 0.0) + zk
        cluster_stratum[c] = h
    by_stratum = {}
    for c, h in cluster_stratum.items():
        by_stratum.setdefault(h, []).append(c)
    n_clusters = len(totals)
    if n_clusters < 2:
        return VarianceEstimate(value=0.0, unreliable=True, n_clusters=n_clusters)

    strata_sorted = sorted(by_stratum)
    counts = {h: len(by_stratum[h]) for h in strata_sorted}
    variance = 0.0
    for merged in _collapse_strata(strata_sorted, counts):
        zc = np.array([totals[c] for h in merged for c in by_stratum[h]])
        nh = len(zc)
        variance += nh / (nh - 1) * float(((zc - zc.mean()) ** 2).sum())
    return VarianceEstimate(value=variance, unreliable=False, n_clusters=n_clusters)


def transform_delta(estimate, variance, link_name):
    """Delta-method transform of an estimate and variance to the link scale."""
    link = get_link(link_name)
    if link_name == "logit" and not 0.0 < estimate < 1.0:
        raise BoundaryEstimateError(
            f"estimate {estimate} on the boundary of the logit domain"
        )
    if link_name == "log" and estimate <= 0.0:
        raise BoundaryEstimateError(f"estimate {estimate} on the boundary of the log domain")
    lam = float(link.g(estimate))
    slope = float(link.dg(estimate))
    return lam, variance * slope * slope


def gfr(births_by_age, exposure_months_by_age):
    """Births per 1,000 woman-years: 1000 * sum(B) / (sum(E months) / 12)."""
    births = np.asarray(births_by_age, dtype=float)
    exposure = np.asarray(exposure_months_by_age, dtype=float)
    if np.any(exposure < 0):
        raise ValueError("exposures must be non-negative")
    total_exposure = exposure.sum()
    if total_exposure <= 0:
        raise ValueError("zero total exposure")
    return 1000.0 * births.sum() / (total_exposure / 12.0)


def direct_estimate(data, area, group=None, link="logit", outcome_type="prevalence"):
    """Hajek estimate, design variance and delta transform for one cell."""
    mask = data.cell_mask(area, group)
    if not mask.any():
        return None
    mu = hajek_estimate(data, area, group, outcome_type)
    var = design_variance(data, area, group, outcome_type)
    w = data.weight[mask]
    sw = float(w.sum())
    ess = sw * sw / float(w @ w) if sw > 0 else 0.0
    boundary = False
    try:
        lam, v_lam = transform_delta(mu, var.value, link)
    except BoundaryEstimateError:
        boundary = True
        lam, v_lam = np.nan, np.nan
    return DirectEstimate(
        area=area,
        group=group,
        estimate=mu,
        transformed=lam,
        variance=v_lam,
        ess=ess,
        n=int(mask.sum()),
        n_clusters=var.n_clusters,
        boundary=boundary,
        unreliable=var.unreliable,
    )


def direct_table(data: SurveyDataset, link="logit", outcome_type="prevalence",
                 by_group=False):
    """Direct estimates for every (area[, group]) cell present in the data."""
    areas = sorted(set(data.area))
    cells = []
    if by_group:
        pairs = sorted(set(zip(data.area, data.group)))
        for area, grp in pairs:
            cells.append((area, grp))
    else:
        cells = [(area, None) for area in areas]
    out = []
    for area, grp in cells:
        est = direct_estimate(data, area, grp, link=link, outcome_type=outcome_type)
        if est is not None:
            out.append(est)
    return out
