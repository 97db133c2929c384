"""Synthetic-population simulation study for the disaggregation models.

The pipeline mirrors a DHS-style design: a two-level lattice geography, a
synthetic population of women expanded from subarea x age x urbanicity x
education cells, enumeration areas allocated proportional to female
population within coarse-area x urbanicity strata, systematic PPS cluster
sampling followed by simple random sampling of women, and Poisson birth
outcomes over a fixed exposure window.  Four scenarios add, in turn,
observed covariates, unobserved spatially-smooth covariates, unstructured
subarea effects, and stratum-specific coefficients.

All randomness flows through purpose-keyed substreams of one master seed, so
scenarios that share structure consume identical draws and replicates can run
in parallel without changing results.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit, logit as sp_logit

from .direct import SurveyDataset, direct_table, gfr
from .errors import ConvergenceError, DataError, NumericError
from .geography import (
    AdjacencyGraph,
    AreaHierarchy,
    PopulationTable,
    ScaledStructure,
    build_hierarchy,
    scaled_structure,
)
from .inference import FitProblem, fit
from .metrics import evaluate_predictions
from .modelspec import (
    GroupFactor,
    LatentFieldSpec,
    ModelSpec,
    NonlinearPredictor,
    build_aggregation,
    build_design,
)
from .rng import substream

AGE_LABELS = ("15-19", "20-24", "25-29", "30-34", "35-39", "40-44")
EDUC_LABELS = ("sec0", "sec1")
URB_LABELS = ("rural", "urban")
OBSERVED_COVARIATES = ("ntl", "health", "hh")
UNOBSERVED_COVARIATES = ("ndvi", "mobile")
MODEL_NAMES = (
    "direct", "fh", "fh_disagg", "fh_mrp_disagg", "unit_disagg", "unit_mrp_disagg",
)


@dataclass(frozen=True)
class StratumParams:
    """Scenario-4 stratum-specific mean structure."""

    alpha: float
    beta: dict
    delta_educ: float
    delta_age: tuple


@dataclass(frozen=True)
class ScenarioConfig:
    """Outcome-generation parameters; defaults follow the simulation design."""

    scenario: int = 1
    alpha_urban: float = -2.1
    alpha_rural: float = -1.8
    beta: dict = field(default_factory=lambda: {"ntl": -0.08, "health": 0.08, "hh": 0.08})
    beta_unobs: dict = field(default_factory=lambda: {"ndvi": 0.08, "mobile": -0.08})
    delta_educ: float = -0.6
    delta_age: tuple = (-0.3, 0.6, 0.5, 0.3, -0.2, -0.9)
    sd_individual: float = 0.05
    sd_cluster: float = 0.05
    sd_area: float = 0.12
    exposure_months: float = 48.0
    urban_params: StratumParams = field(default_factory=lambda: StratumParams(
        alpha=-2.10,
        beta={"ntl": -0.10, "health": 0.10, "hh": 0.06, "ndvi": 0.06, "mobile": -0.06},
        delta_educ=-0.5,
        delta_age=(-0.4, 0.5, 0.5, 0.3, -0.1, -0.8),
    ))
    rural_params: StratumParams = field(default_factory=lambda: StratumParams(
        alpha=-1.80,
        beta={"ntl": -0.06, "health": 0.06, "hh": 0.10, "ndvi": 0.10, "mobile": -0.10},
        delta_educ=-0.7,
        delta_age=(-0.2, 0.6, 0.4, 0.3, -0.2, -0.9),
    ))

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4):
            raise ValueError(f"unknown scenario {self.scenario}")

    def effective_beta_unobs(self):
        if self.scenario >= 2:
            return dict(self.beta_unobs)
        return {k: 0.0 for k in self.beta_unobs}

    def effective_sd_area(self):
        return self.sd_area if self.scenario >= 3 else 0.0


@dataclass(frozen=True)
class SimGeography:
    hierarchy: AreaHierarchy
    graph: AdjacencyGraph
    scaled: ScaledStructure
    coords: np.ndarray  # (n_subareas, 2) lattice centers


def _near_square(n):
    r = int(np.floor(np.sqrt(n)))
    while n % r:
        r -= 1
    return r, n // r


def generate_geography(n_coarse, children_per_coarse, layout="nested",
                       seed=None) -> SimGeography:
    """Deterministic lattice geography with one of two parent layouts.

    "grid" assigns consecutive row-major cells to each coarse area; "nested"
    tiles the lattice with rectangular coarse blocks so coarse areas are
    spatially contiguous.  A seed adds reproducible jitter to the stored
    centroids (display only; adjacency is unaffected).
    """
    if n_coarse < 1 or children_per_coarse < 1:
        raise ValueError("counts must be positive")
    n = n_coarse * children_per_coarse
    if layout == "grid":
        rows, cols = _near_square(n)
        parent_of = lambda r, c: (r * cols + c) // children_per_coarse
    elif layout == "nested":
        cr, cc = _near_square(n_coarse)
        br, bc = _near_square(children_per_coarse)
        rows, cols = cr * br, cc * bc
        parent_of = lambda r, c: (r // br) * cc + (c // bc)
    else:
        raise ValueError(f"unknown layout {layout!r}")

    width = max(3, len(str(n - 1)))
    cwidth = max(2, len(str(n_coarse - 1)))
    sub_records = []
    coords = np.zeros((n, 2))
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            sub_records.append((f"s{k:0{width}d}", f"c{parent_of(r, c):0{cwidth}d}"))
            coords[k] = (r + 0.5, c + 0.5)
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((f"s{k:0{width}d}", f"s{k + 1:0{width}d}"))
            if r + 1 < rows:
                edges.append((f"s{k:0{width}d}", f"s{k + cols:0{width}d}"))
    hierarchy, graph = build_hierarchy(sub_records, edges)
    if seed is not None:
        coords = coords + substream(seed, "geo-jitter").uniform(-0.2, 0.2, coords.shape)
    return SimGeography(
        hierarchy=hierarchy, graph=graph, scaled=scaled_structure(graph),
        coords=coords,
    )


def spatial_fields(geo: SimGeography, names, seed, decay=2.5, purpose="covariates"):
    """Standardized Gaussian fields with lattice-distance correlation decay."""
    n = geo.hierarchy.n_subareas
    d = np.linalg.norm(geo.coords[:, None, :] - geo.coords[None, :, :], axis=2)
    cov = np.exp(-d / decay) + 1e-8 * np.eye(n)
    chol = np.linalg.cholesky(cov)
    rng = substream(seed, purpose)
    out = {}
    for name in names:
        z = chol @ rng.standard_normal(n)
        out[name] = (z - z.mean()) / z.std()
    return pd.DataFrame(out, index=list(geo.hierarchy.subareas))


@dataclass(frozen=True)
class PopulationMarginals:
    """Synthetic census margins per subarea."""

    women: np.ndarray        # women aged 15-44 per subarea
    urban_share: np.ndarray
    educ_share: np.ndarray
    age_props: tuple = (0.22, 0.19, 0.17, 0.16, 0.14, 0.12)


def default_marginals(geo: SimGeography, seed, women_per_subarea=500):
    """Margins driven by smooth spatial fields, like census-derived inputs."""
    fields = spatial_fields(geo, ("pop", "urb", "edu"), seed, decay=3.0)
    rng = substream(seed, "marginal-noise")
    n = geo.hierarchy.n_subareas
    women = np.round(
        women_per_subarea * np.exp(0.25 * fields["pop"].to_numpy()
                                   + 0.05 * rng.standard_normal(n))
    ).astype(int)
    women = np.maximum(women, 50)
    urban = expit(1.2 * fields["urb"].to_numpy() + sp_logit(0.35))
    educ = expit(0.8 * fields["edu"].to_numpy() + sp_logit(0.45))
    return PopulationMarginals(women=women, urban_share=urban, educ_share=educ)


@dataclass
class MasterFrame:
    """Full synthetic population with cluster membership and true rates."""

    geo: SimGeography
    covariates: pd.DataFrame        # subarea x (observed + unobserved + educ_share)
    subarea: np.ndarray             # per woman, subarea position
    urban: np.ndarray               # per woman, bool
    age: np.ndarray                 # per woman, 0..5
    educ: np.ndarray                # per woman, bool
    cluster: np.ndarray             # per woman, cluster position
    exposure_months: np.ndarray     # per woman
    log_rate: np.ndarray            # per woman, log births per woman-year
    cluster_stratum: np.ndarray     # per cluster, stratum label
    cluster_subarea: np.ndarray     # per cluster, subarea position
    cluster_urban: np.ndarray       # per cluster, bool
    strata: tuple                   # stratum labels in deterministic order

    @property
    def n_women(self):
        return len(self.subarea)

    @property
    def n_clusters(self):
        return len(self.cluster_stratum)

    def cluster_sizes(self):
        return np.bincount(self.cluster, minlength=self.n_clusters)

    def population_table(self, factors) -> PopulationTable:
        """Women counts per (subarea, cell) for the given factor names."""
        labels = self.cell_labels(factors)
        counts = {}
        subs = self.geo.hierarchy.subareas
        uniq, inverse = np.unique(labels, return_inverse=True)
        for j in range(len(subs)):
            mask = self.subarea == j
            per = np.bincount(inverse[mask], minlength=len(uniq))
            for lab, cnt in zip(uniq, per):
                counts[(subs[j], lab)] = float(cnt)
        groups = sorted(set(uniq))
        return PopulationTable(counts=counts, groups=tuple(groups))

    def cell_labels(self, factors):
        """Per-woman cell label joining the requested factor levels."""
        parts = []
        for name in factors:
            if name == "age":
                parts.append(np.array(AGE_LABELS)[self.age])
            elif name == "educ":
                parts.append(np.where(self.educ, EDUC_LABELS[1], EDUC_LABELS[0]))
            elif name == "urb":
                parts.append(np.where(self.urban, URB_LABELS[1], URB_LABELS[0]))
            else:
                raise ValueError(f"unknown factor {name!r}")
        if not parts:
            return np.full(self.n_women, "all")
        out = parts[0]
        for p in parts[1:]:
            out = np.char.add(np.char.add(out, ":"), p)
        return out


def _largest_remainder(total, shares):
    """Integer allocation of `total` proportional to non-negative shares."""
    shares = np.asarray(shares, dtype=float)
    if shares.sum() <= 0:
        raise ValueError("shares must not all be zero")
    quota = total * shares / shares.sum()
    counts = np.floor(quota).astype(int)
    rem = total - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def generate_population(geo: SimGeography, marginals: PopulationMarginals,
                        config: ScenarioConfig, seed, ea_target_size=120,
                        covariates: pd.DataFrame = None) -> MasterFrame:
    """Expand margins into a synthetic population with EAs and true rates.

    Enumeration areas are allocated to subarea x urbanicity cells proportional
    to female population within each stratum, their relative sizes drawn
    lognormal (sd 0.2 on the log scale), and women partitioned proportionally.
    Every woman gets the configured exposure window.
    """
    hier = geo.hierarchy
    n_j = hier.n_subareas
    if covariates is None:
        covariates = spatial_fields(
            geo, OBSERVED_COVARIATES + UNOBSERVED_COVARIATES, seed
        )
        covariates["educ_share"] = marginals.educ_share
    rng_pop = substream(seed, "population")
    rng_ea = substream(seed, "ea-sizes")

    # per-subarea urban/rural cell counts
    women = marginals.women
    urban_n = np.round(women * marginals.urban_share).astype(int)
    rural_n = women - urban_n

    sub_idx, urb_flag = [], []
    for j in range(n_j):
        sub_idx += [j] * rural_n[j] + [j] * urban_n[j]
        urb_flag += [False] * rural_n[j] + [True] * urban_n[j]
    subarea = np.array(sub_idx, dtype=np.int64)
    urban = np.array(urb_flag, dtype=bool)
    n_women = len(subarea)

    age = rng_pop.choice(len(AGE_LABELS), size=n_women, p=marginals.age_props)
    educ = rng_pop.random(n_women) < marginals.educ_share[subarea]

    # strata are coarse area x urbanicity; EAs are nested in subarea x urbanicity
    coarse_of = np.array(
        [hier.coarse_index[hier.parent[s]] for s in hier.subareas], dtype=np.int64
    )
    strata_labels = []
    cluster_of_woman = np.full(n_women, -1, dtype=np.int64)
    cluster_stratum, cluster_subarea, cluster_urban = [], [], []
    next_cluster = 0
    for ci, coarse in enumerate(hier.coarse_areas):
        for urb_value, urb_name in ((False, "rural"), (True, "urban")):
            members = np.flatnonzero((coarse_of[subarea] == ci) & (urban == urb_value))
            if members.size == 0:
                continue
            label = f"{coarse}:{urb_name}"
            strata_labels.append(label)
            n_ea = max(2, int(round(members.size / ea_target_size)))
            # allocate EA counts to subarea cells by population share
            cells, cell_counts = np.unique(subarea[members], return_counts=True)
            ea_per_cell = _largest_remainder(n_ea, cell_counts)
            ea_per_cell = np.maximum(ea_per_cell, 1)
            for cell, n_cell_ea in zip(cells, ea_per_cell):
                cell_members = members[subarea[members] == cell]
                sizes = np.exp(rng_ea.normal(0.0, 0.2, size=n_cell_ea))
                alloc = _largest_remainder(len(cell_members), sizes)
                start = 0
                for a in alloc:
                    ids = cell_members[start:start + a]
                    cluster_of_woman[ids] = next_cluster
                    cluster_stratum.append(label)
                    cluster_subarea.append(int(cell))
                    cluster_urban.append(bool(urb_value))
                    next_cluster += 1
                    start += a

    # random effects: always drawn so scenarios share the same streams
    e_k = substream(seed, "ind-effects").normal(0.0, config.sd_individual, n_women)
    e_c = substream(seed, "cluster-effects").normal(
        0.0, config.sd_cluster, next_cluster
    )
    z_j = substream(seed, "area-effects").standard_normal(n_j)

    log_rate = _scenario_log_rate(
        config, covariates, subarea, urban, age, educ,
        e_k, e_c[cluster_of_woman], z_j,
    )
    return MasterFrame(
        geo=geo,
        covariates=covariates,
        subarea=subarea,
        urban=urban,
        age=age,
        educ=educ,
        cluster=cluster_of_woman,
        exposure_months=np.full(n_women, config.exposure_months),
        log_rate=log_rate,
        cluster_stratum=np.array(cluster_stratum),
        cluster_subarea=np.array(cluster_subarea, dtype=np.int64),
        cluster_urban=np.array(cluster_urban, dtype=bool),
        strata=tuple(strata_labels),
    )


def _scenario_log_rate(config, covariates, subarea, urban, age, educ,
                       e_k, e_c, z_j):
    subs = covariates.index
    x = {name: covariates[name].to_numpy() for name in covariates.columns}
    if config.scenario == 4:
        out = np.empty(len(subarea))
        for params, mask in (
            (config.rural_params, ~urban),
            (config.urban_params, urban),
        ):
            contrib = np.full(mask.sum(), params.alpha)
            contrib += np.asarray(params.delta_age)[age[mask]]
            contrib += params.delta_educ * educ[mask]
            for name, b in params.beta.items():
                contrib += b * x[name][subarea[mask]]
            out[mask] = contrib
    else:
        out = np.where(urban, config.alpha_urban, config.alpha_rural)
        out = out + np.asarray(config.delta_age)[age]
        out = out + config.delta_educ * educ
        for name, b in config.beta.items():
            out = out + b * x[name][subarea]
        for name, b in config.effective_beta_unobs().items():
            out = out + b * x[name][subarea]
    out = out + e_k + e_c
    out = out + config.effective_sd_area() * z_j[subarea]
    return out


def simulate_outcomes(frame: MasterFrame, seed, rep=0):
    """Poisson births for every woman plus the per-subarea true rates.

    Returns (births, truth) where truth is births per woman-year computed on
    the complete population frame.
    """
    rng = substream(seed, "outcomes", rep)
    mean = (frame.exposure_months / 12.0) * np.exp(frame.log_rate)
    births = rng.poisson(mean)
    n_j = frame.geo.hierarchy.n_subareas
    truth = np.empty(n_j)
    for j in range(n_j):
        mask = frame.subarea == j
        truth[j] = gfr(
            [births[mask].sum()], [frame.exposure_months[mask].sum()]
        ) / 1000.0
    return births, truth


@dataclass
class SampleDraw:
    """Two-stage sample with exact inclusion-probability bookkeeping."""

    unit_index: np.ndarray
    weight: np.ndarray
    pi: np.ndarray
    pi1: np.ndarray
    pi2: np.ndarray
    stratum_women: np.ndarray   # N_h. integers per sampled unit
    stratum_draws: np.ndarray   # n_h integers per sampled unit
    cluster_taken: np.ndarray   # m_hc integers per sampled unit
    certainty: np.ndarray       # first-stage certainty selection flag
    sampled_clusters: np.ndarray


def draw_sample(frame: MasterFrame, n_per_stratum, m_per_cluster, seed,
                rep=0) -> SampleDraw:
    """Systematic PPS of clusters within strata, then SRS of women.

    Oversized clusters (first-stage probability at least one) are selected
    with certainty and the remaining draws reallocated.  Clusters smaller
    than the second-stage take are kept whole with weight adjusted.
    """
    rng = substream(seed, "sample", rep)
    sizes = frame.cluster_sizes()
    idx_parts, w_parts = [], []
    pi_parts, pi1_parts, pi2_parts = [], [], []
    nh_dot_parts, nh_parts, m_parts, cert_parts = [], [], [], []
    sampled_clusters = []
    for label in frame.strata:
        clusters = np.flatnonzero(frame.cluster_stratum == label)
        n_h = min(int(n_per_stratum), len(clusters))
        total_women = int(sizes[clusters].sum())

        # certainty selections: clusters whose first-stage probability would
        # reach one, removed iteratively with the draw count reallocated
        pool = list(clusters)
        certain = []
        draws_left = n_h
        while draws_left > 0 and pool:
            pool_total = int(sizes[pool].sum())
            over = [c for c in pool if draws_left * sizes[c] >= pool_total]
            if not over:
                break
            for c in over:
                certain.append(c)
                pool.remove(c)
                draws_left -= 1

        pool_total = int(sizes[pool].sum()) if pool else 0
        selected = []
        if draws_left > 0 and pool:
            perm = rng.permutation(len(pool))
            ordered = [pool[k] for k in perm]
            cum = np.cumsum(sizes[ordered].astype(float))
            step = cum[-1] / draws_left
            start = rng.uniform(0.0, step)
            points = start + step * np.arange(draws_left)
            picks = np.searchsorted(cum, points, side="right")
            selected = [ordered[p] for p in picks]

        for c in certain + selected:
            is_certain = c in certain
            women = np.flatnonzero(frame.cluster == c)
            n_hc = len(women)
            m = min(int(m_per_cluster), n_hc)
            chosen = np.sort(rng.choice(women, size=m, replace=False))
            if is_certain:
                pi1 = 1.0
            else:
                pi1 = draws_left * n_hc / pool_total
            pi2 = m / n_hc
            pi = pi1 * pi2
            sampled_clusters.append(c)
            idx_parts.append(chosen)
            k = len(chosen)
            pi1_parts.append(np.full(k, pi1))
            pi2_parts.append(np.full(k, pi2))
            pi_parts.append(np.full(k, pi))
            w_parts.append(np.full(k, 1.0 / pi))
            nh_dot_parts.append(np.full(k, total_women, dtype=np.int64))
            nh_parts.append(np.full(k, n_h, dtype=np.int64))
            m_parts.append(np.full(k, m, dtype=np.int64))
            cert_parts.append(np.full(k, is_certain, dtype=bool))

    return SampleDraw(
        unit_index=np.concatenate(idx_parts),
        weight=np.concatenate(w_parts),
        pi=np.concatenate(pi_parts),
        pi1=np.concatenate(pi1_parts),
        pi2=np.concatenate(pi2_parts),
        stratum_women=np.concatenate(nh_dot_parts),
        stratum_draws=np.concatenate(nh_parts),
        cluster_taken=np.concatenate(m_parts),
        certainty=np.concatenate(cert_parts),
        sampled_clusters=np.array(sampled_clusters, dtype=np.int64),
    )
