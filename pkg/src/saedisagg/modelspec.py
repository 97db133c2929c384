"""Model specification and the latent-to-observation predictor.

A model is a likelihood family, a link, and a latent Gaussian field indexed
at (subarea, group-cell) resolution.  Fine-indexed observations read their
predictor straight off the latent field; coarse-indexed observations see a
population-weighted aggregation of inverse-linked subarea values, which makes
the predictor a nonlinear function of the latent vector.  This module builds
the design matrix, the aggregation map, and the exact predictor together with
its sparse Jacobian; the inference engine linearizes around these.

Latent vector layout (deterministic): intercept, covariate coefficients,
BYM2 unstructured block, BYM2 structured block, one block per group factor,
then optional per-cluster effects.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericError, SpecError
from .geography import AreaHierarchy, PopulationTable, ScaledStructure
from .links import Link, get_link

CELL_SEPARATOR = ":"

#: family name -> (required link or None for any, needs overdispersion phi)
FAMILIES = {
    "gaussian": (None, False),
    "poisson": ("log", False),
    "binomial": ("logit", False),
    "negative-binomial": ("log", True),
    "beta-binomial": ("logit", True),
}

FAMILY_ALIASES = {"gaussian-fixed-variance": "gaussian", "negbin": "negative-binomial",
                  "betabinomial": "beta-binomial"}


def canonical_family(name):
    name = FAMILY_ALIASES.get(name, name)
    if name not in FAMILIES:
        raise SpecError(f"unknown likelihood family {name!r}", rule="family-known")
    return name


@dataclass(frozen=True)
class GroupFactor:
    """One stratification factor entering the predictor as f(a)."""

    name: str
    levels: tuple
    coding: str = "auto"  # auto | fixed | random

    def resolved_coding(self):
        if self.coding == "auto":
            return "fixed" if len(self.levels) <= 6 else "random"
        return self.coding


@dataclass(frozen=True)
class PriorSettings:
    """PC-prior tail probabilities and fixed-effect prior scales."""

    pc_sigma_u: float = 1.0
    pc_sigma_alpha: float = 0.01
    pc_kappa_u: float = 0.5
    pc_kappa_alpha: float = 0.5
    pc_phi_inv_u: float = 1.0
    pc_phi_inv_alpha: float = 0.01
    pc_group_sd_u: float = 1.0
    pc_group_sd_alpha: float = 0.01
    pc_cluster_sd_u: float = 1.0
    pc_cluster_sd_alpha: float = 0.01
    intercept_sd: float = 31.6227766016838
    coefficient_sd: float = 31.6227766016838


@dataclass(frozen=True)
class LatentFieldSpec:
    """Structure of the latent field at (subarea, cell) resolution."""

    covariates: tuple = ()
    bym2: bool = True
    factors: tuple = ()
    cluster_effect: bool = False
    intercept: bool = True


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model: family, link, latent structure, aggregation flag."""

    family: str
    link: str
    latent: LatentFieldSpec = field(default_factory=LatentFieldSpec)
    aggregated: bool = False
    priors: PriorSettings = field(default_factory=PriorSettings)
    hyper_treatment: str = "optimized"  # fixed | optimized | grid
    hyper_fixed: dict = field(default_factory=dict)

    @property
    def needs_phi(self):
        return FAMILIES[canonical_family(self.family)][1]


def validate(spec: ModelSpec) -> ModelSpec:
    """Check cross-field consistency rules; returns the validated spec."""
    family = canonical_family(spec.family)
    link = spec.link
    if link not in ("identity", "log", "logit"):
        raise SpecError(f"unknown link {link!r}", rule="link-known")
    required_link = FAMILIES[family][0]
    if required_link is not None and link != required_link:
        raise SpecError(
            f"family {family!r} requires the {required_link} link, got {link!r}",
            rule="family-link",
        )
    if spec.aggregated and link == "identity" and family != "gaussian":
        raise SpecError(
            "identity link cannot be combined with aggregation for family "
            f"{family!r}: the linearized predictor is unbounded and can leave "
            "the positive mean domain",
            rule="identity-link-aggregation",
        )
    if spec.hyper_treatment not in ("fixed", "optimized", "grid"):
        raise SpecError(
            f"unknown hyperparameter treatment {spec.hyper_treatment!r}",
            rule="hyper-treatment",
        )
    for factor in spec.latent.factors:
        if len(set(factor.levels)) != len(factor.levels):
            raise SpecError(
                f"factor {factor.name!r} has duplicate levels", rule="factor-levels"
            )
        if factor.resolved_coding() not in ("fixed", "random"):
            raise SpecError(
                f"factor {factor.name!r} has unknown coding {factor.coding!r}",
                rule="factor-coding",
            )
    if family == "gaussian" and spec.needs_phi:
        raise SpecError("gaussian family has no overdispersion", rule="family-phi")
    return replace(spec, family=family)


@dataclass(frozen=True)
class LatentLayout:
    """Column blocks of the stacked latent vector."""

    blocks: dict
    dim: int
    n_subareas: int
    factor_coding: dict
    factor_levels: dict
    cluster_ids: tuple = ()

    def slice(self, name):
        return self.blocks[name]

    @property
    def head_dim(self):
        """Columns mapped by the latent-row design matrix (everything but clusters)."""
        if "cluster" in self.blocks:
            return self.blocks["cluster"].start
        return self.dim


def cell_labels(factors):
    """Cartesian product of factor levels, joined with ':' in factor order."""
    if not factors:
        return ("all",), (tuple(),)
    level_sets = [f.levels for f in factors]
    cells = tuple(itertools.product(*level_sets))
    labels = tuple(CELL_SEPARATOR.join(str(v) for v in cell) for cell in cells)
    return labels, cells


@dataclass(frozen=True)
class Design:
    """Design matrix mapping the latent vector to (cell, subarea) predictors."""

    A: sp.csr_matrix
    layout: LatentLayout
    hierarchy: AreaHierarchy
    scaled: ScaledStructure
    cells: tuple           # cell labels, outer index of latent rows
    covariate_stats: dict  # name -> (mean, sd) used for standardization

    @property
    def n_latent_rows(self):
        return self.A.shape[0]

    @property
    def cell_index(self):
        cache = getattr(self, "_cell_index", None)
        if cache is None:
            cache = {c: k for k, c in enumerate(self.cells)}
            object.__setattr__(self, "_cell_index", cache)
        return cache

    def latent_row(self, subarea, cell_label):
        if cell_label not in self.cell_index:
            raise DataError(f"unknown group cell {cell_label!r}")
        c = self.cell_index[cell_label]
        j = self.hierarchy.subarea_index[subarea]
        return c * self.hierarchy.n_subareas + j

    def row_labels(self):
        return tuple(
            (cell, j)
            for cell in self.cells
            for j in self.hierarchy.subareas
        )


def build_design(spec: ModelSpec, hierarchy: AreaHierarchy, covariates,
                 scaled: ScaledStructure = None, cluster_ids=()) -> Design:
    """Assemble the sparse design matrix and latent layout.

    ``covariates`` is a DataFrame indexed by subarea id.  Covariates are
    centered and scaled internally; the standardization constants are kept so
    coefficients can be reported on the original scale.
    """
    spec = validate(spec)
    n_j = hierarchy.n_subareas
    labels, _ = cell_labels(spec.latent.factors)
    n_cells = len(labels)
    n_rows = n_cells * n_j

    if spec.latent.bym2 and scaled is None:
        raise SpecError("BYM2 latent field requires a scaled graph structure",
                        rule="bym2-structure")

    x_std = {}
    stats = {}
    for name in spec.latent.covariates:
        if name not in covariates.columns:
            raise DataError(f"covariate column {name!r} missing from table")
        col = covariates[name]
        unknown = sorted(set(covariates.index) - set(hierarchy.subareas))
        if unknown:
            raise SpecError(
                f"covariates must be indexed at the subarea level; unknown ids "
                f"{unknown[:5]}",
                rule="covariates-subarea-level",
            )
        values = np.empty(n_j)
        for k, j in enumerate(hierarchy.subareas):
            if j not in covariates.index or not np.isfinite(col.get(j, np.nan)):
                raise DataError(f"missing covariate value for subarea {j!r}, column {name!r}")
            values[k] = float(col[j])
        mean, sd = float(values.mean()), float(values.std())
        if sd == 0:
            raise DataError(f"covariate {name!r} is constant across subareas")
        x_std[name] = (values - mean) / sd
        stats[name] = (mean, sd)

    blocks = {}
    offset = 0
    if spec.latent.intercept:
        blocks["intercept"] = slice(offset, offset + 1)
        offset += 1
    if spec.latent.covariates:
        blocks["beta"] = slice(offset, offset + len(spec.latent.covariates))
        offset += len(spec.latent.covariates)
    if spec.latent.bym2:
        blocks["bym2_e"] = slice(offset, offset + n_j)
        offset += n_j
        blocks["bym2_s"] = slice(offset, offset + n_j)
        offset += n_j
    factor_coding = {}
    factor_levels = {}
    for factor in spec.latent.factors:
        coding = factor.resolved_coding()
        factor_coding[factor.name] = coding
        factor_levels[factor.name] = factor.levels
        width = len(factor.levels) - 1 if coding == "fixed" else len(factor.levels)
        blocks[f"factor:{factor.name}"] = slice(offset, offset + width)
        offset += width
    if spec.latent.cluster_effect:
        if not cluster_ids:
            raise SpecError("cluster_effect requires cluster ids", rule="cluster-ids")
        blocks["cluster"] = slice(offset, offset + len(cluster_ids))
        offset += len(cluster_ids)

    layout = LatentLayout(
        blocks=blocks,
        dim=offset,
        n_subareas=n_j,
        factor_coding=factor_coding,
        factor_levels=factor_levels,
        cluster_ids=tuple(cluster_ids),
    )

    rows, cols, vals = [], [], []
    row_idx = np.arange(n_rows)
    j_idx = np.tile(np.arange(n_j), n_cells)
    if spec.latent.intercept:
        rows.append(row_idx)
        cols.append(np.full(n_rows, blocks["intercept"].start))
        vals.append(np.ones(n_rows))
    for k, name in enumerate(spec.latent.covariates):
        rows.append(row_idx)
        cols.append(np.full(n_rows, blocks["beta"].start + k))
        vals.append(np.tile(x_std[name], n_cells))
    if spec.latent.bym2:
        rows.append(row_idx)
        cols.append(blocks["bym2_e"].start + j_idx)
        vals.append(np.ones(n_rows))
        rows.append(row_idx)
        cols.append(blocks["bym2_s"].start + j_idx)
        vals.append(np.ones(n_rows))
    _, cells = cell_labels(spec.latent.factors)
    for f_pos, factor in enumerate(spec.latent.factors):
        coding = factor_coding[factor.name]
        start = blocks[f"factor:{factor.name}"].start
        level_of_cell = np.array(
            [factor.levels.index(cell[f_pos]) for cell in cells]
        )
        level_per_row = np.repeat(level_of_cell, n_j)
        if coding == "fixed":
            mask = level_per_row > 0
            rows.append(row_idx[mask])
            cols.append(start + level_per_row[mask] - 1)
            vals.append(np.ones(mask.sum()))
        else:
            rows.append(row_idx)
            cols.append(start + level_per_row)
            vals.append(np.ones(n_rows))

    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, layout.head_dim),
    )
    return Design(A=A, layout=layout, hierarchy=hierarchy, scaled=scaled,
                  cells=labels, covariate_stats=stats)


@dataclass(frozen=True)
class AggregationMap:
    """Per-observation weights over latent rows, CSR-style.

    Rows with ``direct_row >= 0`` read the latent predictor directly; the
    remaining rows aggregate the listed latent rows with the stored weights,
    which sum to one.
    """

    direct_row: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    n_latent_rows: int

    @classmethod
    def from_rows(cls, rows, n_latent_rows):
        """Build from one entry per observation.

        An entry is either an int (direct latent row) or a list of
        (latent_row, weight) pairs whose weights must sum to one within 1e-12.
        Single-pair entries with unit weight collapse to direct rows, which
        keeps one-child aggregations exactly equal to fine indexing.
        """
        direct = np.full(len(rows), -1, dtype=np.int64)
        indptr = [0]
        indices, weights = [], []
        for r, entry in enumerate(rows):
            if np.isscalar(entry):
                direct[r] = int(entry)
                indptr.append(len(indices))
                continue
            pairs = [(int(i), float(w)) for i, w in entry if w != 0.0]
            total = sum(w for _, w in pairs)
            if abs(total - 1.0) > 1e-12:
                raise SpecError(
                    f"aggregation row {r} weights sum to {total!r}, not 1",
                    rule="aggregation-weights-normalize",
                )
            if any(w < 0 for _, w in pairs):
                raise SpecError(
                    f"aggregation row {r} has negative weights",
                    rule="aggregation-weights-nonnegative",
                )
            if len(pairs) == 1 and pairs[0][1] == 1.0:
                direct[r] = pairs[0][0]
                indptr.append(len(indices))
                continue
            for i, w in pairs:
                indices.append(i)
                weights.append(w)
            indptr.append(len(indices))
        return cls(
            direct_row=direct,
            indptr=np.asarray(indptr, dtype=np.int64),
            indices=np.asarray(indices, dtype=np.int64),
            weights=np.asarray(weights, dtype=float),
            n_latent_rows=int(n_latent_rows),
        )

    def __len__(self):
        return len(self.direct_row)

    @property
    def n_aggregated(self):
        return int((self.direct_row < 0).sum())


def build_aggregation(design: Design, areas, cell_of_obs, population: PopulationTable,
                      geo_level) -> AggregationMap:
    """Aggregation map for observations indexed by (area, cell).

    Fine-indexed observations map directly to their latent row; coarse ones
    aggregate the children of their coarse area with population shares
    N_{j,a} / N_{i,a} for the observation's cell a.
    """
    hier = design.hierarchy
    rows = []
    for area, cell in zip(areas, cell_of_obs):
        if geo_level == "fine":
            rows.append(design.latent_row(area, cell))
            continue
        children = hier.children.get(area)
        if children is None:
            raise DataError(f"unknown coarse area {area!r}")
        counts = np.array([population.count(j, cell) for j in children])
        total = counts.sum()
        if total <= 0:
            raise DataError(
                f"zero population for coarse area {area!r}, cell {cell!r}"
            )
        entry = [
            (design.latent_row(j, cell), float(c / total))
            for j, c in zip(children, counts)
        ]
        rows.append(entry)
    return AggregationMap.from_rows(rows, design.n_latent_rows)


class NonlinearPredictor:
    """Exact observation predictor eta~(u) and its Jacobian.

    Fine rows are linear in u.  Aggregated rows apply
    g(sum_j w_j g^{-1}(eta_j)); the log link uses log-sum-exp over each row's
    entries and the logit link clamps the aggregated mean away from 0 and 1.
    """

    def __init__(self, design: Design, rows: AggregationMap, link,
                 cluster_design=None):
        self.design = design
        self.rows = rows
        self.link = link if isinstance(link, Link) else get_link(link)
        self.cluster_design = cluster_design
        self.n_obs = len(rows)
        full_dim = design.layout.dim
        if cluster_design is not None:
            if cluster_design.shape != (self.n_obs, full_dim - design.layout.head_dim):
                raise SpecError("cluster design has wrong shape", rule="cluster-design")
        self._direct_mask = rows.direct_row >= 0
        self._agg_obs = np.flatnonzero(~self._direct_mask)
        # per-entry observation index for the aggregated rows
        counts = np.diff(rows.indptr)
        self._entry_obs = np.repeat(np.arange(self.n_obs), counts)

    @property
    def is_linear(self):
        return self.rows.n_aggregated == 0 or self.link.name == "identity"

    def _head(self, u):
        return np.asarray(u, dtype=float)[: self.design.layout.head_dim]

    def latent_eta(self, u):
        """Predictor at every (cell, subarea) latent row."""
        return self.design.A @ self._head(u)

    def eval(self, u):
        """eta~(u) for every observation row."""
        eta = self.latent_eta(u)
        out = np.empty(self.n_obs)
        out[self._direct_mask] = eta[self.rows.direct_row[self._direct_mask]]
        if self._agg_obs.size:
            out[self._agg_obs] = self._aggregate(eta)
        if self.cluster_design is not None:
            out = out + self.cluster_design @ np.asarray(u, dtype=float)[
                self.design.layout.head_dim:
            ]
        bad = np.flatnonzero(~np.isfinite(out))
        if bad.size:
            raise NumericError(f"non-finite predictor at observation row {bad[0]}")
        return out

    def _segments(self):
        """Start offsets and widths of each aggregated row's entry block."""
        counts = np.diff(self.rows.indptr)
        widths = counts[counts > 0]
        starts = self.rows.indptr[:-1][counts > 0]
        return starts, widths

    def _aggregate(self, eta):
        rows = self.rows
        eta_e = eta[rows.indices]
        w = rows.weights
        starts, widths = self._segments()
        link = self.link.name
        if link == "identity":
            return np.add.reduceat(w * eta_e, starts)
        if link == "log":
            seg_max = np.maximum.reduceat(eta_e, starts)
            shifted = np.exp(eta_e - np.repeat(seg_max, widths))
            return seg_max + np.log(np.add.reduceat(w * shifted, starts))
        from scipy.special import expit, logit as sp_logit
        mu = expit(eta_e)
        means = np.clip(np.add.reduceat(w * mu, starts), 1e-12, 1.0 - 1e-12)
        return sp_logit(means)

    def _sensitivities(self, eta):
        """d eta~_r / d eta_j for every stored aggregation entry."""
        rows = self.rows
        eta_e = eta[rows.indices]
        w = rows.weights
        starts, widths = self._segments()
        link = self.link.name
        if link == "identity":
            return w.copy()
        if link == "log":
            seg_max = np.maximum.reduceat(eta_e, starts)
            shifted = np.exp(eta_e - np.repeat(seg_max, widths))
            sums = np.add.reduceat(w * shifted, starts)
            return w * shifted / np.repeat(sums, widths)
        from scipy.special import expit
        mu = expit(eta_e)
        means = np.clip(np.add.reduceat(w * mu, starts), 1e-12, 1.0 - 1e-12)
        scale = means * (1.0 - means)
        return w * mu * (1.0 - mu) / np.repeat(scale, widths)

    def sensitivity_matrix(self, u):
        """Sparse (n_obs x n_latent_rows) matrix S with B = S A (head block)."""
        rows = self.rows
        eta = self.latent_eta(u)
        r_idx = [np.flatnonzero(self._direct_mask)]
        c_idx = [rows.direct_row[self._direct_mask]]
        vals = [np.ones(int(self._direct_mask.sum()))]
        if self._agg_obs.size:
            r_idx.append(self._entry_obs)
            c_idx.append(rows.indices)
            vals.append(self._sensitivities(eta))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))),
            shape=(self.n_obs, rows.n_latent_rows),
        )

    def jacobian(self, u):
        """Sparse B = d eta~ / d u at u (n_obs x full latent dim)."""
        B = self.sensitivity_matrix(u) @ self.design.A
        if self.cluster_design is not None:
            B = sp.hstack([B, self.cluster_design], format="csr")
        return sp.csr_matrix(B)

    def linearize(self, u0):
        """First-order expansion: eta~(u) ~= B u + offset at u0."""
        u0 = np.asarray(u0, dtype=float)
        B = self.jacobian(u0)
        offset = self.eval(u0) - B @ u0
        return B, offset


def predictor_eval(predictor: NonlinearPredictor, u):
    """Observation-level predictor vector for the latent vector u."""
    return predictor.eval(u)


def predictor_jacobian(predictor: NonlinearPredictor, u0):
    """Sparse derivative matrix of the predictor at u0."""
    return predictor.jacobian(u0)
