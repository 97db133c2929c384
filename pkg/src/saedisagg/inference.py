"""Approximate Bayesian inference for latent Gaussian field models.

The fitting scheme:

1. Linearize the (possibly nonlinear) observation predictor at a point u0.
2. Find the conditional mode of the latent field for the linearized model by
   Newton iteration with sparse precision algebra; sum-to-zero constraints on
   the structured spatial blocks are enforced by conditioning by kriging.
3. Update u0 to the mode and repeat until the linearization point is
   consistent with the mode (fixed-point iteration, with step halving if a
   two-cycle appears).
4. Treat hyperparameters by maximizing their Laplace-approximate log
   posterior (empirical Bayes), optionally followed by a coarse grid around
   the mode whose normalized weights mix the posterior draws.
5. Sample the latent field from the Gaussian approximation, re-imposing the
   constraints on every draw, and summarize subarea quantities from draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import brentq, minimize
from scipy.sparse.linalg import splu

from . import likelihoods
from .errors import ConvergenceError, DataError, NumericError
from .geography import PopulationTable
from .links import get_link
from .modelspec import Design, ModelSpec, NonlinearPredictor, validate
from .rng import substream

DENSE_LIMIT = 1500
GRAD_TOL = 1e-8
MAX_NEWTON = 100
FP_TOL = 1e-6
MAX_OUTER = 50
MAX_DAMPINGS = 5
RIDGES = (0.0, 1e-8, 1e-6)


# ---------------------------------------------------------------------------
# hyperparameters and their priors


@dataclass(frozen=True)
class HyperParams:
    """Named positive/unit-interval hyperparameters of one model."""

    values: dict

    def __getitem__(self, name):
        return self.values[name]

    def get(self, name, default=None):
        return self.values.get(name, default)

    @property
    def sigma_b(self):
        return self.values.get("sigma_b")

    @property
    def kappa(self):
        return self.values.get("kappa")

    @property
    def phi(self):
        return self.values.get("phi")


def _to_internal(name, value):
    if name == "kappa":
        return float(np.log(value) - np.log1p(-value))
    return float(np.log(value))


def _from_internal(name, z):
    if name == "kappa":
        return float(1.0 / (1.0 + np.exp(-z)))
    return float(np.exp(z))


def _internal_jacobian(name, value):
    """log |d theta / d z| for the bijection used on this coordinate."""
    if name == "kappa":
        return float(np.log(value) + np.log1p(-value))
    return float(np.log(value))


def pc_sd_logpdf(sigma, u, alpha):
    """Exponential PC prior on a standard deviation, Pr(sigma > u) = alpha."""
    lam = -np.log(alpha) / u
    return float(np.log(lam) - lam * sigma)


def pc_overdispersion_logpdf(phi, u, alpha):
    """Exponential PC-style prior on 1/phi with Pr(1/phi > u) = alpha."""
    lam = -np.log(alpha) / u
    return float(np.log(lam) - lam / phi - 2.0 * np.log(phi))


class PCKappaPrior:
    """PC prior for the BYM2 spatial proportion.

    The distance from the base model (no spatial smoothing) is
    d(kappa) = sqrt(2 KLD(kappa)) computed from the eigenvalues of the
    constrained generalized inverse of the scaled structure matrix.  The rate
    is calibrated so that Pr(kappa > u) = alpha.
    """

    def __init__(self, gamma_eigs, u=0.5, alpha=0.5):
        self.gamma = np.asarray(gamma_eigs, dtype=float)
        self.u = float(u)
        self.alpha = float(alpha)
        d_u = self._distance(self.u)
        d_1 = self._distance(1.0 - 1e-9)
        self._d1 = d_1
        # a structure indistinguishable from iid noise (all unit eigenvalues)
        # carries no information about kappa: fall back to a flat prior
        self.degenerate = d_1 <= 0.0
        if self.degenerate:
            self.lam = 0.0
            return
        target = 1.0 - self.alpha
        if d_u / d_1 >= target:
            # the requested tail mass is unattainable for any rate; use the
            # base-distance-uniform limit
            self.lam = 1e-6
        else:
            def h(lam):
                return -np.expm1(-lam * d_u) / -np.expm1(-lam * d_1) - target

            self.lam = brentq(h, 1e-8, 1e4)

    def _distance(self, kappa):
        t = 1.0 - kappa + kappa * self.gamma
        kld = 0.5 * float(np.sum(t - 1.0 - np.log(t)))
        return np.sqrt(max(2.0 * kld, 0.0))

    def _distance_deriv(self, kappa):
        t = 1.0 - kappa + kappa * self.gamma
        kld_prime = 0.5 * float(np.sum((self.gamma - 1.0) * (1.0 - 1.0 / t)))
        d = self._distance(kappa)
        if d <= 0:
            # limit kappa -> 0: d'(0) = sqrt(sum((gamma-1)^2) / 2)
            return float(np.sqrt(np.sum((self.gamma - 1.0) ** 2) / 2.0))
        return kld_prime / d

    def logpdf(self, kappa):
        if not 0.0 < kappa < 1.0:
            return -np.inf
        if self.degenerate:
            return 0.0
        d = self._distance(kappa)
        dp = self._distance_deriv(kappa)
        norm = -np.expm1(-self.lam * self._d1)
        return float(
            np.log(self.lam) - self.lam * d + np.log(max(dp, 1e-300)) - np.log(norm)
        )


# ---------------------------------------------------------------------------
# fit problem and prior model


@dataclass
class FitProblem:
    """A validated spec bound to its design, predictor and observations."""

    spec: ModelSpec
    design: Design
    predictor: NonlinearPredictor
    y: np.ndarray
    aux: dict
    name: str = "model"

    def __post_init__(self):
        self.spec = validate(self.spec)
        self.y = np.asarray(self.y, dtype=float)
        if len(self.y) != self.predictor.n_obs:
            raise DataError("outcome length does not match predictor rows")

    def active_hyper_names(self):
        names = []
        if self.spec.latent.bym2:
            names += ["sigma_b", "kappa"]
        if self.spec.needs_phi:
            names.append("phi")
        for fname, coding in self.design.layout.factor_coding.items():
            if coding == "random":
                names.append(f"sd_{fname}")
        if "cluster" in self.design.layout.blocks:
            names.append("sd_cluster")
        return names

    def default_theta(self):
        theta = {}
        for name in self.active_hyper_names():
            if name == "kappa":
                theta[name] = 0.5
            elif name == "phi":
                theta[name] = 20.0
            else:
                theta[name] = 0.5
        theta.update(self.spec.hyper_fixed)
        return theta


class PriorModel:
    """Latent prior precision as a function of the hyperparameters."""

    def __init__(self, problem: FitProblem):
        self.problem = problem
        layout = problem.design.layout
        self.layout = layout
        priors = problem.spec.priors
        self.priors = priors

        # theta-free diagonal precision entries (0 where theta-dependent)
        diag = np.zeros(layout.dim)
        if "intercept" in layout.blocks:
            diag[layout.blocks["intercept"]] = priors.intercept_sd ** -2
        if "beta" in layout.blocks:
            diag[layout.blocks["beta"]] = priors.coefficient_sd ** -2
        for fname, coding in layout.factor_coding.items():
            if coding == "fixed":
                diag[layout.blocks[f"factor:{fname}"]] = priors.coefficient_sd ** -2
        self.base_diag = diag
        self.const_logdet = float(np.sum(np.log(diag[diag > 0])))

        scaled = problem.design.scaled
        self.scaled = scaled
        if problem.spec.latent.bym2:
            n_j = layout.n_subareas
            s_slice = layout.blocks["bym2_s"]
            singles = scaled.singleton_mask.astype(float)
            self.s_matrix = (scaled.precision + sp.diags(singles)).tocsr()
            eigs = []
            for comp in scaled.components:
                idx = np.array(comp)
                if len(idx) == 1:
                    eigs.append(np.array([1.0]))
                    continue
                block = self.s_matrix[idx][:, idx].toarray()
                vals = np.linalg.eigvalsh(block)
                tol = max(vals.max(), 1.0) * len(idx) * np.finfo(float).eps * 10
                eigs.append(vals[vals > tol])
            self.s_eigs = np.concatenate(eigs)
            self.s_rank = len(self.s_eigs)
            self.s_logdet_const = float(np.sum(np.log(self.s_eigs)))
            self.s_slice = s_slice
            rows, cols, vals = [], [], []
            for k, comp in enumerate(scaled.constraint_components):
                for node in comp:
                    rows.append(k)
                    cols.append(s_slice.start + node)
                    vals.append(1.0)
            k = len(scaled.constraint_components)
            self.constraints = (
                sp.csr_matrix((vals, (rows, cols)), shape=(k, layout.dim))
                if k else None
            )
            self.kappa_prior = PCKappaPrior(
                1.0 / self.s_eigs, u=priors.pc_kappa_u, alpha=priors.pc_kappa_alpha
            )
            coo = self.s_matrix.tocoo()
            self._s_shifted = sp.csr_matrix(
                (coo.data, (coo.row + s_slice.start, coo.col + s_slice.start)),
                shape=(layout.dim, layout.dim),
            )
        else:
            self.s_matrix = None
            self.constraints = None
            self.kappa_prior = None
            self._s_shifted = None

    @property
    def n_constraints(self):
        return 0 if self.constraints is None else self.constraints.shape[0]

    def _theta_diag(self, theta):
        """Diagonal part including theta-dependent blocks (S block excluded)."""
        layout = self.layout
        diag = self.base_diag.copy()
        if self.problem.spec.latent.bym2:
            sigma2 = theta["sigma_b"] ** 2
            kappa = theta["kappa"]
            diag[layout.blocks["bym2_e"]] = 1.0 / (sigma2 * (1.0 - kappa))
        for fname, coding in layout.factor_coding.items():
            if coding == "random":
                diag[layout.blocks[f"factor:{fname}"]] = theta[f"sd_{fname}"] ** -2
        if "cluster" in layout.blocks:
            diag[layout.blocks["cluster"]] = theta["sd_cluster"] ** -2
        return diag

    def precision(self, theta):
        p0 = sp.diags(self._theta_diag(theta), format="csr")
        if self._s_shifted is not None:
            sigma2k = theta["sigma_b"] ** 2 * theta["kappa"]
            p0 = p0 + self._s_shifted / sigma2k
        return p0.tocsr()

    def logdet(self, theta):
        """Pseudo log-determinant of the prior precision."""
        layout = self.layout
        total = self.const_logdet
        if self.problem.spec.latent.bym2:
            sigma2 = theta["sigma_b"] ** 2
            kappa = theta["kappa"]
            n_e = layout.blocks["bym2_e"].stop - layout.blocks["bym2_e"].start
            total += -n_e * np.log(sigma2 * (1.0 - kappa))
            total += self.s_logdet_const - self.s_rank * np.log(sigma2 * kappa)
        for fname, coding in layout.factor_coding.items():
            if coding == "random":
                width = len(layout.factor_levels[fname]) if coding == "random" else 0
                total += -2.0 * width * np.log(theta[f"sd_{fname}"])
        if "cluster" in layout.blocks:
            blk = layout.blocks["cluster"]
            total += -2.0 * (blk.stop - blk.start) * np.log(theta["sd_cluster"])
        return float(total)

    def sqrt_matrix(self, theta):
        """Sparse R with R' R = prior precision, used for large-scale sampling."""
        diag = self._theta_diag(theta)
        parts = [sp.diags(np.sqrt(diag))]
        if self.s_matrix is not None:
            sigma2k = theta["sigma_b"] ** 2 * theta["kappa"]
            coo = sp.triu(self.s_matrix, k=1).tocoo()
            rows, cols, vals = [], [], []
            r = 0
            for a, b, v in zip(coo.row, coo.col, coo.data):
                w = np.sqrt(-v / sigma2k)
                rows += [r, r]
                cols += [self.s_slice.start + a, self.s_slice.start + b]
                vals += [w, -w]
                r += 1
            singles = np.flatnonzero(self.scaled.singleton_mask)
            for node in singles:
                rows.append(r)
                cols.append(self.s_slice.start + node)
                vals.append(np.sqrt(1.0 / sigma2k))
                r += 1
            parts.append(
                sp.csr_matrix((vals, (rows, cols)), shape=(r, self.layout.dim))
            )
        return sp.vstack(parts, format="csr")

    def log_prior_theta(self, theta):
        """Log prior density of the hyperparameters in their natural scale."""
        priors = self.priors
        total = 0.0
        for name, value in theta.items():
            if name == "sigma_b":
                total += pc_sd_logpdf(value, priors.pc_sigma_u, priors.pc_sigma_alpha)
            elif name == "kappa":
                total += self.kappa_prior.logpdf(value)
            elif name == "phi":
                total += pc_overdispersion_logpdf(
                    value, priors.pc_phi_inv_u, priors.pc_phi_inv_alpha
                )
            elif name == "sd_cluster":
                total += pc_sd_logpdf(
                    value, priors.pc_cluster_sd_u, priors.pc_cluster_sd_alpha
                )
            else:
                total += pc_sd_logpdf(
                    value, priors.pc_group_sd_u, priors.pc_group_sd_alpha
                )
        return float(total)


# ---------------------------------------------------------------------------
# factorization helpers


class PrecisionSolver:
    """Cholesky (dense) or LU (sparse) factorization of an SPD precision."""

    def __init__(self, P, dense_limit=DENSE_LIMIT):
        self.n = P.shape[0]
        self.dense = self.n <= dense_limit
        if self.dense:
            self._cho = sla.cho_factor(P.toarray(), lower=True, check_finite=False)
        else:
            self._lu = splu(P.tocsc())
            if not np.all(np.isfinite(self._lu.U.diagonal())):
                raise np.linalg.LinAlgError("sparse factorization failed")

    def solve(self, b):
        if self.dense:
            return sla.cho_solve(self._cho, b, check_finite=False)
        if b.ndim == 1:
            return self._lu.solve(b)
        return np.column_stack([self._lu.solve(b[:, k]) for k in range(b.shape[1])])

    def logdet(self):
        if self.dense:
            return float(2.0 * np.sum(np.log(np.diag(self._cho[0]))))
        return float(np.sum(np.log(np.abs(self._lu.U.diagonal()))))

    def sample_centered(self, rng, n_draws):
        """Draws from N(0, P^{-1}); dense path only."""
        z = rng.standard_normal(size=(self.n, n_draws))
        return sla.solve_triangular(
            self._cho[0].T, z, lower=False, check_finite=False
        )


def _factor_with_ridge(P, warnings_list):
    for ridge in RIDGES:
        try:
            if ridge:
                solver = PrecisionSolver(P + ridge * sp.identity(P.shape[0]))
                warnings_list.append(f"ridge {ridge:g} added to precision")
            else:
                solver = PrecisionSolver(P)
            return solver
        except np.linalg.LinAlgError:
            continue
    raise NumericError("precision matrix not positive definite after ridging")


# ---------------------------------------------------------------------------
# Gaussian approximation of the latent field


@dataclass
class GaussianApprox:
    """Mode and precision of the linearized conditional latent posterior."""

    mode: np.ndarray
    precision: sp.csr_matrix
    solver: PrecisionSolver
    u0: np.ndarray
    B: sp.csr_matrix
    offset: np.ndarray
    curvature: np.ndarray
    constraints: object
    newton_iterations: int = 0
    grad_norm: float = 0.0
    warnings: list = field(default_factory=list)
    prior_sqrt: sp.csr_matrix = None
    outer_iterations: int = 0
    fp_deltas: list = field(default_factory=list)

    def kriging_pieces(self):
        C = self.constraints
        if C is None:
            return None
        V = self.solver.solve(C.toarray().T)
        M = C @ V
        return V, sla.cho_factor(M, lower=True, check_finite=False)

    def correct(self, x):
        """Project x (vector or matrix of columns) onto the constraint set."""
        C = self.constraints
        if C is None:
            return x
        V, m_cho = self._kriging
        cx = C @ x
        return x - V @ sla.cho_solve(m_cho, cx, check_finite=False)

    def __post_init__(self):
        self._kriging = self.kriging_pieces()

    def logdet_constraint(self):
        if self.constraints is None:
            return 0.0
        _, m_cho = self._kriging
        return float(2.0 * np.sum(np.log(np.diag(m_cho[0]))))

    def covariance(self):
        """Dense constrained posterior covariance (small problems only)."""
        n = self.precision.shape[0]
        cov = self.solver.solve(np.eye(n))
        if self.constraints is not None:
            C = self.constraints.toarray()
            V = cov @ C.T
            M = C @ V
            cov = cov - V @ np.linalg.solve(M, V.T)
        return cov


def _project_out_constraints(grad, C, cct_cho):
    if C is None:
        return grad
    return grad - C.T @ sla.cho_solve(cct_cho, C @ grad, check_finite=False)


def latent_mode(problem: FitProblem, theta, u0, prior_model: PriorModel = None,
                max_iter=MAX_NEWTON, tol=GRAD_TOL) -> GaussianApprox:
    """Newton mode of the latent field for the model linearized at u0."""
    prior = prior_model or PriorModel(problem)
    theta = dict(theta.values) if isinstance(theta, HyperParams) else dict(theta)
    u0 = np.asarray(u0, dtype=float)
    B, offset = problem.predictor.linearize(u0)
    P0 = prior.precision(theta)
    C = prior.constraints
    cct_cho = None
    if C is not None:
        cct_cho = sla.cho_factor((C @ C.T).toarray(), lower=True, check_finite=False)

    phi = theta.get("phi")
    family = problem.spec.family
    y, aux = problem.y, problem.aux
    warnings_list = []

    def objective(u):
        eta = B @ u + offset
        ll = likelihoods.loglik(family, y, eta, aux, phi).sum()
        return float(ll - 0.5 * (u @ (P0 @ u)))

    u = u0.copy()
    solver = None
    P = None
    w = None
    n_steps = 0
    grad_norm = np.inf
    for _ in range(max_iter):
        eta = B @ u + offset
        d1, w = likelihoods.derivatives(family, y, eta, aux, phi)
        grad = B.T @ d1 - P0 @ u
        gproj = _project_out_constraints(grad, C, cct_cho)
        grad_norm = float(np.max(np.abs(gproj))) if len(gproj) else 0.0
        P = (P0 + (B.T @ sp.diags(w) @ B)).tocsr()
        solver = _factor_with_ridge(P, warnings_list)
        if grad_norm < tol:
            break
        delta = solver.solve(grad)
        base_obj = objective(u)
        if C is not None:
            V = solver.solve(C.toarray().T)
            m_cho = sla.cho_factor(C @ V, lower=True, check_finite=False)
        step = 1.0
        for _halve in range(12):
            cand = u + step * delta
            if C is not None:
                cand = cand - V @ sla.cho_solve(m_cho, C @ cand, check_finite=False)
            if objective(cand) >= base_obj - 1e-12:
                break
            step *= 0.5
        u = cand
        n_steps += 1
    else:
        raise ConvergenceError(
            f"Newton did not converge in {max_iter} iterations "
            f"(gradient norm {grad_norm:.3g})"
        )

    ga = GaussianApprox(
        mode=u,
        precision=P,
        solver=solver,
        u0=u0,
        B=B,
        offset=offset,
        curvature=np.asarray(w, dtype=float),
        constraints=C,
        newton_iterations=n_steps,
        grad_norm=grad_norm,
        warnings=warnings_list,
    )
    if not solver.dense:
        ga.prior_sqrt = prior.sqrt_matrix(theta)
    return ga


def initial_point(problem: FitProblem):
    """Starting linearization point: zeros, crude intercept, WLS coefficients.

    Random effects start at zero.  The intercept starts at the link-transformed
    crude overall rate.  For Gaussian-family specs (observations are already
    transformed direct estimates) the fixed effects are initialized by a
    weighted least-squares fit against the linearized-at-zero design.
    """
    layout = problem.design.layout
    u0 = np.zeros(layout.dim)
    link = problem.predictor.link
    y, aux = problem.y, problem.aux
    family = problem.spec.family
    if "intercept" not in layout.blocks:
        return u0
    icol = layout.blocks["intercept"].start
    if family == "gaussian":
        v = np.asarray(aux["variance"], dtype=float)
        wt = 1.0 / np.maximum(v, 1e-12)
        u0[icol] = float(np.sum(wt * y) / np.sum(wt))
        n_fixed = 1 + (
            layout.blocks["beta"].stop - layout.blocks["beta"].start
            if "beta" in layout.blocks else 0
        )
        if n_fixed > 1:
            B0 = problem.predictor.jacobian(np.zeros(layout.dim))
            X = B0[:, :n_fixed].toarray()
            xtw = X.T * wt
            coef = np.linalg.solve(xtw @ X + 1e-8 * np.eye(n_fixed), xtw @ y)
            u0[:n_fixed] = coef
        return u0
    denom_key = "exposure" if "exposure" in aux else "trials"
    denom = float(np.sum(aux[denom_key]))
    crude = float(y.sum()) / denom if denom > 0 else 0.5
    if link.name == "logit":
        crude = min(max(crude, 1e-6), 1.0 - 1e-6)
    else:
        crude = max(crude, 1e-10)
    u0[icol] = float(link.g(crude))
    return u0


def fixed_point_iterate(problem: FitProblem, theta, u0=None,
                        prior_model: PriorModel = None, tol=FP_TOL,
                        max_outer=MAX_OUTER) -> GaussianApprox:
    """Alternate linearization and mode finding until the point is stable."""
    prior = prior_model or PriorModel(problem)
    if u0 is None:
        u0 = initial_point(problem)
    u0 = np.asarray(u0, dtype=float)

    if problem.predictor.is_linear:
        ga = latent_mode(problem, theta, u0, prior)
        ga.outer_iterations = 1
        ga.fp_deltas = [0.0]
        return ga

    deltas = []
    prev = None
    dampings = 0
    ga = None
    for outer in range(1, max_outer + 1):
        ga = latent_mode(problem, theta, u0, prior)
        mode = ga.mode
        delta = float(np.max(np.abs(mode - u0)))
        deltas.append(delta)
        if delta < tol:
            ga.outer_iterations = outer
            ga.fp_deltas = deltas
            return ga
        if prev is not None and float(np.max(np.abs(mode - prev))) < 1e-8:
            # period-two cycle: engage step halving
            if dampings >= MAX_DAMPINGS:
                raise ConvergenceError(
                    "fixed-point iteration oscillates after maximum damping"
                )
            dampings += 1
            u0, prev = u0 + 0.5 * (mode - u0), u0
            continue
        prev = u0
        u0 = mode
    raise ConvergenceError(
        f"fixed-point iteration did not converge in {max_outer} outer "
        f"iterations (last delta {deltas[-1]:.3g})"
    )


def log_marginal_laplace(problem: FitProblem, theta, ga: GaussianApprox,
                         prior_model: PriorModel) -> float:
    """Laplace approximation of log p(y | theta) up to a theta-free constant."""
    theta = dict(theta.values) if isinstance(theta, HyperParams) else dict(theta)
    eta = problem.predictor.eval(ga.mode)
    ll = float(
        likelihoods.loglik(
            problem.spec.family, problem.y, eta, problem.aux, theta.get("phi")
        ).sum()
    )
    P0 = prior_model.precision(theta)
    quad = float(ga.mode @ (P0 @ ga.mode))
    value = (
        ll
        - 0.5 * quad
        + 0.5 * prior_model.logdet(theta)
        - 0.5 * ga.solver.logdet()
        - 0.5 * ga.logdet_constraint()
    )
    return value


@dataclass
class HyperOptResult:
    theta: HyperParams
    log_posterior: float
    trace: list
    n_evaluations: int
    converged: bool
    warnings: list


def hyper_optimize(problem: FitProblem, prior_model: PriorModel = None,
                   maxfev=500, xatol=2e-3, fatol=2e-4) -> HyperOptResult:
    """Empirical-Bayes mode of the hyperparameters.

    Maximizes the Laplace log posterior in unconstrained coordinates
    (log sigma, logit kappa, log phi) by derivative-free simplex search.
    Fixed hyperparameters are honoured and never searched over.
    """
    prior = prior_model or PriorModel(problem)
    names = problem.active_hyper_names()
    fixed = dict(problem.spec.hyper_fixed)
    free = [n for n in names if n not in fixed]
    defaults = problem.default_theta()

    if problem.spec.hyper_treatment == "fixed" or not free:
        theta = {n: fixed.get(n, defaults[n]) for n in names}
        ga = fixed_point_iterate(problem, theta, prior_model=prior)
        value = log_marginal_laplace(problem, theta, ga, prior) + (
            prior.log_prior_theta(theta) if names else 0.0
        )
        return HyperOptResult(
            theta=HyperParams(values=theta),
            log_posterior=value,
            trace=[(dict(theta), value)],
            n_evaluations=1,
            converged=True,
            warnings=[],
        )

    trace = []
    state = {"u0": None}

    def assemble(z):
        theta = {n: fixed[n] for n in names if n in fixed}
        for k, n in enumerate(free):
            theta[n] = _from_internal(n, z[k])
        return theta

    def neg_log_posterior(z):
        theta = assemble(z)
        try:
            ga = fixed_point_iterate(
                problem, theta, u0=state["u0"], prior_model=prior
            )
        except (ConvergenceError, NumericError):
            return 1e10
        state["u0"] = ga.mode
        value = log_marginal_laplace(problem, theta, ga, prior)
        value += prior.log_prior_theta(theta)
        value += sum(_internal_jacobian(n, theta[n]) for n in free)
        trace.append((theta, value))
        return -value

    z0 = np.array([_to_internal(n, defaults[n]) for n in free])
    res = minimize(
        neg_log_posterior, z0, method="Nelder-Mead",
        options={"maxfev": maxfev, "xatol": xatol, "fatol": fatol},
    )
    warnings_list = []
    if not res.success:
        warnings_list.append(
            f"hyperparameter search stopped after {res.nfev} evaluations "
            "without meeting tolerances; using best point"
        )
    theta = assemble(res.x)
    return HyperOptResult(
        theta=HyperParams(values={n: theta[n] for n in names}),
        log_posterior=float(-res.fun),
        trace=trace,
        n_evaluations=int(res.nfev),
        converged=bool(res.success),
        warnings=warnings_list,
    )


# ---------------------------------------------------------------------------
# posterior draws and summaries


@dataclass
class PosteriorDraws:
    """Latent draws (n_draws x dim) with the seed that produced them."""

    matrix: np.ndarray
    seed: int
    mixture_weights: np.ndarray = None

    @property
    def n_draws(self):
        return self.matrix.shape[0]


def _draws_from_approx(ga: GaussianApprox, n_draws, rng):
    if ga.solver.dense:
        centered = ga.solver.sample_centered(rng, n_draws)
    else:
        if ga.prior_sqrt is None:
            raise NumericError("sparse sampling requires the prior square root")
        r = ga.prior_sqrt
        z0 = rng.standard_normal(size=(r.shape[0], n_draws))
        z1 = rng.standard_normal(size=(ga.B.shape[0], n_draws))
        rhs = r.T @ z0 + ga.B.T @ (np.sqrt(ga.curvature)[:, None] * z1)
        centered = ga.solver.solve(rhs)
    draws = ga.mode[:, None] + centered
    draws = ga.correct(draws)
    return draws.T


def sample_posterior(ga: GaussianApprox, n_draws, seed) -> PosteriorDraws:
    """Draws from the Gaussian approximation with constraints re-imposed."""
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    rng = substream(seed, "draws", 0)
    return PosteriorDraws(matrix=_draws_from_approx(ga, n_draws, rng), seed=seed)


def sample_posterior_mixture(approximations, log_weights, n_draws, seed):
    """Mixture draws over a hyperparameter grid, allocated by weight."""
    logw = np.asarray(log_weights, dtype=float)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    counts = np.floor(w * n_draws).astype(int)
    remainder = n_draws - counts.sum()
    frac = w * n_draws - counts
    for k in np.argsort(-frac, kind="stable")[:remainder]:
        counts[k] += 1
    blocks = []
    for k, (ga, cnt) in enumerate(zip(approximations, counts)):
        if cnt == 0:
            continue
        rng = substream(seed, "draws", k)
        blocks.append(_draws_from_approx(ga, cnt, rng))
    return PosteriorDraws(
        matrix=np.concatenate(blocks, axis=0), seed=seed, mixture_weights=w
    )


def summarize_draws(values, alpha=0.10):
    """Mean, median, interval quantiles and SD along the draw axis.

    values has shape (n_rows, n_draws); quantiles use the type-7 linear
    interpolation rule.
    """
    lo, hi = alpha / 2.0, 1.0 - alpha / 2.0
    return {
        "mean": values.mean(axis=1),
        "median": np.quantile(values, 0.5, axis=1, method="linear"),
        "q05": np.quantile(values, lo, axis=1, method="linear"),
        "q95": np.quantile(values, hi, axis=1, method="linear"),
        "sd": values.std(axis=1, ddof=1) if values.shape[1] > 1 else np.zeros(values.shape[0]),
    }


def predict_subareas(design: Design, draws: PosteriorDraws, link, alpha=0.10):
    """Per-(subarea, cell) natural-scale draws and summaries.

    Returns (mu_draws, frame): mu_draws has shape (n_cells, n_subareas,
    n_draws); the frame carries one row per latent row.
    """
    link = get_link(link) if isinstance(link, str) else link
    head = design.layout.head_dim
    eta = design.A @ draws.matrix[:, :head].T  # latent rows x n_draws
    mu = link.ginv(eta)
    n_j = design.hierarchy.n_subareas
    n_cells = len(design.cells)
    mu3 = mu.reshape(n_cells, n_j, -1)
    stats = summarize_draws(mu, alpha=alpha)
    frame = pd.DataFrame(
        {
            "subarea_id": np.tile(design.hierarchy.subareas, n_cells),
            "group": np.repeat(design.cells, n_j),
            **{k: v for k, v in stats.items()},
        }
    )
    return mu3, frame


def mrp_aggregate(mu_draws, cells, hierarchy, population: PopulationTable,
                  alpha=0.10):
    """Population-weighted aggregation of per-cell draws to overall subarea draws.

    mu_draws has shape (n_cells, n_subareas, n_draws).  Every (subarea, cell)
    must have a population count; subareas with zero total population are
    excluded and reported.
    """
    n_cells, n_j, n_draws = mu_draws.shape
    weights = np.zeros((n_cells, n_j))
    for c, cell in enumerate(cells):
        for j, sub in enumerate(hierarchy.subareas):
            if (sub, cell) not in population.counts:
                raise DataError(
                    f"missing population for subarea {sub!r}, cell {cell!r}"
                )
            weights[c, j] = population.counts[(sub, cell)]
    totals = weights.sum(axis=0)
    excluded = [
        hierarchy.subareas[j] for j in np.flatnonzero(totals == 0)
    ]
    keep = totals > 0
    shares = np.zeros_like(weights)
    shares[:, keep] = weights[:, keep] / totals[keep]
    overall = np.einsum("cj,cjd->jd", shares, mu_draws)
    stats = summarize_draws(overall[keep], alpha=alpha)
    frame = pd.DataFrame(
        {
            "subarea_id": np.array(hierarchy.subareas)[keep],
            "group": "all",
            **{k: v for k, v in stats.items()},
        }
    )
    return overall, frame, excluded


# ---------------------------------------------------------------------------
# top-level fit


@dataclass
class FitResult:
    """Hyperparameters, Gaussian approximation, draws and summaries."""

    theta: HyperParams
    approx: GaussianApprox
    draws: PosteriorDraws
    cell_frame: pd.DataFrame
    overall_frame: pd.DataFrame
    mu_draws: np.ndarray
    overall_draws: np.ndarray
    diagnostics: dict

    def estimates_frame(self):
        """Combined per-cell and overall rows in the output CSV layout."""
        cols = ["subarea_id", "group", "mean", "median", "q05", "q95", "sd"]
        frames = []
        if len(self.cell_frame) and not self.cell_frame["group"].eq("all").all():
            frames.append(self.cell_frame[cols])
        frames.append(self.overall_frame[cols])
        return pd.concat(frames, ignore_index=True)


def fit(problem: FitProblem, population: PopulationTable = None, seed=0,
        n_draws=1000, alpha=0.10) -> FitResult:
    """Full pipeline: hyperparameters, fixed point, draws, summaries."""
    prior = PriorModel(problem)
    opt = hyper_optimize(problem, prior)
    theta = dict(opt.theta.values)
    ga = fixed_point_iterate(problem, theta, prior_model=prior)

    grid_used = False
    if problem.spec.hyper_treatment == "grid" and problem.spec.latent.bym2:
        grid_used = True
        approximations, log_posts = [], []
        for ds in np.linspace(-2.0, 2.0, 5):
            for dk in np.linspace(-2.0, 2.0, 5):
                point = dict(theta)
                point["sigma_b"] = _from_internal(
                    "sigma_b", _to_internal("sigma_b", theta["sigma_b"]) + ds
                )
                point["kappa"] = _from_internal(
                    "kappa", _to_internal("kappa", theta["kappa"]) + dk
                )
                try:
                    ga_point = fixed_point_iterate(
                        problem, point, u0=ga.mode, prior_model=prior
                    )
                except (ConvergenceError, NumericError):
                    continue
                value = log_marginal_laplace(problem, point, ga_point, prior)
                value += prior.log_prior_theta(point)
                value += _internal_jacobian("sigma_b", point["sigma_b"])
                value += _internal_jacobian("kappa", point["kappa"])
                approximations.append(ga_point)
                log_posts.append(value)
        if approximations:
            draws = sample_posterior_mixture(approximations, log_posts, n_draws, seed)
        else:
            grid_used = False
            draws = sample_posterior(ga, n_draws, seed)
    else:
        draws = sample_posterior(ga, n_draws, seed)

    mu_draws, cell_frame = predict_subareas(
        problem.design, draws, problem.predictor.link, alpha=alpha
    )
    excluded = []
    if len(problem.design.cells) > 1:
        if population is None:
            raise DataError("group-structured fit requires a population table")
        overall_draws, overall_frame, excluded = mrp_aggregate(
            mu_draws, problem.design.cells, problem.design.hierarchy,
            population, alpha=alpha,
        )
    else:
        overall_draws = mu_draws[0]
        overall_frame = cell_frame.copy()
        overall_frame["group"] = "all"

    diagnostics = {
        "model": problem.name,
        "theta": {k: float(v) for k, v in theta.items()},
        "log_marginal": float(opt.log_posterior),
        "outer_iterations": int(getattr(ga, "outer_iterations", 0)),
        "newton_iterations": int(ga.newton_iterations),
        "fp_deltas": [float(d) for d in getattr(ga, "fp_deltas", [])],
        "grad_norm": float(ga.grad_norm),
        "optimizer_evaluations": int(opt.n_evaluations),
        "optimizer_converged": bool(opt.converged),
        "grid": grid_used,
        "excluded_subareas": list(excluded),
        "warnings": list(opt.warnings) + list(ga.warnings),
        "seed": int(seed),
        "n_draws": int(n_draws),
    }
    return FitResult(
        theta=HyperParams(values=theta),
        approx=ga,
        draws=draws,
        cell_frame=cell_frame,
        overall_frame=overall_frame,
        mu_draws=mu_draws,
        overall_draws=overall_draws,
        diagnostics=diagnostics,
    )
