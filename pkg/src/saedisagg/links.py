"""Link functions and their population-weighted aggregation rules.

Aggregated observations see g(sum_j w_j ginv(eta_j)).  For the log link this
is evaluated with log-sum-exp; for the logit link the mean is clamped away
from 0 and 1 so tail draws of the latent field cannot overflow.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logit as sp_logit, logsumexp

MU_CLAMP = 1e-12


class Link:
    """A link g with inverse and the derivative pieces the solver needs."""

    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return f"Link({self.name!r})"

    def g(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.name == "identity":
            return mu
        if self.name == "log":
            if np.any(mu <= 0):
                raise ValueError("log link requires mu > 0")
            return np.log(mu)
        if np.any(mu <= 0) or np.any(mu >= 1):
            raise ValueError("logit link requires mu in (0, 1)")
        return sp_logit(mu)

    def ginv(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.name == "identity":
            return eta
        if self.name == "log":
            return np.exp(eta)
        return expit(eta)

    def dg(self, mu):
        """Derivative of g at mu, used by the delta method."""
        mu = np.asarray(mu, dtype=float)
        if self.name == "identity":
            return np.ones_like(mu)
        if self.name == "log":
            return 1.0 / mu
        return 1.0 / (mu * (1.0 - mu))

    def aggregate(self, eta, weights):
        """g(sum_j w_j ginv(eta_j)) for one aggregated row."""
        eta = np.asarray(eta, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if self.name == "identity":
            return float(weights @ eta)
        if self.name == "log":
            return float(logsumexp(eta, b=weights))
        mean = np.clip(weights @ expit(eta), MU_CLAMP, 1.0 - MU_CLAMP)
        return float(sp_logit(mean))

    def agg_sensitivities(self, eta, weights):
        """d aggregate / d eta_j, one value per aggregated subarea row."""
        eta = np.asarray(eta, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if self.name == "identity":
            return weights.copy()
        if self.name == "log":
            # w_j exp(eta_j) / sum w exp(eta), computed in log space
            with np.errstate(divide="ignore"):
                log_w = np.log(weights)
            return np.exp(log_w + eta - logsumexp(eta, b=weights))
        mu = expit(eta)
        mean = np.clip(weights @ mu, MU_CLAMP, 1.0 - MU_CLAMP)
        return weights * mu * (1.0 - mu) / (mean * (1.0 - mean))


LINKS = {name: Link(name) for name in ("identity", "log", "logit")}


def get_link(name) -> Link:
    if name not in LINKS:
        raise ValueError(f"unknown link {name!r}; expected one of {sorted(LINKS)}")
    return LINKS[name]
