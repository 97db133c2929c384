"""Observation log-likelihoods and derivatives in the linear predictor.

Each family maps a predictor eta (already on the link scale) and auxiliary
per-observation data to log-density values, first derivatives, and negated
second derivatives (the curvature weights used in the Newton solve).  The
negative binomial uses the size parameterization mean m, variance m(1 + m/phi);
the beta-binomial uses mean mu with intra-cluster correlation 1 / (1 + phi).
"""

from __future__ import annotations

import numpy as np
from scipy.special import betaln, expit, gammaln, polygamma, psi

CURVATURE_FLOOR = 0.0
_STABLE_COUNT_LIMIT = 100_000


def _require(aux, key, family):
    if key not in aux:
        raise ValueError(f"family {family!r} requires aux[{key!r}]")
    return np.asarray(aux[key], dtype=float)


def _integer_counts(*arrays):
    for arr in arrays:
        if not np.allclose(arr, np.rint(arr), atol=1e-9):
            return False
        if arr.max(initial=0.0) > _STABLE_COUNT_LIMIT:
            return False
    return True


def _psi_diff(z, counts):
    """psi(z + c) - psi(z) for integer c >= 0, as the exact finite sum.

    Avoids the catastrophic cancellation of subtracting two digammas when z
    is large (beta-binomial with weak overdispersion).
    """
    counts = np.rint(counts).astype(np.int64)
    out = np.zeros_like(z)
    for k in range(int(counts.max(initial=0))):
        mask = counts > k
        out[mask] += 1.0 / (z[mask] + k)
    return out


def _psi1_diff(z, counts):
    """polygamma(1, z + c) - polygamma(1, z) for integer c >= 0."""
    counts = np.rint(counts).astype(np.int64)
    out = np.zeros_like(z)
    for k in range(int(counts.max(initial=0))):
        mask = counts > k
        out[mask] -= 1.0 / (z[mask] + k) ** 2
    return out


def _lgamma_diff(z, counts):
    """gammaln(z + c) - gammaln(z) for integer c >= 0."""
    counts = np.rint(counts).astype(np.int64)
    out = np.zeros_like(z)
    for k in range(int(counts.max(initial=0))):
        mask = counts > k
        out[mask] += np.log(z[mask] + k)
    return out


def loglik(family, y, eta, aux, phi=None):
    """Per-observation log-likelihood at predictor eta."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian":
        v = _require(aux, "variance", family)
        return -0.5 * ((y - eta) ** 2 / v + np.log(2.0 * np.pi * v))
    if family == "poisson":
        e = _require(aux, "exposure", family)
        log_m = np.log(e) + eta
        return y * log_m - np.exp(log_m) - gammaln(y + 1.0)
    if family == "binomial":
        n = _require(aux, "trials", family)
        return (
            y * eta - n * np.logaddexp(0.0, eta)
            + gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
        )
    if family == "negative-binomial":
        if phi is None:
            raise ValueError("negative-binomial requires phi")
        e = _require(aux, "exposure", family)
        m = e * np.exp(eta)
        if _integer_counts(y):
            first = _lgamma_diff(np.full_like(y, phi), y)
        else:
            first = gammaln(y + phi) - gammaln(phi)
        return (
            first - gammaln(y + 1.0)
            - phi * np.log1p(m / phi) + y * np.log(m / (phi + m))
        )
    if family == "beta-binomial":
        if phi is None:
            raise ValueError("beta-binomial requires phi")
        n = _require(aux, "trials", family)
        mu = expit(eta)
        a = mu * phi
        b = (1.0 - mu) * phi
        comb = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
        if _integer_counts(y, n - y):
            return comb + (
                _lgamma_diff(a, y) + _lgamma_diff(b, n - y)
                - _lgamma_diff(np.full_like(y, phi), n)
            )
        return comb + betaln(y + a, n - y + b) - betaln(a, b)
    raise ValueError(f"unknown family {family!r}")


def derivatives(family, y, eta, aux, phi=None):
    """(d1, w): first derivative and curvature weight -d2, floored at zero."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian":
        v = _require(aux, "variance", family)
        return (y - eta) / v, 1.0 / v
    if family == "poisson":
        e = _require(aux, "exposure", family)
        m = e * np.exp(eta)
        return y - m, m
    if family == "binomial":
        n = _require(aux, "trials", family)
        mu = expit(eta)
        return y - n * mu, n * mu * (1.0 - mu)
    if family == "negative-binomial":
        e = _require(aux, "exposure", family)
        m = e * np.exp(eta)
        d1 = y - m * (y + phi) / (phi + m)
        w = (y + phi) * m * phi / (phi + m) ** 2
        return d1, np.maximum(w, CURVATURE_FLOOR)
    if family == "beta-binomial":
        n = _require(aux, "trials", family)
        mu = expit(eta)
        a = mu * phi
        b = (1.0 - mu) * phi
        if _integer_counts(y, n - y):
            dmu = phi * (_psi_diff(a, y) - _psi_diff(b, n - y))
            d2mu = phi * phi * (_psi1_diff(a, y) + _psi1_diff(b, n - y))
        else:
            dmu = phi * (psi(y + a) - psi(a) - psi(n - y + b) + psi(b))
            d2mu = phi * phi * (
                polygamma(1, y + a) + polygamma(1, n - y + b)
                - polygamma(1, a) - polygamma(1, b)
            )
        s = mu * (1.0 - mu)
        d1 = dmu * s
        d2 = d2mu * s * s + dmu * s * (1.0 - 2.0 * mu)
        return d1, np.maximum(-d2, CURVATURE_FLOOR)
    raise ValueError(f"unknown family {family!r}")
