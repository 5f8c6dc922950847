"""Quantile-parametrized Gamma and generalized Pareto distributions, plus the
Bernoulli-logit and von Mises densities used by the wind model.

The Gamma is anchored at its alpha-quantile psi (rate = H^-1(alpha; kappa, 1)/psi)
and the GP at its beta-quantile phi, so regression on the log link acts directly
on a quantile of the response. Log-density derivatives are with respect to the
linear predictor eta (log psi, log phi, or the logit of p).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

# Below this the GP shape is treated as exactly zero (exponential tail);
# the power form loses precision to cancellation there.
XI_ZERO = 1e-8


@dataclass(frozen=True)
class GammaQ:
    """Gamma distribution anchored at its alpha-quantile psi with shape kappa."""

    psi: float
    kappa: float
    alpha: float

    def __post_init__(self):
        if not self.psi > 0:
            raise ValueError("psi must be > 0")
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0,1)")

    @property
    def unit_quantile(self) -> float:
        """alpha-quantile of Gamma(kappa, rate 1)."""
        return float(special.gammaincinv(self.kappa, self.alpha))

    @property
    def rate(self) -> float:
        return self.unit_quantile / self.psi


@dataclass(frozen=True)
class GPQ:
    """Generalized Pareto (xi >= 0) anchored at its beta-quantile phi."""

    phi: float
    xi: float
    beta: float

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError("phi must be > 0")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        if not 0 < self.beta < 1:
            raise ValueError("beta must be in (0,1)")

    @property
    def slope(self) -> float:
        """(1-beta)^(-xi) - 1, the coefficient of y/phi inside the power form."""
        return float(np.expm1(-self.xi * math.log1p(-self.beta)))


@dataclass(frozen=True)
class BernoulliLogit:
    eta: float

    @property
    def p(self) -> float:
        return float(special.expit(self.eta))


@dataclass(frozen=True)
class VonMises:
    mu: float
    upsilon: float

    def __post_init__(self):
        if self.upsilon < 0:
            raise ValueError("concentration must be >= 0")


# ---------------------------------------------------------------------------
# Gamma stage
# ---------------------------------------------------------------------------

def gamma_q_logpdf(y, q: GammaQ):
    """Log-density and its first two derivatives w.r.t. eta = log(psi)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("gamma_q_logpdf requires y > 0")
    c = q.unit_quantile
    ry = y * c / q.psi  # y * rate
    logpdf = (
        q.kappa * (math.log(c) - math.log(q.psi))
        - special.gammaln(q.kappa)
        + (q.kappa - 1) * np.log(y)
        - ry
    )
    d1 = ry - q.kappa
    d2 = -ry
    return logpdf, d1, d2


def gamma_q_cdf(y, q: GammaQ):
    y = np.asarray(y, dtype=float)
    return special.gammainc(q.kappa, np.clip(y, 0, None) * q.rate)


def gamma_q_quantile(p, q: GammaQ):
    """Quantile of the anchored Gamma; by construction equals psi at p = alpha."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("quantile level must be in (0,1)")
    return special.gammaincinv(q.kappa, p) * (q.psi / q.unit_quantile)


def gamma_q_sample(q: GammaQ, rng: np.random.Generator, size=None):
    return rng.gamma(shape=q.kappa, scale=q.psi / q.unit_quantile, size=size)


def truncated_gamma_q_ppf(u, q: GammaQ):
    """Inverse CDF of the Gamma conditioned on y < psi: maps u to level u*alpha."""
    u = np.asarray(u, dtype=float)
    return gamma_q_quantile(u * q.alpha, q)


def truncated_gamma_q_sample(q: GammaQ, rng: np.random.Generator, size=None):
    return truncated_gamma_q_ppf(rng.uniform(size=size), q)


# ---------------------------------------------------------------------------
# Generalized Pareto stage
# ---------------------------------------------------------------------------

def gp_q_cdf(y, g: GPQ):
    y = np.asarray(y, dtype=float)
    y = np.clip(y, 0, None)
    if g.xi < XI_ZERO:
        return -np.expm1(y / g.phi * math.log1p(-g.beta))
    return -np.expm1(-np.log1p(g.slope * y / g.phi) / g.xi)


def gp_q_logpdf(y, g: GPQ):
    """Log-density and derivatives w.r.t. eta = log(phi); y are exceedances >= 0."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("exceedances must be >= 0")
    if g.xi < XI_ZERO:
        lam = -math.log1p(-g.beta)  # rate is lam / phi
        b = lam * y / g.phi
        logpdf = math.log(lam) - math.log(g.phi) - b
        d1 = b - 1.0
        d2 = -b
        return logpdf, d1, d2
    a = g.slope * y / g.phi
    k = 1.0 / g.xi + 1.0
    logpdf = math.log(g.slope) - math.log(g.xi) - math.log(g.phi) - k * np.log1p(a)
    frac = a / (1.0 + a)
    d1 = k * frac - 1.0
    d2 = -k * frac / (1.0 + a)
    return logpdf, d1, d2


def gp_q_quantile(p, g: GPQ):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("quantile level must be in (0,1)")
    if g.xi < XI_ZERO:
        return g.phi * np.log1p(-p) / math.log1p(-g.beta)
    return g.phi * np.expm1(-g.xi * np.log1p(-p)) / g.slope


def gp_q_sample(g: GPQ, u):
    """Inverse-CDF sampler; u may be a scalar or an array of uniforms in (0,1)."""
    return gp_q_quantile(u, g)


# ---------------------------------------------------------------------------
# Bernoulli stage
# ---------------------------------------------------------------------------

def bernoulli_logit_logpdf(y, eta):
    """Log-density and derivatives w.r.t. eta for indicator data y in {0,1}."""
    y = np.asarray(y, dtype=float)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("bernoulli observations must be 0 or 1")
    eta = np.asarray(eta, dtype=float)
    logpdf = y * eta - np.logaddexp(0.0, eta)
    p = special.expit(eta)
    d1 = y - p
    d2 = -p * (1.0 - p)
    return logpdf, d1, d2


# ---------------------------------------------------------------------------
# von Mises (wind directions)
# ---------------------------------------------------------------------------

def von_mises_logpdf(theta, vm: VonMises):
    """upsilon*cos(theta - mu) - log(2*pi*I0(upsilon)), stable for large upsilon."""
    theta = np.asarray(theta, dtype=float)
    # I0(u) = i0e(u) * e^u, so log I0 stays finite up to very large concentration
    log_i0 = math.log(special.i0e(vm.upsilon)) + vm.upsilon
    return vm.upsilon * np.cos(theta - vm.mu) - math.log(2 * math.pi) - log_i0
