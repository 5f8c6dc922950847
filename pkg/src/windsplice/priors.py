"""Penalized-complexity and related hyperpriors, each calibrated from a single
probability statement (e.g. P(sd > u) = a) and expressed as a log-density on
the natural scale of the hyperparameter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.optimize import brentq

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class PcPrecision:
    """Exponential prior on sd = tau^(-1/2) with rate lambda = -ln(a)/u."""

    u: float
    a: float

    def __post_init__(self):
        if not self.u > 0:
            raise ValueError("u must be > 0")
        if not 0 < self.a < 1:
            raise ValueError("a must be in (0,1)")

    @property
    def lam(self) -> float:
        return -math.log(self.a) / self.u

    def logprior(self, tau):
        """Log-density in tau, including the sd -> tau Jacobian |d sd/d tau|."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0):
            raise ValueError("tau must be > 0")
        return math.log(self.lam) - self.lam / np.sqrt(tau) + math.log(0.5) - 1.5 * np.log(tau)

    def tail_prob(self, sd_threshold: float) -> float:
        """P(sd > threshold) under the calibrated prior."""
        return math.exp(-self.lam * sd_threshold)


def calibrate_pc_precision(u: float, a: float) -> PcPrecision:
    return PcPrecision(u=u, a=a)


@dataclass(frozen=True)
class PcCorrelation:
    """Prior shrinking a correlation toward the base model rho = 1.

    The distance d(rho) = sqrt(1 - rho) is exponential with rate lam, truncated
    to [0, sqrt(2)]; lam is calibrated so that P(rho > u) = a.
    """

    u: float
    a: float
    lam: float

    def cdf_distance(self, d):
        d = np.asarray(d, dtype=float)
        return _truncexp_cdf(self.lam, d)

    def prob_exceeds(self, u: float) -> float:
        """P(rho > u) = P(d < sqrt(1-u))."""
        return float(self.cdf_distance(math.sqrt(1.0 - u)))

    def logprior(self, rho):
        rho = np.asarray(rho, dtype=float)
        if np.any(np.abs(rho) >= 1):
            raise ValueError("rho must be in (-1,1)")
        d = np.sqrt(1.0 - rho)
        if self.lam >= 0:
            log_norm = math.log(-math.expm1(-self.lam * SQRT2))
        else:
            a2 = -self.lam * SQRT2
            log_norm = a2 + math.log(-math.expm1(-a2))  # log(e^a2 - 1)
        log_rate = math.log(abs(self.lam))
        # |d d(rho)/d rho| = 1 / (2 sqrt(1-rho))
        return log_rate - self.lam * d - log_norm - np.log(2.0 * d)


def _truncexp_cdf(lam: float, d):
    """CDF at d of Exp(lam) truncated to [0, sqrt(2)], stable for lam of either
    sign: for lam < 0 rescale by the dominant exponential before dividing."""
    d = np.asarray(d, dtype=float)
    if lam >= 0:
        return np.expm1(-lam * d) / math.expm1(-lam * SQRT2)
    a1 = -lam * d
    a2 = -lam * SQRT2
    return np.exp(a1 - a2) * (-np.expm1(-a1)) / (-math.expm1(-a2))


def calibrate_pc_correlation(u: float = 0.9, a: float = 0.95) -> PcCorrelation:
    """Solve the truncated-exponential rate so that P(rho > u) = a."""
    if not -1 < u < 1:
        raise ValueError("u must be in (-1,1)")
    if not 0 < a < 1:
        raise ValueError("a must be in (0,1)")
    du = math.sqrt(1.0 - u)

    def gap(lam):
        return float(_truncexp_cdf(lam, du)) - a

    # lam -> 0 gives the uniform-on-distance limit du/sqrt(2); the sign of the
    # calibration target relative to that limit decides the sign of lam.
    limit = du / SQRT2
    if abs(a - limit) < 1e-14:
        raise ValueError("calibration coincides with the flat prior; rate undefined")
    lo, hi = (1e-8, 1e6) if a > limit else (-1e6, -1e-8)
    if gap(lo) * gap(hi) > 0:
        raise ValueError(f"no calibration rate in [{lo}, {hi}] for P(rho > {u}) = {a}")
    lam = brentq(gap, lo, hi, xtol=1e-12, rtol=1e-14)
    return PcCorrelation(u=u, a=a, lam=lam)


@dataclass(frozen=True)
class PcMatern:
    """Independent shrinkage priors for the Matern field: the sd shrinks to 0,
    the range to infinity (exponential on 1/range)."""

    sigma_u: float
    sigma_a: float
    r0: float
    r_a: float

    @property
    def lam_sigma(self) -> float:
        return -math.log(self.sigma_a) / self.sigma_u

    @property
    def lam_range(self) -> float:
        # P(r < r0) = P(1/r > 1/r0) = exp(-lam/r0) = r_a
        return -math.log(self.r_a) * self.r0

    def logprior_sigma(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be > 0")
        return math.log(self.lam_sigma) - self.lam_sigma * sigma

    def logprior_range(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r <= 0):
            raise ValueError("range must be > 0")
        return math.log(self.lam_range) - self.lam_range / r - 2.0 * np.log(r)

    def prob_sigma_exceeds(self, s: float) -> float:
        return math.exp(-self.lam_sigma * s)

    def prob_range_below(self, r: float) -> float:
        return math.exp(-self.lam_range / r)


def calibrate_pc_matern(sigma_u: float, sigma_a: float, r0: float, r_a: float) -> PcMatern:
    if sigma_u <= 0 or r0 <= 0:
        raise ValueError("calibration thresholds must be > 0")
    if not (0 < sigma_a < 1 and 0 < r_a < 1):
        raise ValueError("calibration probabilities must be in (0,1)")
    return PcMatern(sigma_u=sigma_u, sigma_a=sigma_a, r0=r0, r_a=r_a)


@dataclass(frozen=True)
class ShapePriors:
    """Likelihood-shape priors: Gamma(10,1) on the Gamma precision kappa and an
    exponential on the GP shape xi with P(xi > xi_u) = xi_a."""

    kappa_shape: float = 10.0
    kappa_rate: float = 1.0
    xi_u: float = 0.4
    xi_a: float = 0.01

    @property
    def xi_rate(self) -> float:
        return -math.log(self.xi_a) / self.xi_u


def xi_pc_logprior(xi, rate: float | None = None, shape_priors: ShapePriors | None = None):
    """Exponential shrink-to-zero prior for the GP shape."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise ValueError("xi must be >= 0")
    if rate is None:
        rate = (shape_priors or ShapePriors()).xi_rate
    return math.log(rate) - rate * xi


def kappa_logprior(kappa, shape: float = 10.0, rate: float = 1.0):
    """Gamma(shape, rate) log-density for the Gamma precision parameter."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise ValueError("kappa must be > 0")
    return (
        shape * math.log(rate)
        - special.gammaln(shape)
        + (shape - 1) * np.log(kappa)
        - rate * kappa
    )


def loggamma_logprior(tau, shape: float = 1.0, rate: float = 5e-5):
    """Diffuse Gamma(shape, rate) prior on a precision, as a density in tau."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be > 0")
    return (
        shape * math.log(rate)
        - special.gammaln(shape)
        + (shape - 1) * np.log(tau)
        - rate * tau
    )
