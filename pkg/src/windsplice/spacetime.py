"""Exact space-time Gaussian field over the station set: Matern-covariance
innovations driving a first-order autoregression in time, giving the separable
covariance rho2^|t-t'| * Matern(s, s'). At tens of stations the dense spatial
covariance is exact and cheap, so no mesh discretization is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import special
from scipy.linalg import cho_factor, cho_solve

from .datamodel import Station, distance_km
from .latent import Ar1Spec, ar1_precision

# Range-prior calibration points when a region's own coordinates cannot supply
# a median pairwise distance (fewer than two stations).
R_MEDIAN_DEFAULT_KM = {"East": 94.6, "West": 113.3}


@dataclass(frozen=True)
class MaternSpec:
    """Matern covariance with smoothness fixed at nu = 1; range_km follows the
    convention kappa = sqrt(8*nu)/range (correlation ~0.1 at the range)."""

    sigma2: float
    range_km: float
    nu: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")
        if not self.range_km > 0:
            raise ValueError("range_km must be > 0")
        if not self.nu > 0:
            raise ValueError("nu must be > 0")

    @property
    def kappa(self) -> float:
        return float(np.sqrt(8 * self.nu) / self.range_km)


@dataclass(frozen=True)
class SpaceTimeSpec:
    matern: MaternSpec
    rho2: float
    stations: tuple[Station, ...]
    T: int

    def __post_init__(self):
        if not abs(self.rho2) < 1:
            raise ValueError("|rho2| must be < 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        regions = {s.region for s in self.stations}
        if len(regions) > 1:
            raise ValueError(f"stations span multiple regions: {sorted(regions)}")
        if not self.stations:
            raise ValueError("station list must be non-empty")


def matern_cov(d_km, spec: MaternSpec):
    """sigma2 * (kappa*d)^nu * K_nu(kappa*d) * 2^(1-nu)/Gamma(nu); sigma2 at d=0."""
    d = np.asarray(d_km, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be >= 0")
    x = spec.kappa * d
    norm = 2.0 ** (1 - spec.nu) / special.gamma(spec.nu)
    with np.errstate(invalid="ignore"):
        val = spec.sigma2 * norm * x**spec.nu * special.kv(spec.nu, x)
    return np.where(x == 0, spec.sigma2, val)


def matern_cov_matrix(stations, spec: MaternSpec) -> np.ndarray:
    coords = np.array([[s.easting_km, s.northing_km] for s in stations])
    diff = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt((diff**2).sum(axis=-1))
    return np.asarray(matern_cov(d, spec))


def spacetime_precision(spec: SpaceTimeSpec) -> sp.csc_matrix:
    """Joint precision over S*T coefficients (time-major ordering), the exact
    inverse of the separable covariance rho2^|t-t'| * Matern(s, s')."""
    cov_s = matern_cov_matrix(spec.stations, spec.matern)
    try:
        cf = cho_factor(cov_s, lower=True)
    except np.linalg.LinAlgError:
        pair = _closest_pair(spec.stations)
        raise ValueError(
            "spatial covariance is not positive definite; closest stations are "
            f"{pair[0].id} and {pair[1].id} at {distance_km(*pair):.6g} km"
        ) from None
    prec_s = cho_solve(cf, np.eye(len(spec.stations)))
    prec_s = 0.5 * (prec_s + prec_s.T)
    # correlation-scale AR1 inverse: ar1_precision(tau=1) / (1 - rho^2)
    q_time = ar1_precision(Ar1Spec(n=spec.T, rho=spec.rho2, tau=1.0)) / (1 - spec.rho2**2)
    return sp.kron(q_time, sp.csc_matrix(prec_s), format="csc")


def spacetime_logdet(spec: SpaceTimeSpec) -> float:
    """log det of spacetime_precision via the Kronecker identity."""
    cov_s = matern_cov_matrix(spec.stations, spec.matern)
    sgn, logdet_cov = np.linalg.slogdet(cov_s)
    if sgn <= 0:
        raise ValueError("spatial covariance is not positive definite")
    S = len(spec.stations)
    logdet_time = (1 - spec.T) * np.log1p(-spec.rho2**2)
    return S * logdet_time - spec.T * logdet_cov


def _closest_pair(stations):
    best, pair = np.inf, (stations[0], stations[0])
    for i, a in enumerate(stations):
        for b in stations[i + 1 :]:
            d = distance_km(a, b)
            if d < best:
                best, pair = d, (a, b)
    return pair


class SpaceTimeBlock:
    """Latent block for the space-time effect u(s, t), time-major layout.

    Observation row i loads u at (time_index[i], station_index[i]).
    """

    sum_to_zero = False

    def __init__(self, stations, T: int, station_index, time_index, name: str = "spacetime"):
        self.stations = tuple(stations)
        self.T = T
        self.dim = len(self.stations) * T
        self.station_index = np.asarray(station_index, dtype=int)
        self.time_index = np.asarray(time_index, dtype=int)
        if self.station_index.shape != self.time_index.shape:
            raise ValueError("station_index and time_index must align")
        self.name = name

    def _spec(self, theta: dict) -> SpaceTimeSpec:
        return SpaceTimeSpec(
            matern=MaternSpec(sigma2=theta["sigma2"], range_km=theta["range_km"]),
            rho2=theta["rho2"],
            stations=self.stations,
            T=self.T,
        )

    def precision(self, theta: dict) -> sp.csc_matrix:
        return spacetime_precision(self._spec(theta))

    def logdet(self, theta: dict) -> float:
        return spacetime_logdet(self._spec(theta))

    def incidence(self):
        rows = np.arange(self.station_index.size)
        cols = self.time_index * len(self.stations) + self.station_index
        return rows, cols, np.ones(rows.size)


@dataclass(frozen=True)
class RegionSplit:
    east: tuple[Station, ...]
    west: tuple[Station, ...]
    r_median_east_km: float
    r_median_west_km: float


def split_regions(stations) -> RegionSplit:
    """Partition stations East/West and compute the median pairwise distance of
    each side (the range-prior calibration point)."""
    east = tuple(s for s in stations if s.region == "East")
    west = tuple(s for s in stations if s.region == "West")
    if not east or not west:
        missing = "East" if not east else "West"
        raise ValueError(f"region {missing!r} has no stations")
    return RegionSplit(
        east=east,
        west=west,
        r_median_east_km=region_median_distance(east),
        r_median_west_km=region_median_distance(west),
    )


def region_median_distance(stations) -> float:
    """Median pairwise distance; single-station regions fall back to the
    reference default for their region label."""
    if len(stations) < 2:
        if len(stations) == 1 and stations[0].region in R_MEDIAN_DEFAULT_KM:
            return R_MEDIAN_DEFAULT_KM[stations[0].region]
        raise ValueError("need at least two stations for a median distance")
    d = [
        distance_km(a, b)
        for i, a in enumerate(stations)
        for b in stations[i + 1 :]
    ]
    return float(np.median(d))
