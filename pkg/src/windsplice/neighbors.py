"""Automatic off-site predictor selection: von Mises mixtures fitted to wind
directions by EM, component count chosen by BIC, and neighbor stations picked
inside the dominant-direction sectors within a maximum distance."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .datamodel import Station, distance_km
from .distributions import VonMises, von_mises_logpdf

EM_TOL = 1e-8
# over-specified mixtures creep below the gain tolerance for a long time; the
# likelihood plateau relevant to BIC is reached well before this cap
EM_MAX_ITER = 200
DEFAULT_RESTARTS = 5
MIN_OBS_PER_COMPONENT = 10
UPSILON_MAX = 1e4


@dataclass(frozen=True)
class VonMisesMixture:
    mus: tuple[float, ...]
    upsilons: tuple[float, ...]
    weights: tuple[float, ...]
    loglik: float
    n_iter: int

    @property
    def M(self) -> int:
        return len(self.mus)

    def logpdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        comp = np.stack(
            [
                math.log(w) + von_mises_logpdf(theta, VonMises(mu=m, upsilon=u))
                for m, u, w in zip(self.mus, self.upsilons, self.weights)
            ]
        )
        return special.logsumexp(comp, axis=0)


@dataclass(frozen=True)
class InfluenceSet:
    """Angular sectors of width 2*half_width around the dominant directions,
    paired with the maximum neighbor distance."""

    station_id: str
    half_width: float
    mus: tuple[float, ...]
    d_max_km: float

    def __post_init__(self):
        if not 0 <= self.half_width <= math.pi / 4:
            raise ValueError("half_width must lie in [0, pi/4]")

    def sectors(self) -> list[tuple[float, float]]:
        two_pi = 2 * math.pi
        return [((m - self.half_width) % two_pi, (m + self.half_width) % two_pi) for m in self.mus]

    def contains(self, angle: float) -> bool:
        return any(_angdist(angle, m) <= self.half_width for m in self.mus)


def _angdist(a, b):
    """Shortest angular distance on the circle."""
    d = np.mod(np.asarray(a) - b, 2 * math.pi)
    return np.minimum(d, 2 * math.pi - d)


def mean_resultant(angles: np.ndarray, weights: np.ndarray | None = None):
    """Circular mean direction and mean resultant length."""
    if weights is None:
        weights = np.ones_like(angles)
    total = weights.sum()
    c = float(np.sum(weights * np.cos(angles))) / total
    s = float(np.sum(weights * np.sin(angles))) / total
    return math.atan2(s, c) % (2 * math.pi), math.hypot(c, s)


def concentration_from_resultant(rbar: float) -> float:
    """Invert A(u) = I1(u)/I0(u) = rbar by Newton with the Best-Fisher start."""
    if rbar <= 0:
        return 0.0
    if rbar >= 1 - 1e-12:
        return UPSILON_MAX
    if rbar < 0.53:
        u = 2 * rbar + rbar**3 + 5 * rbar**5 / 6
    elif rbar < 0.85:
        u = -0.4 + 1.39 * rbar + 0.43 / (1 - rbar)
    else:
        u = 1.0 / (rbar**3 - 4 * rbar**2 + 3 * rbar)
    for _ in range(100):
        a = special.i1e(u) / special.i0e(u)
        da = 1.0 - a * a - a / u
        step = (a - rbar) / da
        u_new = min(max(u - step, 1e-12), UPSILON_MAX)
        if abs(u_new - u) < 1e-10 * (1 + u):
            return u_new
        u = u_new
    return u


def fit_vonmises_mixture(
    angles: np.ndarray,
    M: int,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    tol: float = EM_TOL,
) -> VonMisesMixture:
    """EM fit of an M-component von Mises mixture to angles in [0, 2pi).

    Runs several random restarts and keeps the best local optimum; the E-step
    uses component log-densities, the M-step closed-form circular means and a
    Newton inversion of the concentration equation.
    """
    angles = np.asarray(angles, dtype=float)
    angles = angles[np.isfinite(angles)]
    n = angles.size
    if n == 0:
        raise ValueError("no non-missing angles to fit")
    if n < MIN_OBS_PER_COMPONENT * M:
        raise ValueError(f"need at least {MIN_OBS_PER_COMPONENT * M} angles for M={M}, got {n}")
    if np.ptp(angles) == 0:
        raise ValueError("all angles identical; concentration is degenerate")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        fit = _em_once(angles, M, rng, tol)
        if best is None or fit.loglik > best.loglik:
            best = fit
    return best


def _em_once(angles: np.ndarray, M: int, rng: np.random.Generator, tol: float) -> VonMisesMixture:
    n = angles.size
    # initialize locations at random data points, modest concentration
    mus = angles[rng.integers(0, n, size=M)].astype(float)
    upsilons = np.full(M, 2.0)
    weights = np.full(M, 1.0 / M)
    prev_ll = -np.inf
    # cos(theta - mu) = cos(theta)cos(mu) + sin(theta)sin(mu): the data-side
    # trig is fixed, so each EM sweep is two rank-1 products per component
    cos_t, sin_t = np.cos(angles), np.sin(angles)
    for it in range(1, EM_MAX_ITER + 1):
        cosdiff = np.outer(np.cos(mus), cos_t) + np.outer(np.sin(mus), sin_t)  # (M, n)
        log_norm = np.array(
            [math.log(special.i0e(u)) + u + math.log(2 * math.pi) for u in upsilons]
        )
        logcomp = np.log(weights)[:, None] + upsilons[:, None] * cosdiff - log_norm[:, None]
        lse = special.logsumexp(logcomp, axis=0)
        ll = float(np.sum(lse))
        if ll + 1e-9 * (1 + abs(ll)) < prev_ll:
            raise RuntimeError(f"EM log-likelihood decreased at iteration {it}")
        resp = np.exp(logcomp - lse)  # responsibilities
        nk = resp.sum(axis=1) + 1e-300
        weights = nk / n
        cbar = resp @ cos_t
        sbar = resp @ sin_t
        mus = np.mod(np.arctan2(sbar, cbar), 2 * math.pi)
        rbar = np.hypot(cbar, sbar) / nk
        upsilons = np.array(
            [concentration_from_resultant(min(r, 1 - 1e-12)) for r in rbar]
        )
        if ll - prev_ll < tol:
            prev_ll = ll
            break
        prev_ll = ll
    order = np.argsort(mus)
    return VonMisesMixture(
        mus=tuple(float(m) for m in mus[order]),
        upsilons=tuple(float(u) for u in upsilons[order]),
        weights=tuple(float(w) for w in weights[order]),
        loglik=prev_ll,
        n_iter=it,
    )


def select_M_by_bic(angles: np.ndarray, M_candidates, seed: int = 0) -> tuple[int, dict]:
    """Pick the mixture size minimizing BIC = -2 loglik + (3M - 1) log n.

    Candidates the data cannot support are skipped with a warning; ties break
    toward the smaller M. Returns (M*, fits by M).
    """
    candidates = sorted(set(int(m) for m in M_candidates))
    if not candidates:
        raise ValueError("M_candidates must be non-empty")
    angles = np.asarray(angles, dtype=float)
    angles = angles[np.isfinite(angles)]
    n = angles.size
    fits: dict[int, VonMisesMixture] = {}
    bics: dict[int, float] = {}
    for M in candidates:
        if n < MIN_OBS_PER_COMPONENT * M:
            warnings.warn(f"skipping M={M}: only {n} angles available", stacklevel=2)
            continue
        fit = fit_vonmises_mixture(angles, M, seed=seed)
        fits[M] = fit
        bics[M] = -2.0 * fit.loglik + (3 * M - 1) * math.log(n)
    if not bics:
        raise ValueError("no feasible mixture size among the candidates")
    best = min(bics, key=lambda M: (bics[M], M))
    return best, fits


def bearing(src: Station, dst: Station) -> float:
    """Bearing of dst as seen from src, clockwise from north in [0, 2pi) (the
    same convention as ingested wind directions)."""
    return math.atan2(dst.easting_km - src.easting_km, dst.northing_km - src.northing_km) % (
        2 * math.pi
    )


@dataclass(frozen=True)
class Neighbor:
    id: str
    distance_km: float
    bearing: float


def select_neighbors(
    station: Station,
    registry: dict[str, Station],
    mixture: VonMisesMixture,
    alpha_angle: float = math.pi / 8,
    d_max_km: float = 176.0,
    bearing_convention: str = "blowing_from",
) -> list[Neighbor]:
    """Stations whose bearing from `station` falls inside a dominant-direction
    sector and whose distance is below d_max, sorted by distance.

    With the default convention, dominant directions are where the wind blows
    *from*, so selected neighbors sit upwind; `blowing_to` flips by pi.
    """
    if bearing_convention not in ("blowing_from", "blowing_to"):
        raise ValueError(f"unknown bearing convention {bearing_convention!r}")
    offset = 0.0 if bearing_convention == "blowing_from" else math.pi
    sectors = InfluenceSet(
        station_id=station.id,
        half_width=alpha_angle,
        mus=tuple((m + offset) % (2 * math.pi) for m in mixture.mus),
        d_max_km=d_max_km,
    )
    out = []
    for other in registry.values():
        if other.id == station.id:
            continue
        d = distance_km(station, other)
        if d >= d_max_km:
            continue
        brg = bearing(station, other)
        if sectors.contains(brg):
            out.append(Neighbor(id=other.id, distance_km=d, bearing=brg))
    out.sort(key=lambda nb: (nb.distance_km, nb.id))
    if not out:
        warnings.warn(f"station {station.id}: no neighbors selected", stacklevel=2)
    return out
