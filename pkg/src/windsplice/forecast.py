"""Three-stage fitting per rolling window, h-hour-ahead predictive sampling via
the splice scheme (Gamma bulk corrected by GP exceedances), and a generative
simulator of the full model for testing and synthetic experiments.

Forecasts are plug-in: posterior means of the linear predictors and posterior
modes of the hyperparameters, with 10,000 predictive draws by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .datamodel import Station, StationSeries
from .distributions import (
    GPQ,
    GammaQ,
    gamma_q_quantile,
    gp_q_quantile,
    truncated_gamma_q_ppf,
)
from .inference import (
    BernoulliLikelihood,
    GammaLikelihood,
    GenParetoLikelihood,
    HyperParam,
    latent_marginal_variance,
    optimize_hyper,
    predictor_marginals,
)
from .latent import Ar1Block, CyclicRw2Block, FixedBlock, assemble_latent
from .priors import (
    calibrate_pc_correlation,
    calibrate_pc_matern,
    calibrate_pc_precision,
    kappa_logprior,
    loggamma_logprior,
    xi_pc_logprior,
)
from .spacetime import SpaceTimeBlock, matern_cov_matrix, MaternSpec, region_median_distance


@dataclass(frozen=True)
class FitConfig:
    """Model probabilities, prior calibrations, and optimizer settings; the
    defaults follow the reference configuration throughout."""

    alpha: float = 0.8
    beta: float = 0.5
    m_draws: int = 10000
    n_min_exceed: int = 30
    min_positive: int = 50
    eps_fixed: float = 1e-6
    rho_u: float = 0.9
    rho_a: float = 0.95
    prec_a: float = 0.01
    sigma_factor: float = 2.0
    sigma_a: float = 0.01
    range_a: float = 0.5
    kappa_shape: float = 10.0
    kappa_rate: float = 1.0
    xi_u: float = 0.4
    xi_a: float = 0.01
    tau1_shape: float = 1.0
    tau1_rate: float = 5e-5
    truncated: bool = False
    nm_xatol: float = 1e-4
    nm_fatol: float = 1e-5
    nm_maxfev: int = 500
    init_kappa: float = 10.0
    init_rho: float = 0.5
    init_tau: float = 1.0
    init_xi: float = 0.1
    p_clamp: float = 1e-6


class WindowSkipped(RuntimeError):
    """The training window cannot support a fit (e.g. too few positives)."""


# ---------------------------------------------------------------------------
# Window inputs (training slice only; targets enter via lagged covariates)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OffsiteWindowData:
    """One station's training slice plus target-side covariates for horizon h."""

    station_id: str
    origin: int
    horizon: int
    y: np.ndarray  # (n,) training speeds, NaN = missing
    hours: np.ndarray  # (n,) hour-of-day per slot
    neighbor_ids: tuple[str, ...]
    z: np.ndarray  # (n, J) lag-h neighbor speeds aligned to training slots
    z_target: np.ndarray  # (J,) lag-h neighbor speeds at origin + h
    target_hour: int

    @property
    def n_train(self) -> int:
        return self.y.size

    def covariate_ok(self) -> np.ndarray:
        if self.z.shape[1] == 0:
            return np.ones(self.n_train, dtype=bool)
        return np.all(np.isfinite(self.z), axis=1)


@dataclass(frozen=True)
class SpacetimeWindowData:
    """Joint training slice for all stations of one region."""

    stations: tuple[Station, ...]
    origin: int
    horizon: int
    y: np.ndarray  # (S, n)
    hours: np.ndarray  # (n,)
    target_hour: int

    @property
    def n_train(self) -> int:
        return self.y.shape[1]


@dataclass
class StageFit:
    stage: str  # gamma | bernoulli | gp
    origin: int
    horizon: int
    theta: dict
    eta_train: np.ndarray  # posterior predictor mean on the training grid
    eta_train_var: np.ndarray  # variance where observed, NaN elsewhere
    eta_target: np.ndarray  # () for offsite, (S,) for spacetime
    eta_target_var: np.ndarray
    n_obs: int
    n_eval: int
    converged: bool
    trace: list = field(default_factory=list)


@dataclass
class PredictiveSample:
    station_id: str
    origin: int
    horizon: int
    draws: np.ndarray
    psi_hat: float
    p_hat: float
    phi_hat: float | None
    xi_hat: float | None
    kappa_hat: float
    alpha: float
    beta: float
    truncated: bool
    flags: dict


def _sd_wind(y: np.ndarray) -> float:
    vals = y[np.isfinite(y)]
    if vals.size < 2:
        raise WindowSkipped("not enough observations to calibrate priors")
    sd = float(np.std(vals))
    return sd if sd > 0 else 1.0


def _offsite_params(cfg: FitConfig, sd_wind: float, stage: str) -> list[HyperParam]:
    pc_rho = calibrate_pc_correlation(cfg.rho_u, cfg.rho_a)
    pc_tau2 = calibrate_pc_precision(sd_wind, cfg.prec_a)
    params = []
    if stage == "gamma":
        params.append(
            HyperParam(
                "kappa",
                "log",
                cfg.init_kappa,
                lambda k: kappa_logprior(k, cfg.kappa_shape, cfg.kappa_rate),
            )
        )
    if stage == "gp":
        params.append(
            HyperParam(
                "xi",
                "softplus",
                cfg.init_xi,
                lambda x: xi_pc_logprior(x, rate=-math.log(cfg.xi_a) / cfg.xi_u),
            )
        )
    params += [
        HyperParam("rho1", "atanh", cfg.init_rho, pc_rho.logprior),
        HyperParam(
            "tau1", "log", cfg.init_tau, lambda t: loggamma_logprior(t, cfg.tau1_shape, cfg.tau1_rate)
        ),
        HyperParam("tau2", "log", cfg.init_tau, pc_tau2.logprior),
    ]
    return params


def _spacetime_params(cfg: FitConfig, sd_wind: float, r_median: float, stage: str):
    pc_rho = calibrate_pc_correlation(cfg.rho_u, cfg.rho_a)
    pc_tau2 = calibrate_pc_precision(sd_wind, cfg.prec_a)
    pc_matern = calibrate_pc_matern(cfg.sigma_factor * sd_wind, cfg.sigma_a, r_median, cfg.range_a)

    def sigma2_logprior(v):
        # prior stated on sigma; include the sigma -> sigma^2 Jacobian
        s = math.sqrt(v)
        return float(pc_matern.logprior_sigma(s)) - math.log(2.0 * s)

    params = []
    if stage == "gamma":
        params.append(
            HyperParam(
                "kappa",
                "log",
                cfg.init_kappa,
                lambda k: kappa_logprior(k, cfg.kappa_shape, cfg.kappa_rate),
            )
        )
    if stage == "gp":
        params.append(
            HyperParam(
                "xi",
                "softplus",
                cfg.init_xi,
                lambda x: xi_pc_logprior(x, rate=-math.log(cfg.xi_a) / cfg.xi_u),
            )
        )
    params += [
        HyperParam("sigma2", "log", 0.5, sigma2_logprior),
        HyperParam("range_km", "log", r_median, pc_matern.logprior_range),
        HyperParam("rho2", "atanh", cfg.init_rho, pc_rho.logprior),
        HyperParam("tau2", "log", cfg.init_tau, pc_tau2.logprior),
    ]
    return params


# ---------------------------------------------------------------------------
# Off-site stage fits
# ---------------------------------------------------------------------------


def _fit_offsite_stage(data: OffsiteWindowData, cfg: FitConfig, stage: str, obs_idx, obs_values):
    n = data.n_train
    design = np.column_stack([np.ones(obs_idx.size), data.z[obs_idx]])
    # band first, dense-coupled columns last: keeps the natural-order factor sparse
    blocks = [
        Ar1Block(n, obs_idx),
        CyclicRw2Block(24, data.hours[obs_idx]),
        FixedBlock(design, eps=cfg.eps_fixed),
    ]
    lat = assemble_latent(blocks, obs_idx.size)
    sd_wind = _sd_wind(data.y)
    params = _offsite_params(cfg, sd_wind, stage)

    def make_lik(theta):
        if stage == "gamma":
            return GammaLikelihood(obs_values, kappa=theta["kappa"], alpha=cfg.alpha)
        if stage == "bernoulli":
            return BernoulliLikelihood(obs_values)
        return GenParetoLikelihood(obs_values, xi=theta["xi"], beta=cfg.beta)

    est = optimize_hyper(
        lat, make_lik, params, xatol=cfg.nm_xatol, fatol=cfg.nm_fatol, maxfev=cfg.nm_maxfev
    )
    ap = est.approx
    x = ap.x
    b = x[lat.slice_of("fixed")]
    f1 = x[lat.slice_of("ar1")]
    f2 = x[lat.slice_of("rw2")]
    rho = est.theta["rho1"]

    eta_train = np.full(n, np.nan)
    cov_ok = data.covariate_ok()
    zfull = np.column_stack([np.ones(n), data.z]) if data.z.size else np.ones((n, 1))
    eta_all = zfull @ b + f1 + f2[data.hours]
    eta_train[cov_ok] = eta_all[cov_ok]

    _, var_obs = predictor_marginals(ap)
    eta_var = np.full(n, np.nan)
    eta_var[obs_idx] = var_obs

    # target predictor: lag-h covariates observed at the origin, AR1 decayed
    # by rho^h from the last training slot, cyclic effect read at the target hour
    h = data.horizon
    if data.z_target.size and not np.all(np.isfinite(data.z_target)):
        raise WindowSkipped("missing neighbor covariate at the forecast origin")
    row = np.zeros(lat.total_dim)
    row[lat.slice_of("fixed")] = np.concatenate([[1.0], data.z_target])
    row[lat.slice_of("ar1").start + n - 1] = rho**h
    row[lat.slice_of("rw2").start + data.target_hour] = 1.0
    eta_target = float(row @ x)
    ar1_innov = (1 - rho ** (2 * h)) / (est.theta["tau1"] * (1 - rho**2))
    eta_target_var = float(latent_marginal_variance(ap, row)[0]) + ar1_innov

    return StageFit(
        stage=stage,
        origin=data.origin,
        horizon=data.horizon,
        theta=est.theta,
        eta_train=eta_train,
        eta_train_var=eta_var,
        eta_target=np.asarray(eta_target),
        eta_target_var=np.asarray(eta_target_var),
        n_obs=obs_idx.size,
        n_eval=est.n_eval,
        converged=est.converged,
        trace=est.trace,
    )


def fit_stage1(data, cfg: FitConfig) -> StageFit:
    """Gamma quantile regression on strictly positive training speeds; the
    fitted predictor exponentiates to the threshold path psi_hat."""
    if isinstance(data, SpacetimeWindowData):
        return _fit_spacetime_stage1(data, cfg)
    ok = np.isfinite(data.y) & (data.y > 0) & data.covariate_ok()
    obs_idx = np.nonzero(ok)[0]
    if obs_idx.size < cfg.min_positive:
        raise WindowSkipped(
            f"only {obs_idx.size} positive observations (< {cfg.min_positive})"
        )
    return _fit_offsite_stage(data, cfg, "gamma", obs_idx, data.y[obs_idx])


def fit_stage2(data, psi_hat: np.ndarray, cfg: FitConfig) -> StageFit | None:
    """Bernoulli-logit fit of the exceedance indicators 1{y > psi_hat}; zero
    speeds count as non-exceedances. Returns None when degenerate."""
    if isinstance(data, SpacetimeWindowData):
        return _fit_spacetime_stage2(data, psi_hat, cfg)
    ok = np.isfinite(data.y) & np.isfinite(psi_hat) & data.covariate_ok()
    obs_idx = np.nonzero(ok)[0]
    ind = (data.y[obs_idx] > psi_hat[obs_idx]).astype(float)
    if ind.size == 0 or ind.min() == ind.max():
        return None
    return _fit_offsite_stage(data, cfg, "bernoulli", obs_idx, ind)


def fit_stage3(data, psi_hat: np.ndarray, cfg: FitConfig) -> StageFit | None:
    """GP fit on threshold exceedances y - psi_hat > 0 with the shape shared
    across the window; skipped (None) below the exceedance-count floor."""
    if isinstance(data, SpacetimeWindowData):
        return _fit_spacetime_stage3(data, psi_hat, cfg)
    ok = np.isfinite(data.y) & np.isfinite(psi_hat) & data.covariate_ok()
    exceed = ok & (data.y > psi_hat)
    obs_idx = np.nonzero(exceed)[0]
    if obs_idx.size < cfg.n_min_exceed:
        return None
    x_exc = data.y[obs_idx] - psi_hat[obs_idx]
    return _fit_offsite_stage(data, cfg, "gp", obs_idx, x_exc)


# ---------------------------------------------------------------------------
# Space-time stage fits
# ---------------------------------------------------------------------------


def _fit_spacetime_stage(data: SpacetimeWindowData, cfg: FitConfig, stage: str, obs_mask, obs_values):
    S = len(data.stations)
    n = data.n_train
    s_idx, t_idx = np.nonzero(obs_mask)  # obs_mask is (S, n)
    n_obs = s_idx.size
    # block-tridiagonal field first, bordered columns last (sparse factor)
    blocks = [
        SpaceTimeBlock(data.stations, n, station_index=s_idx, time_index=t_idx),
        CyclicRw2Block(24, data.hours[t_idx]),
        FixedBlock(np.ones((n_obs, 1)), eps=cfg.eps_fixed),
    ]
    lat = assemble_latent(blocks, n_obs)
    sd_wind = _sd_wind(data.y)
    r_median = region_median_distance(data.stations)
    params = _spacetime_params(cfg, sd_wind, r_median, stage)

    def make_lik(theta):
        if stage == "gamma":
            return GammaLikelihood(obs_values, kappa=theta["kappa"], alpha=cfg.alpha)
        if stage == "bernoulli":
            return BernoulliLikelihood(obs_values)
        return GenParetoLikelihood(obs_values, xi=theta["xi"], beta=cfg.beta)

    est = optimize_hyper(
        lat, make_lik, params, xatol=cfg.nm_xatol, fatol=cfg.nm_fatol, maxfev=cfg.nm_maxfev
    )
    ap = est.approx
    x = ap.x
    mu = x[lat.slice_of("fixed")][0]
    u = x[lat.slice_of("spacetime")].reshape(n, S).T  # (S, n)
    f2 = x[lat.slice_of("rw2")]
    rho2 = est.theta["rho2"]

    eta_train = mu + u + f2[data.hours][None, :]
    _, var_obs = predictor_marginals(ap)
    eta_var = np.full((S, n), np.nan)
    eta_var[s_idx, t_idx] = var_obs

    h = data.horizon
    rows = np.zeros((S, lat.total_dim))
    st = lat.slice_of("spacetime").start
    for s in range(S):
        rows[s, lat.slice_of("fixed").start] = 1.0
        rows[s, st + (n - 1) * S + s] = rho2**h
        rows[s, lat.slice_of("rw2").start + data.target_hour] = 1.0
    eta_target = rows @ x
    innov = est.theta["sigma2"] * (1 - rho2 ** (2 * h))
    eta_target_var = latent_marginal_variance(ap, rows) + innov

    return StageFit(
        stage=stage,
        origin=data.origin,
        horizon=data.horizon,
        theta=est.theta,
        eta_train=eta_train,
        eta_train_var=eta_var,
        eta_target=eta_target,
        eta_target_var=eta_target_var,
        n_obs=n_obs,
        n_eval=est.n_eval,
        converged=est.converged,
        trace=est.trace,
    )


def _fit_spacetime_stage1(data: SpacetimeWindowData, cfg: FitConfig) -> StageFit:
    mask = np.isfinite(data.y) & (data.y > 0)
    if mask.sum() < cfg.min_positive:
        raise WindowSkipped(f"only {int(mask.sum())} positive observations")
    return _fit_spacetime_stage(data, cfg, "gamma", mask, data.y[mask])


def _fit_spacetime_stage2(data: SpacetimeWindowData, psi_hat, cfg: FitConfig):
    mask = np.isfinite(data.y) & np.isfinite(psi_hat)
    ind = (data.y[mask] > psi_hat[mask]).astype(float)
    if ind.size == 0 or ind.min() == ind.max():
        return None
    return _fit_spacetime_stage(data, cfg, "bernoulli", mask, ind)


def _fit_spacetime_stage3(data: SpacetimeWindowData, psi_hat, cfg: FitConfig):
    mask = np.isfinite(data.y) & np.isfinite(psi_hat) & (data.y > psi_hat)
    if mask.sum() < cfg.n_min_exceed:
        return None
    return _fit_spacetime_stage(data, cfg, "gp", mask, (data.y - psi_hat)[mask])


# ---------------------------------------------------------------------------
# Splice sampling
# ---------------------------------------------------------------------------


def splice_sample(
    m: int,
    rng: np.random.Generator,
    psi: float,
    kappa: float,
    alpha: float,
    p: float,
    gp: GPQ | None,
    truncated: bool = False,
) -> tuple[np.ndarray, dict]:
    """Draw m spliced predictive samples.

    Each draw fires a Bernoulli(p) exceedance indicator: exceedances are
    psi + GP draws (or Gamma-tail draws when no GP fit is available), the rest
    are plain Gamma draws, or truncated-Gamma (below psi) in truncated mode.
    Everything is inverse-CDF so draws are a pure function of the rng stream.
    """
    q = GammaQ(psi=psi, kappa=kappa, alpha=alpha)
    u_ind = rng.uniform(size=m)
    u_val = rng.uniform(size=m)
    exceed = u_ind < p
    draws = np.empty(m)
    flags = {"gamma": True, "bernoulli": p not in (0.0, 1.0), "gp": gp is not None}
    if truncated:
        draws[~exceed] = truncated_gamma_q_ppf(u_val[~exceed], q)
    else:
        draws[~exceed] = gamma_q_quantile(_open_unit(u_val[~exceed]), q)
    if np.any(exceed):
        ue = _open_unit(u_val[exceed])
        if gp is not None:
            draws[exceed] = psi + gp_q_quantile(ue, gp)
        else:
            # Gamma-tail fallback: conditional draw above the threshold
            draws[exceed] = gamma_q_quantile(alpha + ue * (1 - alpha), q)
    return draws, flags


def _open_unit(u: np.ndarray) -> np.ndarray:
    """Keep uniforms strictly inside (0,1) for inverse-CDF transforms."""
    return np.clip(u, 1e-15, 1 - 1e-15)


def gamma_only_sample(m, rng, psi, kappa, alpha) -> np.ndarray:
    """Baseline sampler: Gamma bulk only (no exceedance correction)."""
    q = GammaQ(psi=psi, kappa=kappa, alpha=alpha)
    return gamma_q_quantile(_open_unit(rng.uniform(size=m)), q)


def fit_window(data, cfg: FitConfig, baseline: bool = False) -> dict:
    """Run the applicable stage fits for one window: Stage 1 always, Stages 2-3
    unless this is a Gamma-only baseline or they degenerate/skip."""
    stage1 = fit_stage1(data, cfg)
    psi_train = np.exp(stage1.eta_train)
    stage2 = stage3 = None
    if not baseline:
        stage2 = fit_stage2(data, psi_train, cfg)
        stage3 = fit_stage3(data, psi_train, cfg)
    return {"stage1": stage1, "stage2": stage2, "stage3": stage3, "psi_train": psi_train}


def forecast_window(
    data,
    cfg: FitConfig,
    rng: np.random.Generator,
    baseline: bool = False,
    fits: dict | None = None,
) -> list[PredictiveSample]:
    """Fit the stages on one window and emit predictive samples for its target.

    Off-site windows give one sample per call; space-time windows give one per
    station. Stages that cannot be fitted are recorded in the flags and the
    sampler falls back to the Gamma bulk.
    """
    fits = fit_window(data, cfg, baseline=baseline) if fits is None else fits
    stage1, stage2, stage3 = fits["stage1"], fits["stage2"], fits["stage3"]
    psi_train = fits["psi_train"]
    psi_target = np.exp(stage1.eta_target)
    kappa = stage1.theta["kappa"]

    if isinstance(data, SpacetimeWindowData):
        station_ids = [s.id for s in data.stations]
        psi_t = np.atleast_1d(psi_target)
    else:
        station_ids = [data.station_id]
        psi_t = np.atleast_1d(psi_target)

    out = []
    for k, sid in enumerate(station_ids):
        flags = {
            "baseline": baseline,
            "stage2_fitted": stage2 is not None,
            "stage3_fitted": stage3 is not None,
        }
        if baseline:
            draws = gamma_only_sample(cfg.m_draws, rng, float(psi_t[k]), kappa, cfg.alpha)
            p_hat, phi_hat, xi_hat = 0.0, None, None
        else:
            if stage2 is None:
                # degenerate indicators: clamp to the observed extreme
                ok = np.isfinite(data.y) & np.isfinite(psi_train)
                frac = float(np.mean(data.y[ok] > psi_train[ok])) if np.any(ok) else 0.0
                p_hat = cfg.p_clamp if frac < 0.5 else 1.0 - cfg.p_clamp
            else:
                eta2 = np.atleast_1d(stage2.eta_target)[k]
                p_hat = float(np.clip(special.expit(eta2), cfg.p_clamp, 1 - cfg.p_clamp))
            gp = None
            xi_hat, phi_hat = None, None
            if stage3 is not None:
                xi_hat = float(stage3.theta["xi"])
                phi_hat = float(np.exp(np.atleast_1d(stage3.eta_target)[k]))
                gp = GPQ(phi=phi_hat, xi=xi_hat, beta=cfg.beta)
            draws, sflags = splice_sample(
                cfg.m_draws,
                rng,
                float(psi_t[k]),
                kappa,
                cfg.alpha,
                p_hat,
                gp,
                truncated=cfg.truncated,
            )
            flags.update(sflags)
        out.append(
            PredictiveSample(
                station_id=sid,
                origin=data.origin,
                horizon=data.horizon,
                draws=draws,
                psi_hat=float(psi_t[k]),
                p_hat=float(p_hat) if not baseline else 0.0,
                phi_hat=phi_hat,
                xi_hat=xi_hat,
                kappa_hat=float(kappa),
                alpha=cfg.alpha,
                beta=cfg.beta,
                truncated=cfg.truncated,
                flags=flags,
            )
        )
    return out


def stagefit_to_dict(fit: StageFit | None) -> dict | None:
    """JSON-ready summary: hyperparameters on natural scales, predictor
    means/variances, and the optimizer/Newton convergence trace."""
    if fit is None:
        return None
    return {
        "stage": fit.stage,
        "origin": fit.origin,
        "horizon": fit.horizon,
        "theta": {k: float(v) for k, v in fit.theta.items()},
        "eta_train_mean": np.asarray(fit.eta_train).tolist(),
        "eta_train_var": np.asarray(fit.eta_train_var).tolist(),
        "eta_target_mean": np.asarray(fit.eta_target).tolist(),
        "eta_target_var": np.asarray(fit.eta_target_var).tolist(),
        "n_obs": fit.n_obs,
        "n_eval": fit.n_eval,
        "converged": fit.converged,
        "trace": [[int(i), float(v)] for i, v in fit.trace],
    }


# ---------------------------------------------------------------------------
# Generative simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulationParams:
    """True parameters for the synthetic data generator."""

    mode: str = "offsite"
    kappa: float = 10.0
    xi: float = 0.1
    alpha: float = 0.8
    beta: float = 0.5
    mu: float = 1.5  # intercept of the log-threshold predictor
    rho1: float = 0.8
    tau1: float = 4.0  # AR1 innovation precision
    tau2: float = 50.0  # cyclic RW2 precision
    neighbor_coefs: tuple = ()  # ((station, ((source, coef), ...)), ...)
    phi_ratio: float | None = None  # None: tail continues the Gamma's median exceedance
    zero_prob: float = 0.0
    missing_prob: float = 0.0
    truncated: bool = True
    # space-time components
    sigma2: float = 0.25
    range_km: float = 100.0
    rho2: float = 0.9
    # wind-direction mixture shared by all stations: ((mu, upsilon, weight), ...)
    direction_mixture: tuple = ((0.8, 6.0, 0.6), (3.9, 6.0, 0.4))

    def phi_over_psi(self) -> float:
        if self.phi_ratio is not None:
            return self.phi_ratio
        c_alpha = float(special.gammaincinv(self.kappa, self.alpha))
        c_mid = float(special.gammaincinv(self.kappa, self.alpha + self.beta * (1 - self.alpha)))
        return (c_mid - c_alpha) / c_alpha


def _sample_ar1(n, rho, tau, rng):
    x = np.empty(n)
    x[0] = rng.normal(scale=1.0 / math.sqrt(tau * (1 - rho**2)))
    eps = rng.normal(scale=1.0 / math.sqrt(tau), size=n - 1)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + eps[t - 1]
    return x


def _constrain_ar1_sum(x, rho, tau):
    """Exact conditioning of an AR1 draw on a zero sum (kriging on the path)."""
    from .latent import Ar1Spec, ar1_precision
    from scipy.sparse.linalg import spsolve

    Q = ar1_precision(Ar1Spec(n=x.size, rho=rho, tau=tau)).tocsc()
    v = spsolve(Q, np.ones(x.size))
    return x - v * (x.sum() / v.sum())


def _sample_cyclic_rw2(n, tau, rng):
    """Constrained draw via the circulant eigenbasis, skipping the null mode."""
    from .latent import CyclicRw2Spec, cyclic_rw2_precision

    Q = cyclic_rw2_precision(CyclicRw2Spec(n=n, tau=tau)).toarray()
    vals, vecs = np.linalg.eigh(Q)
    z = rng.normal(size=n)
    keep = vals > 1e-9
    coefs = np.where(keep, z / np.sqrt(np.where(keep, vals, 1.0)), 0.0)
    draw = vecs @ coefs
    return draw - draw.mean()  # numerically re-center the exact-null residue


def _splice_emit(psi, params: SimulationParams, rng):
    """Emit one speed from the spliced distribution at threshold psi."""
    if params.zero_prob > 0 and rng.uniform() < params.zero_prob:
        return 0.0
    q = GammaQ(psi=psi, kappa=params.kappa, alpha=params.alpha)
    if rng.uniform() < 1 - params.alpha:
        phi = params.phi_over_psi() * psi
        gp = GPQ(phi=phi, xi=params.xi, beta=params.beta)
        return psi + float(gp_q_quantile(rng.uniform(low=1e-15, high=1 - 1e-15), gp))
    if params.truncated:
        return float(truncated_gamma_q_ppf(rng.uniform(low=1e-15, high=1 - 1e-15), q))
    return float(gamma_q_quantile(rng.uniform(low=1e-15, high=1 - 1e-15), q))


def _sample_directions(n, mixture, rng):
    mus = np.array([m for m, _, _ in mixture])
    ups = np.array([u for _, u, _ in mixture])
    ws = np.array([w for _, _, w in mixture], dtype=float)
    ws = ws / ws.sum()
    comp = rng.choice(len(mus), size=n, p=ws)
    return np.mod(rng.vonmises(mus[comp], np.maximum(ups[comp], 1e-12)), 2 * math.pi)


def simulate_dataset(
    params: SimulationParams,
    stations: list[Station],
    T: int,
    seed: int = 0,
    start: np.datetime64 | None = None,
) -> tuple[list[StationSeries], dict]:
    """Generate synthetic station series from the spliced model together with
    the ground-truth latent paths (for recovery and calibration tests)."""
    rng = np.random.default_rng(seed)
    start = np.datetime64("2012-01-01T00:00", "m") if start is None else start
    if T == 0:
        empty = [
            StationSeries(s.id, start, np.empty(0), np.empty(0)) for s in stations
        ]
        return empty, {"params": params, "eta": {}, "psi": {}}
    hours = np.arange(T) % 24
    truth: dict = {"params": params, "eta": {}, "psi": {}}

    if params.mode == "spacetime":
        S = len(stations)
        cov = matern_cov_matrix(stations, MaternSpec(sigma2=params.sigma2, range_km=params.range_km))
        L = np.linalg.cholesky(cov)
        u = np.empty((S, T))
        u[:, 0] = L @ rng.normal(size=S)
        innov_scale = math.sqrt(1 - params.rho2**2)
        for t in range(1, T):
            u[:, t] = params.rho2 * u[:, t - 1] + innov_scale * (L @ rng.normal(size=S))
        f2 = _sample_cyclic_rw2(24, params.tau2, rng)
        eta = params.mu + u + f2[hours][None, :]
        truth["u"] = u
        truth["f2"] = f2
        series = []
        for k, st in enumerate(stations):
            psi = np.exp(eta[k])
            speed = np.array([_splice_emit(p, params, rng) for p in psi])
            if params.missing_prob > 0:
                speed[rng.uniform(size=T) < params.missing_prob] = np.nan
            direction = _sample_directions(T, params.direction_mixture, rng)
            series.append(StationSeries(st.id, start, speed, direction))
            truth["eta"][st.id] = eta[k]
            truth["psi"][st.id] = psi
        return series, truth

    if params.mode != "offsite":
        raise ValueError(f"unknown simulation mode {params.mode!r}")

    coef_map = {sid: tuple(pairs) for sid, pairs in params.neighbor_coefs}
    speeds: dict[str, np.ndarray] = {}
    series = []
    order = _generation_order([s.id for s in stations], coef_map)
    by_id = {s.id: s for s in stations}
    for sid in order:
        f1 = _constrain_ar1_sum(_sample_ar1(T, params.rho1, params.tau1, rng), params.rho1, params.tau1)
        f2 = _sample_cyclic_rw2(24, params.tau2, rng)
        eta = params.mu + f1 + f2[hours]
        for src, coef in coef_map.get(sid, ()):
            lagged = np.concatenate([[speeds[src][0]], speeds[src][:-1]])
            eta = eta + coef * lagged
        psi = np.exp(eta)
        speed = np.array([_splice_emit(p, params, rng) for p in psi])
        speeds[sid] = speed.copy()
        if params.missing_prob > 0:
            speed = speed.copy()
            speed[rng.uniform(size=T) < params.missing_prob] = np.nan
        direction = _sample_directions(T, params.direction_mixture, rng)
        series.append(StationSeries(sid, start, speed, direction))
        truth["eta"][sid] = eta
        truth["psi"][sid] = psi
        truth.setdefault("f1", {})[sid] = f1
        truth.setdefault("f2", {})[sid] = f2
    series.sort(key=lambda s: [st.id for st in stations].index(s.station_id))
    return series, truth


def _generation_order(ids, coef_map):
    """Topological order so lagged sources are generated before dependents."""
    remaining = list(ids)
    done: list[str] = []
    while remaining:
        progressed = False
        for sid in list(remaining):
            deps = [src for src, _ in coef_map.get(sid, ())]
            if all(d in done for d in deps):
                done.append(sid)
                remaining.remove(sid)
                progressed = True
        if not progressed:
            raise ValueError("neighbor_coefs contain a dependency cycle")
    return done


# ---------------------------------------------------------------------------
# Window extraction from series
# ---------------------------------------------------------------------------


def offsite_window_data(
    series: dict[str, StationSeries],
    station_id: str,
    neighbor_ids,
    train_start: int,
    origin: int,
    horizon: int,
) -> OffsiteWindowData:
    """Slice one training window plus target covariates; forecasting code never
    sees the target observation (fitting reads only the training slice)."""
    s = series[station_id]
    y = s.speed[train_start : origin + 1]
    hours = s.hours_of_day()[train_start : origin + 1]
    n = y.size
    J = len(neighbor_ids)
    z = np.full((n, J), np.nan)
    z_target = np.full(J, np.nan)
    for j, nb in enumerate(neighbor_ids):
        nb_speed = series[nb].speed
        src = np.arange(train_start, origin + 1) - horizon
        valid = src >= 0
        z[valid, j] = nb_speed[src[valid]]
        z_target[j] = nb_speed[origin]
    target_hour = int((s.hours_of_day()[origin] + horizon) % 24)
    return OffsiteWindowData(
        station_id=station_id,
        origin=origin,
        horizon=horizon,
        y=y,
        hours=hours,
        neighbor_ids=tuple(neighbor_ids),
        z=z,
        z_target=z_target,
        target_hour=target_hour,
    )


def spacetime_window_data(
    series: dict[str, StationSeries],
    stations: list[Station],
    train_start: int,
    origin: int,
    horizon: int,
) -> SpacetimeWindowData:
    ys = []
    hours = None
    for st in stations:
        s = series[st.id]
        ys.append(s.speed[train_start : origin + 1])
        if hours is None:
            hours = s.hours_of_day()[train_start : origin + 1]
            target_hour = int((s.hours_of_day()[origin] + horizon) % 24)
    return SpacetimeWindowData(
        stations=tuple(stations),
        origin=origin,
        horizon=horizon,
        y=np.vstack(ys),
        hours=hours,
        target_hour=target_hour,
    )
