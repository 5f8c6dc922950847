"""Run configuration: a flat INI-style file with sections, every key
overridable from the command line one-to-one. Defaults reproduce the reference
setup (alpha 0.8, beta 0.5, 5-day training windows, 10,000 draws)."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass

from .forecast import FitConfig

MODES = ("offsite", "spacetime", "baseline_offsite", "baseline_spacetime")


@dataclass
class RunConfig:
    # data
    measurements: str = ""
    registry: str = ""
    output_dir: str = "out"
    neighbors_file: str = ""
    # model
    mode: str = "offsite"
    alpha: float = 0.8
    beta: float = 0.5
    # windows
    train_days: float = 5.0
    stride: int = 24
    horizons: tuple[int, ...] = (1, 2, 3)
    # priors
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
    eps_fixed: float = 1e-6
    # neighbors
    alpha_angle: float = math.pi / 8
    d_max_km: float = 176.0
    m_candidates: tuple[int, ...] = (1, 2, 3)
    bearing_convention: str = "blowing_from"
    # forecast
    m_draws: int = 10000
    truncated: bool = False
    n_min_exceed: int = 30
    min_positive: int = 50
    seed: int = 0
    # scoring
    ql_tau: float = 0.99
    pit_cutoff: float = 0.6
    tail_q: float = 0.95
    levels: tuple[float, ...] = tuple(round(0.1 * k, 10) for k in range(1, 10))
    # run
    jobs: int = 0  # 0: use the cpu count
    nm_xatol: float = 1e-4
    nm_maxfev: int = 500
    # simulate
    sim_T: int = 1000
    sim_n_stations: int = 5
    sim_region: str = "East"
    sim_spacing_km: float = 40.0
    sim_kappa: float = 10.0
    sim_xi: float = 0.1
    sim_rho1: float = 0.8
    sim_tau1: float = 50.0
    sim_tau2: float = 200.0
    sim_mu: float = 1.5
    sim_neighbor_coef: float = 0.03
    sim_zero_prob: float = 0.0
    sim_mode: str = "offsite"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for p in (self.alpha, self.beta, self.rho_a, self.prec_a, self.sigma_a, self.range_a,
                  self.xi_a, self.ql_tau, self.tail_q):
            if not 0 < p < 1:
                raise ValueError(f"probability {p} outside (0,1)")
        if any(h < 1 for h in self.horizons):
            raise ValueError("horizons must be positive")
        if self.bearing_convention not in ("blowing_from", "blowing_to"):
            raise ValueError("bearing_convention must be blowing_from or blowing_to")

    @property
    def train_hours(self) -> int:
        return int(round(self.train_days * 24))

    @property
    def baseline(self) -> bool:
        return self.mode.startswith("baseline")

    @property
    def latent_kind(self) -> str:
        return "spacetime" if self.mode.endswith("spacetime") else "offsite"

    def fit_config(self) -> FitConfig:
        return FitConfig(
            alpha=self.alpha,
            beta=self.beta,
            m_draws=self.m_draws,
            n_min_exceed=self.n_min_exceed,
            min_positive=self.min_positive,
            eps_fixed=self.eps_fixed,
            rho_u=self.rho_u,
            rho_a=self.rho_a,
            prec_a=self.prec_a,
            sigma_factor=self.sigma_factor,
            sigma_a=self.sigma_a,
            range_a=self.range_a,
            kappa_shape=self.kappa_shape,
            kappa_rate=self.kappa_rate,
            xi_u=self.xi_u,
            xi_a=self.xi_a,
            tau1_shape=self.tau1_shape,
            tau1_rate=self.tau1_rate,
            truncated=self.truncated,
            nm_xatol=self.nm_xatol,
            nm_maxfev=self.nm_maxfev,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTIONED_KEYS = {
    "data": ("measurements", "registry", "output_dir", "neighbors_file"),
    "model": ("mode", "alpha", "beta"),
    "windows": ("train_days", "stride", "horizons"),
    "priors": (
        "rho_u", "rho_a", "prec_a", "sigma_factor", "sigma_a", "range_a",
        "kappa_shape", "kappa_rate", "xi_u", "xi_a", "tau1_shape", "tau1_rate", "eps_fixed",
    ),
    "neighbors": ("alpha_angle", "d_max_km", "m_candidates", "bearing_convention"),
    "forecast": ("m_draws", "truncated", "n_min_exceed", "min_positive", "seed"),
    "scoring": ("ql_tau", "pit_cutoff", "tail_q", "levels"),
    "run": ("jobs", "nm_xatol", "nm_maxfev"),
    "simulate": (
        "sim_T", "sim_n_stations", "sim_region", "sim_spacing_km", "sim_kappa", "sim_xi",
        "sim_rho1", "sim_tau1", "sim_tau2", "sim_mu", "sim_neighbor_coef", "sim_zero_prob",
        "sim_mode",
    ),
}


def _coerce(name: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        elem = default[0] if default else 1
        return tuple(type(elem)(float(p)) if isinstance(elem, float) else type(elem)(p) for p in parts)
    return text


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional INI file plus override pairs."""
    values: dict = {}
    defaults = RunConfig()
    if path:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive (sim_T)
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONED_KEYS:
                raise ValueError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                if key not in _SECTIONED_KEYS[section]:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                values[key] = _coerce(key, text, getattr(defaults, key))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if not hasattr(defaults, key):
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(val, str):
            val = _coerce(key, val, getattr(defaults, key))
        values[key] = val
    return RunConfig(**values)


def write_default_config(path: str) -> None:
    cfg = RunConfig()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in _SECTIONED_KEYS.items():
        parser[section] = {}
        for k in keys:
            v = getattr(cfg, k)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parser[section][k] = str(v)
    with open(path, "w") as fh:
        parser.write(fh)
