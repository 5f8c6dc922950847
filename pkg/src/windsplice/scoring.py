"""Forecast verification: empirical CRPS, threshold-weighted CRPS, quantile
loss, reliability-diagram data, and randomized conditional PIT histograms.

All scores operate on predictive samples (the empirical CDF of the draws),
matching how the forecasts are produced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

DEFAULT_LEVELS = tuple(np.round(np.arange(0.1, 0.95, 0.1), 10))
PIT_BINS = 8


@dataclass(frozen=True)
class ScoreConfig:
    tail_threshold_r: float  # per-station 95% training quantile
    ql_tau: float = 0.99
    pit_cutoff: float = 0.6
    levels: tuple[float, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        if not math.isfinite(self.tail_threshold_r):
            raise ValueError("tail threshold must be finite")
        if not 0 < self.ql_tau < 1:
            raise ValueError("ql_tau must be in (0,1)")
        if not 0 <= self.pit_cutoff < 1:
            raise ValueError("pit_cutoff must be in [0,1)")


def crps_empirical(draws: np.ndarray, y) -> np.ndarray | float:
    """Sample CRPS: mean |x_i - y| - mean pairwise |x_i - x_j| / 2.

    `draws` may be (m,) for one target or (n, m) for a batch with y of shape (n,).
    """
    draws = np.asarray(draws, dtype=float)
    scalar = draws.ndim == 1
    draws = np.atleast_2d(draws)
    n, m = draws.shape
    if m < 1:
        raise ValueError("need at least one draw")
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    term1 = np.mean(np.abs(draws - y[:, None]), axis=1)
    s = np.sort(draws, axis=1)
    coef = 2.0 * np.arange(m) - m + 1.0
    term2 = (s @ coef) / (m * m)
    out = np.maximum(term1 - term2, 0.0)  # clamp pure round-off; CRPS >= 0
    return float(out[0]) if scalar else out


def _segment_cdf_and_obs(draws: np.ndarray, y: float, extra: float | None):
    """Breakpoints plus the step values of the predictive CDF and 1{y <= x}."""
    pts = [draws, np.array([y])]
    if extra is not None:
        pts.append(np.array([extra]))
    b = np.unique(np.concatenate(pts))
    f = np.searchsorted(np.sort(draws), b, side="right") / draws.size
    h = (b >= y).astype(float)
    return b, f, h


def twcrps(draws: np.ndarray, y: float, weight: str = "indicator", r: float = 0.0) -> float:
    """Threshold-weighted CRPS of the empirical predictive CDF.

    weight='indicator' uses w(x) = 1{x >= r}; weight='normal_cdf' uses
    w(x) = Phi(x | r, 1). The integrand is piecewise constant between draw
    positions, so each segment is integrated in closed form.
    """
    draws = np.asarray(draws, dtype=float).ravel()
    if draws.size < 1:
        raise ValueError("need at least one draw")
    y = float(y)
    if weight == "indicator":
        b, f, h = _segment_cdf_and_obs(draws, y, extra=r if math.isfinite(r) else None)
        sq = (f[:-1] - h[:-1]) ** 2
        lo = np.maximum(b[:-1], r) if math.isfinite(r) else b[:-1]
        seg = np.clip(b[1:] - lo, 0.0, None)
        return float(np.sum(sq * seg))
    if weight == "normal_cdf":
        b, f, h = _segment_cdf_and_obs(draws, y, extra=None)
        sq = (f[:-1] - h[:-1]) ** 2
        # antiderivative of Phi(x - r): (x-r) Phi(x-r) + phi(x-r)
        z = b - r
        anti = z * stats.norm.cdf(z) + stats.norm.pdf(z)
        return float(np.sum(sq * (anti[1:] - anti[:-1])))
    raise ValueError(f"unknown weight {weight!r}")


def quantile_loss(y: float, q: float, tau: float) -> float:
    """Pinball loss at level tau."""
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0,1)")
    if y >= q:
        return tau * (y - q)
    return (1 - tau) * (q - y)


def empirical_quantile(draws: np.ndarray, q) -> np.ndarray | float:
    """Type-1 empirical quantile from sorted draws: x_(ceil(q m))."""
    draws = np.asarray(draws, dtype=float)
    scalar_draws = draws.ndim == 1
    draws = np.atleast_2d(draws)
    m = draws.shape[1]
    q = np.asarray(q, dtype=float)
    idx = np.maximum(np.ceil(q * m).astype(int) - 1, 0)
    s = np.sort(draws, axis=1)
    out = s[:, idx]
    if scalar_draws:
        out = out[0]
    return float(out) if out.ndim == 0 else out


def average_scores(scores) -> tuple[float, int]:
    """Mean over finite entries plus the count of excluded (NaN) targets."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("empty score list")
    ok = np.isfinite(scores)
    excluded = int(np.sum(~ok))
    if not np.any(ok):
        return math.nan, excluded
    return float(np.mean(scores[ok])), excluded


def reliability_curve(draws: np.ndarray, obs: np.ndarray, levels=DEFAULT_LEVELS):
    """Observed coverage of the predictive quantiles: for each nominal level q,
    the frequency of y <= F_hat^{-1}(q) across targets."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    obs = np.asarray(obs, dtype=float)
    ok = np.isfinite(obs)
    if not np.any(ok):
        raise ValueError("no finite observations")
    qs = empirical_quantile(draws[ok], np.asarray(levels))
    observed = np.mean(obs[ok, None] <= qs, axis=0)
    return np.asarray(levels, dtype=float), observed


def pit_values(draws: np.ndarray, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomized PIT: rank of y among the draws with a uniform tie-break, so a
    perfectly calibrated forecast gives exactly uniform values."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    obs = np.asarray(obs, dtype=float)
    n, m = draws.shape
    below = np.sum(draws < obs[:, None], axis=1)
    ties = np.sum(draws == obs[:, None], axis=1)
    v = rng.uniform(size=n)
    u = (below + v * (1 + ties)) / (m + 1)
    u[~np.isfinite(obs)] = np.nan
    return u


def conditional_pit(
    draws: np.ndarray,
    obs: np.ndarray,
    cutoff: float = 0.6,
    rng: np.random.Generator | None = None,
    bins: int = PIT_BINS,
):
    """Histogram of PIT values conditional on exceeding the cutoff, over `bins`
    equal cells of (cutoff, 1]. Returns (bin_edges, counts, n_conditional)."""
    if not 0 <= cutoff < 1:
        raise ValueError("cutoff must be in [0,1)")
    rng = np.random.default_rng(0) if rng is None else rng
    u = pit_values(draws, obs, rng)
    u = u[np.isfinite(u)]
    cond = u[u > cutoff]
    edges = cutoff + (1.0 - cutoff) * np.arange(bins + 1) / bins
    counts, _ = np.histogram(cond, bins=edges)
    return edges, counts, int(cond.size)


def pit_uniformity_pvalue(counts: np.ndarray) -> float:
    """Chi-square goodness-of-fit p-value against a uniform histogram."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return math.nan
    expected = np.full(counts.size, total / counts.size)
    stat = float(np.sum((counts - expected) ** 2 / expected))
    return float(stats.chi2.sf(stat, counts.size - 1))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

METRICS = ("crps", "twcrps_indicator", "twcrps_normal", "quantile_loss")


@dataclass
class ScoreReport:
    """Per-(station, horizon) average scores plus calibration diagnostics."""

    model: str
    rows: list = field(default_factory=list)  # dicts: station, horizon, metric, value, n, excluded
    reliability: list = field(default_factory=list)  # dicts: station, horizon, level, observed
    pit: list = field(default_factory=list)  # dicts: station, horizon, bin_low, bin_high, count
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def average_row(self, metric: str, horizon: int) -> float:
        vals = [
            r["value"]
            for r in self.rows
            if r["metric"] == metric and r["horizon"] == horizon and r["station"] != "Avg."
        ]
        return float(np.mean(vals)) if vals else math.nan


def score_targets(
    draws: np.ndarray,
    obs: np.ndarray,
    config: ScoreConfig,
) -> dict[str, np.ndarray]:
    """Per-target scores for one (station, horizon) batch of predictive samples."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    obs = np.asarray(obs, dtype=float)
    n = obs.size
    crps = np.full(n, np.nan)
    tw1 = np.full(n, np.nan)
    tw2 = np.full(n, np.nan)
    ql = np.full(n, np.nan)
    q_hat = empirical_quantile(draws, config.ql_tau)
    q_hat = np.atleast_1d(q_hat)
    ok = np.isfinite(obs)
    if np.any(ok):
        crps[ok] = crps_empirical(draws[ok], obs[ok])
    for i in np.nonzero(ok)[0]:
        tw1[i] = twcrps(draws[i], obs[i], "indicator", config.tail_threshold_r)
        tw2[i] = twcrps(draws[i], obs[i], "normal_cdf", config.tail_threshold_r)
        ql[i] = quantile_loss(obs[i], float(q_hat[i]), config.ql_tau)
    return {"crps": crps, "twcrps_indicator": tw1, "twcrps_normal": tw2, "quantile_loss": ql}


def build_report(
    model_name: str,
    per_target: dict,  # (station, horizon) -> dict(draws (n,m), obs (n,), config ScoreConfig)
    pit_cutoff: float = 0.6,
    levels=DEFAULT_LEVELS,
    pit_seed: int = 0,
) -> ScoreReport:
    """Aggregate per-target scores into Table-1-style rows plus reliability and
    conditional-PIT diagnostics, with a bottom Avg. row per horizon/metric."""
    report = ScoreReport(model=model_name)
    horizons = sorted({h for (_, h) in per_target})
    for (station, horizon), batch in sorted(per_target.items()):
        scores = score_targets(batch["draws"], batch["obs"], batch["config"])
        for metric in METRICS:
            mean, excluded = average_scores(scores[metric])
            report.rows.append(
                {
                    "station": station,
                    "horizon": horizon,
                    "metric": metric,
                    "value": mean,
                    "n": int(np.sum(np.isfinite(scores[metric]))),
                    "excluded": excluded,
                }
            )
        levels_arr, observed = reliability_curve(batch["draws"], batch["obs"], levels)
        for lv, ob in zip(levels_arr, observed):
            report.reliability.append(
                {"station": station, "horizon": horizon, "level": float(lv), "observed": float(ob)}
            )
        rng = np.random.default_rng(pit_seed)
        edges, counts, n_cond = conditional_pit(batch["draws"], batch["obs"], pit_cutoff, rng)
        for lo, hi, ct in zip(edges[:-1], edges[1:], counts):
            report.pit.append(
                {
                    "station": station,
                    "horizon": horizon,
                    "bin_low": float(lo),
                    "bin_high": float(hi),
                    "count": int(ct),
                }
            )
    for horizon in horizons:
        for metric in METRICS:
            report.rows.append(
                {
                    "station": "Avg.",
                    "horizon": horizon,
                    "metric": metric,
                    "value": report.average_row(metric, horizon),
                    "n": 0,
                    "excluded": 0,
                }
            )
    report.meta = {
        "pit_cutoff": pit_cutoff,
        "levels": list(map(float, levels)),
        "twcrps_indicator_note": "indicator-weighted twCRPS is not a proper scoring rule",
    }
    return report


def score_pipeline(model_run: dict, baseline_run: dict, **kwargs) -> tuple[ScoreReport, ScoreReport]:
    """Paired scoring of a model run against its baseline on identical targets.

    Both runs map (station, horizon) -> batch dicts; a mismatch in target keys
    or target counts is an error listing the offenders.
    """
    keys_m, keys_b = set(model_run), set(baseline_run)
    if keys_m != keys_b:
        raise ValueError(f"target sets differ: only-model={sorted(keys_m - keys_b)} "
                         f"only-baseline={sorted(keys_b - keys_m)}")
    bad = [
        k
        for k in keys_m
        if not np.array_equal(
            np.asarray(model_run[k]["obs"], dtype=float),
            np.asarray(baseline_run[k]["obs"], dtype=float),
            equal_nan=True,
        )
    ]
    if bad:
        raise ValueError(f"observation vectors differ for targets: {sorted(bad)}")
    model_name = kwargs.pop("model_name", "model")
    baseline_name = kwargs.pop("baseline_name", "baseline")
    return (
        build_report(model_name, model_run, **kwargs),
        build_report(baseline_name, baseline_run, **kwargs),
    )


def report_rows_csv(report: ScoreReport) -> str:
    lines = ["model,station,horizon,metric,value,n,excluded"]
    for r in report.rows:
        lines.append(
            f"{report.model},{r['station']},{r['horizon']},{r['metric']},"
            f"{r['value']!r},{r['n']},{r['excluded']}"
        )
    return "\n".join(lines) + "\n"


def report_reliability_csv(report: ScoreReport) -> str:
    lines = ["model,station,horizon,level,observed"]
    for r in report.reliability:
        lines.append(
            f"{report.model},{r['station']},{r['horizon']},{r['level']!r},{r['observed']!r}"
        )
    return "\n".join(lines) + "\n"


def report_pit_csv(report: ScoreReport) -> str:
    lines = ["model,station,horizon,bin_low,bin_high,count"]
    for r in report.pit:
        lines.append(
            f"{report.model},{r['station']},{r['horizon']},{r['bin_low']!r},"
            f"{r['bin_high']!r},{r['count']}"
        )
    return "\n".join(lines) + "\n"
