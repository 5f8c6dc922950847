"""Command-line entry point: simulate -> select-neighbors -> fit/forecast ->
score -> report, with reproducible manifests.

Exit codes: 0 success, 1 job failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, write_default_config
from .datamodel import (
    Station,
    align_series,
    effective_train_scale,
    ingest_csv,
    load_registry,
    make_windows,
    save_registry,
    emit_csv,
)
from .forecast import (
    PredictiveSample,
    SimulationParams,
    WindowSkipped,
    fit_window,
    forecast_window,
    offsite_window_data,
    simulate_dataset,
    spacetime_window_data,
    stagefit_to_dict,
)
from .neighbors import select_M_by_bic, select_neighbors
from .scoring import (
    ScoreConfig,
    build_report,
    report_pit_csv,
    report_reliability_csv,
    report_rows_csv,
)


class UsageError(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def job_seed(master_seed: int, *parts) -> np.random.Generator:
    """Deterministic per-job stream: the job identity hashes into the spawn key,
    so scheduling order cannot change any draw."""
    key = [zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=key))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _default_layout(cfg: RunConfig) -> list[Station]:
    """Stations on a jittered line along the dominant simulated wind axis
    (bearing 0.8 rad), so upwind neighbors exist for the off-site model."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=[999]))
    axis = 0.8  # first mode of SimulationParams.direction_mixture
    out = []
    for k in range(cfg.sim_n_stations):
        along = k * cfg.sim_spacing_km + rng.uniform(-3, 3)
        across = rng.uniform(-0.1, 0.1) * cfg.sim_spacing_km
        east = along * math.sin(axis) + across * math.cos(axis)
        north = along * math.cos(axis) - across * math.sin(axis)
        out.append(Station(f"S{k:02d}", float(east), float(north), cfg.sim_region))
    return out


def cmd_simulate(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.registry and Path(cfg.registry).exists():
        registry = load_registry(cfg.registry)
        stations = list(registry.values())
    else:
        stations = _default_layout(cfg)
        save_registry({s.id: s for s in stations}, out / "registry.csv")
    chain = tuple(
        (stations[k].id, ((stations[k - 1].id, cfg.sim_neighbor_coef),))
        for k in range(1, len(stations))
    )
    params = SimulationParams(
        mode=cfg.sim_mode,
        kappa=cfg.sim_kappa,
        xi=cfg.sim_xi,
        alpha=cfg.alpha,
        beta=cfg.beta,
        mu=cfg.sim_mu,
        rho1=cfg.sim_rho1,
        tau1=cfg.sim_tau1,
        tau2=cfg.sim_tau2,
        neighbor_coefs=chain if cfg.sim_mode == "offsite" else (),
        zero_prob=cfg.sim_zero_prob,
    )
    series, truth = simulate_dataset(params, stations, T=cfg.sim_T, seed=cfg.seed)
    emit_csv(series, out / "measurements.csv")
    truth_out = {
        "params": {k: v for k, v in vars(params).items() if not k.startswith("_")},
        "seed": cfg.seed,
        "T": cfg.sim_T,
        "stations": [s.id for s in stations],
    }
    _atomic_write(out / "truth.json", _dump_json(truth_out))
    print(f"wrote {out / 'measurements.csv'} ({len(series)} stations x {cfg.sim_T} hours)")
    return 0


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, out_path: str | None = None) -> int:
    if not cfg.measurements:
        raise UsageError("no measurements file configured")
    series = ingest_csv(cfg.measurements)
    print(f"{'station':<10}{'hours':>8}{'missing':>9}{'zeros':>7}{'start':>18}")
    for s in series:
        missing = int(np.sum(~np.isfinite(s.speed)))
        zeros = int(np.sum(s.speed == 0))
        print(f"{s.station_id:<10}{len(s):>8}{missing:>9}{zeros:>7}{str(s.start):>18}")
    if out_path:
        emit_csv(series, out_path)
        print(f"normalized copy written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# select-neighbors
# ---------------------------------------------------------------------------


def cmd_select_neighbors(cfg: RunConfig) -> int:
    if not cfg.measurements or not cfg.registry:
        raise UsageError("select-neighbors needs both measurements and registry paths")
    registry = load_registry(cfg.registry)
    series = {s.station_id: s for s in ingest_csv(cfg.measurements)}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    print(f"{'station':<10}{'M*':>4}{'neighbors':>10}  nearest")
    for sid, st in registry.items():
        if sid not in series:
            raise UsageError(f"station {sid} has no measurements")
        angles = series[sid].direction
        if not np.any(np.isfinite(angles)):
            raise UsageError(f"station {sid}: direction column is empty")
        m_star, fits = select_M_by_bic(angles, cfg.m_candidates, seed=cfg.seed)
        mixture = fits[m_star]
        nbrs = select_neighbors(
            st,
            registry,
            mixture,
            alpha_angle=cfg.alpha_angle,
            d_max_km=cfg.d_max_km,
            bearing_convention=cfg.bearing_convention,
        )
        result[sid] = {
            "M": m_star,
            "mus": list(mixture.mus),
            "upsilons": list(mixture.upsilons),
            "weights": list(mixture.weights),
            "neighbors": [
                {"id": nb.id, "distance_km": nb.distance_km, "bearing": nb.bearing}
                for nb in nbrs
            ],
        }
        nearest = nbrs[0].id if nbrs else "-"
        print(f"{sid:<10}{m_star:>4}{len(nbrs):>10}  {nearest}")
    path = out / "neighbors.json"
    _atomic_write(path, _dump_json(result))
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# fit / forecast job grid
# ---------------------------------------------------------------------------


def _load_inputs(cfg: RunConfig):
    if not cfg.measurements:
        raise UsageError("no measurements file configured")
    series = align_series(ingest_csv(cfg.measurements))
    registry = load_registry(cfg.registry) if cfg.registry else None
    return series, registry


def _window_grid(cfg: RunConfig, series, registry):
    """Enumerate fitting jobs. Off-site: (station, window, horizon); space-time:
    (region, window, horizon) jointly over the region's stations."""
    some = next(iter(series.values()))
    T = len(some)
    jobs = []
    if cfg.latent_kind == "offsite":
        if registry is None:
            raise UsageError("offsite mode requires a registry")
        neighbors = _load_neighbors(cfg)
        n_region = {}
        for st in registry.values():
            n_region[st.region] = n_region.get(st.region, 0) + 1
        for sid, st in registry.items():
            train = effective_train_scale("offsite", n_region[st.region], cfg.train_hours)
            windows = make_windows(T, train, cfg.horizons, cfg.stride)
            nb_ids = [n["id"] for n in neighbors.get(sid, {}).get("neighbors", [])]
            for w in windows:
                for h in cfg.horizons:
                    jobs.append(("offsite", sid, nb_ids, w, h))
    else:
        if registry is None:
            raise UsageError("spacetime mode requires a registry")
        regions = {}
        for st in registry.values():
            regions.setdefault(st.region, []).append(st)
        train = effective_train_scale("spacetime", 1, cfg.train_hours)
        windows = make_windows(T, train, cfg.horizons, cfg.stride)
        for region, sts in sorted(regions.items()):
            for w in windows:
                for h in cfg.horizons:
                    jobs.append(("spacetime", region, sts, w, h))
    return jobs


def _load_neighbors(cfg: RunConfig) -> dict:
    path = cfg.neighbors_file or str(Path(cfg.output_dir) / "neighbors.json")
    if not Path(path).exists():
        raise UsageError(
            f"neighbors file {path} not found; run select-neighbors first or set neighbors_file"
        )
    return json.loads(Path(path).read_text())


def _run_job(kind, ident, aux, window, horizon, cfg: RunConfig, series, do_samples: bool):
    fit_cfg = cfg.fit_config()
    if kind == "offsite":
        data = offsite_window_data(series, ident, aux, window.train_start, window.origin, horizon)
    else:
        data = spacetime_window_data(series, aux, window.train_start, window.origin, horizon)
    fits = fit_window(data, fit_cfg, baseline=cfg.baseline)
    samples = None
    if do_samples:
        rng = job_seed(cfg.seed, kind, ident, window.origin, horizon)
        samples = forecast_window(data, fit_cfg, rng, baseline=cfg.baseline, fits=fits)
    return fits, samples


def _sample_paths(out: Path, ps: PredictiveSample) -> tuple[Path, Path]:
    stem = f"{ps.station_id}_o{ps.origin}_h{ps.horizon}"
    return out / f"{stem}.csv", out / f"{stem}.json"


def _write_sample(out: Path, ps: PredictiveSample) -> None:
    csv_path, json_path = _sample_paths(out, ps)
    lines = ["station,origin,horizon,draw_idx,value"]
    for i, v in enumerate(ps.draws):
        lines.append(f"{ps.station_id},{ps.origin},{ps.horizon},{i},{float(v)!r}")
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    sidecar = {
        "station": ps.station_id,
        "origin": ps.origin,
        "horizon": ps.horizon,
        "m": int(ps.draws.size),
        "psi_hat": ps.psi_hat,
        "p_hat": ps.p_hat,
        "phi_hat": ps.phi_hat,
        "xi_hat": ps.xi_hat,
        "kappa_hat": ps.kappa_hat,
        "alpha": ps.alpha,
        "beta": ps.beta,
        "truncated": ps.truncated,
        "flags": ps.flags,
    }
    _atomic_write(json_path, _dump_json(sidecar))


def _run_grid(cfg: RunConfig, do_samples: bool) -> int:
    series, registry = _load_inputs(cfg)
    jobs = _window_grid(cfg, series, registry)
    if not jobs:
        raise UsageError("no windows fit the configured series")
    out = Path(cfg.output_dir)
    samples_dir = out / ("samples" if do_samples else "fits")
    samples_dir.mkdir(parents=True, exist_ok=True)
    statuses = []
    t_start = time.time()
    workers = cfg.jobs if cfg.jobs > 0 else (os.cpu_count() or 1)

    def run_one(job):
        kind, ident, aux, window, horizon = job
        key = f"{kind}:{ident}:o{window.origin}:h{horizon}"
        t0 = time.time()
        try:
            fits, samples = _run_job(kind, ident, aux, window, horizon, cfg, series, do_samples)
            if do_samples:
                for ps in samples:
                    _write_sample(samples_dir, ps)
            else:
                payload = {
                    "job": key,
                    "stage1": stagefit_to_dict(fits["stage1"]),
                    "stage2": stagefit_to_dict(fits["stage2"]),
                    "stage3": stagefit_to_dict(fits["stage3"]),
                }
                _atomic_write(samples_dir / f"{ident}_o{window.origin}_h{horizon}.json",
                              _dump_json(payload))
            return {"job": key, "status": "ok", "seconds": round(time.time() - t0, 3)}
        except WindowSkipped as exc:
            return {
                "job": key,
                "status": "skipped",
                "reason": str(exc),
                "seconds": round(time.time() - t0, 3),
            }
        except Exception as exc:  # job failure: recorded, nonzero exit
            return {
                "job": key,
                "status": "failed",
                "reason": f"{type(exc).__name__}: {exc}",
                "seconds": round(time.time() - t0, 3),
            }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(run_one, jobs))
    else:
        statuses = [run_one(j) for j in jobs]

    manifest = {
        "command": "forecast" if do_samples else "fit",
        "version": __version__,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "jobs": statuses,
        "wall_seconds": round(time.time() - t_start, 3),
    }
    _atomic_write(out / "manifest.json", _dump_json(manifest))
    n_fail = sum(1 for s in statuses if s["status"] == "failed")
    n_skip = sum(1 for s in statuses if s["status"] == "skipped")
    print(f"{len(statuses)} jobs: {len(statuses) - n_fail - n_skip} ok, {n_skip} skipped, {n_fail} failed")
    for s in statuses:
        if s["status"] == "failed":
            print(f"  FAILED {s['job']}: {s['reason']}", file=sys.stderr)
    return 1 if n_fail else 0


def cmd_fit(cfg: RunConfig) -> int:
    return _run_grid(cfg, do_samples=False)


def cmd_forecast(cfg: RunConfig) -> int:
    return _run_grid(cfg, do_samples=True)


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def _read_samples_dir(path: Path) -> dict:
    """Load all predictive samples as (station, origin, horizon) -> draws."""
    result = {}
    for csv_path in sorted(path.glob("*.csv")):
        sidecar = json.loads(csv_path.with_suffix(".json").read_text())
        rows = csv_path.read_text().strip().splitlines()[1:]
        draws = np.array([float(r.rsplit(",", 1)[1]) for r in rows])
        result[(sidecar["station"], sidecar["origin"], sidecar["horizon"])] = draws
    if not result:
        raise UsageError(f"no predictive samples found under {path}")
    return result


def _targets_from_samples(samples: dict, series) -> dict:
    """Group samples into scoring batches keyed by (station, horizon)."""
    grouped: dict = {}
    for (sid, origin, horizon), draws in sorted(samples.items()):
        t = origin + horizon
        y = series[sid].speed[t] if t < len(series[sid]) else math.nan
        grouped.setdefault((sid, horizon), {"draws": [], "obs": []})
        grouped[(sid, horizon)]["draws"].append(draws)
        grouped[(sid, horizon)]["obs"].append(y)
    return grouped


def _attach_config(grouped: dict, series, cfg: RunConfig, samples: dict) -> dict:
    """Finalize batches: stack draws, attach the per-station tail threshold r
    (the tail_q quantile of speeds before the first forecast origin)."""
    first_origin = min(o for (_, o, _) in samples)
    out = {}
    for (sid, horizon), batch in grouped.items():
        train_speeds = series[sid].speed[: first_origin + 1]
        train_speeds = train_speeds[np.isfinite(train_speeds)]
        if train_speeds.size == 0:
            raise UsageError(f"station {sid}: no training speeds before the first origin")
        r = float(np.quantile(train_speeds, cfg.tail_q))
        out[(sid, horizon)] = {
            "draws": np.vstack(batch["draws"]),
            "obs": np.array(batch["obs"], dtype=float),
            "config": ScoreConfig(
                tail_threshold_r=r,
                ql_tau=cfg.ql_tau,
                pit_cutoff=cfg.pit_cutoff,
                levels=cfg.levels,
            ),
        }
    return out


def cmd_score(cfg: RunConfig, forecast_dirs: list[str]) -> int:
    if not forecast_dirs:
        raise UsageError("score needs at least one forecast directory")
    series, _ = _load_inputs(cfg)
    out = Path(cfg.output_dir)
    scores_dir = out / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    runs = []
    for d in forecast_dirs:
        samples = _read_samples_dir(Path(d) / "samples" if (Path(d) / "samples").is_dir() else Path(d))
        runs.append((Path(d).name or str(d), samples))
    keys0 = set(runs[0][1])
    for name, samples in runs[1:]:
        if set(samples) != keys0:
            diff = sorted(set(samples) ^ keys0)[:10]
            raise UsageError(f"target sets differ between runs (first differences: {diff})")
    for name, samples in runs:
        grouped = _attach_config(_targets_from_samples(samples, series), series, cfg, samples)
        report = build_report(name, grouped, pit_cutoff=cfg.pit_cutoff, levels=cfg.levels,
                              pit_seed=cfg.seed)
        reports.append(report)
        _atomic_write(scores_dir / f"{name}_rows.csv", report_rows_csv(report))
        _atomic_write(scores_dir / f"{name}_reliability.csv", report_reliability_csv(report))
        _atomic_write(scores_dir / f"{name}_pit.csv", report_pit_csv(report))
        _atomic_write(scores_dir / f"{name}_report.json", report.to_json())
    if len(reports) == 2:
        lines = ["station,horizon,metric,model,baseline,difference"]
        base = {(r["station"], r["horizon"], r["metric"]): r["value"] for r in reports[1].rows}
        for r in reports[0].rows:
            key = (r["station"], r["horizon"], r["metric"])
            if key in base:
                diff = r["value"] - base[key]
                lines.append(
                    f"{key[0]},{key[1]},{key[2]},{r['value']!r},{base[key]!r},{diff!r}"
                )
        _atomic_write(scores_dir / "paired.csv", "\n".join(lines) + "\n")
    for report in reports:
        print(f"model {report.model}:")
        for h in sorted({r['horizon'] for r in report.rows}):
            avg = report.average_row("crps", h)
            print(f"  h={h}: avg CRPS {avg:.4f}")
    print(f"wrote score reports to {scores_dir}")
    return 0


def cmd_report(cfg: RunConfig, score_jsons: list[str]) -> int:
    from .figures import save_report_figures
    from .scoring import ScoreReport

    if not score_jsons:
        candidates = sorted(Path(cfg.output_dir, "scores").glob("*_report.json"))
        if not candidates:
            raise UsageError("no score reports found; run score first or pass report JSONs")
        score_jsons = [str(p) for p in candidates]
    reports = []
    for p in score_jsons:
        data = json.loads(Path(p).read_text())
        reports.append(
            ScoreReport(
                model=data["model"],
                rows=data["rows"],
                reliability=data["reliability"],
                pit=data["pit"],
                meta=data.get("meta", {}),
            )
        )
    horizons = sorted({r["horizon"] for rep in reports for r in rep.rows})
    written = save_report_figures(reports, Path(cfg.output_dir) / "figures", horizons)
    for w in written:
        print(f"wrote {w}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="windsplice",
        description="Spliced Gamma-GP probabilistic wind speed forecasting",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--measurements")
        p.add_argument("--registry")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--neighbors-file", dest="neighbors_file")
        p.add_argument("--mode", choices=("offsite", "spacetime", "baseline_offsite", "baseline_spacetime"))
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--train-days", dest="train_days", type=float)
        p.add_argument("--stride", type=int)
        p.add_argument("--horizons", help="comma-separated, e.g. 1,2,3")
        p.add_argument("--m-draws", dest="m_draws", type=int)
        p.add_argument("--truncated", dest="truncated", action="store_const", const=True)
        p.add_argument("--alpha-angle", dest="alpha_angle", type=float)
        p.add_argument("--d-max-km", dest="d_max_km", type=float)
        p.add_argument("--sim-T", dest="sim_T", type=int)
        p.add_argument("--sim-n-stations", dest="sim_n_stations", type=int)

    for name in ("simulate", "ingest", "select-neighbors", "fit", "forecast"):
        p = sub.add_parser(name)
        add_common(p)
        if name == "ingest":
            p.add_argument("--out", help="write a normalized copy")
    p = sub.add_parser("score")
    add_common(p)
    p.add_argument("forecast_dirs", nargs="*", help="forecast output dirs (1 or 2)")
    p = sub.add_parser("report")
    add_common(p)
    p.add_argument("score_jsons", nargs="*", help="score report JSON files")
    p = sub.add_parser("init-config")
    p.add_argument("path")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses code 2 for usage errors already
        return int(exc.code or 0)
    if args.command == "init-config":
        write_default_config(args.path)
        print(f"wrote {args.path}")
        return 0
    overrides = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "config", "out", "forecast_dirs", "score_jsons") and v is not None
    }
    try:
        cfg = load_config(getattr(args, "config", None), overrides)
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg, out_path=args.out)
        if args.command == "select-neighbors":
            return cmd_select_neighbors(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "forecast":
            return cmd_forecast(cfg)
        if args.command == "score":
            return cmd_score(cfg, args.forecast_dirs)
        if args.command == "report":
            return cmd_report(cfg, args.score_jsons)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
