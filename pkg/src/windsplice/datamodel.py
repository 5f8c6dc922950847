"""Station registry, hourly wind series ingestion, and rolling-window generation."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

REGIONS = ("East", "West")

DEFAULT_SCHEMA = {
    "station": "station",
    "timestamp": "timestamp",
    "speed_ms": "speed_ms",
    "direction_deg": "direction_deg",
}

HOUR = np.timedelta64(1, "h")


class IngestError(ValueError):
    """Malformed input data; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Station:
    """One measurement tower with planar-km coordinates."""

    id: str
    easting_km: float
    northing_km: float
    region: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("station id must be non-empty")
        if not (math.isfinite(self.easting_km) and math.isfinite(self.northing_km)):
            raise ValueError(f"station {self.id}: coordinates must be finite")
        if self.region not in REGIONS:
            raise ValueError(f"station {self.id}: region must be one of {REGIONS}")


def distance_km(a: Station, b: Station) -> float:
    return math.hypot(a.easting_km - b.easting_km, a.northing_km - b.northing_km)


@dataclass(frozen=True)
class StationSeries:
    """Hourly speed/direction series on a regular grid; NaN marks missing hours.

    Directions are radians in [0, 2pi). Zero speeds are kept (they are data,
    excluded only from the positive-speed Gamma stage).
    """

    station_id: str
    start: np.datetime64
    speed: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "speed", np.asarray(self.speed, dtype=float))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        if self.speed.shape != self.direction.shape or self.speed.ndim != 1:
            raise ValueError("speed and direction must be 1-d arrays of equal length")
        present = self.speed[np.isfinite(self.speed)]
        if np.any(present < 0):
            raise ValueError(f"station {self.station_id}: negative speed")
        self.speed.setflags(write=False)
        self.direction.setflags(write=False)

    def __len__(self) -> int:
        return self.speed.size

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + np.arange(len(self)) * HOUR

    def hours_of_day(self) -> np.ndarray:
        """Hour-of-day index in {0,...,23} for every slot."""
        first = (self.start.astype("datetime64[h]") - self.start.astype("datetime64[D]")) // HOUR
        return (int(first) + np.arange(len(self))) % 24

    def __eq__(self, other) -> bool:
        if not isinstance(other, StationSeries):
            return NotImplemented
        if (
            self.station_id != other.station_id
            or self.start != other.start
            or len(self) != len(other)
            or not np.array_equal(self.speed, other.speed, equal_nan=True)
        ):
            return False
        # angles round-trip through the degree-valued CSV schema, so direction
        # equality means equal to within the unit-conversion precision
        both = np.isfinite(self.direction) & np.isfinite(other.direction)
        if not np.array_equal(np.isfinite(self.direction), np.isfinite(other.direction)):
            return False
        return bool(np.all(np.abs(self.direction[both] - other.direction[both]) < 1e-12))


@dataclass(frozen=True)
class RollingWindow:
    """Training slice [train_start, train_end] plus forecast horizons from the origin.

    All fields are 0-based indices into the hourly grid; origin is the last
    training slot and targets sit at origin + h.
    """

    train_start: int
    train_end: int
    horizons: tuple[int, ...]

    def __post_init__(self):
        if not self.horizons:
            raise ValueError("horizons must be non-empty")
        if any(h < 1 for h in self.horizons):
            raise ValueError("horizons must be positive")
        if self.train_end < self.train_start:
            raise ValueError("train_end precedes train_start")

    @property
    def origin(self) -> int:
        return self.train_end

    @property
    def n_train(self) -> int:
        return self.train_end - self.train_start + 1

    def targets(self) -> tuple[int, ...]:
        return tuple(self.origin + h for h in self.horizons)


def _parse_timestamp(text: str, line: int) -> np.datetime64:
    try:
        ts = np.datetime64(text.strip(), "m")
    except ValueError as exc:
        raise IngestError(f"bad timestamp {text!r}: {exc}", line) from None
    if ts != ts.astype("datetime64[h]").astype("datetime64[m]"):
        raise IngestError(f"timestamp {text!r} is not hour-aligned", line)
    return ts


def _parse_float(text: str, name: str, line: int) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"bad {name} value {text!r}", line) from None


def ingest_csv(path, schema: dict | None = None) -> list[StationSeries]:
    """Read a measurement CSV into per-station hourly series.

    The file must carry the columns named by ``schema`` (station, timestamp,
    speed_ms, direction_deg). Timestamps must be strictly increasing per
    station; gaps are filled with explicit NaN slots, never dropped.
    Directions are converted from degrees to radians in [0, 2pi).
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    per_station: dict[str, list[tuple[np.datetime64, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError("empty file", 1) from None
        cols = {}
        for key in ("station", "timestamp", "speed_ms", "direction_deg"):
            name = schema[key]
            if name not in header:
                raise IngestError(f"missing column {name!r} in header", 1)
            cols[key] = header.index(name)
        width = len(header)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise IngestError(f"expected {width} fields, got {len(row)}", line)
            sid = row[cols["station"]].strip()
            if not sid:
                raise IngestError("empty station id", line)
            ts = _parse_timestamp(row[cols["timestamp"]], line)
            speed = _parse_float(row[cols["speed_ms"]], "speed_ms", line)
            if not math.isnan(speed) and speed < 0:
                raise IngestError(f"negative speed {speed}", line)
            direction = _parse_float(row[cols["direction_deg"]], "direction_deg", line)
            if not math.isnan(direction):
                direction = math.radians(direction) % (2 * math.pi)
            rows = per_station.setdefault(sid, [])
            if rows:
                prev = rows[-1][0]
                if ts == prev:
                    raise IngestError(f"duplicate timestamp {ts} for station {sid}", line)
                if ts < prev:
                    raise IngestError(
                        f"non-monotone timestamp {ts} after {prev} for station {sid}", line
                    )
            rows.append((ts, speed, direction))

    out = []
    for sid, rows in per_station.items():
        start = rows[0][0]
        n = int((rows[-1][0] - start) // HOUR) + 1
        speed = np.full(n, np.nan)
        direction = np.full(n, np.nan)
        for ts, sp, dr in rows:
            i = int((ts - start) // HOUR)
            speed[i] = sp
            direction[i] = dr
        out.append(StationSeries(station_id=sid, start=start, speed=speed, direction=direction))
    return out


def emit_csv(series: list[StationSeries], path) -> None:
    """Write series back in the ingestion schema (round-trips exactly)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station", "timestamp", "speed_ms", "direction_deg"])
        for s in series:
            stamps = s.timestamps
            for i in range(len(s)):
                sp = s.speed[i]
                dr = s.direction[i]
                writer.writerow(
                    [
                        s.station_id,
                        str(stamps[i]),
                        "" if math.isnan(sp) else repr(float(sp)),
                        "" if math.isnan(dr) else repr(math.degrees(dr)),
                    ]
                )


def load_registry(path) -> dict[str, Station]:
    """Read the station registry CSV: station,easting_km,northing_km,region."""
    registry: dict[str, Station] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for line, row in enumerate(reader, start=2):
            try:
                st = Station(
                    id=row["station"].strip(),
                    easting_km=float(row["easting_km"]),
                    northing_km=float(row["northing_km"]),
                    region=row["region"].strip(),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise IngestError(str(exc), line) from None
            if st.id in registry:
                raise IngestError(f"duplicate station id {st.id!r}", line)
            registry[st.id] = st
    return registry


def save_registry(registry: dict[str, Station], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station", "easting_km", "northing_km", "region"])
        for st in registry.values():
            writer.writerow([st.id, repr(st.easting_km), repr(st.northing_km), st.region])


def make_windows(
    series_len: int, train_hours: int, horizons: tuple[int, ...] | set, stride: int = 1
) -> list[RollingWindow]:
    """Enumerate rolling training windows whose forecast targets all exist.

    Window starts run over [0, series_len - train_hours - max(horizons)] at the
    given stride; an empty list (with a warning) means the series is too short.
    """
    if train_hours < 1:
        raise ValueError("train_hours must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    horizons = tuple(sorted(set(int(h) for h in horizons)))
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive integers")
    last_start = series_len - train_hours - max(horizons)
    if last_start < 0:
        warnings.warn(
            f"series of length {series_len} too short for train_hours={train_hours} "
            f"and max horizon {max(horizons)}; no windows generated",
            stacklevel=2,
        )
        return []
    return [
        RollingWindow(train_start=t0, train_end=t0 + train_hours - 1, horizons=horizons)
        for t0 in range(0, last_start + 1, stride)
    ]


def align_series(series: list[StationSeries]) -> dict[str, StationSeries]:
    """Re-grid all series onto the union hourly grid (NaN-padded) so that the
    same index means the same instant at every station."""
    if not series:
        return {}
    start = min(s.start for s in series)
    end = max(s.start + (len(s) - 1) * HOUR for s in series)
    n = int((end - start) // HOUR) + 1
    out = {}
    for s in series:
        offset = int((s.start - start) // HOUR)
        speed = np.full(n, np.nan)
        direction = np.full(n, np.nan)
        speed[offset : offset + len(s)] = s.speed
        direction[offset : offset + len(s)] = s.direction
        out[s.station_id] = StationSeries(s.station_id, start, speed, direction)
    return out


def effective_train_scale(mode: str, n_stations_region: int, base_hours: int) -> int:
    """Training length per mode: off-site windows are scaled by the region size
    so both latent models see comparable effective sample sizes."""
    if n_stations_region < 1:
        raise ValueError("n_stations_region must be >= 1")
    if mode == "offsite":
        return base_hours * n_stations_region
    if mode == "spacetime":
        return base_hours
    raise ValueError(f"unknown mode {mode!r}")
