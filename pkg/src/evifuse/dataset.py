"""
Hourly load + weather series: CSV ingestion, min-max scaling, sample windows
for the three predictor input layouts, and a seeded synthetic generator.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

HOUR = 3600
COLUMNS = ("load", "temperature", "humidity", "wind_speed")
CSV_HEADER = ("timestamp", "load_kw", "temperature_c", "humidity_pct", "wind_speed_ms")
DEFAULT_WINDOW = 5
# Monday 2023-01-02 00:00 UTC
SYNTH_START = 1672617600


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class Record:
    timestamp: int
    load: float
    temperature: float
    humidity: float
    wind_speed: float

    def values(self) -> tuple[float, float, float, float]:
        return (self.load, self.temperature, self.humidity, self.wind_speed)


def parse_timestamp(text: str) -> int:
    """Epoch seconds or ISO-8601 (naive means UTC) to integer epoch seconds."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        value = None
    if value is not None:
        if not value.is_integer():
            raise ValueError(f"epoch timestamp {text!r} is not a whole second")
        return int(value)
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _check_record(rec: Record, line: int | None = None) -> None:
    for name in COLUMNS:
        if not math.isfinite(getattr(rec, name)):
            raise DatasetError(f"{name} is not finite", line)
    if rec.load < 0:
        raise DatasetError(f"negative load {rec.load}", line)
    if rec.wind_speed < 0:
        raise DatasetError(f"negative wind speed {rec.wind_speed}", line)
    if not 0 <= rec.humidity <= 100:
        raise DatasetError(f"humidity {rec.humidity} outside [0, 100]", line)


def validate_records(records: Sequence[Record]) -> None:
    """Check value ranges and a strictly hourly, gap-free timeline."""
    for k, rec in enumerate(records):
        _check_record(rec)
        if k and rec.timestamp - records[k - 1].timestamp != HOUR:
            raise DatasetError(f"record {k}: timestamps must advance by exactly one hour")


def parse_csv(source: str | Path | TextIO) -> list[Record]:
    """Read ``timestamp,load_kw,temperature_c,humidity_pct,wind_speed_ms`` rows.

    Timestamps are ISO-8601 (UTC if no offset) or integer epoch seconds.
    Errors carry the 1-based line number of the offending row.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return parse_csv(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None:
        raise DatasetError("empty input", 1)
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise DatasetError(f"header must be {','.join(CSV_HEADER)}", 1)
    records: list[Record] = []
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise DatasetError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", line)
        try:
            ts = parse_timestamp(row[0])
            vals = [float(cell) for cell in row[1:]]
        except ValueError as exc:
            raise DatasetError(f"malformed row: {exc}", line) from None
        rec = Record(ts, *vals)
        _check_record(rec, line)
        if records:
            gap = ts - records[-1].timestamp
            if gap <= 0:
                raise DatasetError("timestamp does not increase (duplicate or out of order)", line)
            if gap != HOUR:
                raise DatasetError(f"timestamp gap of {gap} s, expected {HOUR}", line)
        records.append(rec)
    return records


def write_csv(records: Iterable[Record], dest: str | Path | TextIO) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_csv(records, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([format_timestamp(r.timestamp)] + [repr(float(v)) for v in r.values()])


def to_arrays(records: Sequence[Record]) -> tuple[np.ndarray, np.ndarray]:
    """``(timestamps, values)`` with values shaped ``(n, 4)`` in COLUMNS order."""
    times = np.array([r.timestamp for r in records], dtype=np.int64)
    values = np.array([r.values() for r in records], dtype=np.float64).reshape(len(records), len(COLUMNS))
    return times, values


def from_arrays(times: np.ndarray, values: np.ndarray) -> list[Record]:
    return [Record(int(t), *map(float, row)) for t, row in zip(times, values)]


# -- scaling ------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationSpec:
    """Per-column ``(min, max)`` observed on the training split."""

    mins: tuple[float, float, float, float]
    maxs: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        for name, lo, hi in zip(COLUMNS, self.mins, self.maxs):
            if hi < lo:
                raise DatasetError(f"{name}: max {hi} < min {lo}")

    @classmethod
    def fit(cls, values: np.ndarray) -> NormalizationSpec:
        return cls(tuple(map(float, values.min(axis=0))), tuple(map(float, values.max(axis=0))))

    def transform(self, values: np.ndarray) -> np.ndarray:
        lo, hi = np.array(self.mins), np.array(self.maxs)
        span = hi - lo
        flat = span == 0
        out = (values - lo) / np.where(flat, 1.0, span)
        # constant columns sit mid-scale
        return np.where(flat, 0.5, out)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        lo, hi = np.array(self.mins), np.array(self.maxs)
        return lo + values * (hi - lo)

    def to_dict(self) -> dict:
        return {name: [lo, hi] for name, lo, hi in zip(COLUMNS, self.mins, self.maxs)}

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationSpec:
        return cls(tuple(float(d[c][0]) for c in COLUMNS), tuple(float(d[c][1]) for c in COLUMNS))


def normalize(records: Sequence[Record], spec: NormalizationSpec | None = None
              ) -> tuple[list[Record], NormalizationSpec]:
    """Min-max scale every column to [0, 1].

    Pass the training ``spec`` when scaling test data; values may then fall
    outside [0, 1].
    """
    if not records:
        raise DatasetError("nothing to normalize")
    times, values = to_arrays(records)
    spec = spec or NormalizationSpec.fit(values)
    return from_arrays(times, spec.transform(values)), spec


def denormalize(value, spec: NormalizationSpec):
    """Map normalized load back to kW.  Accepts scalars or arrays."""
    lo, hi = spec.mins[0], spec.maxs[0]
    out = lo + np.asarray(value, dtype=np.float64) * (hi - lo)
    return float(out) if out.ndim == 0 else out


# -- samples ------------------------------------------------------------------

class InputVariant(enum.IntEnum):
    LAG_PARAMS = 1       # load and weather of the previous hour
    CURRENT_PARAMS = 2   # previous load, weather of the target hour
    WINDOWED = 3         # the previous w hours of load and weather


@dataclass(frozen=True)
class InputConfig:
    variant: InputVariant
    window: int = DEFAULT_WINDOW

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", InputVariant(self.variant))
        if self.variant is InputVariant.WINDOWED and self.window < 2:
            raise DatasetError("window length must be >= 2")

    @property
    def history(self) -> int:
        """Hours before the target needed to build one sample."""
        return self.window if self.variant is InputVariant.WINDOWED else 1

    @property
    def steps(self) -> int:
        return self.window if self.variant is InputVariant.WINDOWED else 1


def feature_offsets(config: InputConfig) -> np.ndarray:
    """Hour offsets relative to the target, shaped ``(steps, 4)`` in COLUMNS order."""
    if config.variant is InputVariant.LAG_PARAMS:
        return np.array([[-1, -1, -1, -1]])
    if config.variant is InputVariant.CURRENT_PARAMS:
        return np.array([[-1, 0, 0, 0]])
    lags = -np.arange(config.window, 0, -1)
    return np.repeat(lags[:, None], len(COLUMNS), axis=1)


def gather_features(table: np.ndarray, target_index: int, config: InputConfig) -> np.ndarray:
    """Feature sequence for the target at row ``target_index`` of a normalized table."""
    rows = target_index + feature_offsets(config)
    if rows.min() < 0 or rows.max() >= len(table):
        raise DatasetError(f"row {target_index}: insufficient history for {config.variant.name}")
    return table[rows, np.arange(len(COLUMNS))]


@dataclass(frozen=True, eq=False)
class SampleSet:
    inputs: np.ndarray         # (n, steps, 4), normalized
    targets: np.ndarray        # (n,), normalized load
    target_times: np.ndarray   # (n,) epoch seconds
    feature_times: np.ndarray  # (n, steps, 4) epoch seconds of every feature cell
    config: InputConfig
    spec: NormalizationSpec

    def __len__(self) -> int:
        return len(self.targets)

    def index_of(self, timestamp: int) -> int:
        pos = int(np.searchsorted(self.target_times, timestamp))
        if pos >= len(self.target_times) or self.target_times[pos] != timestamp:
            raise DatasetError(f"no sample targets {format_timestamp(timestamp)}")
        return pos


def build_samples(records: Sequence[Record], config: InputConfig,
                  spec: NormalizationSpec | None = None) -> SampleSet:
    """Window the (normalized) table into (features, next load) pairs, in time order.

    With ``spec=None`` a fresh scaling is fitted to ``records``.
    """
    if len(records) <= config.history:
        raise DatasetError(
            f"{config.variant.name} needs more than {config.history} records, got {len(records)}")
    times, values = to_arrays(records)
    spec = spec or NormalizationSpec.fit(values)
    table = spec.transform(values)
    offsets = feature_offsets(config)
    idx = np.arange(config.history, len(records))
    rows = idx[:, None, None] + offsets[None]
    cols = np.arange(len(COLUMNS))[None, None, :]
    return SampleSet(
        inputs=table[rows, cols],
        targets=table[idx, 0].copy(),
        target_times=times[idx],
        feature_times=times[rows],
        config=config,
        spec=spec,
    )


def split(records: Sequence[Record], train_fraction: float) -> tuple[list[Record], list[Record]]:
    """Chronological split at ``floor(n * train_fraction)``."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train fraction {train_fraction} not in (0, 1)")
    if len(records) < 2:
        raise DatasetError("need at least two records to split")
    cut = math.floor(len(records) * train_fraction)
    return list(records[:cut]), list(records[cut:])


# -- synthetic data -----------------------------------------------------------

def _ar1(rng: np.random.Generator, n: int, phi: float, scale: float) -> np.ndarray:
    shocks = rng.normal(0.0, scale * math.sqrt(1.0 - phi * phi), n)
    out = np.empty(n)
    out[0] = rng.normal(0.0, scale)
    for k in range(1, n):
        out[k] = phi * out[k - 1] + shocks[k]
    return out


def _bump(hour: np.ndarray, centre: float, width: float) -> np.ndarray:
    d = np.abs(hour - centre)
    d = np.minimum(d, 24 - d)
    return np.exp(-0.5 * (d / width) ** 2)


def synth_generate(seed: int, hours: int, start: int = SYNTH_START) -> list[Record]:
    """Deterministic hourly charging-station load with matching weather.

    Load has morning and evening charging peaks, a weekend dip, extra demand
    in cold or hot weather, and seeded noise.  Weather series are smooth
    diurnal cycles plus AR(1) drift.
    """
    if hours < 48:
        raise DatasetError("synthetic series needs at least 48 hours")
    rng = np.random.default_rng(seed)
    h = np.arange(hours, dtype=np.float64)
    hod = h % 24
    dow = (h // 24) % 7
    temperature = (18.0 + 6.0 * np.sin(2 * np.pi * (hod - 9) / 24)
                   + 3.0 * np.sin(2 * np.pi * h / (24 * 11) + rng.uniform(0, 2 * np.pi))
                   + _ar1(rng, hours, 0.97, 1.5))
    humidity = np.clip(65.0 - 1.8 * (temperature - 18.0) + _ar1(rng, hours, 0.95, 6.0), 5.0, 100.0)
    wind = np.abs(3.0 + 1.2 * np.sin(2 * np.pi * (hod - 14) / 24) + _ar1(rng, hours, 0.9, 1.0))
    profile = 0.55 * _bump(hod, 8.0, 1.8) + 1.0 * _bump(hod, 18.5, 2.5)
    weekly = np.where(dow >= 5, 0.7, 1.0)
    load = (25.0 + 70.0 * profile * weekly
            + 1.1 * np.abs(temperature - 18.0)
            + 0.05 * (humidity - 65.0)
            + rng.normal(0.0, 2.0, hours))
    load = np.maximum(load, 0.0)
    times = start + HOUR * np.arange(hours, dtype=np.int64)
    return from_arrays(times, np.column_stack([load, temperature, humidity, wind]))


def records_from_text(text: str) -> list[Record]:
    return parse_csv(io.StringIO(text))
