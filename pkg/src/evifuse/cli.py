"""Command-line front end.

Subcommands::

    evifuse synth  --seed 7 --hours 504 --out data.csv
    evifuse train  --data data.csv --out-dir models/
    evifuse fuse   --data data.csv --models models/ --origin 2023-01-19T19:00:00Z
    evifuse run    [--config exp.cfg] [--data data.csv | --synth-seed 7 --synth-hours 504] --out-dir out/
    evifuse tables 0.30,0.26,0.44 0.31,0.34,0.35 0.24,0.41,0.35
    evifuse eval   --series out/series.csv

Exit codes: 0 success, 1 computation failure, 2 input or configuration error.

Config files are flat ``key = value`` text; blank lines and ``#`` comments
are ignored. Recognised keys are the fields of :class:`ExperimentConfig`.
Precedence, lowest first: built-in defaults, config file, the
``EVIFUSE_SEED`` environment variable (training seed only), command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from evifuse.dataset import (
    DEFAULT_WINDOW,
    DatasetError,
    InputConfig,
    NormalizationSpec,
    Record,
    build_samples,
    format_timestamp,
    normalize,
    parse_csv,
    parse_timestamp,
    split,
    synth_generate,
    to_arrays,
    write_csv,
)
from evifuse.evidence import EvidenceError, make_mass
from evifuse.forecast import ForecastError, TrainingConfig, load_checkpoint, save_checkpoint, train
from evifuse.fusion import (
    DEFAULT_HORIZON,
    EVENT_WINDOWS,
    FRAME,
    MODES,
    FusionDecision,
    FusionError,
    PredictorId,
    TrainedPredictor,
    decision_matrices,
    fuse_events,
    matrix_report,
    run_fusion,
)

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_INPUT = 2

REPORT_FORMAT = "evifuse-report/1"
SERIES_HEADER = ("timestamp", "actual", "V1", "V2", "V3", "fused")
SEED_ENV = "EVIFUSE_SEED"


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparsable value or unusable path."""


class MetricError(ValueError):
    pass


# -- metrics ------------------------------------------------------------------

def _paired(forecast, actual) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(forecast, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if f.size != a.size:
        raise MetricError(f"length mismatch: {f.size} forecasts vs {a.size} actuals")
    if f.size == 0:
        raise MetricError("empty series")
    return f, a


def mae(forecast, actual) -> float:
    """Mean absolute error, in the units of the inputs."""
    f, a = _paired(forecast, actual)
    return float(np.mean(np.abs(f - a)))


def mape(forecast, actual) -> float:
    """Mean absolute percentage error; every actual must be positive."""
    f, a = _paired(forecast, actual)
    if np.any(a <= 0):
        raise MetricError("MAPE needs strictly positive actual values")
    return float(100.0 * np.mean(np.abs(f - a) / a))


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    data: str | None = None            # CSV path; when None a synthetic series is generated
    synth_seed: int = 7
    synth_hours: int = 21 * 24
    train_fraction: float = 0.8
    epochs: int = TrainingConfig.epochs
    learning_rate: float = TrainingConfig.learning_rate
    hidden_size: int = TrainingConfig.hidden_size
    num_layers: int = TrainingConfig.num_layers
    seed: int = TrainingConfig.seed
    truncation_length: int | None = None
    clip_norm: float | None = None
    window: int = DEFAULT_WINDOW
    mode: str = "disjunctive"
    origin: str | None = None          # timestamp; None means the first held-out hour
    horizon: int = DEFAULT_HORIZON
    out_dir: str = "evifuse-out"

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.synth_hours < 48:
            raise ConfigError("synth_hours must be >= 48")
        try:
            self.training()
        except ForecastError as exc:
            raise ConfigError(str(exc)) from None

    def training(self) -> TrainingConfig:
        return TrainingConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                              hidden_size=self.hidden_size, num_layers=self.num_layers,
                              seed=self.seed, truncation_length=self.truncation_length,
                              clip_norm=self.clip_norm)

    def input_config(self, pid: PredictorId) -> InputConfig:
        return InputConfig(pid.variant, self.window)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_INT_KEYS = {"synth_seed", "synth_hours", "epochs", "hidden_size", "num_layers", "seed",
             "truncation_length", "window", "horizon"}
_FLOAT_KEYS = {"train_fraction", "learning_rate", "clip_norm"}
_OPTIONAL_KEYS = {"data", "truncation_length", "clip_norm", "origin"}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    if key in _OPTIONAL_KEYS and raw.lower() in ("", "none"):
        return None
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        try:
            values[key.strip()] = _coerce(key.strip(), raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def _read_text(path: str | Path, what: str) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from None


def resolve_config(config_path: str | None, overrides: dict, environ=os.environ) -> ExperimentConfig:
    values: dict = {}
    if config_path is not None:
        values.update(parse_config_text(_read_text(config_path, "config file"), config_path))
    if environ.get(SEED_ENV, "").strip():
        values["seed"] = _coerce("seed", environ[SEED_ENV])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


# -- shared steps -------------------------------------------------------------

def load_records(cfg: ExperimentConfig) -> list[Record]:
    if cfg.data is None:
        return synth_generate(cfg.synth_seed, cfg.synth_hours)
    if not Path(cfg.data).is_file():
        raise ConfigError(f"data file not found: {cfg.data}")
    return parse_csv(cfg.data)


def _origin_index(records: Sequence[Record], origin: str | None, default: int, horizon: int) -> int:
    if origin is None:
        index = default
    else:
        try:
            ts = parse_timestamp(origin)
        except ValueError as exc:
            raise ConfigError(f"origin: {exc}") from None
        times = [r.timestamp for r in records]
        if ts not in times:
            raise ConfigError(f"origin {origin} is not a record timestamp")
        index = times.index(ts)
    if index + horizon > len(records):
        raise ConfigError(f"origin {format_timestamp(records[index].timestamp) if index < len(records) else origin} "
                          f"leaves fewer than {horizon} hours to forecast")
    return index


def train_predictors(train_records: Sequence[Record], spec: NormalizationSpec,
                     cfg: ExperimentConfig) -> tuple[list[TrainedPredictor], dict]:
    predictors, summary = [], {}
    for pid in PredictorId:
        ic = cfg.input_config(pid)
        samples = build_samples(train_records, ic, spec)
        history: list[float] = []
        params = train(samples, cfg.training(), history=history)
        predictors.append(TrainedPredictor(params, ic))
        summary[pid.label] = {"variant": int(ic.variant), "samples": len(samples),
                              "initial_loss": history[0], "final_loss": history[-1]}
    return predictors, summary


def evaluate(decision: FusionDecision, actual: np.ndarray) -> dict:
    forecasts = {label: row for label, row in zip(FRAME.elements, decision.member_predictions)}
    forecasts["fused"] = decision.fused
    return {name: {"mae_kw": mae(f, actual), "mape_pct": mape(f, actual)} for name, f in forecasts.items()}


METRIC_LABELS = {
    "mae_kw": "mean absolute error over the forecast horizon, kW",
    "mape_pct": "mean absolute percentage error over the forecast horizon, percent of actual load",
}


def write_series(path: Path, decision: FusionDecision, actual: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_HEADER)
        for k, ts in enumerate(decision.timestamps):
            w.writerow([format_timestamp(int(ts)), repr(float(actual[k])),
                        *(repr(float(v)) for v in decision.member_predictions[:, k]),
                        repr(float(decision.fused[k]))])


def _json_dump(doc, path: Path | None = None) -> str:
    text = json.dumps(doc, indent=2) + "\n"
    if path is not None:
        path.write_text(text)
    return text


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from None
    return out


# -- commands -----------------------------------------------------------------

def cmd_run(cfg: ExperimentConfig) -> dict:
    """Generate or load data, train all three predictors, fuse and evaluate."""
    started = time.perf_counter()
    records = load_records(cfg)
    train_records, test_records = split(records, cfg.train_fraction)
    o = _origin_index(records, cfg.origin, len(train_records), cfg.horizon)
    _, spec = normalize(train_records)
    out = _out_dir(cfg.out_dir)

    predictors, training = train_predictors(train_records, spec, cfg)
    decision = run_fusion(predictors, records, spec, records[o].timestamp, cfg.mode, cfg.horizon)
    _, values = to_arrays(records)
    actual = values[o : o + cfg.horizon, 0]
    metrics = evaluate(decision, actual)

    report = {
        "format": REPORT_FORMAT,
        "config": dataclasses.asdict(cfg),
        "data": {"source": cfg.data or f"synthetic(seed={cfg.synth_seed}, hours={cfg.synth_hours})",
                 "records": len(records), "train_records": len(train_records),
                 "test_records": len(test_records), "normalization": spec.to_dict()},
        "training": training,
        "fusion": decision.to_report(),
        "metrics": metrics,
        "metric_definitions": METRIC_LABELS,
        "runtime_seconds": time.perf_counter() - started,
    }
    _json_dump(report, out / "report.json")
    write_series(out / "series.csv", decision, actual)
    return report


def cmd_synth(args) -> int:
    records = synth_generate(args.seed, args.hours)
    if args.out == "-":
        write_csv(records, sys.stdout)
    else:
        write_csv(records, args.out)
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    records = load_records(cfg)
    train_records, _ = split(records, cfg.train_fraction)
    _, spec = normalize(train_records)
    out = _out_dir(cfg.out_dir)
    predictors, summary = train_predictors(train_records, spec, cfg)
    for pid, p in zip(PredictorId, predictors):
        save_checkpoint(out / f"{pid.label}.json", p.params, cfg.training(),
                        extra={"variant": int(p.config.variant), "window": p.config.window,
                               "normalization": spec.to_dict(), "train_fraction": cfg.train_fraction})
    print(_json_dump(summary), end="")
    return EXIT_OK


def _load_predictors(models: str) -> tuple[list[TrainedPredictor], NormalizationSpec]:
    predictors, spec = [], None
    for pid in PredictorId:
        path = Path(models) / f"{pid.label}.json"
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        params, _, extra = load_checkpoint(path)
        try:
            ic = InputConfig(extra["variant"], extra["window"])
            this_spec = NormalizationSpec.from_dict(extra["normalization"])
        except (KeyError, TypeError, DatasetError) as exc:
            raise ConfigError(f"{path}: incomplete checkpoint metadata ({exc})") from None
        if ic.variant != pid.variant:
            raise ConfigError(f"{path}: holds variant {int(ic.variant)}, expected {int(pid.variant)}")
        if spec is not None and this_spec != spec:
            raise ConfigError(f"{path}: normalization differs from the other checkpoints")
        spec = this_spec
        predictors.append(TrainedPredictor(params, ic))
    return predictors, spec


def cmd_fuse(args, cfg: ExperimentConfig) -> int:
    records = load_records(cfg)
    predictors, spec = _load_predictors(args.models)
    train_records, _ = split(records, cfg.train_fraction)
    o = _origin_index(records, cfg.origin, len(train_records), cfg.horizon)
    decision = run_fusion(predictors, records, spec, records[o].timestamp, cfg.mode, cfg.horizon)
    _, values = to_arrays(records)
    actual = values[o : o + cfg.horizon, 0]
    doc = {"fusion": decision.to_report(), "metrics": evaluate(decision, actual),
           "metric_definitions": METRIC_LABELS}
    if args.out_dir:
        out = _out_dir(args.out_dir)
        _json_dump(doc, out / "fusion.json")
        write_series(out / "series.csv", decision, actual)
    print(_json_dump({"selected": decision.selected.label, "metrics": doc["metrics"]}), end="")
    return EXIT_OK


def parse_triple(text: str):
    """``"0.3,0.26,0.44"`` -> singleton mass function on V1..V3."""
    parts = text.split(",")
    if len(parts) != len(FRAME):
        raise ConfigError(f"expected {len(FRAME)} comma-separated masses, got {text!r}")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"non-numeric mass in {text!r}") from None
    try:
        return make_mass(FRAME, {FRAME.subset(e): v for e, v in zip(FRAME.elements, values)})
    except EvidenceError as exc:
        raise ConfigError(f"{text!r}: {exc}") from None


def format_matrix(dm, title: str) -> str:
    """Plain-text table: accumulated evidence across the top, new event down the side."""
    cols, rows = dm.columns, dm.rows
    shown = dm.displayed()
    width = max(14, *(len(c.label) + 9 for c in cols))
    lines = [title, " " * 16 + "".join(f"{c.label}={dm.left[c] * 100:.4g}".rjust(width) for c in cols)]
    for r, row_cells, row_shown in zip(rows, dm.cells, shown):
        head = f"{r.label}={dm.right[r] * 100:.4g}".ljust(16)
        lines.append(head + "".join(f"{c.subset.label or '{}'}:{v}".rjust(width)
                                    for c, v in zip(row_cells, row_shown)))
    exact = "  ".join(f"{s.label}={m * 100:.4f}" for s, m in dm.result.items())
    rounded = "  ".join(f"{k}={v}" for k, v in dm.displayed_totals().items())
    lines += [f"  combined (exact, %):        {exact}",
              f"  combined (rounded cells, %): {rounded}"]
    return "\n".join(lines)


def cmd_tables(args) -> int:
    masses = [parse_triple(t) for t in args.triples]
    mats = decision_matrices(masses, args.mode)
    if args.json:
        doc = {"mode": args.mode, "matrices": [matrix_report(dm) for dm in mats],
               "combined": fuse_events(masses, args.mode).to_text_map()}
        print(_json_dump(doc), end="")
        return EXIT_OK
    labels = [w.label for w in EVENT_WINDOWS]
    blocks = []
    for k, dm in enumerate(mats):
        left = "+".join(labels[: k + 1])
        blocks.append(format_matrix(dm, f"[{args.mode}] {left} with {labels[k + 1]}"))
    print("\n\n".join(blocks))
    return EXIT_OK


def read_series(path: str) -> dict[str, np.ndarray]:
    text = _read_text(path, "series file")
    rows = list(csv.reader(text.splitlines()))
    if not rows or tuple(rows[0][:2]) != ("timestamp", "actual"):
        raise ConfigError(f"{path}: expected a header starting with timestamp,actual")
    header = rows[0]
    try:
        data = np.array([[float(v) for v in r[1:]] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != len(header) - 1:
        raise ConfigError(f"{path}: no data rows or ragged columns")
    return {name: data[:, k] for k, name in enumerate(header[1:])}


def cmd_eval(args) -> int:
    series = read_series(args.series)
    actual = series.pop("actual")
    try:
        doc = {name: {"mae_kw": mae(f, actual), "mape_pct": mape(f, actual)} for name, f in series.items()}
    except MetricError as exc:
        raise ConfigError(f"{args.series}: {exc}") from None
    print(_json_dump({"metrics": doc, "metric_definitions": METRIC_LABELS}), end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _add_experiment_flags(p: argparse.ArgumentParser, *, training: bool, fusion: bool) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data", help="input CSV (default: synthetic series)")
    p.add_argument("--synth-seed", type=int, dest="synth_seed")
    p.add_argument("--synth-hours", type=int, dest="synth_hours")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--window", type=int)
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--learning-rate", type=float, dest="learning_rate")
        p.add_argument("--hidden-size", type=int, dest="hidden_size")
        p.add_argument("--num-layers", type=int, dest="num_layers")
        p.add_argument("--seed", type=int)
        p.add_argument("--truncation-length", type=int, dest="truncation_length")
        p.add_argument("--clip-norm", type=float, dest="clip_norm")
    if fusion:
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--origin", help="forecast origin timestamp (default: first held-out hour)")
        p.add_argument("--horizon", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evifuse", description="Evidence-fused LSTM load forecasting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic hourly CSV")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--hours", type=int, default=21 * 24)
    p.add_argument("--out", default="-", help="output path, '-' for stdout")

    p = sub.add_parser("train", help="train the three predictors and save checkpoints")
    _add_experiment_flags(p, training=True, fusion=False)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("fuse", help="fuse saved predictors at an origin")
    _add_experiment_flags(p, training=False, fusion=True)
    p.add_argument("--models", required=True, help="directory holding V1.json, V2.json, V3.json")
    p.add_argument("--out-dir", dest="fuse_out", help="also write fusion.json and series.csv here")

    p = sub.add_parser("run", help="full experiment: data, training, fusion, evaluation")
    _add_experiment_flags(p, training=True, fusion=True)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("tables", help="print decision matrices for three event mass triples")
    p.add_argument("triples", nargs=3, metavar="M1,M2,M3")
    p.add_argument("--mode", choices=MODES, default="disjunctive")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("eval", help="MAE and MAPE of each forecast column in a series CSV")
    p.add_argument("--series", required=True)
    return parser


def _overrides(args) -> dict:
    return {k: v for k, v in vars(args).items() if k in _FIELDS}


def _dispatch(args) -> int:
    if args.command == "synth":
        if args.hours < 48:
            raise ConfigError("--hours must be >= 48")
        return cmd_synth(args)
    if args.command == "tables":
        return cmd_tables(args)
    if args.command == "eval":
        return cmd_eval(args)
    cfg = resolve_config(args.config, _overrides(args))
    if args.command == "train":
        return cmd_train(args, cfg)
    if args.command == "fuse":
        args.out_dir = args.fuse_out
        return cmd_fuse(args, cfg)
    report = cmd_run(cfg)
    summary = {"selected": report["fusion"]["selected"], "metrics": report["metrics"],
               "out_dir": cfg.out_dir}
    print(_json_dump(summary), end="")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except (ConfigError, DatasetError, MetricError) as exc:
        print(f"evifuse: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ForecastError, FusionError, EvidenceError, FloatingPointError) as exc:
        print(f"evifuse: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
