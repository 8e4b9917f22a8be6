"""
Decision-level fusion of the three predictor variants.

Each predictor is scored on three lagged 5-hour windows of past actuals
(E1 = 1-5 h, E2 = 6-10 h, E3 = 11-15 h before the forecast origin).  Per
window the scores become a mass function over {V1, V2, V3}; the windows are
combined pairwise in order, the heaviest hypothesis subset is selected, and
the fused forecast is the per-step mean of that subset's members.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .dataset import (
    InputConfig,
    InputVariant,
    NormalizationSpec,
    Record,
    denormalize,
    format_timestamp,
    gather_features,
    to_arrays,
)
from .evidence import (
    EvidenceError,
    Frame,
    MassFunction,
    Subset,
    argmax_subset,
    combine_conjunctive,
    combine_disjunctive,
    make_mass,
)
from .forecast import LstmParams, predict

WINDOW_LENGTH = 5
DEFAULT_HORIZON = 24
FRAME = Frame(["V1", "V2", "V3"])
MODES = ("disjunctive", "conjunctive")


class FusionError(ValueError):
    pass


class PredictorId(enum.IntEnum):
    V1 = 1
    V2 = 2
    V3 = 3

    @property
    def variant(self) -> InputVariant:
        return InputVariant(self.value)

    @property
    def label(self) -> str:
        return self.name


@dataclass(frozen=True)
class EventWindow:
    id: int
    first: int  # hours before the origin, inclusive
    last: int

    @property
    def offsets(self) -> range:
        return range(self.first, self.last + 1)

    @property
    def label(self) -> str:
        return f"E{self.id}"


EVENT_WINDOWS = (EventWindow(1, 1, 5), EventWindow(2, 6, 10), EventWindow(3, 11, 15))


class TrainedPredictor(NamedTuple):
    """A fitted model and the input layout it was trained on."""

    params: LstmParams
    config: InputConfig

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return predict(self.params, inputs)


# -- scoring ------------------------------------------------------------------

def predictor_accuracy(predictions: Sequence[float], actuals: Sequence[float]) -> float:
    """Mean per-sample accuracy in percent over one event window.

    Each sample scores ``100 - |pred - actual| / actual * 100``, floored at 0.
    """
    p = np.asarray(predictions, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    if p.shape != (WINDOW_LENGTH,) or a.shape != (WINDOW_LENGTH,):
        raise FusionError(f"an event window holds exactly {WINDOW_LENGTH} prediction/actual pairs")
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise FusionError("actual load must be positive inside an event window")
    if not np.all(np.isfinite(p)):
        raise FusionError("non-finite prediction inside an event window")
    terms = np.maximum(100.0 - np.abs(p - a) / a * 100.0, 0.0)
    return float(terms.sum() / WINDOW_LENGTH)


def event_mass(accuracies: Sequence[float], frame: Frame = FRAME) -> MassFunction:
    """Share of total accuracy assigned to each predictor singleton."""
    acc = [float(v) for v in accuracies]
    if len(acc) != len(frame):
        raise FusionError(f"expected {len(frame)} accuracies, got {len(acc)}")
    if any(v < 0 for v in acc):
        raise FusionError("accuracies must be >= 0")
    if not any(v > 0 for v in acc):
        raise FusionError("every predictor scored zero accuracy; no evidence to distribute")
    return make_mass(frame, zip(frame.singletons(), acc), normalize=True)


_RULES: dict[str, Callable[[MassFunction, MassFunction], MassFunction]] = {
    "disjunctive": combine_disjunctive,
    "conjunctive": combine_conjunctive,
}


def _rule(mode: str):
    try:
        return _RULES[mode]
    except KeyError:
        raise FusionError(f"unknown fusion mode {mode!r}; choose from {MODES}") from None


def fuse_events(event_masses: Sequence[MassFunction], mode: str = "disjunctive") -> MassFunction:
    """Combine event masses left to right: ((E1 + E2) + E3) ..."""
    rule = _rule(mode)
    if len(event_masses) < 2:
        raise FusionError("need at least two event masses to fuse")
    out = event_masses[0]
    for m in event_masses[1:]:
        out = rule(out, m)
    return out


# -- decision matrices --------------------------------------------------------

@dataclass(frozen=True)
class MatrixCell:
    row: Subset
    col: Subset
    subset: Subset
    mass: float


@dataclass(frozen=True)
class DecisionMatrix:
    """All pairwise products of two mass functions.

    Columns are the focal sets of ``left``, rows those of ``right``, matching
    a layout where accumulated evidence runs across the top.
    """

    left: MassFunction
    right: MassFunction
    mode: str
    cells: tuple[tuple[MatrixCell, ...], ...]
    result: MassFunction

    @property
    def columns(self) -> list[Subset]:
        return list(self.left)

    @property
    def rows(self) -> list[Subset]:
        return list(self.right)

    def displayed(self, decimals: int = 2) -> list[list[Decimal]]:
        """Cell masses in percent, rounded half-up to ``decimals`` places."""
        return [[to_percent(c.mass, decimals) for c in row] for row in self.cells]

    def displayed_totals(self, decimals: int = 2) -> dict[str, Decimal]:
        """Per-subset sums of the rounded cells, as a printed table would total them."""
        totals: dict[int, Decimal] = {}
        for row, shown in zip(self.cells, self.displayed(decimals)):
            for cell, value in zip(row, shown):
                if cell.subset.bits:
                    totals[cell.subset.bits] = totals.get(cell.subset.bits, Decimal(0)) + value
        return {self.result.frame.from_bits(b).label: v for b, v in sorted(totals.items())}


def to_percent(mass: float, decimals: int = 2) -> Decimal:
    # strip binary noise below 1e-10 before the half-up tie decision
    cleaned = Decimal(f"{mass * 100.0:.10f}")
    return cleaned.quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_UP)


def decision_matrix(left: MassFunction, right: MassFunction, mode: str = "disjunctive") -> DecisionMatrix:
    rule = _rule(mode)
    if left.frame != right.frame:
        raise FusionError("mass functions are on different frames")
    cells = []
    for r in right:
        row = []
        for c in left:
            subset = r | c if mode == "disjunctive" else r & c
            row.append(MatrixCell(r, c, subset, right[r] * left[c]))
        cells.append(tuple(row))
    return DecisionMatrix(left, right, mode, tuple(cells), rule(left, right))


def decision_matrices(event_masses: Sequence[MassFunction], mode: str = "disjunctive") -> list[DecisionMatrix]:
    """The matrix for each fold step of :func:`fuse_events`."""
    out = []
    acc = event_masses[0]
    for m in event_masses[1:]:
        dm = decision_matrix(acc, m, mode)
        out.append(dm)
        acc = dm.result
    return out


# -- decision -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FusionDecision:
    combined: MassFunction
    selected: Subset
    fused: np.ndarray                 # (horizon,) kW
    member_predictions: np.ndarray    # (3, horizon) kW
    event_masses: tuple[MassFunction, ...] = ()
    event_accuracies: np.ndarray | None = None  # (events, predictors) percent
    mode: str = "disjunctive"
    origin: int | None = None
    timestamps: np.ndarray | None = None
    matrices: tuple[DecisionMatrix, ...] = field(default=())

    @property
    def selected_indices(self) -> list[int]:
        return [i for i in range(len(self.combined.frame)) if self.selected.bits >> i & 1]

    def to_report(self) -> dict:
        frame = self.combined.frame
        report = {
            "mode": self.mode,
            "origin": format_timestamp(self.origin) if self.origin is not None else None,
            "event_masses": {f"E{k + 1}": m.to_text_map() for k, m in enumerate(self.event_masses)},
            "combined_mass": self.combined.to_text_map(),
            "selected": self.selected.label,
            "fused_kw": self.fused.tolist(),
            "member_predictions_kw": {label: row.tolist() for label, row in zip(frame.elements, self.member_predictions)},
        }
        if self.event_accuracies is not None:
            report["event_accuracy_pct"] = {
                f"E{k + 1}": dict(zip(frame.elements, map(float, row))) for k, row in enumerate(self.event_accuracies)
            }
        if self.timestamps is not None:
            report["timestamps"] = [format_timestamp(int(t)) for t in self.timestamps]
        if self.matrices:
            report["decision_matrices"] = [matrix_report(dm) for dm in self.matrices]
        return report


def matrix_report(dm: DecisionMatrix) -> dict:
    return {
        "mode": dm.mode,
        "columns": {c.label: dm.left[c] for c in dm.columns},
        "rows": {r.label: dm.right[r] for r in dm.rows},
        "cells": [
            {"row": c.row.label, "col": c.col.label, "subset": c.subset.label, "mass": c.mass}
            for row in dm.cells for c in row
        ],
        "result": dm.result.to_text_map(),
        "displayed_totals_pct": {k: str(v) for k, v in dm.displayed_totals().items()},
    }


def decide_and_fuse(combined: MassFunction, horizon_predictions, horizon: int = DEFAULT_HORIZON,
                    **context) -> FusionDecision:
    """Select the heaviest subset and average its members step by step."""
    preds = np.asarray(horizon_predictions, dtype=np.float64)
    n = len(combined.frame)
    if preds.ndim != 2 or preds.shape[0] != n:
        raise FusionError(f"expected {n} prediction rows, got shape {preds.shape}")
    if preds.shape[1] != horizon:
        raise FusionError(f"expected {horizon} predictions per predictor, got {preds.shape[1]}")
    try:
        selected = argmax_subset(combined)
    except EvidenceError as exc:
        raise FusionError(str(exc)) from None
    members = [i for i in range(n) if selected.bits >> i & 1]
    fused = preds[members].mean(axis=0) if len(members) > 1 else preds[members[0]].copy()
    return FusionDecision(combined=combined, selected=selected, fused=fused,
                          member_predictions=preds, **context)


# -- pipeline -----------------------------------------------------------------

def _window_predictions(predictor, table: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    feats = np.stack([gather_features(table, i, predictor.config) for i in indices])
    return np.asarray(predictor(feats), dtype=np.float64)


def rollout(predictor, table: np.ndarray, origin_index: int, horizon: int) -> np.ndarray:
    """Recursive multi-step forecast in normalized units.

    Loads at and after the origin are unknown: each step's prediction is
    written back as the load history for later steps.  Weather columns are
    read as given (treated as a weather forecast).
    """
    work = table.copy()
    work[origin_index:, 0] = np.nan
    out = np.empty(horizon)
    for s in range(horizon):
        idx = origin_index + s
        feats = gather_features(work, idx, predictor.config)[None]
        value = float(np.asarray(predictor(feats))[0])
        if not np.isfinite(value):
            raise FusionError(f"non-finite forecast at horizon step {s}")
        out[s] = value
        work[idx, 0] = value
    return out


def run_fusion(predictors: Sequence, records: Sequence[Record], spec: NormalizationSpec,
               origin: int, mode: str = "disjunctive", horizon: int = DEFAULT_HORIZON) -> FusionDecision:
    """Score, combine and fuse three predictors for the ``horizon`` hours from ``origin``.

    ``predictors`` are callables on normalized input batches with a
    ``config`` attribute (e.g. :class:`TrainedPredictor`), in V1, V2, V3 order.
    Event windows compare one-step predictions with actual loads in kW.
    """
    _rule(mode)
    if len(predictors) != len(FRAME):
        raise FusionError(f"expected {len(FRAME)} predictors, got {len(predictors)}")
    times, values = to_arrays(records)
    hits = np.flatnonzero(times == origin)
    if hits.size == 0:
        raise FusionError(f"origin {format_timestamp(origin)} not in the record range")
    o = int(hits[0])
    deepest = max(w.last for w in EVENT_WINDOWS) + max(p.config.history for p in predictors)
    if o < deepest:
        raise FusionError(f"origin needs {deepest} hours of history, only {o} available")
    if o + horizon > len(records):
        raise FusionError(f"horizon of {horizon} h runs past the end of the records")
    table = spec.transform(values)

    accuracies = np.empty((len(EVENT_WINDOWS), len(predictors)))
    for e, window in enumerate(EVENT_WINDOWS):
        idx = [o - k for k in window.offsets]
        actual = values[idx, 0]
        if np.any(actual <= 0):
            raise FusionError(f"zero or negative actual load inside event window {window.label}")
        for j, p in enumerate(predictors):
            pred_kw = denormalize(_window_predictions(p, table, idx), spec)
            accuracies[e, j] = predictor_accuracy(pred_kw, actual)
    masses = tuple(event_mass(row) for row in accuracies)
    combined = fuse_events(masses, mode)

    horizon_kw = np.stack([denormalize(rollout(p, table, o, horizon), spec) for p in predictors])
    return decide_and_fuse(
        combined, horizon_kw, horizon,
        event_masses=masses, event_accuracies=accuracies, mode=mode, origin=int(origin),
        timestamps=times[o : o + horizon].copy(), matrices=tuple(decision_matrices(masses, mode)),
    )

