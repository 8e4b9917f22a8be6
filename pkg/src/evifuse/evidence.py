"""
Dempster-Shafer evidence engine.

Subsets of a frame of discernment are encoded as integer bitmasks: bit ``i``
is set when ``frame.elements[i]`` is a member.  Mass functions keep only their
focal sets (nonzero masses), so combination cost scales with the number of
focal sets rather than with ``2**n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

MAX_FRAME_SIZE = 16
INPUT_SUM_TOL = 1e-6
COMBINED_SUM_TOL = 1e-9
CONFLICT_TOL = 1e-12


class EvidenceError(ValueError):
    """Invalid evidence: bad masses, bad subsets, undefined combination."""


class FrameMismatchError(EvidenceError):
    pass


class TotalConflictError(EvidenceError):
    pass


@dataclass(frozen=True)
class Frame:
    """An ordered frame of discernment.  Element order fixes the bit encoding."""

    elements: tuple[str, ...]

    def __init__(self, elements: Iterable[str]) -> None:
        elements = tuple(str(e) for e in elements)
        if not elements:
            raise EvidenceError("frame must contain at least one element")
        if len(elements) > MAX_FRAME_SIZE:
            raise EvidenceError(
                f"frame has {len(elements)} elements, at most {MAX_FRAME_SIZE} supported"
            )
        if len(set(elements)) != len(elements):
            raise EvidenceError(f"frame elements must be unique: {elements}")
        object.__setattr__(self, "elements", elements)

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def full_bits(self) -> int:
        return (1 << len(self.elements)) - 1

    def subset(self, *members: str) -> Subset:
        bits = 0
        for member in members:
            try:
                bits |= 1 << self.elements.index(member)
            except ValueError:
                raise EvidenceError(f"{member!r} is not an element of {self.elements}") from None
        return Subset(self, bits)

    def from_bits(self, bits: int) -> Subset:
        return Subset(self, bits)

    @property
    def full(self) -> Subset:
        return Subset(self, self.full_bits)

    @property
    def empty(self) -> Subset:
        return Subset(self, 0)

    def singletons(self) -> list[Subset]:
        return [Subset(self, 1 << i) for i in range(len(self.elements))]

    def parse_label(self, label: str) -> Subset:
        """Inverse of :attr:`Subset.label` (comma-joined members)."""
        label = label.strip()
        if not label:
            return self.empty
        return self.subset(*(part.strip() for part in label.split(",")))


@dataclass(frozen=True)
class Subset:
    """A hypothesis subset of ``frame``, stored as an inclusion bitmask."""

    frame: Frame
    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits <= self.frame.full_bits:
            raise EvidenceError(f"bitmask {self.bits:#x} outside frame of size {len(self.frame)}")

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(e for i, e in enumerate(self.frame.elements) if self.bits >> i & 1)

    @property
    def label(self) -> str:
        return ",".join(self.members)

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __iter__(self) -> Iterator[str]:
        return iter(self.members)

    def _check(self, other: Subset) -> None:
        if other.frame != self.frame:
            raise FrameMismatchError("subsets belong to different frames")

    def __or__(self, other: Subset) -> Subset:
        self._check(other)
        return Subset(self.frame, self.bits | other.bits)

    def __and__(self, other: Subset) -> Subset:
        self._check(other)
        return Subset(self.frame, self.bits & other.bits)

    def complement(self) -> Subset:
        return Subset(self.frame, self.frame.full_bits & ~self.bits)

    def issubset(self, other: Subset) -> bool:
        self._check(other)
        return self.bits & ~other.bits == 0

    def __repr__(self) -> str:
        return "{" + self.label + "}"


def power_set(frame: Frame) -> list[Subset]:
    """All ``2**n`` subsets of ``frame`` in ascending bitmask order."""
    return [Subset(frame, bits) for bits in range(1 << len(frame))]


class MassFunction(Mapping[Subset, float]):
    """Immutable basic probability assignment over a frame.

    Indexing with any subset of the frame returns its mass (0 for non-focal
    sets).  Iteration yields the focal sets in ascending bitmask order.
    """

    __slots__ = ("frame", "_masses")

    def __init__(self, frame: Frame, masses: Mapping[int, float]) -> None:
        # trusted constructor; use make_mass() for validated input
        self.frame = frame
        focal = {b: float(v) for b, v in sorted(masses.items()) if v != 0.0}
        self._masses = MappingProxyType(focal)

    @property
    def focal(self) -> Mapping[int, float]:
        """Focal sets as ``{bitmask: mass}``."""
        return self._masses

    def __getitem__(self, subset: Subset) -> float:
        if subset.frame != self.frame:
            raise FrameMismatchError("subset belongs to a different frame")
        return self._masses.get(subset.bits, 0.0)

    def __iter__(self) -> Iterator[Subset]:
        return (Subset(self.frame, b) for b in self._masses)

    def __len__(self) -> int:
        return len(self._masses)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MassFunction):
            return NotImplemented
        return self.frame == other.frame and dict(self._masses) == dict(other._masses)

    def __hash__(self) -> int:
        return hash((self.frame, tuple(self._masses.items())))

    def __repr__(self) -> str:
        body = ", ".join(f"{{{Subset(self.frame, b).label}}}: {v:.6g}" for b, v in self._masses.items())
        return f"MassFunction({body})"

    def dense(self) -> list[float]:
        """Masses of all ``2**n`` subsets, indexed by bitmask."""
        out = [0.0] * (1 << len(self.frame))
        for b, v in self._masses.items():
            out[b] = v
        return out

    def to_text_map(self) -> dict[str, float]:
        """Serialize as ``{"V2,V3": 0.2768, ...}`` (focal sets only)."""
        return {Subset(self.frame, b).label: v for b, v in self._masses.items()}

    @classmethod
    def from_text_map(cls, frame: Frame, data: Mapping[str, float]) -> MassFunction:
        return make_mass(frame, [(frame.parse_label(k), v) for k, v in data.items()])


def _validate(frame: Frame, masses: Mapping[int, float], tol: float) -> None:
    for bits, v in masses.items():
        if not math.isfinite(v) or v < 0.0:
            raise EvidenceError(f"mass of {Subset(frame, bits)!r} is {v}, must be finite and >= 0")
        if v > 1.0 + tol:
            raise EvidenceError(f"mass of {Subset(frame, bits)!r} is {v} > 1")
    if masses.get(0, 0.0) != 0.0:
        raise EvidenceError("the empty set must carry zero mass")
    total = math.fsum(masses.values())
    if abs(total - 1.0) > tol:
        raise EvidenceError(f"masses sum to {total!r}, expected 1")


def make_mass(
    frame: Frame,
    assignments: Iterable[tuple[Subset, float]] | Mapping[Subset, float],
    normalize: bool = False,
) -> MassFunction:
    """Build a validated mass function.

    Repeated subsets accumulate.  With ``normalize`` the values are divided
    by their total; otherwise they must already sum to 1 within 1e-6.
    """
    if isinstance(assignments, Mapping):
        assignments = assignments.items()
    masses: dict[int, float] = {}
    for subset, value in assignments:
        if subset.frame != frame:
            raise FrameMismatchError(f"subset {subset!r} is not from frame {frame.elements}")
        value = float(value)
        if not math.isfinite(value) or value < 0.0:
            raise EvidenceError(f"mass of {subset!r} is {value}, must be finite and >= 0")
        masses[subset.bits] = masses.get(subset.bits, 0.0) + value
    if masses.get(0, 0.0) != 0.0:
        raise EvidenceError("the empty set must carry zero mass")
    if normalize:
        total = math.fsum(masses.values())
        if total <= 0.0:
            raise EvidenceError("cannot normalize: total mass is zero")
        masses = {b: v / total for b, v in masses.items()}
    _validate(frame, masses, INPUT_SUM_TOL)
    total = math.fsum(masses.values())
    if abs(total - 1.0) > COMBINED_SUM_TOL:
        # rounded inputs: absorb the residual so combined masses stay within 1e-9
        masses = {b: v / total for b, v in masses.items()}
    return MassFunction(frame, masses)


def vacuous(frame: Frame) -> MassFunction:
    """Total ignorance: all mass on the full frame."""
    return MassFunction(frame, {frame.full_bits: 1.0})


def _check_subset(m: MassFunction, x: Subset) -> None:
    if x.frame != m.frame:
        raise FrameMismatchError("subset belongs to a different frame")


def belief(m: MassFunction, x: Subset) -> float:
    """Total mass of the nonempty subsets of ``x``."""
    _check_subset(m, x)
    return math.fsum(v for b, v in m.focal.items() if b and b & ~x.bits == 0)


def plausibility(m: MassFunction, x: Subset) -> float:
    """Total mass of the focal sets intersecting ``x``; equals ``1 - Bel(not x)``."""
    _check_subset(m, x)
    return math.fsum(v for b, v in m.focal.items() if b & x.bits)


@dataclass(frozen=True)
class BeliefInterval:
    bel: float
    pls: float

    def __post_init__(self) -> None:
        tol = COMBINED_SUM_TOL
        if not (-tol <= self.bel <= self.pls + tol and self.pls <= 1.0 + tol):
            raise EvidenceError(f"invalid belief interval [{self.bel}, {self.pls}]")

    @property
    def width(self) -> float:
        return self.pls - self.bel


def confidence_interval(m: MassFunction, x: Subset) -> BeliefInterval:
    return BeliefInterval(belief(m, x), plausibility(m, x))


def _same_frame(m1: MassFunction, m2: MassFunction) -> Frame:
    if m1.frame != m2.frame:
        raise FrameMismatchError(f"cannot combine {m1.frame.elements} with {m2.frame.elements}")
    return m1.frame


def _products(m1: MassFunction, m2: MassFunction, op) -> dict[int, list[float]]:
    terms: dict[int, list[float]] = {}
    for a, va in m1.focal.items():
        for b, vb in m2.focal.items():
            terms.setdefault(op(a, b), []).append(va * vb)
    return terms


def combine_conjunctive(m1: MassFunction, m2: MassFunction) -> MassFunction:
    """Dempster's rule: intersect focal sets, renormalize by ``1 - K``.

    Raises :class:`TotalConflictError` when the conflict ``K`` is 1.
    """
    frame = _same_frame(m1, m2)
    terms = _products(m1, m2, lambda a, b: a & b)
    conflict = math.fsum(terms.pop(0, []))
    if conflict >= 1.0 - CONFLICT_TOL:
        raise TotalConflictError(f"total conflict between sources (K = {conflict!r})")
    scale = 1.0 - conflict
    masses = {bits: math.fsum(vals) / scale for bits, vals in terms.items()}
    _validate(frame, masses, COMBINED_SUM_TOL)
    return MassFunction(frame, masses)


def combine_disjunctive(m1: MassFunction, m2: MassFunction) -> MassFunction:
    """Disjunctive rule: mass of ``A | B`` accumulates ``m1(A) * m2(B)``."""
    frame = _same_frame(m1, m2)
    terms = _products(m1, m2, lambda a, b: a | b)
    masses = {bits: math.fsum(vals) for bits, vals in terms.items()}
    _validate(frame, masses, COMBINED_SUM_TOL)
    return MassFunction(frame, masses)


def conflict(m1: MassFunction, m2: MassFunction) -> float:
    """Conflict mass ``K``: total product mass on empty intersections."""
    _same_frame(m1, m2)
    return math.fsum(va * vb for a, va in m1.focal.items() for b, vb in m2.focal.items() if not a & b)


def argmax_subset(m: MassFunction) -> Subset:
    """Nonempty subset of maximal mass.

    Ties go to the smaller subset, then to the lower bitmask.
    """
    candidates = [(b, v) for b, v in m.focal.items() if b and v > 0.0]
    if not candidates:
        raise EvidenceError("mass function has no nonempty focal set")
    best = max(v for _, v in candidates)
    bits = min((b for b, v in candidates if v == best), key=lambda b: (b.bit_count(), b))
    return Subset(m.frame, bits)


def combine_all(masses: Sequence[MassFunction], rule: str = "disjunctive") -> MassFunction:
    """Left fold of pairwise combination in the given order."""
    if not masses:
        raise EvidenceError("nothing to combine")
    fn = {"disjunctive": combine_disjunctive, "conjunctive": combine_conjunctive}.get(rule)
    if fn is None:
        raise EvidenceError(f"unknown combination rule {rule!r}")
    out = masses[0]
    for m in masses[1:]:
        out = fn(out, m)
    return out
