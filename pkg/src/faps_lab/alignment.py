"""Phoneme interval files and the parallel-pair boundary error.

Interval files are UTF-8 TSV, one phoneme per line:
``label<TAB>start_seconds<TAB>end_seconds`` with 6 decimals. Times are
handled internally as integer microseconds so the metric is exact on that grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

_US = 1_000_000


class IntervalParseError(ValueError):
    def __init__(self, line: int, message: str, column: int | None = None):
        where = f"line {line}" + (f", column {column}" if column else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.column = column


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeInterval:
    label: str
    start: float
    end: float

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise AlignmentError(f"{self.label}: need 0 <= start <= end, got {self.start}, {self.end}")

    @property
    def start_us(self) -> int:
        return round(self.start * _US)

    @property
    def end_us(self) -> int:
        return round(self.end * _US)


@dataclass
class IntervalSequence:
    intervals: list = field(default_factory=list)

    def __post_init__(self):
        prev = None
        for iv in self.intervals:
            if prev is not None and (iv.start < prev.start or iv.start < prev.end - 1e-9):
                raise AlignmentError(f"interval {iv.label} at {iv.start} overlaps the previous one")
            prev = iv

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    @property
    def labels(self) -> list[str]:
        return [iv.label for iv in self.intervals]

    def without(self, skip_labels: Iterable[str]) -> "IntervalSequence":
        skip = set(skip_labels)
        return IntervalSequence([iv for iv in self.intervals if iv.label not in skip])

    def shifted(self, delta: float) -> "IntervalSequence":
        return IntervalSequence([PhonemeInterval(iv.label, round(iv.start + delta, 6), round(iv.end + delta, 6))
                                 for iv in self.intervals])


def _fmt(t: float) -> str:
    return f"{t:.6f}"


def format_intervals(seq: IntervalSequence) -> str:
    return "".join(f"{iv.label}\t{_fmt(iv.start)}\t{_fmt(iv.end)}\n" for iv in seq)


def _parse_time(text: str, lineno: int, col: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise IntervalParseError(lineno, f"not a number: {text!r}", col) from None
    if value != value or value in (float("inf"), float("-inf")):
        raise IntervalParseError(lineno, f"not a finite time: {text!r}", col)
    if value < 0:
        raise IntervalParseError(lineno, f"negative time {text!r}", col)
    return value


def parse_intervals(text: str) -> IntervalSequence:
    out = []
    prev = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise IntervalParseError(lineno, f"expected 3 tab-separated fields, got {len(fields)}")
        label = fields[0]
        if not label or label != label.strip():
            raise IntervalParseError(lineno, f"bad label {label!r}", 1)
        start = _parse_time(fields[1], lineno, 2)
        end = _parse_time(fields[2], lineno, 3)
        if end < start:
            raise IntervalParseError(lineno, f"end {fields[2]} before start {fields[1]}", 3)
        for col, (txt, val) in ((2, (fields[1], start)), (3, (fields[2], end))):
            if float(_fmt(val)) != val:
                raise IntervalParseError(lineno, f"time {txt!r} has more than 6 decimal places", col)
        if prev is not None and (start < prev.start or start < prev.end - 1e-9):
            raise IntervalParseError(lineno, f"start {fields[1]} goes back before the previous interval "
                                             f"({_fmt(prev.start)}-{_fmt(prev.end)})", 2)
        prev = PhonemeInterval(label, start, end)
        out.append(prev)
    return IntervalSequence(out)


def _pair_error_us(a: IntervalSequence, b: IntervalSequence) -> Fraction:
    if len(a) != len(b):
        raise AlignmentError(f"pair is not parallel: {len(a)} vs {len(b)} phonemes")
    if a.labels != b.labels:
        k = next(i for i, (x, y) in enumerate(zip(a.labels, b.labels)) if x != y)
        raise AlignmentError(f"pair is not parallel: phoneme {k} is {a.labels[k]!r} vs {b.labels[k]!r}")
    if not len(a):
        raise AlignmentError("pair has no phonemes")
    total = sum(abs(x.start_us - y.start_us) + abs(x.end_us - y.end_us) for x, y in zip(a, b))
    return Fraction(total, 2 * len(a))


def pair_error(a: IntervalSequence, b: IntervalSequence, skip_labels: Sequence[str] = ()) -> float:
    """Mean over phonemes of (|start error| + |end error|) / 2, in seconds."""
    if skip_labels:
        a, b = a.without(skip_labels), b.without(skip_labels)
    return float(_pair_error_us(a, b) / _US)


@dataclass
class AlignmentReport:
    pair_count: int
    per_pair_errors: list
    e_avg: float
    worst_pair: object

    def to_dict(self) -> dict:
        return {"pair_count": self.pair_count, "e_avg": self.e_avg,
                "per_pair_errors": self.per_pair_errors, "worst_pair": self.worst_pair}


def e_avg(pairs, ids: Sequence | None = None, skip_labels: Sequence[str] = ()) -> AlignmentReport:
    """Average pair error over parallel pairs, with per-pair detail in input order."""
    pairs = list(pairs)
    if not pairs:
        raise AlignmentError("no pairs to score")
    ids = list(range(len(pairs))) if ids is None else list(ids)
    exact = []
    for a, b in pairs:
        if skip_labels:
            a, b = a.without(skip_labels), b.without(skip_labels)
        exact.append(_pair_error_us(a, b))
    mean = sum(exact, Fraction(0)) / len(exact)
    worst = max(range(len(exact)), key=lambda i: exact[i])
    return AlignmentReport(len(pairs), [float(e / _US) for e in exact], float(mean / _US), ids[worst])
