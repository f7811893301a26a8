"""2-D projection export and the aggregated JSON run report."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .sequence import FeatureSequence
from .synth import SILENCE

SCHEMA_VERSION = 1
REPRESENTATIONS = ("origin", "avenet", "average")
CSV_FIELDS = ("group_id", "frame_index", "speaker_tag", "representation_tag", "x", "y")


class ValidationError(ValueError):
    pass


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------- projection

@dataclass
class Selection:
    """Frames of one representation for one member: values[k] is frame frame_indices[k]."""
    group_id: int
    speaker_tag: str
    representation: str
    frame_indices: list
    values: np.ndarray

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValidationError(f"unknown representation {self.representation!r}")
        if isinstance(self.values, FeatureSequence):
            self.values = self.values.values
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.values) != len(self.frame_indices):
            raise ValidationError("values must be (n_frames, D) with one row per frame index")


@dataclass
class ProjectionRow:
    group_id: int
    frame_index: int
    speaker_tag: str
    representation_tag: str
    x: float
    y: float


@dataclass
class ProjectionExport:
    rows: list
    mean: np.ndarray | None = None
    components: np.ndarray | None = None
    note: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.group_id, r.frame_index, r.speaker_tag, r.representation_tag,
                        repr(float(r.x)), repr(float(r.y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ProjectionExport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != CSV_FIELDS:
            raise ValidationError(f"bad projection header {header!r}")
        rows = [ProjectionRow(int(g), int(f), s, r, float(x), float(y)) for g, f, s, r, x, y in reader]
        return cls(rows)

    def points(self, representation: str) -> dict:
        return {(r.group_id, r.frame_index, r.speaker_tag): np.array([r.x, r.y])
                for r in self.rows if r.representation_tag == representation}


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for k, vec in enumerate(out):
        if vec[np.argmax(np.abs(vec))] < 0:
            out[k] = -vec
    return out


def project_2d(selections: list[Selection]) -> ProjectionExport:
    """Principal-component projection to 2-D, fit on the pooled selection."""
    if not selections:
        raise ValidationError("nothing selected")
    dims = {s.values.shape[1] for s in selections}
    if len(dims) != 1:
        raise ValidationError(f"selections disagree on dimension: {sorted(dims)}")
    pooled = np.concatenate([s.values for s in selections])
    if len(pooled) < 2:
        raise ValidationError("need at least 2 vectors to project")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    if not np.any(np.abs(centered) > 1e-12 * max(1.0, float(np.abs(pooled).max()))):
        raise ValidationError("selected vectors have zero variance")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], comps.shape[1]))])
    comps = _fix_signs(comps)
    rows = []
    for s in selections:
        xy = (s.values - mean) @ comps.T
        for f, (x, y) in zip(s.frame_indices, xy):
            rows.append(ProjectionRow(int(s.group_id), int(f), s.speaker_tag, s.representation,
                                      float(x), float(y)))
    return ProjectionExport(rows, mean, comps)


def content_frames(group, count: int = 30) -> list[int]:
    """First ``count`` frames whose phoneme is not silence."""
    ph = group.script.frame_phonemes()
    idx = [int(i) for i in np.flatnonzero(ph != SILENCE)]
    if len(idx) < count:
        raise ValidationError(f"group {group.group_id} has only {len(idx)} content frames")
    return idx[:count]


def figure_selection(groups, encoder, speakers: int = 5, frames: int = 30) -> list[Selection]:
    """Deterministic pick: first group with enough content frames, first ``speakers`` base members.

    Every member gets origin, avenet and average rows for the same frames, so
    each (representation, frame) pair appears once per selected member.
    """
    from .average import average_feature
    from .encoder import encode_array

    for g in groups:
        base = g.select("base")
        if len(base) < speakers or int(np.sum(g.script.frame_phonemes() != SILENCE)) < frames:
            continue
        idx = content_frames(g, frames)
        avg = average_feature(g).values[idx]
        enc = encode_array(encoder, np.stack([m.features.values for m in base[:speakers]]))
        out = []
        for m, e in zip(base[:speakers], enc):
            out.append(Selection(g.group_id, m.speaker.id, "origin", idx, m.features.values[idx]))
            out.append(Selection(g.group_id, m.speaker.id, "avenet", idx, e[idx]))
            out.append(Selection(g.group_id, m.speaker.id, "average", idx, avg))
        return out
    raise ValidationError(f"no group has {speakers} base members and {frames} content frames")


def cluster_distances(export: ProjectionExport) -> dict:
    """Mean 2-D distance from origin / avenet points to their frame's average point."""
    avg = export.points("average")
    out = {}
    for rep in ("origin", "avenet"):
        pts = export.points(rep)
        if not pts:
            raise ValidationError(f"no {rep} rows in export")
        out[rep] = float(np.mean([np.linalg.norm(p - avg[k]) for k, p in pts.items()]))
    return out


# ---------------------------------------------------------------- run report

_NUM = {"type": "number"}
_NUM_LIST = {"type": "array", "items": _NUM}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version"],
    "minProperties": 2,
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config": {"type": "object"},
        "seeds": {"type": "object", "additionalProperties": {"type": "integer"}},
        "distance": {
            "type": "object",
            "required": ["mav", "mean_pair_distance_origin", "pair_count"],
            "properties": {"mav": _NUM, "mean_pair_distance_origin": _NUM,
                           "mean_pair_distance_avenet": _NUM, "reduction_ratio": _NUM,
                           "pair_count": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "alignment": {
            "type": "object",
            "required": ["pair_count", "e_avg", "per_pair_errors", "worst_pair"],
            "properties": {"pair_count": {"type": "integer", "minimum": 1}, "e_avg": _NUM,
                           "per_pair_errors": _NUM_LIST, "worst_pair": {}},
        },
        "probe": {"type": "object"},
        "conversion": {"type": "object"},
        "projection": {"type": "object"},
        "extra": {"type": "object"},
    },
}


def _plain(obj):
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def aggregate_report(distance=None, alignment=None, probe=None, conversion=None, projection=None,
                     config: dict | None = None, seeds: dict | None = None, extra: dict | None = None,
                     schema_version: int = SCHEMA_VERSION) -> dict:
    """Collect results into one report dict; empty sections are left out."""
    if schema_version != SCHEMA_VERSION:
        raise SchemaError(f"report schema version {schema_version} conflicts with {SCHEMA_VERSION}")
    sections = {"distance": distance, "alignment": alignment, "probe": probe,
                "conversion": conversion, "projection": projection, "config": config,
                "seeds": seeds, "extra": extra}
    report = {"schema_version": schema_version}
    for name, value in sections.items():
        value = _plain(value)
        if value not in (None, {}, []):
            report[name] = value
    if len(report) == 1:
        raise ValidationError("report needs at least one section")
    validate_report(report)
    return report


def merge_reports(*reports: dict) -> dict:
    """Union of report sections; a version mismatch or a conflicting section is an error."""
    out: dict = {}
    for r in reports:
        v = r.get("schema_version")
        if out and v != out["schema_version"]:
            raise SchemaError(f"cannot merge schema versions {out['schema_version']} and {v}")
        for k, val in r.items():
            if k in out and out[k] != val:
                raise SchemaError(f"section {k!r} differs between reports")
            out[k] = val
    validate_report(out)
    return out


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"report does not match schema: {exc.message}") from None


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
