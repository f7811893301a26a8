"""Average features and the pair-distance statistics built on them."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .sequence import AVERAGE, FeatureSequence


class ValidationError(ValueError):
    pass


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureSequence) else np.asarray(x)


def average_feature(group, members: str = "base") -> FeatureSequence:
    """Per-frame, per-dimension mean over the selected group members."""
    seqs = group.select(members) if hasattr(group, "select") else list(group)
    if not seqs:
        raise ValidationError(f"no members selected ({members!r})")
    arrays = [_values(getattr(m, "features", m)) for m in seqs]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"members are not frame-aligned: {sorted(shapes)}")
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for a in arrays:
        acc += a
    return FeatureSequence(acc / len(arrays), AVERAGE)


def mean_absolute_value(seq) -> float:
    v = _values(seq)
    if v.size == 0:
        raise ValidationError("empty sequence")
    return float(np.abs(v, dtype=np.float64).mean())


def pair_distance(a, b) -> float:
    """Mean absolute elementwise difference (same scale as the MAV)."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ValidationError(f"shape mismatch: {av.shape} vs {bv.shape}")
    if av.size == 0:
        raise ValidationError("empty sequence")
    return float(np.abs(av.astype(np.float64) - bv.astype(np.float64)).mean())


_ROLE = {"base": "base", "lws": "lws-augmented"}


@dataclass
class DistanceReport:
    mav: float
    mean_pair_distance_origin: float
    mean_pair_distance_avenet: float | None
    reduction_ratio: float | None
    pair_count: int

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def sample_pairs(groups, pair_sample_count: int, rng, roles: str = "all"):
    """Draw (group index, member i, member j) triples, i != j, within groups."""
    if pair_sample_count < 1:
        raise ValidationError("pair_sample_count must be >= 1")
    eligible = []
    for gi, g in enumerate(groups):
        idx = [k for k, m in enumerate(g.members) if roles == "all" or m.role == _ROLE[roles]]
        if len(idx) >= 2:
            eligible.append((gi, idx))
    if not eligible:
        raise ValidationError(f"no group has two {roles!r} members")
    out = []
    for _ in range(pair_sample_count):
        gi, idx = eligible[int(rng.integers(len(eligible)))]
        i, j = rng.choice(len(idx), size=2, replace=False)
        out.append((gi, idx[int(i)], idx[int(j)]))
    return out


def distance_report(groups, encoder=None, pair_sample_count: int = 1000, rng=None,
                    roles: str = "all", encode_fn=None) -> DistanceReport:
    """MAV and mean within-group pair distance, before and (optionally) after encoding.

    ``encoder`` is EncoderParams; ``encode_fn`` overrides how a (T, D) array is encoded.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    groups = list(groups)
    pairs = sample_pairs(groups, pair_sample_count, rng, roles)
    if encode_fn is None and encoder is not None:
        from .encoder import encode_array
        encode_fn = lambda x: encode_array(encoder, x)  # noqa: E731

    cache: dict = {}

    def enc(gi, k):
        key = (gi, k)
        if key not in cache:
            cache[key] = encode_fn(groups[gi].members[k].features.values)
        return cache[key]

    mavs, d_orig, d_enc = [], [], []
    seen = set()
    for gi, i, j in pairs:
        a, b = groups[gi].members[i].features, groups[gi].members[j].features
        for k, s in ((i, a), (j, b)):
            if (gi, k) not in seen:
                seen.add((gi, k))
                mavs.append(mean_absolute_value(s))
        d_orig.append(pair_distance(a, b))
        if encode_fn is not None:
            d_enc.append(pair_distance(enc(gi, i), enc(gi, j)))
    origin = float(np.mean(d_orig))
    after = float(np.mean(d_enc)) if d_enc else None
    ratio = origin / after if after else None
    return DistanceReport(float(np.mean(mavs)), origin, after, ratio, len(pairs))
