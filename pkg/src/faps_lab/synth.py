"""Seeded synthetic FAPS corpora.

Each group shares one phoneme script and one content trajectory; members
differ only in the speaker vector (and independent observation noise). A frame
is rendered as

    content @ W_c + speaker @ W_s + gamma * outer(content, speaker) @ W_x + sigma * noise
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .alignment import IntervalSequence, PhonemeInterval, format_intervals
from .formats import read_feature_file, write_feature_file
from .sequence import RAW, FeatureSequence

SILENCE = 0
BASE = "base"
LWS = "lws-augmented"


class ConfigError(ValueError):
    pass


class ValidationError(ValueError):
    pass


def phoneme_label(pid: int) -> str:
    return "sil" if pid == SILENCE else f"p{pid:02d}"


# ---------------------------------------------------------------- scripts

@dataclass(frozen=True)
class PhonemeScript:
    entries: tuple  # ((phoneme_id, frames), ...)

    def __post_init__(self):
        if not self.entries:
            raise ValidationError("empty script")
        for pid, dur in self.entries:
            if dur < 1:
                raise ValidationError(f"phoneme {pid} has duration {dur} < 1")

    @property
    def total_frames(self) -> int:
        return sum(d for _, d in self.entries)

    @property
    def durations(self) -> list[int]:
        return [d for _, d in self.entries]

    @property
    def labels(self) -> list[str]:
        return [phoneme_label(p) for p, _ in self.entries]

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat([p for p, _ in self.entries], self.durations)


def _check_range(name, rng_pair):
    lo, hi = rng_pair
    if lo > hi:
        raise ConfigError(f"{name}: min {lo} > max {hi}")
    return int(lo), int(hi)


def sample_script(rng, phoneme_count: int, length_range=(5, 12), duration_range=(2, 6),
                  silence_edges: bool = True) -> PhonemeScript:
    """Draw phoneme ids and durations once; every speaker in a group reuses them."""
    if phoneme_count < 2:
        raise ConfigError("phoneme inventory needs at least 2 entries")
    lmin, lmax = _check_range("length_range", length_range)
    dmin, dmax = _check_range("duration_range", duration_range)
    if lmin < 1 or dmin < 1:
        raise ConfigError("length and duration ranges must start at >= 1")
    n = int(rng.integers(lmin, lmax + 1))
    ids = rng.integers(1, phoneme_count, size=n).tolist()
    if silence_edges:
        ids = [SILENCE] + ids + [SILENCE]
    durs = rng.integers(dmin, dmax + 1, size=len(ids)).tolist()
    return PhonemeScript(tuple(zip(ids, durs)))


def export_intervals(script: PhonemeScript, frame_hop_seconds: float) -> IntervalSequence:
    if frame_hop_seconds <= 0:
        raise ConfigError("frame_hop_seconds must be > 0")
    out, cum = [], 0
    for label, dur in zip(script.labels, script.durations):
        # round to the 6-decimal grid the interval files use
        start = round(cum * frame_hop_seconds, 6)
        end = round((cum + dur) * frame_hop_seconds, 6)
        out.append(PhonemeInterval(label, start, end))
        cum += dur
    return IntervalSequence(out)


# ---------------------------------------------------------------- speakers and mixing

@dataclass
class SpeakerEmbedding:
    id: str
    vector: np.ndarray
    role: str = BASE
    sources: tuple = ()
    weights: tuple = ()


def blend_speakers(weights, embeddings, tag: str = "blend") -> SpeakerEmbedding:
    """Convex combination of speaker vectors (weights >= 0, summing to 1)."""
    if len(weights) != len(embeddings) or not embeddings:
        raise ValidationError("weights and embeddings must be non-empty and the same length")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValidationError("blend weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValidationError(f"blend weights sum to {w.sum():.9f}, not 1")
    dim = len(embeddings[0].vector)
    if any(len(e.vector) != dim for e in embeddings):
        raise ValidationError("embeddings differ in dimension")
    nz = [(wi, e) for wi, e in zip(w, embeddings) if wi != 0.0]
    if len(nz) == 1 and nz[0][0] == 1.0:
        vec = np.array(nz[0][1].vector, copy=True)
    else:
        vec = np.zeros(dim, dtype=np.float64)
        for wi, e in zip(w, embeddings):
            vec += wi * np.asarray(e.vector, dtype=np.float64)
    return SpeakerEmbedding(tag, vec, LWS, tuple(e.id for e in embeddings), tuple(float(x) for x in w))


@dataclass
class MixingModel:
    content_map: np.ndarray      # (C, D)
    speaker_map: np.ndarray      # (S, D)
    interaction_map: np.ndarray  # (C*S, D)
    interaction_strength: float = 0.0
    noise_std: float = 0.0

    @property
    def dims(self):
        return (self.content_map.shape[0], self.speaker_map.shape[0], self.content_map.shape[1])

    @classmethod
    def sample(cls, rng, content_dim, speaker_dim, feature_dim, content_scale=1.0,
               speaker_scale=1.0, interaction_strength=0.0, noise_std=0.0) -> "MixingModel":
        if interaction_strength < 0 or noise_std < 0:
            raise ConfigError("interaction_strength and noise_std must be >= 0")
        wc = rng.normal(0.0, content_scale / np.sqrt(content_dim), (content_dim, feature_dim))
        ws = rng.normal(0.0, speaker_scale / np.sqrt(speaker_dim), (speaker_dim, feature_dim))
        wx = rng.normal(0.0, 1.0 / np.sqrt(content_dim * speaker_dim),
                        (content_dim * speaker_dim, feature_dim))
        return cls(wc, ws, wx, float(interaction_strength), float(noise_std))


@dataclass
class ContentTrajectory:
    script: PhonemeScript
    frames: np.ndarray  # (T, C)


def content_trajectory(script: PhonemeScript, phoneme_codes: np.ndarray, drift: float,
                       rng) -> ContentTrajectory:
    """Hold each phoneme's code over its duration, with a bounded per-frame random walk."""
    C = phoneme_codes.shape[1]
    rows = []
    for pid, dur in script.entries:
        steps = rng.uniform(-drift, drift, size=(dur, C))
        steps[0] = 0.0
        rows.append(phoneme_codes[pid] + np.cumsum(steps, axis=0))
    return ContentTrajectory(script, np.concatenate(rows, axis=0))


def render_features(content: ContentTrajectory, spk: SpeakerEmbedding, mix: MixingModel,
                    rng=None) -> FeatureSequence:
    C, S, D = mix.dims
    c = np.asarray(content.frames, dtype=np.float64)
    s = np.asarray(spk.vector, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != C:
        raise ConfigError(f"content frames must be (T, {C}), got {c.shape}")
    if s.shape != (S,):
        raise ConfigError(f"speaker vector must have length {S}, got {s.shape}")
    out = c @ mix.content_map + s @ mix.speaker_map
    if mix.interaction_strength:
        inter = (c[:, :, None] * s[None, None, :]).reshape(len(c), C * S)
        out = out + mix.interaction_strength * (inter @ mix.interaction_map)
    if mix.noise_std:
        if rng is None:
            raise ConfigError("noise_std > 0 needs an rng")
        out = out + mix.noise_std * rng.standard_normal(out.shape)
    return FeatureSequence(out, RAW)


# ---------------------------------------------------------------- groups

@dataclass
class Member:
    speaker: SpeakerEmbedding
    features: FeatureSequence

    @property
    def role(self):
        return self.speaker.role


@dataclass
class FapsGroup:
    group_id: int
    script: PhonemeScript
    members: list

    def __post_init__(self):
        shapes = {m.features.shape for m in self.members}
        if len(shapes) > 1:
            raise ValidationError(f"group {self.group_id}: members are not frame-aligned {sorted(shapes)}")
        if sum(1 for m in self.members if m.role == BASE) < 2:
            raise ValidationError(f"group {self.group_id}: needs at least 2 base members")
        if shapes and next(iter(shapes))[0] != self.script.total_frames:
            raise ValidationError(f"group {self.group_id}: frame count differs from script")

    @property
    def frames(self) -> int:
        return self.script.total_frames

    def select(self, which: str = "base") -> list:
        if which == "all":
            return list(self.members)
        role = {"base": BASE, "lws": LWS}[which]
        return [m for m in self.members if m.role == role]

    def stack(self, which: str = "all") -> np.ndarray:
        return np.stack([m.features.values for m in self.select(which)])


def draw_blend(rng, base_speakers, tag: str) -> SpeakerEmbedding:
    arity = int(rng.integers(2, min(3, len(base_speakers)) + 1))
    idx = np.sort(rng.choice(len(base_speakers), size=arity, replace=False))
    w = rng.dirichlet(np.ones(arity))
    w = w / w.sum()
    return blend_speakers(w.tolist(), [base_speakers[i] for i in idx], tag)


def make_faps_group(script: PhonemeScript, base_speakers, lws_count: int, mix: MixingModel,
                    rng, phoneme_codes=None, drift: float = 0.05, group_id: int = 0,
                    content: ContentTrajectory | None = None) -> FapsGroup:
    if len(base_speakers) < 2:
        raise ValidationError("need at least 2 base speakers")
    if content is None:
        if phoneme_codes is None:
            raise ConfigError("need phoneme_codes or a content trajectory")
        content = content_trajectory(script, phoneme_codes, drift, rng)
    speakers = list(base_speakers)
    speakers += [draw_blend(rng, base_speakers, f"g{group_id:05d}-lws{k:02d}") for k in range(lws_count)]
    members = [Member(s, render_features(content, s, mix, rng)) for s in speakers]
    return FapsGroup(group_id, script, members)


# ---------------------------------------------------------------- corpus

@dataclass
class CorpusConfig:
    groups: int = 2000
    base_speakers: int = 8
    lws_count: int = 8
    feature_dim: int = 32
    content_dim: int = 12
    speaker_dim: int = 8
    phoneme_count: int = 40
    length_range: list = field(default_factory=lambda: [5, 12])
    duration_range: list = field(default_factory=lambda: [2, 6])
    frame_range: list = field(default_factory=lambda: [20, 60])
    silence_edges: bool = True
    drift: float = 0.05
    content_scale: float = 0.8
    speaker_scale: float = 0.35
    interaction_strength: float = 0.2
    noise_std: float = 0.05
    frame_hop_seconds: float = 0.02
    holdout_fraction: float = 0.1
    seed: int = 1234

    def __post_init__(self):
        _check_range("length_range", self.length_range)
        _check_range("duration_range", self.duration_range)
        _check_range("frame_range", self.frame_range)
        if self.base_speakers < 2:
            raise ConfigError("base_speakers must be >= 2")
        if self.groups < 1 or self.lws_count < 0:
            raise ConfigError("groups must be >= 1 and lws_count >= 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        lo, hi = self.frame_range
        silence = 2 if self.silence_edges else 0
        most = (self.length_range[1] + silence) * self.duration_range[1]
        least = (self.length_range[0] + silence) * self.duration_range[0]
        if most < lo or least > hi:
            raise ConfigError("frame_range cannot be reached with the length/duration ranges")

    def to_dict(self):
        return asdict(self)


@dataclass
class CorpusModel:
    """Everything fixed by the corpus seed: mixing maps, phoneme codes, base speakers."""
    config: CorpusConfig
    mix: MixingModel
    phoneme_codes: np.ndarray
    speakers: list

    @classmethod
    def from_config(cls, config: CorpusConfig, seed: int | None = None) -> "CorpusModel":
        seed = config.seed if seed is None else seed
        rng = np.random.default_rng([seed, 0])
        mix = MixingModel.sample(rng, config.content_dim, config.speaker_dim, config.feature_dim,
                                 config.content_scale, config.speaker_scale,
                                 config.interaction_strength, config.noise_std)
        codes = rng.normal(0.0, 1.0, (config.phoneme_count, config.content_dim))
        codes[SILENCE] *= 0.25
        speakers = [SpeakerEmbedding(f"spk{i:02d}", rng.normal(0.0, 1.0, config.speaker_dim))
                    for i in range(config.base_speakers)]
        return cls(config, mix, codes, speakers)

    def group(self, group_id: int, seed: int | None = None) -> FapsGroup:
        seed = self.config.seed if seed is None else seed
        cfg = self.config
        rng = np.random.default_rng([seed, 1, group_id])
        lo, hi = cfg.frame_range
        while True:
            script = sample_script(rng, cfg.phoneme_count, cfg.length_range, cfg.duration_range,
                                   cfg.silence_edges)
            if lo <= script.total_frames <= hi:
                break
        return make_faps_group(script, self.speakers, cfg.lws_count, self.mix, rng,
                               self.phoneme_codes, cfg.drift, group_id)


def split_groups(n_groups: int, holdout_fraction: float):
    """Training ids first, held-out ids last (deterministic)."""
    n_hold = int(np.ceil(n_groups * holdout_fraction)) if holdout_fraction > 0 else 0
    n_hold = min(n_hold, n_groups - 1) if n_groups > 1 else 0
    return list(range(n_groups - n_hold)), list(range(n_groups - n_hold, n_groups))


def _member_name(m: Member, k: int) -> str:
    return m.speaker.id if m.role == BASE else f"lws{k:02d}"


def _write_group(out: Path, model: CorpusModel, gid: int, seed: int) -> dict:
    g = model.group(gid, seed)
    gdir = out / "groups" / f"g{gid:05d}"
    gdir.mkdir(parents=True, exist_ok=True)
    members, k = [], 0
    for m in g.members:
        name = _member_name(m, k)
        if m.role != BASE:
            k += 1
        rel = f"groups/g{gid:05d}/{name}.fpk"
        write_feature_file(out / rel, m.features)
        entry = {"speaker": m.speaker.id, "role": m.role, "path": rel}
        if m.role != BASE:
            entry["vector"] = [float(x) for x in m.speaker.vector]
            entry["sources"] = list(m.speaker.sources)
            entry["weights"] = list(m.speaker.weights)
        members.append(entry)
    ipath = f"groups/g{gid:05d}/intervals.tsv"
    (out / ipath).write_text(format_intervals(export_intervals(g.script, model.config.frame_hop_seconds)),
                             encoding="utf-8")
    return {"id": gid, "frames": g.frames, "script": [[int(p), int(d)] for p, d in g.script.entries],
            "intervals": ipath, "members": members}


def generate_corpus(config: CorpusConfig, out_dir, seed: int | None = None, threads: int = 1) -> Path:
    """Write a corpus directory; output is a pure function of (config, seed)."""
    seed = config.seed if seed is None else seed
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc
    model = CorpusModel.from_config(config, seed)
    ids = range(config.groups)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            groups = list(pool.map(lambda g: _write_group(out, model, g, seed), ids))
    else:
        groups = [_write_group(out, model, g, seed) for g in ids]

    speakers = [{"id": s.id, "vector": [float(x) for x in s.vector]} for s in model.speakers]
    (out / "speakers.json").write_text(json.dumps(speakers, indent=1) + "\n", encoding="utf-8")
    with open(out / "scripts.tsv", "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(f"g{g['id']:05d}\t" + " ".join(f"{phoneme_label(p)}:{d}" for p, d in g["script"]) + "\n")
    cfg = dict(config.to_dict(), seed=seed)
    manifest = {"format": "faps-corpus", "version": 1, "seed": seed, "config": cfg,
                "speakers": speakers, "groups": groups}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return out / "manifest.json"


# ---------------------------------------------------------------- loading

class Corpus:
    """A corpus directory opened through its manifest."""

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.config = CorpusConfig(**manifest["config"])
        self.speakers = [SpeakerEmbedding(s["id"], np.asarray(s["vector"])) for s in manifest["speakers"]]
        self._speaker_index = {s.id: s for s in self.speakers}
        self._cache: dict[int, FapsGroup] = {}

    @classmethod
    def open(cls, root) -> "Corpus":
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format") != "faps-corpus":
            raise ValidationError(f"{path} is not a corpus manifest")
        return cls(path.parent, manifest)

    def __len__(self):
        return len(self.manifest["groups"])

    @property
    def group_ids(self) -> list[int]:
        return [g["id"] for g in self.manifest["groups"]]

    def split(self):
        return split_groups(len(self), self.config.holdout_fraction)

    def speaker(self, speaker_id: str) -> SpeakerEmbedding:
        return self._speaker_index[speaker_id]

    def group(self, gid: int) -> FapsGroup:
        if gid in self._cache:
            return self._cache[gid]
        rec = self.manifest["groups"][gid]
        script = PhonemeScript(tuple((p, d) for p, d in rec["script"]))
        members = []
        for m in rec["members"]:
            if m["role"] == BASE:
                spk = self._speaker_index[m["speaker"]]
            else:
                spk = SpeakerEmbedding(m["speaker"], np.asarray(m["vector"]), LWS,
                                       tuple(m["sources"]), tuple(m["weights"]))
            members.append(Member(spk, read_feature_file(self.root / m["path"])))
        g = FapsGroup(rec["id"], script, members)
        self._cache[gid] = g
        return g

    def find_member(self, path) -> tuple[int, int] | None:
        """Locate a feature file by path; returns (group id, member index)."""
        target = Path(path).resolve()
        for rec in self.manifest["groups"]:
            for k, m in enumerate(rec["members"]):
                if (self.root / m["path"]).resolve() == target:
                    return rec["id"], k
        return None

    def intervals_text(self, gid: int) -> str:
        return (self.root / self.manifest["groups"][gid]["intervals"]).read_text(encoding="utf-8")


def manifest_digest(root) -> str:
    """sha256 over the manifest and every file it references."""
    root = Path(root)
    h = hashlib.sha256()
    manifest = (root / "manifest.json").read_bytes()
    h.update(manifest)
    for rec in json.loads(manifest)["groups"]:
        for rel in [m["path"] for m in rec["members"]] + [rec["intervals"]]:
            h.update(rel.encode())
            h.update((root / rel).read_bytes())
    return h.hexdigest()


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FAPS_LAB_THREADS", "1")))
    except ValueError:
        return 1
