"""Feature-domain conversion decoder and linear speaker probes."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .encoder import EncoderParams, encode_array
from .formats import FormatError, read_checkpoint, write_checkpoint
from .sequence import RAW, FeatureSequence
from .synth import BASE, LWS
from .training import NumericalAbort

DECODER_MAGIC = b"VCL1"


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- decoder

@dataclass
class DecoderConfig:
    feature_dim: int = 32
    speaker_dim: int = 8
    hidden_dim: int = 64
    steps: int = 5000
    batch_frames: int = 512
    learning_rate: float = 1e-3
    train_groups: int = 400
    log_interval: int = 100
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _decoder_shapes(cfg: DecoderConfig):
    D, S, H = cfg.feature_dim, cfg.speaker_dim, cfg.hidden_dim
    return [("content.w", (D, H)), ("speaker.w", (S, H)), ("fuse.b0", (1, H)),
            ("fuse.w", (H, H)), ("fuse.b", (1, H)),
            ("out.w", (H, D)), ("out.b", (1, D))]


class DecoderParams:
    def __init__(self, config: DecoderConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: DecoderConfig) -> "DecoderParams":
        rng = np.random.default_rng([config.seed, 7])
        tensors = {}
        for name, shape in _decoder_shapes(config):
            if name.endswith(".b") or name.endswith(".b0") or name == "out.w":
                val = np.zeros(shape)
            else:
                val = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            tensors[name] = nx.parameter(val)
        return cls(config, tensors)

    def snapshot(self) -> dict:
        return {k: v.value.copy() for k, v in self.tensors.items()}

    def __getitem__(self, name):
        return self.tensors[name]


def decoder_forward(dec: DecoderParams, content: nx.Tensor, speaker: nx.Tensor) -> nx.Tensor:
    """(N, D) content frames + (N, S) or (1, S) speaker rows -> (N, D) features."""
    h = nx.gelu(content @ dec["content.w"] + speaker @ dec["speaker.w"] + dec["fuse.b0"])
    h = h + nx.gelu(h @ dec["fuse.w"] + dec["fuse.b"])
    return content + (h @ dec["out.w"] + dec["out.b"])


def decode(dec: DecoderParams, content: np.ndarray, speaker_vector) -> np.ndarray:
    s = np.asarray(speaker_vector, dtype=np.float32)
    if s.ndim == 1:
        s = s[None, :]
    with nx.no_grad():
        return decoder_forward(dec, nx.Tensor(content), nx.Tensor(s)).value


def _decoder_frames(groups, encoder: EncoderParams):
    feats, spks, codes = [], [], []
    for g in groups:
        stack = np.stack([m.features.values for m in g.members])
        enc = encode_array(encoder, stack)
        for m, e in zip(g.members, enc):
            feats.append(m.features.values)
            codes.append(e)
            spks.append(np.broadcast_to(np.asarray(m.speaker.vector, np.float32), (len(e), len(m.speaker.vector))))
    return (np.concatenate(codes).astype(np.float32), np.concatenate(spks).astype(np.float32),
            np.concatenate(feats).astype(np.float32))


def train_decoder(groups, encoder: EncoderParams, config: DecoderConfig):
    """Fit decode(encode(F), spk) ~ F with L1 over frames; the encoder is never updated.

    Returns (decoder, list of (step, loss)).
    """
    dec = DecoderParams.init(config)
    history = []
    if config.steps == 0:
        return dec, history
    groups = list(groups)[:config.train_groups]
    codes, spks, feats = _decoder_frames(groups, encoder)
    opt = nx.AdamState(lr=config.learning_rate)
    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, 11, step])
        idx = rng.integers(len(codes), size=config.batch_frames)
        out = decoder_forward(dec, nx.Tensor(codes[idx]), nx.Tensor(spks[idx]))
        loss = nx.l1_loss(out, feats[idx])
        val = float(loss.value)
        if not np.isfinite(val):
            raise NumericalAbort(f"decoder loss non-finite at step {step}; last logged {history[-1:]}")
        if step % config.log_interval == 0:
            history.append((step, val))
        nx.backward(loss)
        nx.adam_step(dec.tensors, opt)
    return dec, history


def reconstruction_loss(dec: DecoderParams, encoder: EncoderParams, groups) -> float:
    codes, spks, feats = _decoder_frames(groups, encoder)
    with nx.no_grad():
        out = decoder_forward(dec, nx.Tensor(codes), nx.Tensor(spks)).value
    return float(np.abs(out.astype(np.float64) - feats).mean())


def convert(dec: DecoderParams, encoder: EncoderParams, source: FeatureSequence,
            target_spk) -> FeatureSequence:
    vec = np.asarray(getattr(target_spk, "vector", target_spk))
    if vec.shape != (dec.config.speaker_dim,):
        raise ValidationError(f"target speaker must have dimension {dec.config.speaker_dim}, got {vec.shape}")
    if source.dim != encoder.config.input_dim:
        raise ValidationError(f"source has dimension {source.dim}, encoder expects {encoder.config.input_dim}")
    return FeatureSequence(decode(dec, encode_array(encoder, source.values), vec), RAW)


def save_decoder(dec: DecoderParams, path, extra: dict | None = None) -> None:
    header = {"kind": "decoder", "decoder": dec.config.to_dict(), "parameters": list(dec.tensors)}
    if extra:
        header.update(extra)
    write_checkpoint(path, DECODER_MAGIC, header, [(n, t.value) for n, t in dec.tensors.items()])


def load_decoder(path) -> DecoderParams:
    header, tensors = read_checkpoint(path, DECODER_MAGIC)
    try:
        cfg = DecoderConfig(**header["decoder"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad decoder config echo ({exc})") from exc
    expected = _decoder_shapes(cfg)
    if len(tensors) != len(expected):
        raise FormatError(f"{path}: {len(tensors)} tensors, expected {len(expected)}")
    out = {}
    for (name, shape), (got, arr) in zip(expected, tensors):
        if name != got or arr.shape != shape:
            raise FormatError(f"{path}: tensor {got}{arr.shape} where {name}{shape} was declared")
        out[name] = nx.parameter(arr)
    dec = DecoderParams(cfg, out)
    dec.header = header
    return dec


# ---------------------------------------------------------------- speaker probes

@dataclass
class ProbeConfig:
    steps: int = 400
    learning_rate: float = 0.05
    batch_frames: int = 0        # 0 = full batch
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class SpeakerProbe:
    weight: np.ndarray   # (D, K)
    bias: np.ndarray     # (K,)
    mean: np.ndarray     # input standardization
    scale: np.ndarray

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    def predict(self, frames: np.ndarray) -> np.ndarray:
        z = (frames - self.mean) / self.scale
        return np.argmax(z @ self.weight + self.bias, axis=1)

    def accuracy(self, frames, labels) -> float:
        return float(np.mean(self.predict(frames) == labels))


def fit_probe(frames: np.ndarray, labels: np.ndarray, classes: int,
              config: ProbeConfig = ProbeConfig()) -> SpeakerProbe:
    """Linear softmax classifier trained with cross-entropy (Adam)."""
    mean = frames.mean(axis=0)
    scale = frames.std(axis=0) + 1e-6
    z = ((frames - mean) / scale).astype(np.float32)
    w = nx.parameter(np.zeros((frames.shape[1], classes)))
    b = nx.parameter(np.zeros((1, classes)))
    params = {"w": w, "b": b}
    opt = nx.AdamState(lr=config.learning_rate)
    for step in range(config.steps):
        if config.batch_frames:
            idx = np.random.default_rng([config.seed, step]).integers(len(z), size=config.batch_frames)
            xb, yb = z[idx], labels[idx]
        else:
            xb, yb = z, labels
        loss = nx.cross_entropy(nx.Tensor(xb) @ w + b, yb)
        nx.backward(loss)
        nx.adam_step(params, opt)
    return SpeakerProbe(w.value.copy(), b.value[0].copy(), mean, scale)


@dataclass
class ProbeResult:
    representation: str
    accuracy: float
    chance: float
    train_frames: int
    test_frames: int
    shuffled_labels: bool = False

    def to_dict(self):
        return asdict(self)


def _frames_and_labels(groups, representation, encoder, speaker_index, role=BASE, label_fn=None):
    xs, ys = [], []
    for g in groups:
        members = [m for m in g.members if m.role == role]
        if not members:
            continue
        stack = np.stack([m.features.values for m in members])
        if representation == "avenet":
            stack = encode_array(encoder, stack)
        for m, arr in zip(members, stack):
            label = speaker_index[label_fn(m) if label_fn else m.speaker.id]
            xs.append(arr)
            ys.append(np.full(len(arr), label))
    return np.concatenate(xs).astype(np.float64), np.concatenate(ys)


def train_probe(groups, representation: str = "raw", encoder: EncoderParams | None = None,
                config: ProbeConfig = ProbeConfig(), shuffle_labels: bool = False,
                role: str = BASE, label_fn=None, classes: int | None = None):
    """Fit a frame-level speaker probe on the first half of ``groups``, score it on the rest.

    The two halves share no group (and so no frame). Returns (probe, ProbeResult).
    """
    if representation not in ("raw", "avenet"):
        raise ValidationError(f"representation must be raw or avenet, got {representation!r}")
    if representation == "avenet" and encoder is None:
        raise ValidationError("avenet representation needs an encoder")
    groups = list(groups)
    if len(groups) < 2:
        raise ValidationError("need at least two groups to hold out probe test frames")
    ids = sorted({m.speaker.id for g in groups for m in g.members if m.role == BASE})
    if label_fn is None and len(ids) < 2:
        raise ValidationError("speaker probe needs at least two speakers")
    index = {s: k for k, s in enumerate(ids)}
    classes = classes or len(ids)
    half = len(groups) // 2
    xtr, ytr = _frames_and_labels(groups[:half], representation, encoder, index, role, label_fn)
    xte, yte = _frames_and_labels(groups[half:], representation, encoder, index, role, label_fn)
    if shuffle_labels:
        rng = np.random.default_rng([config.seed, 3])
        ytr = rng.permutation(ytr)
    probe = fit_probe(xtr, ytr, classes, config)
    acc = probe.accuracy(xte, yte)
    return probe, ProbeResult(representation, acc, 1.0 / classes, len(ytr), len(yte), shuffle_labels)


# ---------------------------------------------------------------- unseen blended speakers

def dominant_source(member) -> str:
    return member.speaker.sources[int(np.argmax(member.speaker.weights))]


def probe_unseen_speakers(groups, variants: dict, pair_count: int = 1000, seed: int = 0,
                          probe_config: ProbeConfig = ProbeConfig()) -> dict:
    """Compare encoder variants on held-out blended speakers.

    ``variants`` maps a name to (EncoderParams, config echo dict). For each,
    reports the pair-distance reduction over blended-member pairs and the
    accuracy of a probe predicting each blend's dominant base speaker.
    """
    from .average import distance_report

    if not variants:
        raise ValidationError("no encoder variants given")
    groups = list(groups)
    n_base = len({m.speaker.id for g in groups for m in g.members if m.role == BASE})
    out = {}
    for name, (encoder, echo) in variants.items():
        if encoder is None:
            raise ValidationError(f"variant {name!r} has no checkpoint")
        rep = distance_report(groups, encoder, pair_count, np.random.default_rng(seed), roles="lws")
        _, res = train_probe(groups, "avenet", encoder, probe_config, role=LWS,
                             label_fn=dominant_source, classes=n_base)
        out[name] = {"config": echo, "distance": rep.to_dict(), "probe": res.to_dict()}
    return out


# ---------------------------------------------------------------- swap test

@dataclass
class ConversionReport:
    pair_count: int
    improved_fraction: float
    median_improvement: float
    mean_l1_source: float
    mean_l1_converted: float

    def to_dict(self):
        return asdict(self)


def swap_test(dec: DecoderParams, encoder: EncoderParams, groups, pair_count: int = 500,
              rng=None, roles: str = "all") -> ConversionReport:
    """Convert one group member to another's speaker and compare with the real target.

    Improvement factor per pair is L1(source, target) / L1(converted, target).
    """
    from .average import pair_distance, sample_pairs

    rng = np.random.default_rng(0) if rng is None else rng
    groups = list(groups)
    pairs = sample_pairs(groups, pair_count, rng, roles)
    before, after = [], []
    for gi, i, j in pairs:
        src, tgt = groups[gi].members[i], groups[gi].members[j]
        out = convert(dec, encoder, src.features, tgt.speaker)
        before.append(pair_distance(src.features, tgt.features))
        after.append(pair_distance(out, tgt.features))
    before, after = np.asarray(before), np.asarray(after)
    factor = before / np.maximum(after, 1e-12)
    return ConversionReport(len(pairs), float(np.mean(after < before)), float(np.median(factor)),
                            float(before.mean()), float(after.mean()))
