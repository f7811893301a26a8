"""Encoder training on FAPS groups, plus AVN1 checkpoints."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, EncoderParams, forward, pair_objective
from .formats import FormatError, read_checkpoint, write_checkpoint
from .synth import BASE

log = logging.getLogger(__name__)

ENCODER_MAGIC = b"AVN1"


class NumericalAbort(RuntimeError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    batch_size: int = 16          # encoded sequences per step (batch_size // 2 pairs)
    step_count: int = 20000
    learning_rate: float = 1e-3
    lws_in_training: bool = True
    comp_loss_enabled: bool = True
    checkpoint_interval: int = 5000
    log_interval: int = 100
    crop_frames: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise nx.ConfigError("alpha and beta must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise nx.ConfigError("batch_size must be an even number >= 2 (pairs of sequences)")
        if self.step_count < 0 or self.log_interval < 1 or self.crop_frames < 1:
            raise nx.ConfigError("step_count >= 0, log_interval >= 1, crop_frames >= 1 required")

    def to_dict(self):
        return asdict(self)


@dataclass
class LogEntry:
    step: int
    l_avg: float
    l_comp: float
    l_total: float

    def line(self) -> str:
        return f"{self.step}\t{self.l_avg:.6f}\t{self.l_comp:.6f}\t{self.l_total:.6f}"

    @classmethod
    def parse(cls, line: str) -> "LogEntry":
        s, a, c, t = line.rstrip("\n").split("\t")
        return cls(int(s), float(a), float(c), float(t))


class GroupArrays:
    """One group held as stacked arrays for fast batching."""

    __slots__ = ("members", "is_base", "average")

    def __init__(self, group):
        self.members = np.stack([m.features.values for m in group.members]).astype(np.float32)
        self.is_base = np.array([m.role == BASE for m in group.members])
        self.average = self.members[self.is_base].astype(np.float64).mean(axis=0).astype(np.float32)

    @property
    def frames(self):
        return self.members.shape[1]


def sample_training_pair(group, rng, lws_in_training: bool = True):
    """Two distinct members (uniform, without replacement) and the base-only average."""
    arr = group if isinstance(group, GroupArrays) else GroupArrays(group)
    pool = np.arange(len(arr.members)) if lws_in_training else np.flatnonzero(arr.is_base)
    if len(pool) < 2:
        raise ValidationError("group needs at least 2 eligible members")
    i, j = rng.choice(pool, size=2, replace=False)
    return int(i), int(j), arr.average


# ---------------------------------------------------------------- checkpoints

def _opt_tensors(params: EncoderParams | dict, opt: nx.AdamState | None):
    if opt is None or not opt.m:
        return []
    names = list(params.tensors if hasattr(params, "tensors") else params)
    return ([(f"adam.m/{n}", opt.m[n]) for n in names] +
            [(f"adam.v/{n}", opt.v[n]) for n in names])


def save_checkpoint(params: EncoderParams, path, train_config: TrainConfig | None = None,
                    step: int = 0, opt: nx.AdamState | None = None, extra: dict | None = None) -> None:
    header = {"kind": "encoder", "encoder": params.config.to_dict(), "step": step,
              "parameters": list(params.tensors)}
    if train_config is not None:
        header["training"] = train_config.to_dict()
    if opt is not None and opt.m:
        header["optimizer"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                               "eps": opt.eps, "step": opt.step}
    if extra:
        header.update(extra)
    tensors = [(n, t.value) for n, t in params.tensors.items()] + _opt_tensors(params, opt)
    write_checkpoint(path, ENCODER_MAGIC, header, tensors)


def load_training_state(path):
    """Returns (params, optimizer state or None, header)."""
    header, tensors = read_checkpoint(path, ENCODER_MAGIC)
    try:
        cfg = EncoderConfig(**header["encoder"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad encoder config echo ({exc})") from exc
    expected = EncoderParams.declared_shapes(cfg)
    if len(tensors) < len(expected):
        raise FormatError(f"{path}: {len(tensors)} tensors, expected at least {len(expected)}")
    params = {}
    for (name, shape), (got_name, arr) in zip(expected, tensors):
        if name != got_name or arr.shape != shape:
            raise FormatError(f"{path}: tensor {got_name}{arr.shape} where {name}{shape} was declared")
        params[name] = nx.parameter(arr)
    opt = None
    rest = tensors[len(expected):]
    if "optimizer" in header:
        o = header["optimizer"]
        opt = nx.AdamState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"])
        n = len(expected)
        if len(rest) != 2 * n:
            raise FormatError(f"{path}: optimizer state incomplete")
        for (name, _), (_, m), (_, v) in zip(expected, rest[:n], rest[n:]):
            opt.m[name] = m.copy()
            opt.v[name] = v.copy()
    elif rest:
        raise FormatError(f"{path}: unexpected extra tensors")
    return EncoderParams(cfg, params), opt, header


def load_checkpoint(path) -> EncoderParams:
    params, _, header = load_training_state(path)
    params.header = header
    return params


# ---------------------------------------------------------------- training

def _batch(data: list[GroupArrays], rng, cfg: TrainConfig):
    pairs = cfg.batch_size // 2
    picks = rng.integers(len(data), size=pairs)
    crop = min(cfg.crop_frames, min(data[k].frames for k in picks))
    xa, xb, tgt = [], [], []
    for k in picks:
        g = data[k]
        i, j, avg = sample_training_pair(g, rng, cfg.lws_in_training)
        t0 = int(rng.integers(g.frames - crop + 1))
        xa.append(g.members[i, t0:t0 + crop])
        xb.append(g.members[j, t0:t0 + crop])
        tgt.append(avg[t0:t0 + crop])
    return np.stack(xa + xb), np.stack(tgt)


def training_step(params: EncoderParams, opt: nx.AdamState, x: np.ndarray, target: np.ndarray,
                  cfg: TrainConfig):
    """Forward, backward and one optimizer update; returns (l_avg, l_comp, l_total)."""
    y = forward(params, nx.Tensor(x))
    half = len(x) // 2
    ya, yb = nx.take(y, 0, half), nx.take(y, half, len(x))
    total, l_avg, l_comp = pair_objective(ya, yb, target, cfg.alpha, cfg.beta, cfg.comp_loss_enabled)
    values = (float(l_avg.value), float(l_comp.value), float(total.value))
    if not np.isfinite(values[2]):
        return values
    nx.backward(total)
    nx.adam_step(params.tensors, opt)
    return values


def train(groups, encoder_config: EncoderConfig, train_config: TrainConfig,
          out_dir=None, resume_from=None, params: EncoderParams | None = None):
    """Train the encoder; returns (params, log entries).

    With ``out_dir`` set, writes ``train.log`` (one line per log interval),
    periodic ``checkpoint-<step>.avn`` files and ``encoder.avn`` at the end.
    """
    cfg = train_config
    data = [g if isinstance(g, GroupArrays) else GroupArrays(g) for g in groups]
    if not data:
        raise ValidationError("no training groups")
    start = 0
    if resume_from is not None:
        params, opt, header = load_training_state(resume_from)
        start = int(header["step"])
        if opt is None:
            opt = nx.AdamState(lr=cfg.learning_rate)
    else:
        params = EncoderParams.init(encoder_config) if params is None else params
        opt = nx.AdamState(lr=cfg.learning_rate)

    out = Path(out_dir) if out_dir is not None else None
    entries: list[LogEntry] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train.log"
        if start and log_path.exists():
            entries = [LogEntry.parse(l) for l in log_path.read_text().splitlines() if l.strip()]
            entries = [e for e in entries if e.step < start]
        log_path.write_text("".join(e.line() + "\n" for e in entries))

    last = None
    for step in range(start, cfg.step_count):
        rng = np.random.default_rng([cfg.seed, step])
        x, target = _batch(data, rng, cfg)
        values = training_step(params, opt, x, target, cfg)
        if not np.isfinite(values[2]):
            raise NumericalAbort(f"non-finite loss at step {step}: L_avg={values[0]}, "
                                 f"L_comp={values[1]}, L_total={values[2]}; last logged {last}")
        if step % cfg.log_interval == 0:
            last = LogEntry(step, *values)
            entries.append(last)
            log.debug("step %d total %.5f", step, values[2])
            if out is not None:
                with open(out / "train.log", "a") as fh:
                    fh.write(last.line() + "\n")
        done = step + 1
        if out is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            save_checkpoint(params, out / f"checkpoint-{done:06d}.avn", cfg, done, opt)
    if out is not None:
        save_checkpoint(params, out / "encoder.avn", cfg, max(cfg.step_count, start), opt)
    return params, entries


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("checkpoint-*.avn"))
    return found[-1] if found else None
