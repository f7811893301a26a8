"""Average-feature encoder: conformer-lite blocks with a global residual path."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .sequence import AVENET, FeatureSequence


class ValidationError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int = 32
    model_dim: int = 64
    block_count: int = 2
    attention_heads: int = 1
    conv_kernel_width: int = 3
    ffn_expansion: int = 2
    global_residual: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.conv_kernel_width % 2 == 0 or self.conv_kernel_width < 1:
            raise nx.ConfigError("conv_kernel_width must be odd")
        if self.block_count < 1 or self.input_dim < 1 or self.model_dim < 1:
            raise nx.ConfigError("block_count, input_dim and model_dim must be >= 1")
        if self.attention_heads < 1 or self.model_dim % self.attention_heads:
            raise nx.ConfigError("model_dim must be divisible by attention_heads")

    def to_dict(self):
        return asdict(self)


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    D, H, F, K = cfg.input_dim, cfg.model_dim, cfg.model_dim * cfg.ffn_expansion, cfg.conv_kernel_width
    shapes = [("in.w", (D, H)), ("in.b", (1, H))]
    for i in range(cfg.block_count):
        p = f"b{i}."
        for ff in ("ff1", "ff2"):
            shapes += [(p + ff + ".ln.g", (1, H)), (p + ff + ".ln.b", (1, H)),
                       (p + ff + ".w1", (H, F)), (p + ff + ".b1", (1, F)),
                       (p + ff + ".w2", (F, H)), (p + ff + ".b2", (1, H))]
        shapes += [(p + "att.ln.g", (1, H)), (p + "att.ln.b", (1, H)),
                   (p + "att.wq", (H, H)), (p + "att.wk", (H, H)),
                   (p + "att.wv", (H, H)), (p + "att.wo", (H, H)), (p + "att.bo", (1, H)),
                   (p + "conv.ln.g", (1, H)), (p + "conv.ln.b", (1, H)),
                   (p + "conv.pw1", (H, H)), (p + "conv.pb1", (1, H)),
                   (p + "conv.dw", (K, H)),
                   (p + "conv.pw2", (H, H)), (p + "conv.pb2", (1, H)),
                   (p + "out.ln.g", (1, H)), (p + "out.ln.b", (1, H))]
    shapes += [("out.w", (H, D)), ("out.b", (1, D))]
    return shapes


class EncoderParams:
    """Trainable encoder weights keyed by name, in a fixed declared order."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: EncoderConfig, rng=None) -> "EncoderParams":
        rng = np.random.default_rng(config.seed) if rng is None else rng
        tensors = {}
        for name, shape in _param_shapes(config):
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("out."):
                val = np.zeros(shape)  # identity map at init
            elif leaf == "g":
                val = np.ones(shape)
            elif leaf.startswith("b") or leaf.startswith("pb") or leaf == "bo":
                val = np.zeros(shape)
            else:
                val = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            tensors[name] = nx.parameter(val)
        return cls(config, tensors)

    @staticmethod
    def declared_shapes(config: EncoderConfig):
        return _param_shapes(config)

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, {k: nx.Tensor(v.value.astype(dtype), requires_grad=True)
                                           for k, v in self.tensors.items()})

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: nx.parameter(v.value.copy()) for k, v in self.tensors.items()})

    def parameter_count(self) -> int:
        return sum(t.value.size for t in self.tensors.values())

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]


def _ln(x: Tensor, p: EncoderParams, prefix: str) -> Tensor:
    return nx.layer_norm(x, p[prefix + ".g"], p[prefix + ".b"], 1e-5)


def _ffn(x: Tensor, p: EncoderParams, prefix: str) -> Tensor:
    h = nx.gelu(_ln(x, p, prefix + ".ln") @ p[prefix + ".w1"] + p[prefix + ".b1"])
    return h @ p[prefix + ".w2"] + p[prefix + ".b2"]


def _attention(x: Tensor, p: EncoderParams, prefix: str, heads: int) -> Tensor:
    h = _ln(x, p, prefix + ".ln")
    q, k, v = h @ p[prefix + ".wq"], h @ p[prefix + ".wk"], h @ p[prefix + ".wv"]
    H = q.shape[-1]
    if heads == 1:
        att = nx.softmax_rows(nx.scale(q @ nx.transpose(k), 1.0 / np.sqrt(H)))
        ctx = att @ v
    else:
        # split heads by masking columns; keeps every op 2-D per batch item
        dh = H // heads
        ctx = None
        for i in range(heads):
            mask = np.zeros((1, H), dtype=q.value.dtype)
            mask[0, i * dh:(i + 1) * dh] = 1
            mk = nx.Tensor(mask)
            att = nx.softmax_rows(nx.scale(nx.mul(q, mk) @ nx.transpose(k), 1.0 / np.sqrt(dh)))
            part = nx.mul(att @ v, mk)
            ctx = part if ctx is None else ctx + part
    return ctx @ p[prefix + ".wo"] + p[prefix + ".bo"]


def _conv(x: Tensor, p: EncoderParams, prefix: str, width: int) -> Tensor:
    h = _ln(x, p, prefix + ".ln") @ p[prefix + ".pw1"] + p[prefix + ".pb1"]
    h = nx.gelu(nx.depthwise_conv1d(h, p[prefix + ".dw"], width))
    return h @ p[prefix + ".pw2"] + p[prefix + ".pb2"]


def _block(x: Tensor, p: EncoderParams, i: int) -> Tensor:
    cfg = p.config
    pre = f"b{i}."
    x = x + nx.scale(_ffn(x, p, pre + "ff1"), 0.5)
    x = x + _attention(x, p, pre + "att", cfg.attention_heads)
    x = x + _conv(x, p, pre + "conv", cfg.conv_kernel_width)
    x = x + nx.scale(_ffn(x, p, pre + "ff2"), 0.5)
    return _ln(x, p, pre + "out.ln")


def forward(params: EncoderParams, x: Tensor) -> Tensor:
    """Differentiable encoder pass on a (..., T, D) tensor."""
    cfg = params.config
    if x.shape[-1] != cfg.input_dim:
        raise ValidationError(f"encoder expects feature dim {cfg.input_dim}, got {x.shape[-1]}")
    h = x @ params["in.w"] + params["in.b"]
    for i in range(cfg.block_count):
        h = _block(h, params, i)
    delta = h @ params["out.w"] + params["out.b"]
    return x + delta if cfg.global_residual else delta


def encode(params: EncoderParams, seq: FeatureSequence) -> FeatureSequence:
    if seq.dim != params.config.input_dim:
        raise ValidationError(f"encoder expects feature dim {params.config.input_dim}, got {seq.dim}")
    with nx.no_grad():
        y = forward(params, nx.Tensor(seq.values))
    return FeatureSequence(y.value.astype(np.float32), AVENET)


def encode_array(params: EncoderParams, values: np.ndarray) -> np.ndarray:
    """Encode a raw (T, D) or (B, T, D) array without building a graph."""
    with nx.no_grad():
        return forward(params, nx.Tensor(values)).value


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, FeatureSequence):
        return nx.Tensor(x.values)
    return nx.Tensor(x)


def avg_loss(y, target) -> Tensor:
    """L1 between an encoding and the average feature."""
    y, target = _as_tensor(y), _as_tensor(target)
    if y.shape != target.shape:
        raise ValidationError(f"avg_loss: shapes {y.shape} and {target.shape} differ")
    return nx.l1_loss(y, target)


def comp_loss(y, y_pos) -> Tensor:
    """L1 between two encodings of the same content; gradients reach both."""
    y, y_pos = _as_tensor(y), _as_tensor(y_pos)
    if y.shape != y_pos.shape:
        raise ValidationError(f"comp_loss: shapes {y.shape} and {y_pos.shape} differ")
    return nx.l1_loss(y, y_pos)


def total_loss(y, y_pos, target, alpha: float = 1.0, beta: float = 0.5) -> Tensor:
    if alpha < 0 or beta < 0:
        raise nx.ConfigError("alpha and beta must be >= 0")
    return nx.scale(avg_loss(y, target), alpha) + nx.scale(comp_loss(y, y_pos), beta)


def pair_objective(ya: Tensor, yb: Tensor, target, alpha: float, beta: float,
                   comp_enabled: bool = True):
    """Training objective for an encoded pair sharing one average feature.

    Both encodings incur the average loss (averaged over the two); one
    contrastive term couples them. Returns (total, l_avg, l_comp) nodes.
    """
    target = _as_tensor(target)
    l_avg = nx.scale(avg_loss(ya, target) + avg_loss(yb, target), 0.5)
    l_comp = comp_loss(ya, yb)
    total = nx.scale(l_avg, alpha)
    if comp_enabled:
        total = total + nx.scale(l_comp, beta)
    return total, l_avg, l_comp
