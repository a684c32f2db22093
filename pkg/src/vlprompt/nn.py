"""Visual encoder, word embeddings and decoder-only LM built from tensor ops."""
import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, FrozenError, LengthError, ScaleError
from .rng import Xoshiro256

_NEG = -1e9
WEIGHT_STD = 0.02


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    max_seq_len: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.max_seq_len) < 1:
            raise ConfigError("LMConfig sizes must be positive")


@dataclass
class VEConfig:
    d_model: int = 64
    channels: list = field(default_factory=lambda: [8, 16])
    pool_grid: tuple = (2, 2)
    kernel: int = 5
    min_side: int = 8

    def __post_init__(self):
        self.channels = list(self.channels)
        self.pool_grid = tuple(self.pool_grid)

    @property
    def n_tokens(self):
        return self.pool_grid[0] * self.pool_grid[1]


class ParamSet:
    """Named tensors with a trainable flag each; freezing never touches values."""

    def __init__(self, tensors=None):
        self._tensors = OrderedDict()
        self._trainable = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name, tensor, trainable=True):
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, T.Tensor):
            tensor = T.Tensor(tensor)
        tensor.name = name
        tensor.requires_grad = bool(trainable)
        self._tensors[name] = tensor
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def subset(self, prefix):
        sub = ParamSet()
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                sub._tensors[name] = t
                sub._trainable[name] = self._trainable[name]
        return sub

    def is_trainable(self, name):
        return self._trainable[name]

    def trainable(self):
        return OrderedDict((n, t) for n, t in self._tensors.items() if self._trainable[n])

    def set_trainable(self, name, flag):
        if flag and not self._tensors[name].data.flags.writeable:
            raise FrozenError(f"{name} belongs to a frozen model")
        self._trainable[name] = bool(flag)
        self._tensors[name].requires_grad = bool(flag)

    def freeze(self):
        for name, t in self._tensors.items():
            self._trainable[name] = False
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def n_values(self):
        return sum(t.size for t in self._tensors.values())

    def digest(self):
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self):
        return ParamSet(OrderedDict((n, T.Tensor(t.data.copy())) for n, t in self._tensors.items()))


def _param_specs(lm_cfg, ve_cfg):
    """(name, shape, kind) in initialisation order; kind in {w, conv, b, g}."""
    d, V = lm_cfg.d_model, lm_cfg.vocab_size
    specs = []
    c_in = 3
    for i, c_out in enumerate(ve_cfg.channels):
        specs += [(f"ve.conv{i}.w", (c_out, c_in, ve_cfg.kernel, ve_cfg.kernel), "conv"),
                  (f"ve.conv{i}.b", (c_out,), "b")]
        c_in = c_out
    specs += [("ve.proj.w", (c_in, ve_cfg.d_model), "proj"), ("ve.proj.b", (ve_cfg.d_model,), "b"),
              ("we.wte", (V, d), "w"), ("we.wpe", (lm_cfg.max_seq_len, d), "w")]
    hidden = lm_cfg.mlp_ratio * d
    for i in range(lm_cfg.n_layers):
        p = f"lm.h{i}."
        specs += [(p + "ln1.g", (d,), "g"), (p + "ln1.b", (d,), "b"),
                  (p + "attn.qkv.w", (d, 3 * d), "w"), (p + "attn.qkv.b", (3 * d,), "b"),
                  (p + "attn.proj.w", (d, d), "w"), (p + "attn.proj.b", (d,), "b"),
                  (p + "ln2.g", (d,), "g"), (p + "ln2.b", (d,), "b"),
                  (p + "mlp.fc.w", (d, hidden), "w"), (p + "mlp.fc.b", (hidden,), "b"),
                  (p + "mlp.proj.w", (hidden, d), "w"), (p + "mlp.proj.b", (d,), "b")]
    specs += [("lm.lnf.g", (d,), "g"), ("lm.lnf.b", (d,), "b"), ("lm.head.w", (d, V), "w")]
    return specs


def init_params(lm_cfg, ve_cfg, seed):
    """Weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1, drawn in a fixed order.

    Conv kernels use He scaling, ``std = sqrt(2 / fan_in)``; at 0.02 the
    image signal vanishes before reaching the projection.
    """
    if ve_cfg.d_model != lm_cfg.d_model:
        raise ConfigError(f"VE width {ve_cfg.d_model} != LM width {lm_cfg.d_model}")
    rng = Xoshiro256(seed)
    params = ParamSet()
    for name, shape, kind in _param_specs(lm_cfg, ve_cfg):
        if kind == "w":
            data = rng.normal(shape, std=WEIGHT_STD)
        elif kind == "conv":
            data = rng.normal(shape, std=np.sqrt(2.0 / np.prod(shape[1:])))
        elif kind == "proj":
            data = rng.normal(shape, std=np.sqrt(1.0 / shape[0]))
        elif kind == "g":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params.add(name, T.Tensor(data))
    return params


def ve_forward(params, pixels, ve_cfg):
    """Visual tokens ``[m, d]`` for one ``H x W x 3`` image or ``[B, m, d]`` for a batch."""
    arr = np.asarray(pixels, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ScaleError(f"expected H x W x 3 pixels, got shape {np.shape(pixels)}")
    side = arr.shape[1]
    if arr.shape[2] != side or side < ve_cfg.min_side:
        raise ScaleError(f"VE needs square images with side >= {ve_cfg.min_side}, got {arr.shape[1:3]}")
    x = T.Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)) - 0.5)
    pad = ve_cfg.kernel // 2
    for i in range(len(ve_cfg.channels)):
        x = T.conv2d(x, params[f"ve.conv{i}.w"], params[f"ve.conv{i}.b"], stride=2, padding=pad)
        x = T.gelu(x)
    x = T.adaptive_avg_pool2d(x, ve_cfg.pool_grid)                 # B C gh gw
    B, C = x.shape[:2]
    x = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, ve_cfg.n_tokens, C))
    out = T.add(T.matmul(x, params["ve.proj.w"]), params["ve.proj.b"])
    return T.reshape(out, out.shape[1:]) if single else out


def _causal_mask(n):
    return np.triu(np.full((n, n), _NEG), k=1)


def lm_forward(params, embeddings, lm_cfg):
    """Next-token logits for ``[T, d]`` or ``[B, T, d]`` input embeddings.

    Adds learned absolute positions, applies a causal mask, pre-LN blocks.
    """
    x = embeddings if isinstance(embeddings, T.Tensor) else T.Tensor(embeddings)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    B, n, d = x.shape
    if n > lm_cfg.max_seq_len:
        raise LengthError(f"sequence of {n} tokens exceeds max_seq_len={lm_cfg.max_seq_len}")
    if n < 1:
        raise LengthError("empty sequence")
    if d != lm_cfg.d_model:
        raise ConfigError(f"embedding width {d} != d_model {lm_cfg.d_model}")
    H = lm_cfg.n_heads
    dh = d // H
    x = T.add(x, T.take(params["we.wpe"], slice(0, n)))
    mask = T.Tensor(_causal_mask(n))
    for i in range(lm_cfg.n_layers):
        p = f"lm.h{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = T.add(T.matmul(h, params[p + "attn.qkv.w"]), params[p + "attn.qkv.b"])
        qkv = T.transpose(T.reshape(qkv, (B, n, 3, H, dh)), (2, 0, 3, 1, 4))   # 3 B H n dh
        q, k, v = T.take(qkv, 0), T.take(qkv, 1), T.take(qkv, 2)
        att = T.add(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh)), mask)
        att = T.softmax_rows(att)
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, n, d))
        y = T.add(T.matmul(y, params[p + "attn.proj.w"]), params[p + "attn.proj.b"])
        x = T.add(x, y)
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = T.gelu(T.add(T.matmul(h, params[p + "mlp.fc.w"]), params[p + "mlp.fc.b"]))
        h = T.add(T.matmul(h, params[p + "mlp.proj.w"]), params[p + "mlp.proj.b"])
        x = T.add(x, h)
    x = T.layer_norm(x, params["lm.lnf.g"], params["lm.lnf.b"])
    logits = T.matmul(x, params["lm.head.w"])
    if single:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


def config_dict(lm_cfg, ve_cfg):
    return {"lm": asdict(lm_cfg), "ve": {**asdict(ve_cfg), "pool_grid": list(ve_cfg.pool_grid)}}
