"""Layers, containers and the optimizer used by the micro networks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LAYER_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "batchnorm2d",
    "relu",
    "avgpool2d",
    "global_avgpool",
    "linear",
)


@dataclass
class LayerTrace:
    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    params: int
    macs: int


def _is_train(mode) -> bool:
    if isinstance(mode, bool):
        return mode
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


class Module:
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.forward(x, train)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def trace(self, shape: tuple, prefix: str = "") -> tuple[tuple, list[LayerTrace]]:
        raise NotImplementedError


class Layer(Module):
    kind = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def macs(self, shape: tuple) -> int:
        return 0

    def trace(self, shape, prefix=""):
        out = self.output_shape(tuple(shape))
        rec = LayerTrace(prefix.rstrip("."), self.kind, tuple(shape), out, self.param_count(), self.macs(tuple(shape)))
        return out, [rec]


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=0, groups=1, bias=True, rng=None, kind=None):
        super().__init__()
        if c_in < 1 or c_out < 1:
            raise ConfigError(f"conv channels must be >= 1, got {c_in}->{c_out}")
        kh, kw = T._pair(kernel)
        if padding == "same":
            padding = (kh // 2, kw // 2)
        self.stride = T._pair(stride)
        self.padding = T._pair(padding)
        if min(self.stride) < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if c_in % groups or c_out % groups:
            raise ConfigError(f"channels {c_in}->{c_out} not divisible by groups={groups}")
        self.c_in, self.c_out, self.groups = c_in, c_out, groups
        self.kernel = (kh, kw)
        if kind is None:
            kind = "depthwise_conv2d" if groups == c_in == c_out and groups > 1 else (
                "pointwise_conv2d" if (kh, kw) == (1, 1) else "conv2d")
        self.kind = kind
        rng = rng or np.random.default_rng(0)
        fan_in = (c_in // groups) * kh * kw
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in // groups, kh, kw))
        self.params["weight"] = Tensor(w.astype(np.float32), requires_grad=True)
        if bias:
            self.params["bias"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def forward(self, x, train=False):
        return T.conv2d(x, self.params["weight"], self.params.get("bias"), self.stride, self.padding, self.groups)

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.c_in:
            raise ShapeError(f"{self.kind}: expected ({self.c_in}, H, W), got {shape}")
        ho, wo = T.conv_output_hw(shape[1], shape[2], self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.kind}: input {shape} too small for kernel {self.kernel}")
        return (self.c_out, ho, wo)

    def macs(self, shape):
        _, ho, wo = self.output_shape(shape)
        return (self.c_in // self.groups) * self.c_out * self.kernel[0] * self.kernel[1] * ho * wo


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["weight"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels, np.float32)
        self.buffers["running_var"] = np.ones(channels, np.float32)

    def forward(self, x, train=False):
        return T.batch_norm(
            x, self.params["weight"], self.params["bias"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.momentum, self.eps,
        )

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.channels:
            raise ShapeError(f"batchnorm2d: expected ({self.channels}, H, W), got {shape}")
        return shape


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        return T.relu(x)


class AvgPool2d(Layer):
    kind = "avgpool2d"

    def __init__(self, kernel=2):
        super().__init__()
        self.kernel = T._pair(kernel)

    def forward(self, x, train=False):
        return T.avg_pool2d(x, self.kernel)

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.kernel[0] or w < self.kernel[1]:
            raise ShapeError(f"avgpool2d: kernel {self.kernel} larger than {shape}")
        return (c, h // self.kernel[0], w // self.kernel[1])


class GlobalAvgPool(Layer):
    kind = "global_avgpool"

    def forward(self, x, train=False):
        return T.global_avg_pool(x)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"global_avgpool: expected (C, H, W), got {shape}")
        return (shape[0],)


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in, n_out, bias=True, rng=None):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"linear sizes must be >= 1, got {n_in}->{n_out}")
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(n_in)
        self.params["weight"] = Tensor(rng.uniform(-bound, bound, (n_out, n_in)).astype(np.float32), requires_grad=True)
        if bias:
            self.params["bias"] = Tensor(np.zeros(n_out, np.float32), requires_grad=True)

    def forward(self, x, train=False):
        return T.linear(x, self.params["weight"], self.params.get("bias"))

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"linear: expected ({self.n_in},), got {shape}")
        return (self.n_out,)

    def macs(self, shape):
        self.output_shape(shape)
        return self.n_in * self.n_out


class Sequential(Module):
    def __init__(self, *layers: tuple[str, Module]):
        self.layers: list[tuple[str, Module]] = list(layers)

    def append(self, name: str, module: Module) -> None:
        self.layers.append((name, module))

    def forward(self, x, train=False):
        for _, m in self.layers:
            x = m(x, train)
        return x

    def named_parameters(self, prefix=""):
        for name, m in self.layers:
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, m in self.layers:
            yield from m.named_buffers(f"{prefix}{name}.")

    def trace(self, shape, prefix=""):
        recs = []
        for name, m in self.layers:
            shape, r = m.trace(shape, f"{prefix}{name}.")
            recs.extend(r)
        return shape, recs


class Residual(Module):
    """body(x) + shortcut(x); identity shortcut when none is given."""

    def __init__(self, body: Sequential, shortcut: Sequential | None = None):
        self.body = body
        self.shortcut = shortcut

    def forward(self, x, train=False):
        y = self.body(x, train)
        s = x if self.shortcut is None else self.shortcut(x, train)
        if y.shape != s.shape:
            raise ShapeError(f"residual branch shapes differ: expected {s.shape}, got {y.shape}")
        return y + s

    def named_parameters(self, prefix=""):
        yield from self.body.named_parameters(f"{prefix}body.")
        if self.shortcut is not None:
            yield from self.shortcut.named_parameters(f"{prefix}shortcut.")

    def named_buffers(self, prefix=""):
        yield from self.body.named_buffers(f"{prefix}body.")
        if self.shortcut is not None:
            yield from self.shortcut.named_buffers(f"{prefix}shortcut.")

    def trace(self, shape, prefix=""):
        out, recs = self.body.trace(shape, f"{prefix}body.")
        s_out = shape
        if self.shortcut is not None:
            s_out, r = self.shortcut.trace(shape, f"{prefix}shortcut.")
            recs = recs + r
        if out != s_out:
            raise ShapeError(f"residual {prefix.rstrip('.')}: branch shapes differ, expected {s_out}, got {out}")
        return out, recs


def forward(layer: Module, x: Tensor, mode="eval") -> Tensor:
    return layer(x, _is_train(mode))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
    no_decay: frozenset | set = frozenset(),
) -> AdamWState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name}: expected {p.shape}, got {g.shape}")
        m = state.m.setdefault(name, np.zeros_like(p, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros_like(p, dtype=np.float64))
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name}: expected {p.shape}, got {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and name not in no_decay:
            upd = upd + lr * weight_decay * p
        p -= upd.astype(p.dtype)
    return state


class AdamW:
    def __init__(self, named_params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = named_params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamWState()
        # biases and norm affine terms are not decayed
        self.no_decay = frozenset(k for k, p in named_params.items() if p.ndim <= 1)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(arrays, grads, self.state, self.lr if lr is None else lr,
                   self.betas, self.eps, self.weight_decay, self.no_decay)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine decay to zero."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step - warm, span) / span))
