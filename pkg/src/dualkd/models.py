"""Micro surrogate networks: a depthwise-separable student and residual CNN teachers.

Every network is stem -> stage1 -> stage2 -> stage3 -> head. The output of
each stage is a feature tap used by feature-level distillation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, ShapeError
from .frontend import PRESETS, FrontendConfig, get_preset
from .nn import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReLU, Residual, Sequential
from .tensor import Tensor

N_CLASSES = 10
STAGES = ("stage1", "stage2", "stage3")
CLIP_SAMPLES = 32_000  # 1 s at 32 kHz

STUDENT_FAMILY = "student"
TEACHER_PRESETS = {
    # teacher preset -> (family, frontend preset)
    "cpresnet1": ("cpresnet", "cpresnet1"),
    "cpresnet2": ("cpresnet", "cpresnet2"),
    "passt_surrogate1": ("passt_surrogate", "passt1"),
    "passt_surrogate2": ("passt_surrogate", "passt2"),
}

# base channel plan (stem, stage1, stage2, stage3); scaled by the width multiplier
STUDENT_CHANNELS = (8, 16, 24, 32)
STUDENT_EXPANSION = 2
TEACHER_CHANNELS = {
    "cpresnet": (16, 16, 32, 64),
    "passt_surrogate": (16, 24, 32, 64),
}


@dataclass
class NetworkSpec:
    name: str
    family: str
    frontend: str
    width: float = 1.0
    n_classes: int = N_CLASSES
    seed: int = 0

    @property
    def frontend_config(self) -> FrontendConfig:
        return get_preset(self.frontend)

    @property
    def n_mels(self) -> int:
        return PRESETS[self.frontend].n_mels

    def to_dict(self) -> dict:
        return asdict(self)


class Network:
    def __init__(self, spec: NetworkSpec, stem: Sequential, stages: list[Sequential], head: Sequential):
        if len(stages) != 3:
            raise ConfigError(f"network needs exactly 3 stages, got {len(stages)}")
        self.spec = spec
        self.stem = stem
        self.stages = stages
        self.head = head

    def _groups(self):
        yield "stem", self.stem
        for name, s in zip(STAGES, self.stages):
            yield name, s
        yield "head", self.head

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.spec.n_mels:
            raise ShapeError(
                f"{self.spec.name}: expected input [B, 1, {self.spec.n_mels}, T], got {tuple(x.shape)}"
            )

    def forward_with_features(self, x: Tensor, train: bool = False) -> tuple[Tensor, list[Tensor]]:
        self.check_input(x)
        h = self.stem(x, train)
        feats = []
        for stage in self.stages:
            h = stage(h, train)
            feats.append(h)
        return self.head(h, train), feats

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return self.forward_with_features(x, train)[0]

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for g, m in self._groups():
            out.update(m.named_parameters(f"{g}."))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for g, m in self._groups():
            out.update(m.named_buffers(f"{g}."))
        return out

    def trace(self, input_shape: tuple) -> list[nn.LayerTrace]:
        shape = tuple(input_shape)
        recs = []
        for g, m in self._groups():
            shape, r = m.trace(shape, f"{g}.")
            recs.extend(r)
        return recs

    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {k: p.data.copy() for k, p in self.parameters().items()}
        sd.update({k: b.copy() for k, b in self.buffers().items()})
        return sd

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.parameters(), self.buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeError(f"{self.spec.name}: state mismatch, missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data[...] = state[k]
        for k, b in bufs.items():
            if state[k].shape != b.shape:
                raise ShapeError(f"{k}: expected {b.shape}, got {state[k].shape}")
            b[...] = state[k]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def _scale(base: tuple[int, ...], width: float) -> tuple[int, ...]:
    if not width > 0:
        raise ConfigError(f"width: must be > 0, got {width}")
    chans = tuple(int(round(c * width)) for c in base)
    if min(chans) < 1:
        raise ConfigError(f"width: {width} yields zero channels ({chans})")
    return chans


def _inverted_residual(c_in: int, c_out: int, stride, expansion: int, rng) -> list[tuple[str, nn.Module]]:
    """Pointwise expand -> depthwise 3x3 -> pointwise project, residual when shapes allow, then ReLU."""
    hidden = c_in * expansion
    body = Sequential(
        ("expand", Conv2d(c_in, hidden, 1, bias=False, rng=rng)),
        ("bn1", BatchNorm2d(hidden)),
        ("relu1", ReLU()),
        ("dw", Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, bias=False, rng=rng)),
        ("bn2", BatchNorm2d(hidden)),
        ("relu2", ReLU()),
        ("project", Conv2d(hidden, c_out, 1, bias=False, rng=rng)),
        ("bn3", BatchNorm2d(c_out)),
    )
    block = Residual(body) if (stride == 1 and c_in == c_out) else body
    return [("block", block), ("act", ReLU())]


def _basic_block(c_in: int, c_out: int, stride, rng) -> list[tuple[str, nn.Module]]:
    body = Sequential(
        ("conv1", Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False, rng=rng)),
        ("bn1", BatchNorm2d(c_out)),
        ("relu1", ReLU()),
        ("conv2", Conv2d(c_out, c_out, 3, padding=1, bias=False, rng=rng)),
        ("bn2", BatchNorm2d(c_out)),
    )
    shortcut = None
    if stride != 1 or c_in != c_out:
        shortcut = Sequential(
            ("conv", Conv2d(c_in, c_out, 1, stride=stride, bias=False, rng=rng)),
            ("bn", BatchNorm2d(c_out)),
        )
    return [("block", Residual(body, shortcut)), ("act", ReLU())]


def _stem(n_mels: int, n_frames: int, c0: int, c1: int, rng, separable: bool) -> Sequential:
    """Patchify the mel axis to 64 rows, then one stride-2 stage: 256x65 -> 32x17.

    Inputs with many frames (short hops) take a time stride of 3 in the first
    conv so every network reaches a similar grid.
    """
    fs = max(1, n_mels // 64)
    ts = 2 if n_frames <= 72 else 3
    stem = Sequential(
        ("in_bn", BatchNorm2d(1)),
        ("conv1", Conv2d(1, c0, (fs, ts + 1), stride=(fs, ts), padding=(0, 1), bias=False, rng=rng)),
        ("bn1", BatchNorm2d(c0)),
        ("relu1", ReLU()),
    )
    if separable:
        stem.append("dw", Conv2d(c0, c0, 3, stride=2, padding=1, groups=c0, bias=False, rng=rng))
        stem.append("conv2", Conv2d(c0, c1, 1, bias=False, rng=rng))
    else:
        stem.append("conv2", Conv2d(c0, c1, 3, stride=2, padding=1, bias=False, rng=rng))
    stem.append("bn2", BatchNorm2d(c1))
    stem.append("relu2", ReLU())
    return stem


def _head(c: int, n_classes: int, rng) -> Sequential:
    return Sequential(("pool", GlobalAvgPool()), ("fc", Linear(c, n_classes, rng=rng)))


def build_student_micro(width: float = 1.0, seed: int = 0, n_classes: int = N_CLASSES) -> Network:
    c0, c1, c2, c3 = _scale(STUDENT_CHANNELS, width)
    rng = np.random.default_rng(seed)
    spec = NetworkSpec("student_micro", STUDENT_FAMILY, "cpmobile", width, n_classes, seed)
    stem = _stem(spec.n_mels, spec.frontend_config.n_frames(CLIP_SAMPLES), c0, c1, rng, separable=True)
    e = STUDENT_EXPANSION
    s1 = Sequential(*_prefix("b1", _inverted_residual(c1, c1, 1, e, rng)))
    s2 = Sequential(*_prefix("b1", _inverted_residual(c1, c2, 2, e, rng)),
                    *_prefix("b2", _inverted_residual(c2, c2, 1, e, rng)))
    s3 = Sequential(*_prefix("b1", _inverted_residual(c2, c3, 2, e, rng)),
                    *_prefix("b2", _inverted_residual(c3, c3, 1, e, rng)))
    return Network(spec, stem, [s1, s2, s3], _head(c3, n_classes, rng))


def build_teacher_micro(preset: str, seed: int = 0, width: float = 1.0, n_classes: int = N_CLASSES) -> Network:
    try:
        family, frontend = TEACHER_PRESETS[preset]
    except KeyError:
        raise ConfigError(f"teacher preset: unknown {preset!r}, expected one of {sorted(TEACHER_PRESETS)}") from None
    c0, c1, c2, c3 = _scale(TEACHER_CHANNELS[family], width)
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(preset, family, frontend, width, n_classes, seed)
    stem = _stem(spec.n_mels, spec.frontend_config.n_frames(CLIP_SAMPLES), c0, c1, rng, separable=False)
    s1 = Sequential(*_prefix("b1", _basic_block(c1, c1, 1, rng)))
    s2 = Sequential(*_prefix("b1", _basic_block(c1, c2, 2, rng)))
    s3 = Sequential(*_prefix("b1", _basic_block(c2, c3, 2, rng)))
    return Network(spec, stem, [s1, s2, s3], _head(c3, n_classes, rng))


def _prefix(p: str, layers):
    return [(f"{p}_{name}", m) for name, m in layers]


def build_network(spec: NetworkSpec) -> Network:
    if spec.family == STUDENT_FAMILY:
        return build_student_micro(spec.width, spec.seed, spec.n_classes)
    return build_teacher_micro(spec.name, spec.seed, spec.width, spec.n_classes)


def forward_with_features(net: Network, x: Tensor, train: bool = False) -> dict:
    logits, feats = net.forward_with_features(x, train)
    return {"logits": logits, "stage_features": feats}


def freeze(net: Network) -> Network:
    for p in net.parameters().values():
        p.requires_grad = False
        p.grad = None
    return net


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DKDCKPT\x00"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, **metadata) -> "Checkpoint":
        return cls(NetworkSpec(**net.spec.to_dict()), net.state_dict(), dict(metadata))

    def to_network(self) -> Network:
        net = build_network(self.spec)
        net.load_state_dict(self.arrays)
        return net


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write ``magic | u32 version | u32 header_len | JSON header | float32 LE payload``."""
    path = Path(path)
    manifest, offset = [], 0
    blobs = []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"version": CKPT_VERSION, "spec": ckpt.spec.to_dict(), "metadata": ckpt.metadata, "manifest": manifest},
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(raw)[16 + hlen :]
    arrays = {}
    for entry in header["manifest"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FormatError(f"{path}: array {entry['name']} truncated")
        arr = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return Checkpoint(NetworkSpec(**header["spec"]), arrays, header["metadata"])
