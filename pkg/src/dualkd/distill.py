"""Distillation losses: teacher ensembling, softened KL, Gram self-similarity and direct feature matching."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as ops
from .errors import ConfigError, InputError, NumericError, ShapeError
from .tensor import Tensor

PSEUDO_LOGIT_EPS = 1e-12
FEATURE_METHODS = ("dfm", "ssfm")
KL_DIRECTIONS = ("as_written", "teacher_first")
DEFAULT_STAGES = {"dfm": (3,), "ssfm": (1, 2, 3)}


@dataclass(frozen=True)
class DistillConfig:
    T: float = 2.0
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.05
    feature_method: str = "ssfm"
    stages: tuple[int, ...] | None = None
    kl_direction: str = "as_written"
    gram_pool: int = 8

    def __post_init__(self):
        if self.stages is None and self.feature_method in DEFAULT_STAGES:
            object.__setattr__(self, "stages", DEFAULT_STAGES[self.feature_method])
        elif self.stages is not None:
            object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))

    def validate(self) -> "DistillConfig":
        if not self.T > 0:
            raise ConfigError(f"distill.T: must be > 0, got {self.T}")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"distill.{name}: must be a finite value >= 0, got {v}")
        if self.feature_method not in FEATURE_METHODS:
            raise ConfigError(f"distill.feature_method: expected one of {FEATURE_METHODS}, got {self.feature_method!r}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"distill.kl_direction: expected one of {KL_DIRECTIONS}, got {self.kl_direction!r}")
        if not set(self.stages) <= {1, 2, 3}:
            raise ConfigError(f"distill.stages: must be a subset of {{1, 2, 3}}, got {list(self.stages)}")
        if self.beta > 0 and not self.stages:
            raise ConfigError("distill.stages: must be non-empty when beta > 0")
        if int(self.gram_pool) != self.gram_pool or self.gram_pool < 1:
            raise ConfigError(f"distill.gram_pool: must be an integer >= 1, got {self.gram_pool}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d


@dataclass
class SoftTargets:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeError(f"soft targets must be [B, n_classes], got {p.shape}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
            raise InputError("soft target rows must be non-negative and sum to 1")
        self.probs = p

    def pseudo_logits(self) -> np.ndarray:
        return np.log(self.probs + PSEUDO_LOGIT_EPS)

    def __getitem__(self, idx) -> "SoftTargets":
        return SoftTargets(self.probs[idx])


def _np_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_soft_targets(teacher_logits: list) -> SoftTargets:
    """Per-sample mean of the teachers' softmax distributions."""
    if not teacher_logits:
        raise InputError("ensemble needs at least one teacher")
    arrs = [np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in teacher_logits]
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape or a.ndim != 2:
            raise InputError(f"teacher {i} logits shape {a.shape} differs from {shape}")
    return SoftTargets(np.mean([_np_softmax(a) for a in arrs], axis=0))


def _check_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{what} contains non-finite values")


def soft_loss(student_logits: Tensor, targets: SoftTargets, T: float = 2.0, kl_direction: str = "as_written") -> Tensor:
    """T^2 times the KL divergence between softened student and target distributions, averaged over the batch.

    ``as_written`` computes KL(student || target); ``teacher_first`` computes KL(target || student).
    The target side is re-softened from its pseudo-logits log(p + 1e-12).
    """
    if not T > 0:
        raise ConfigError(f"T: must be > 0, got {T}")
    if kl_direction not in KL_DIRECTIONS:
        raise ConfigError(f"kl_direction: expected one of {KL_DIRECTIONS}, got {kl_direction!r}")
    if student_logits.shape != targets.probs.shape:
        raise ShapeError(f"student logits {student_logits.shape} vs targets {targets.probs.shape}")
    _check_finite(student_logits, "student logits")
    b = student_logits.shape[0]
    dt = student_logits.dtype
    log_q = ops.log_softmax(Tensor(targets.pseudo_logits() / T)).data.astype(dt)
    log_p = ops.log_softmax(student_logits * (1.0 / T), axis=1)
    if kl_direction == "as_written":
        kl = (ops.exp(log_p) * (log_p - Tensor(log_q))).sum()
    else:
        kl = (Tensor(np.exp(log_q)) * (Tensor(log_q) - log_p)).sum()
    return kl * (T * T / b)


def _batched(f: Tensor) -> tuple[Tensor, bool]:
    if f.ndim == 3:
        return f.reshape((1,) + f.shape), True
    if f.ndim == 4:
        return f, False
    raise ShapeError(f"feature must be [C, F, T] or [B, C, F, T], got {f.shape}")


def gram(f: Tensor, pool: int = 8) -> Tensor:
    """Self-similarity over a pool x pool grid of time-frequency cells: G = X^T X / C with X = [C, pool^2].

    Dimensions smaller than ``pool`` are upsampled by nearest neighbour. Accepts
    [C, F, T] (returns [N, N]) or a batch [B, C, F, T] (returns [B, N, N]).
    """
    if pool < 1:
        raise ConfigError(f"pool: must be >= 1, got {pool}")
    fb, single = _batched(f)
    b, c = fb.shape[:2]
    if min(fb.shape[1:]) < 1:
        raise ShapeError(f"feature has an empty axis: {f.shape}")
    x = ops.resample2d(fb, pool, pool).reshape(b, c, pool * pool)
    g = ops.matmul(x.transpose(0, 2, 1), x) * (1.0 / c)
    return g.reshape(pool * pool, pool * pool) if single else g


def ssfm_loss(f_s: Tensor, f_t: Tensor, pool: int = 8) -> Tensor:
    """Mean squared difference of the two Gram matrices (averaged over entries and batch)."""
    gs = gram(f_s, pool)
    gt = gram(f_t, pool)
    if gs.shape != gt.shape:
        raise ShapeError(f"batch sizes differ: {f_s.shape} vs {f_t.shape}")
    d = gs - gt
    return (d * d).mean()


class FeatureAdapter:
    """Trainable 1x1 convolution projecting teacher channels onto student channels."""

    def __init__(self, c_teacher: int, c_student: int, rng: np.random.Generator | None = None, weight=None, dtype=np.float32):
        if weight is None:
            rng = rng or np.random.default_rng(0)
            weight = rng.standard_normal((c_student, c_teacher, 1, 1)) * np.sqrt(1.0 / c_teacher)
        weight = np.asarray(weight, dtype=dtype)
        if weight.shape != (c_student, c_teacher, 1, 1):
            raise ConfigError(f"adapter weight: expected {(c_student, c_teacher, 1, 1)}, got {weight.shape}")
        self.weight = Tensor(weight, requires_grad=True)

    @property
    def c_teacher(self) -> int:
        return self.weight.shape[1]

    @property
    def c_student(self) -> int:
        return self.weight.shape[0]

    def __call__(self, f_t: Tensor) -> Tensor:
        return ops.conv2d(f_t, self.weight)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}


def dfm_loss(f_s: Tensor, f_t: Tensor, adapter: FeatureAdapter) -> Tensor:
    """MSE between the student feature and the adapted teacher feature, pooled to the student's grid first."""
    fs, _ = _batched(f_s)
    ft, _ = _batched(f_t)
    if ft.shape[1] != adapter.c_teacher or fs.shape[1] != adapter.c_student:
        raise ConfigError(
            f"adapter maps {adapter.c_teacher} -> {adapter.c_student} channels, "
            f"features have {ft.shape[1]} (teacher) and {fs.shape[1]} (student)"
        )
    if fs.shape[0] != ft.shape[0]:
        raise ShapeError(f"batch sizes differ: {fs.shape} vs {ft.shape}")
    ft = ops.resample2d(ft, fs.shape[2], fs.shape[3])
    d = fs - adapter(ft)
    return (d * d).mean()


def feature_loss(
    student_feats: list[Tensor],
    teacher_feats: list[Tensor],
    cfg: DistillConfig,
    adapters: dict[int, FeatureAdapter] | None = None,
) -> Tensor:
    """Per-stage DFM or SSFM losses averaged over ``cfg.stages`` (1-based)."""
    losses = []
    for s in cfg.stages:
        fs, ft = student_feats[s - 1], teacher_feats[s - 1]
        if cfg.feature_method == "ssfm":
            losses.append(ssfm_loss(fs, ft, cfg.gram_pool))
        else:
            if adapters is None or s not in adapters:
                raise ConfigError(f"distill: DFM at stage {s} needs an adapter")
            losses.append(dfm_loss(fs, ft, adapters[s]))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def make_adapters(student_channels: list[int], teacher_channels: list[int], cfg: DistillConfig, seed: int = 0):
    if cfg.feature_method != "dfm":
        return {}
    rng = np.random.default_rng([seed, 0xADA])
    return {s: FeatureAdapter(teacher_channels[s - 1], student_channels[s - 1], rng) for s in cfg.stages}


def _as_loss(x, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.size != 1:
        raise ShapeError(f"{name} must be a scalar, got shape {t.shape}")
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError(f"{name} is not finite ({v})")
    if v < 0:
        raise NumericError(f"{name} must be >= 0, got {v}")
    return t


def combined_loss(l_soft, l_feat, l_ce, cfg: DistillConfig) -> Tensor:
    """alpha * l_soft + beta * l_feat + gamma * l_ce; zero-weighted terms are left out of the graph."""
    terms = [(cfg.alpha, l_soft, "l_soft"), (cfg.beta, l_feat, "l_feat"), (cfg.gamma, l_ce, "l_ce")]
    total = None
    for w, l, name in terms:
        if l is None:
            if w != 0:
                raise InputError(f"{name} is missing but its weight is {w}")
            continue
        t = _as_loss(l, name)
        if w == 0:
            continue
        part = t * float(w)
        total = part if total is None else total + part
    return total if total is not None else Tensor(np.zeros((), dtype=np.float32))
