"""Teacher training, model soup, student distillation and evaluation.

Every random draw comes from a substream keyed by (seed, tag, epoch, index),
so results do not depend on iteration or worker order.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as ops
from .augment import (
    AugmentConfig,
    DeviceImpulseResponse,
    dir_convolve,
    freq_mixstyle,
    get_augment_preset,
    load_ir_directory,
    synthetic_ir_bank,
    time_roll,
)
from .data import DatasetIndex
from .distill import (
    DistillConfig,
    FeatureAdapter,
    SoftTargets,
    combined_loss,
    ensemble_soft_targets,
    feature_loss,
    make_adapters,
    soft_loss,
)
from .errors import ConfigError, DivergenceError, IncompatibleError, InputError
from .frontend import FrontendConfig, log_mel_batch
from .models import CLIP_SAMPLES, Checkpoint, Network, NetworkSpec, freeze, save_checkpoint
from .nn import AdamW, cosine_lr
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1

    def validate(self) -> "OptimConfig":
        if not self.lr >= 0:
            raise ConfigError(f"optim.lr: must be >= 0, got {self.lr}")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"optim.betas: need two values in [0, 1), got {list(self.betas)}")
        if not self.eps > 0:
            raise ConfigError(f"optim.eps: must be > 0, got {self.eps}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"optim.weight_decay: must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"optim.warmup_frac: must lie in [0, 1), got {self.warmup_frac}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig | None = None  # None selects the preset of the model being trained
    distill: DistillConfig = field(default_factory=DistillConfig)
    keep_top_k: int = 5
    eval_batch_size: int = 100
    n_synthetic_irs: int = 8
    # student validation interval in epochs; the last epoch is always evaluated
    eval_every: int = 1

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"train.epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size: must be >= 1, got {self.batch_size}")
        if self.augment is not None:
            self.augment.validate()
            if self.augment.mixstyle is not None and self.augment.mixstyle.p > 0 and self.batch_size < 2:
                raise ConfigError("train.batch_size: must be >= 2 when mixstyle is enabled")
        if self.keep_top_k < 1:
            raise ConfigError(f"train.keep_top_k: must be >= 1, got {self.keep_top_k}")
        if self.eval_batch_size < 1:
            raise ConfigError(f"train.eval_batch_size: must be >= 1, got {self.eval_batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"train.eval_every: must be >= 1, got {self.eval_every}")
        self.optim.validate()
        self.distill.validate()
        return self


def substream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(tag.encode("utf-8")), *(int(k) for k in keys)])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class MetricsLog:
    """Append-only JSONL metrics; wall-clock timings go to a separate file so metrics stay reproducible."""

    def __init__(self, path: str | Path | None = None, timing_path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.timing_path = Path(timing_path) if timing_path else None
        self.records: list[dict] = []
        for p in (self.path, self.timing_path):
            if p is not None:
                p.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict, seconds: float | None = None) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if self.timing_path is not None and seconds is not None:
            key = {k: record[k] for k in ("model", "epoch", "split") if k in record}
            with open(self.timing_path, "a", encoding="utf-8") as f:
                f.write(json.dumps({**key, "seconds": round(seconds, 3)}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# features and batches
# ---------------------------------------------------------------------------

def featurize(waves: np.ndarray, cfg: FrontendConfig, chunk: int = 64) -> np.ndarray:
    """[N, L] waveforms -> [N, 1, n_mels, n_frames] float32 network input."""
    parts = [log_mel_batch(np.asarray(waves[i : i + chunk], dtype=np.float32), cfg) for i in range(0, len(waves), chunk)]
    return np.concatenate(parts)[:, None].astype(np.float32, copy=False)


_FEATURE_CACHE: dict = {}


def clean_features(data: DatasetIndex, idx: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Un-augmented network inputs for ``idx``, memoised per dataset and front-end."""
    key = (id(data), cfg, np.asarray(idx).tobytes())
    hit = _FEATURE_CACHE.get(key)
    if hit is None or hit[0] is not data:
        hit = (data, featurize(data.audio(idx), cfg))
        _FEATURE_CACHE[key] = hit
    return hit[1]


def load_irs(ir_dir: str | Path | None, n_synthetic: int, seed: int) -> list[DeviceImpulseResponse]:
    if ir_dir:
        return load_ir_directory(ir_dir)
    return synthetic_ir_bank(n_synthetic, seed)


def augment_waves(
    data: DatasetIndex, idx: np.ndarray, aug: AugmentConfig, irs, seed: int, tag: str, epoch: int
) -> np.ndarray:
    """Time roll then device-IR convolution, each clip on its own (seed, tag, epoch, item) substream."""
    waves = np.array(data.audio(idx), dtype=np.float32)
    for r, i in enumerate(idx):
        rng = substream(seed, tag, epoch, i)
        w = waves[r]
        if aug.time_roll_max_samples:
            w = time_roll(w, aug.time_roll_max_samples, rng)
        if aug.dir_prob > 0 and irs:
            ir = irs[int(rng.integers(len(irs)))]
            w = dir_convolve(w, ir, aug.dir_prob, rng)
        waves[r] = w
    return waves


@dataclass
class Batch:
    epoch: int
    number: int
    idx: np.ndarray
    labels: np.ndarray
    waves: np.ndarray
    x: np.ndarray  # network input for the model that owns the stream


def iter_batches(
    data: DatasetIndex,
    cfg: TrainConfig,
    aug: AugmentConfig,
    frontend: FrontendConfig,
    irs,
    tag: str,
    epoch: int,
) -> Iterator[Batch]:
    train_idx = data.indices("train")
    if train_idx.size == 0:
        raise InputError("training split is empty")
    order = substream(cfg.seed, f"{tag}/order", epoch).permutation(train_idx)
    labels = data.labels
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        waves = augment_waves(data, idx, aug, irs, cfg.seed, tag, epoch)
        x = featurize(waves, frontend)
        ms = aug.mixstyle
        if ms is not None and ms.p > 0 and len(idx) >= 2:
            x = freq_mixstyle(x, ms.alpha_mix, ms.p, substream(cfg.seed, f"{tag}/mix", epoch, b))
        yield Batch(epoch, b, idx, labels[idx], waves, x)


def n_batches(data: DatasetIndex, batch_size: int) -> int:
    return -(-len(data.indices("train")) // batch_size)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_device: dict[str, float]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def score_predictions(pred: np.ndarray, labels: np.ndarray, devices: np.ndarray) -> EvalResult:
    pred, labels, devices = np.asarray(pred), np.asarray(labels), np.asarray(devices)
    if labels.size == 0:
        raise InputError("cannot score an empty split")
    hit = pred == labels
    per_device = {str(d): float(hit[devices == d].mean()) for d in sorted(set(devices.tolist()))}
    return EvalResult(float(hit.mean()), per_device, int(labels.size))


def predict_logits(net: Network, x: np.ndarray, batch_size: int = 100) -> np.ndarray:
    out = [net.forward(Tensor(x[i : i + batch_size]), False).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def evaluate(net: Network, data: DatasetIndex, split: str = "test", batch_size: int = 100) -> EvalResult:
    """Top-1 accuracy overall and per device, batchnorm in eval mode, on un-augmented inputs."""
    idx = data.indices(split)
    if idx.size == 0:
        raise InputError(f"split {split!r} is empty")
    logits = predict_logits(net, clean_features(data, idx, net.spec.frontend_config), batch_size)
    return score_predictions(logits.argmax(axis=1), data.labels[idx], data.devices[idx])


def ensemble_probs(teachers: list[Network], data: DatasetIndex, idx: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Mean teacher softmax on clean inputs, each teacher through its own front-end."""
    logits = [predict_logits(t, clean_features(data, idx, t.spec.frontend_config), batch_size) for t in teachers]
    return ensemble_soft_targets(logits).probs


def evaluate_ensemble(teachers: list[Network], data: DatasetIndex, split: str = "test") -> EvalResult:
    idx = data.indices(split)
    if idx.size == 0:
        raise InputError(f"split {split!r} is empty")
    probs = ensemble_probs(teachers, data, idx)
    return score_predictions(probs.argmax(axis=1), data.labels[idx], data.devices[idx])


def precompute_soft_targets(teachers: list[Network], data: DatasetIndex, split: str = "train") -> np.ndarray:
    """[len(data), n_classes] ensemble probabilities; rows outside ``split`` are NaN."""
    idx = data.indices(split)
    out = np.full((len(data), teachers[0].spec.n_classes), np.nan)
    out[idx] = ensemble_probs(teachers, data, idx)
    return out


# ---------------------------------------------------------------------------
# teachers and soup
# ---------------------------------------------------------------------------

def _check_loss(loss: Tensor, what: str, epoch: int, batch: int) -> float:
    v = float(loss.data)
    if not np.isfinite(v):
        raise DivergenceError(f"{what}: non-finite loss {v} at epoch {epoch}, batch {batch}")
    return v


@dataclass
class TeacherRun:
    checkpoints: list[Checkpoint]  # best first
    metrics: list[dict]
    paths: list[Path] = field(default_factory=list)


def _rank_key(ck: Checkpoint) -> tuple:
    return (ck.metadata["valid_accuracy"], ck.metadata["epoch"])


def train_teacher(
    net: Network,
    data: DatasetIndex,
    cfg: TrainConfig,
    metrics: MetricsLog | None = None,
    checkpoint_dir: str | Path | None = None,
    irs=None,
) -> TeacherRun:
    """Cross-entropy training with the teacher's augmentation preset; keeps the top-k validation checkpoints."""
    cfg.validate()
    name = net.spec.name
    aug = cfg.augment or get_augment_preset(name)
    irs = irs if irs is not None else load_irs(None, cfg.n_synthetic_irs, cfg.seed)
    frontend = net.spec.frontend_config
    metrics = metrics or MetricsLog()
    opt = AdamW(net.parameters(), cfg.optim.lr, cfg.optim.betas, cfg.optim.eps, cfg.optim.weight_decay)
    total = cfg.epochs * n_batches(data, cfg.batch_size)
    step = 0
    kept: list[tuple[Checkpoint, Path | None]] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum, hits, count = 0.0, 0, 0
        for batch in iter_batches(data, cfg, aug, frontend, irs, name, epoch):
            logits = net.forward(Tensor(batch.x), True)
            loss = ops.cross_entropy(logits, batch.labels)
            v = _check_loss(loss, name, epoch, batch.number)
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(step, total, cfg.optim.lr, cfg.optim.warmup_frac))
            step += 1
            n = len(batch.idx)
            loss_sum += v * n
            hits += int((logits.data.argmax(axis=1) == batch.labels).sum())
            count += n
        val = evaluate(net, data, "valid", cfg.eval_batch_size)
        rec = {"model": name, "role": "teacher", "epoch": epoch, "split": "train",
               "loss": {"ce": loss_sum / count, "total": loss_sum / count}, "accuracy": hits / count}
        metrics.append(rec, time.perf_counter() - t0)
        metrics.append({"model": name, "role": "teacher", "epoch": epoch, "split": "valid",
                        "accuracy": val.accuracy, "per_device": val.per_device})
        ck = Checkpoint.from_network(net, id=f"{name}@e{epoch}", epoch=epoch, valid_accuracy=val.accuracy,
                                     seed=cfg.seed, spec_name=name)
        path = None
        if checkpoint_dir is not None:
            path = save_checkpoint(ck, Path(checkpoint_dir) / f"{name}_e{epoch:03d}.ckpt")
        kept.append((ck, path))
        kept.sort(key=lambda kp: _rank_key(kp[0]), reverse=True)
        for _, p in kept[cfg.keep_top_k :]:
            if p is not None and p.exists():
                p.unlink()
        kept = kept[: cfg.keep_top_k]
    return TeacherRun([c for c, _ in kept], metrics.records, [p for _, p in kept if p is not None])


def model_soup(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Elementwise mean of every array (batchnorm running statistics included)."""
    if not checkpoints:
        raise InputError("model soup needs at least one checkpoint")
    ref = checkpoints[0]
    names = set(ref.arrays)
    arch = replace(ref.spec, seed=0)
    for i, ck in enumerate(checkpoints[1:], 1):
        # the init seed does not change the architecture
        if replace(ck.spec, seed=0) != arch:
            raise IncompatibleError(f"checkpoint {i} spec {ck.spec.name!r} differs from {ref.spec.name!r}")
        if set(ck.arrays) != names:
            diff = sorted(names ^ set(ck.arrays))
            raise IncompatibleError(f"checkpoint {i} array names differ: {diff[:4]}")
        for k, a in ck.arrays.items():
            if a.shape != ref.arrays[k].shape:
                raise IncompatibleError(f"checkpoint {i} array {k}: shape {a.shape} vs {ref.arrays[k].shape}")
    arrays = {}
    for k in sorted(names):
        acc = np.zeros(ref.arrays[k].shape, dtype=np.float64)
        for ck in checkpoints:
            acc += ck.arrays[k]
        arrays[k] = (acc / len(checkpoints)).astype(ref.arrays[k].dtype)
    ids = [ck.metadata.get("id", f"#{i}") for i, ck in enumerate(checkpoints)]
    return Checkpoint(NetworkSpec(**ref.spec.to_dict()), arrays, {"soup_of": ids, "n": len(checkpoints)})


# ---------------------------------------------------------------------------
# student distillation
# ---------------------------------------------------------------------------

def _stage_channels(net: Network) -> list[int]:
    cfg = net.spec.frontend_config
    shape = (1, cfg.n_mels, cfg.n_frames(CLIP_SAMPLES))
    _, feats = net.forward_with_features(Tensor(np.zeros((1,) + shape, dtype=np.float32)), False)
    return [f.shape[1] for f in feats]


class StudentTrainer:
    """One student's optimisation state; fed batches by :func:`fit_students`.

    ``soft_targets`` is an optional [len(data), n_classes] array of precomputed
    ensemble probabilities; without it the logit teachers run on every batch.
    """

    def __init__(
        self,
        student: Network,
        data: DatasetIndex,
        cfg: TrainConfig,
        teachers: list[Network] = (),
        feature_teacher: Network | None = None,
        soft_targets: np.ndarray | None = None,
        name: str | None = None,
        metrics: MetricsLog | None = None,
    ):
        cfg.validate()
        dc = cfg.distill
        self.student, self.data, self.cfg, self.dc = student, data, cfg, dc
        self.name = name or student.spec.name
        self.teachers = [freeze(t) for t in teachers]
        self.feature_teacher = freeze(feature_teacher) if feature_teacher is not None else None
        self.soft_targets = soft_targets
        if dc.alpha > 0 and not self.teachers and soft_targets is None:
            raise ConfigError("distill.alpha > 0 needs logit teachers or precomputed soft targets")
        if dc.beta > 0 and self.feature_teacher is None:
            raise ConfigError("distill.beta > 0 needs a feature teacher")
        for t in self.teachers + ([self.feature_teacher] if self.feature_teacher else []):
            if t.spec.n_classes != student.spec.n_classes:
                raise ConfigError(f"teacher {t.spec.name}: {t.spec.n_classes} classes vs student {student.spec.n_classes}")
        self.adapters: dict[int, FeatureAdapter] = {}
        params = dict(student.parameters())
        if dc.beta > 0:
            self.adapters = make_adapters(_stage_channels(student), _stage_channels(self.feature_teacher), dc, cfg.seed)
            for s, a in self.adapters.items():
                params[f"adapter{s}.weight"] = a.weight
        self.opt = AdamW(params, cfg.optim.lr, cfg.optim.betas, cfg.optim.eps, cfg.optim.weight_decay)
        self.total_steps = cfg.epochs * n_batches(data, cfg.batch_size)
        self.step_no = 0
        self.metrics = metrics or MetricsLog()
        self._reset()

    def _reset(self):
        self._sums = {"soft": 0.0, "feat": 0.0, "ce": 0.0, "total": 0.0}
        self._hits = self._count = 0
        self._t0 = time.perf_counter()

    def _teacher_input(self, t: Network, batch: Batch) -> np.ndarray:
        fc = t.spec.frontend_config
        if fc == self.student.spec.frontend_config:
            return batch.x
        return featurize(batch.waves, fc)

    def targets(self, batch: Batch) -> SoftTargets:
        if self.soft_targets is not None:
            p = self.soft_targets[batch.idx]
            if not np.all(np.isfinite(p)):
                raise InputError("precomputed soft targets missing for some training items")
            return SoftTargets(p)
        logits = [t.forward(Tensor(self._teacher_input(t, batch)), False) for t in self.teachers]
        return ensemble_soft_targets(logits)

    def step(self, batch: Batch) -> dict:
        dc = self.dc
        logits, feats = self.student.forward_with_features(Tensor(batch.x), True)
        l_ce = ops.cross_entropy(logits, batch.labels)
        l_soft = soft_loss(logits, self.targets(batch), dc.T, dc.kl_direction) if dc.alpha > 0 else None
        l_feat = None
        if dc.beta > 0:
            _, t_feats = self.feature_teacher.forward_with_features(
                Tensor(self._teacher_input(self.feature_teacher, batch)), False
            )
            l_feat = feature_loss(feats, t_feats, dc, self.adapters)
        total = combined_loss(l_soft, l_feat, l_ce, dc)
        v = _check_loss(total, self.name, batch.epoch, batch.number)
        self.opt.zero_grad()
        total.backward()
        self.opt.step(cosine_lr(self.step_no, self.total_steps, self.cfg.optim.lr, self.cfg.optim.warmup_frac))
        self.step_no += 1
        n = len(batch.idx)
        parts = {"soft": l_soft, "feat": l_feat, "ce": l_ce}
        for k, t in parts.items():
            if t is not None:
                self._sums[k] += float(t.data) * n
        self._sums["total"] += v * n
        self._hits += int((logits.data.argmax(axis=1) == batch.labels).sum())
        self._count += n
        return {k: float(t.data) for k, t in parts.items() if t is not None} | {"total": v}

    def end_epoch(self, epoch: int) -> dict:
        losses = {k: v / self._count for k, v in self._sums.items()}
        rec = {"model": self.name, "role": "student", "epoch": epoch, "split": "train",
               "loss": losses, "accuracy": self._hits / self._count}
        self.metrics.append(rec, time.perf_counter() - self._t0)
        if epoch % self.cfg.eval_every == 0 or epoch == self.cfg.epochs:
            val = evaluate(self.student, self.data, "valid", self.cfg.eval_batch_size)
            self.metrics.append({"model": self.name, "role": "student", "epoch": epoch, "split": "valid",
                                 "accuracy": val.accuracy, "per_device": val.per_device})
        self._reset()
        return rec


def fit_students(trainers: list[StudentTrainer], data: DatasetIndex, cfg: TrainConfig, irs=None, tag: str = "student"):
    """Train several students in lockstep on one shared augmented batch stream.

    All students must share the front-end; the stream depends only on
    (cfg.seed, tag), so each student sees exactly what it would see alone.
    """
    if not trainers:
        raise InputError("no students to train")
    frontend = trainers[0].student.spec.frontend_config
    for tr in trainers:
        if tr.student.spec.frontend_config != frontend:
            raise ConfigError(f"{tr.name}: lockstep students must share one front-end")
    aug = cfg.augment or get_augment_preset(trainers[0].student.spec.name)
    irs = irs if irs is not None else load_irs(None, cfg.n_synthetic_irs, cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        for batch in iter_batches(data, cfg, aug, frontend, irs, tag, epoch):
            for tr in trainers:
                tr.step(batch)
        for tr in trainers:
            tr.end_epoch(epoch)
    return trainers


def distill_student(
    student: Network,
    teachers: list[Network],
    feature_teacher: Network | None,
    data: DatasetIndex,
    cfg: TrainConfig,
    soft_targets: np.ndarray | None = None,
    metrics: MetricsLog | None = None,
    irs=None,
) -> tuple[Network, list[dict]]:
    """Joint logit and feature distillation of ``student``; teachers stay frozen."""
    tr = StudentTrainer(student, data, cfg, teachers, feature_teacher, soft_targets, metrics=metrics)
    fit_students([tr], data, cfg, irs)
    return student, tr.metrics.records


def pick_feature_teacher(teachers: list[Network], data: DatasetIndex, family: str = "cpresnet") -> Network:
    """The highest-validation-accuracy teacher of ``family`` (earlier in the list wins ties)."""
    cands = [t for t in teachers if t.spec.family == family]
    if not cands:
        raise ConfigError(f"no {family} teacher available for feature distillation")
    scores = [evaluate(t, data, "valid").accuracy for t in cands]
    return cands[int(np.argmax(scores))]

