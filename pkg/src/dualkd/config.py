"""Run configuration: a single JSON document merged over defaults, then validated.

Unknown keys and mistyped values are rejected with the dotted path of the
offending field. ``key=value`` overrides are applied after the file is loaded
and before validation; values are parsed as JSON when possible.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .audit import FP16_BYTES, MAC_BUDGET, MEMORY_BUDGET_BYTES
from .augment import AugmentConfig
from .distill import DistillConfig
from .errors import ConfigError, DualKDError
from .frontend import FrontendConfig, get_preset
from .models import TEACHER_PRESETS
from .train import OptimConfig, TrainConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "frontend": {"preset": "cpmobile", "overrides": {}},
    # null selects each model's own preset
    "augment": None,
    "model": {
        "student_width": 1.0,
        "teacher_width": 1.0,
        "teachers": ["passt_surrogate1", "passt_surrogate2", "cpresnet1", "cpresnet2"],
        "feature_teacher": "auto",
    },
    "distill": {
        "T": 2.0,
        "alpha": 1.0,
        "beta": 0.1,
        "gamma": 0.05,
        "feature_method": "ssfm",
        "stages": None,
        "kl_direction": "as_written",
        "gram_pool": 8,
        "soft_targets": "offline",
    },
    "train": {
        "teacher_epochs": 30,
        "student_epochs": 50,
        "batch_size": 32,
        "keep_top_k": 5,
        "eval_batch_size": 100,
        # students only; teachers need every epoch to rank checkpoints
        "eval_every": 1,
        "dataset": "synth",
        "synth_n_per_class": 50,
        "n_synthetic_irs": 8,
        "optim": {"lr": 1e-3, "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 1e-4, "warmup_frac": 0.1},
    },
    "audit": {"memory_bytes": MEMORY_BUDGET_BYTES, "macs": MAC_BUDGET, "dtype_width": FP16_BYTES},
    "paths": {"run_dir": "runs/default", "meta": None, "subset": None, "audio_root": None, "ir_dir": None,
              "teacher_dir": None},
}

# keys whose value may be null or a nested object with its own schema
_FREE_KEYS = {"augment", "frontend.overrides", "distill.stages"}
_NULLABLE_STR = {"paths.meta", "paths.subset", "paths.audio_root", "paths.ir_dir", "paths.teacher_dir"}


def _type_name(v) -> str:
    return "null" if v is None else type(v).__name__


def _check(value, default, path: str):
    if path in _FREE_KEYS:
        return value
    if path in _NULLABLE_STR:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string or null, got {_type_name(value)}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {_type_name(value)}")
        for k in value:
            if k not in default:
                raise ConfigError(f"{path + '.' if path else ''}{k}: unknown key")
        return {k: _check(value.get(k, dv), dv, f"{path + '.' if path else ''}{k}") for k, dv in default.items()}
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
            raise ConfigError(f"{path}: expected an integer, got {value}")
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {_type_name(default)}, got {_type_name(value)}")
    return int(value) if isinstance(default, int) and not isinstance(default, bool) else value


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "overrides":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r}: empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides or []:
        keys, value = parse_override(text)
        node = cfg
        for i, k in enumerate(keys[:-1]):
            nxt = node.get(k)
            if nxt is None:
                nxt = node[k] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"{'.'.join(keys[: i + 1])}: cannot set a sub-key of a non-object")
            node = nxt
        node[keys[-1]] = value
    return cfg


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def run_dir(self) -> Path:
        return Path(self.raw["paths"]["run_dir"])

    def frontend(self) -> FrontendConfig:
        f = self.raw["frontend"]
        return get_preset(f["preset"], **(f["overrides"] or {}))

    def augment(self) -> AugmentConfig | None:
        a = self.raw["augment"]
        return None if a is None else AugmentConfig.from_dict(a)

    def distill(self) -> DistillConfig:
        d = {k: v for k, v in self.raw["distill"].items() if k != "soft_targets"}
        return DistillConfig(**d).validate()

    def optim(self) -> OptimConfig:
        o = dict(self.raw["train"]["optim"])
        o["betas"] = tuple(o["betas"])
        return OptimConfig(**o).validate()

    def train_config(self, role: str) -> TrainConfig:
        t = self.raw["train"]
        epochs = t["teacher_epochs"] if role == "teacher" else t["student_epochs"]
        return TrainConfig(
            epochs=epochs,
            batch_size=t["batch_size"],
            seed=self.seed,
            optim=self.optim(),
            augment=self.augment(),
            distill=self.distill(),
            keep_top_k=t["keep_top_k"],
            eval_batch_size=t["eval_batch_size"],
            eval_every=t["eval_every"],
            n_synthetic_irs=t["n_synthetic_irs"],
        ).validate()

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def _validate_semantics(cfg: RunConfig) -> None:
    def at(path, fn):
        try:
            fn()
        except ConfigError as e:
            msg = str(e)
            raise ConfigError(msg if msg.startswith(path) else f"{path}.{msg}") from None
        except (TypeError, DualKDError) as e:
            raise ConfigError(f"{path}: {e}") from None

    at("frontend", lambda: cfg.frontend().validate())
    at("augment", cfg.augment)
    at("distill", cfg.distill)
    at("train.optim", cfg.optim)
    at("train", lambda: cfg.train_config("student"))
    m = cfg.raw["model"]
    for i, name in enumerate(m["teachers"]):
        if name not in TEACHER_PRESETS:
            raise ConfigError(f"model.teachers[{i}]: unknown preset {name!r}, expected one of {sorted(TEACHER_PRESETS)}")
    if m["feature_teacher"] != "auto" and m["feature_teacher"] not in TEACHER_PRESETS:
        raise ConfigError(f"model.feature_teacher: expected 'auto' or a teacher preset, got {m['feature_teacher']!r}")
    for key in ("student_width", "teacher_width"):
        if not m[key] > 0:
            raise ConfigError(f"model.{key}: must be > 0, got {m[key]}")
    if cfg.raw["distill"]["soft_targets"] not in ("offline", "online"):
        raise ConfigError(f"distill.soft_targets: expected 'offline' or 'online', got {cfg.raw['distill']['soft_targets']!r}")
    t = cfg.raw["train"]
    if t["dataset"] not in ("synth", "tau"):
        raise ConfigError(f"train.dataset: expected 'synth' or 'tau', got {t['dataset']!r}")
    if t["dataset"] == "tau" and not cfg.raw["paths"]["meta"]:
        raise ConfigError("paths.meta: required when train.dataset is 'tau'")
    if t["synth_n_per_class"] < 1:
        raise ConfigError(f"train.synth_n_per_class: must be >= 1, got {t['synth_n_per_class']}")
    a = cfg.raw["audit"]
    for key in ("memory_bytes", "macs", "dtype_width"):
        if a[key] < 1:
            raise ConfigError(f"audit.{key}: must be >= 1, got {a[key]}")


def build_config(user: dict | None = None, overrides: list[str] | None = None, seed: int | None = None,
                 run_dir: str | None = None) -> RunConfig:
    """Defaults <- file contents <- ``--set`` overrides <- explicit flags, then validation."""
    merged = _deep_merge(DEFAULTS, user or {})
    merged = apply_overrides(merged, overrides or [])
    if seed is not None:
        merged["seed"] = seed
    if run_dir is not None:
        merged.setdefault("paths", {})["run_dir"] = run_dir
    checked = _check(merged, DEFAULTS, "")
    cfg = RunConfig(checked)
    _validate_semantics(cfg)
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None, seed: int | None = None,
                run_dir: str | None = None) -> RunConfig:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return build_config(user, overrides, seed, run_dir)
