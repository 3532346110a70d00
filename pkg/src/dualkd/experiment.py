"""Small-scale end-to-end comparison of distilled and non-distilled students.

One synthetic dataset and one set of teacher soups are shared by all seeds.
For each seed a distilled student and a cross-entropy-only student start from
the same initial weights and are trained in lockstep on the same batch stream,
so the two differ only in the loss.

Run with ``python3 -m dualkd.experiment --out result.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import synth_dataset
from .distill import DistillConfig
from .models import build_student_micro, build_teacher_micro
from .train import (
    MetricsLog,
    OptimConfig,
    StudentTrainer,
    TrainConfig,
    evaluate,
    evaluate_ensemble,
    fit_students,
    load_irs,
    model_soup,
    pick_feature_teacher,
    precompute_soft_targets,
    train_teacher,
)

log = logging.getLogger(__name__)

DESK_TEACHERS = ("passt_surrogate1", "passt_surrogate2", "cpresnet1", "cpresnet2")
NO_KD = DistillConfig(alpha=0.0, beta=0.0, gamma=1.0)
# 300 training clips give only ~10 steps per epoch, so the step size is larger than the library default
DESK_LR = 1e-2
# student validation is for monitoring only; every epoch would add ~7% to the run
DESK_EVAL_EVERY = 5


@dataclass
class DeskResult:
    teacher_test: dict[str, float]
    ensemble_test: float
    feature_teacher: str
    seeds: list[int]
    kd_test: list[float]
    nokd_test: list[float]
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def kd_mean(self) -> float:
        return float(np.mean(self.kd_test))

    @property
    def nokd_mean(self) -> float:
        return float(np.mean(self.nokd_test))

    @property
    def best_teacher(self) -> float:
        return max(self.teacher_test.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(kd_mean=self.kd_mean, nokd_mean=self.nokd_mean, best_teacher=self.best_teacher)
        return d


def run_desk_experiment(
    n_per_class: int = 50,
    seeds=(0, 1, 2, 3, 4),
    teacher_epochs: int = 30,
    student_epochs: int = 50,
    data_seed: int = 0,
    teacher_seed: int = 0,
    optim: OptimConfig | None = None,
    distill: DistillConfig | None = None,
    teachers=DESK_TEACHERS,
    metrics: MetricsLog | None = None,
) -> DeskResult:
    optim = optim or OptimConfig(lr=DESK_LR)
    distill = (distill or DistillConfig()).validate()
    metrics = metrics or MetricsLog()
    clock = {}
    t0 = time.perf_counter()
    data = synth_dataset(n_per_class, data_seed)
    irs = load_irs(None, TrainConfig().n_synthetic_irs, data_seed)

    soups, teacher_test = [], {}
    tcfg = TrainConfig(epochs=teacher_epochs, seed=teacher_seed, optim=optim).validate()
    for name in teachers:
        t = time.perf_counter()
        run = train_teacher(build_teacher_micro(name, seed=teacher_seed), data, tcfg, metrics, irs=irs)
        net = model_soup(run.checkpoints).to_network()
        soups.append(net)
        teacher_test[name] = evaluate(net, data, "test").accuracy
        clock[f"teacher/{name}"] = time.perf_counter() - t
        log.info("%s: test %.3f (%.0f s)", name, teacher_test[name], clock[f"teacher/{name}"])
    ensemble = evaluate_ensemble(soups, data, "test").accuracy
    feature_teacher = pick_feature_teacher(soups, data) if distill.beta > 0 else None
    soft = precompute_soft_targets(soups, data) if distill.alpha > 0 else None

    kd, nokd = [], []
    for s in seeds:
        t = time.perf_counter()
        cfg = TrainConfig(epochs=student_epochs, seed=s, optim=optim, distill=distill,
                          eval_every=DESK_EVAL_EVERY).validate()
        a, b = build_student_micro(seed=s), build_student_micro(seed=s)
        tr_kd = StudentTrainer(a, data, cfg, soups, feature_teacher, soft, name=f"kd/{s}", metrics=metrics)
        tr_ce = StudentTrainer(b, data, replace(cfg, distill=NO_KD), name=f"nokd/{s}", metrics=metrics)
        fit_students([tr_kd, tr_ce], data, cfg, irs)
        kd.append(evaluate(a, data, "test").accuracy)
        nokd.append(evaluate(b, data, "test").accuracy)
        clock[f"students/{s}"] = time.perf_counter() - t
        log.info("seed %d: kd %.3f, no-kd %.3f (%.0f s)", s, kd[-1], nokd[-1], clock[f"students/{s}"])
    clock["total"] = time.perf_counter() - t0
    return DeskResult(
        teacher_test, ensemble, feature_teacher.spec.name if feature_teacher else "", list(seeds), kd, nokd, clock
    )


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m dualkd.experiment", description=__doc__.split("\n\n")[0])
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--seeds", type=int, default=5, help="number of student seeds (0..n-1)")
    p.add_argument("--teacher-epochs", type=int, default=30)
    p.add_argument("--student-epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--out", help="write the result as JSON here")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = run_desk_experiment(args.n_per_class, range(args.seeds), args.teacher_epochs, args.student_epochs,
                              optim=OptimConfig(lr=args.lr))
    text = json.dumps(res.to_dict(), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
