"""Command-line entry points.

Every command resolves the run config (defaults <- --config <- --set <- flags),
writes it to ``<run-dir>/config.json`` and puts its outputs under the run
directory: ``checkpoints/``, ``metrics.jsonl``, ``reports/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .audit import check_constraints, complexity_report, format_report, report_json
from .config import RunConfig, load_config
from .data import SCENE_LABELS, DatasetIndex, load_tau_index, synth_dataset
from .errors import ConfigError, DualKDError, InputError
from .frontend import SAMPLE_RATE, log_mel_batch
from .models import (
    CLIP_SAMPLES,
    Checkpoint,
    build_student_micro,
    build_teacher_micro,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    MetricsLog,
    StudentTrainer,
    evaluate,
    featurize,
    fit_students,
    load_irs,
    model_soup,
    pick_feature_teacher,
    precompute_soft_targets,
    train_teacher,
)

log = logging.getLogger("dualkd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _dataset(cfg: RunConfig) -> DatasetIndex:
    t = cfg.raw["train"]
    if t["dataset"] == "tau":
        p = cfg.raw["paths"]
        return load_tau_index(p["meta"], p["subset"], p["audio_root"])
    return synth_dataset(t["synth_n_per_class"], cfg.seed)


def _metrics(cfg: RunConfig) -> MetricsLog:
    return MetricsLog(cfg.run_dir / "metrics.jsonl", cfg.run_dir / "timing.jsonl")


def _write_report(cfg: RunConfig, name: str, payload: dict | str) -> Path:
    path = cfg.run_dir / "reports" / name
    path.parent.mkdir(parents=True, exist_ok=True)
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def _soup_path(cfg: RunConfig, preset: str) -> Path:
    root = Path(cfg.raw["paths"]["teacher_dir"] or cfg.run_dir / "checkpoints")
    return root / f"{preset}.soup.ckpt"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_featurize(cfg: RunConfig, args) -> int:
    fc = cfg.frontend().validate()
    out = cfg.run_dir / "features"
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        for f in args.input:
            sr, x = wavfile.read(f)
            if sr != SAMPLE_RATE:
                raise InputError(f"{f}: sample rate {sr}, expected {SAMPLE_RATE}")
            if x.ndim > 1:
                x = x.mean(axis=1)
            if np.issubdtype(x.dtype, np.integer):
                x = x.astype(np.float64) / np.iinfo(x.dtype).max
            np.save(out / f"{Path(f).stem}.npy", log_mel_batch(np.asarray(x, np.float32)[None], fc)[0])
        print(f"wrote {len(args.input)} log-Mel arrays to {out}")
        return EXIT_OK
    data = _dataset(cfg)
    x = featurize(data.audio(np.arange(len(data))), fc)[:, 0]
    np.savez(out / "features.npz", x=x, labels=data.labels, devices=data.devices,
             splits=np.array([it.split for it in data.items]))
    print(f"wrote {x.shape} features to {out / 'features.npz'}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    n = args.n_per_class or cfg.raw["train"]["synth_n_per_class"]
    data = synth_dataset(n, cfg.seed)
    root = cfg.run_dir / "data"
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rows = ["filename\tscene_label\tsource\tsplit"]
    for i, it in enumerate(data.items):
        name = f"audio/{SCENE_LABELS[it.label]}-{i:05d}-{it.device}.wav"
        wavfile.write(root / name, SAMPLE_RATE, data.waveforms[i])
        rows.append(f"{name}\t{SCENE_LABELS[it.label]}\t{it.device}\t{it.split}")
    (root / "meta.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {len(data)} clips and {root / 'meta.tsv'}")
    return EXIT_OK


def cmd_train_teacher(cfg: RunConfig, args) -> int:
    presets = args.preset or cfg.raw["model"]["teachers"]
    data = _dataset(cfg)
    tc = cfg.train_config("teacher")
    irs = load_irs(cfg.raw["paths"]["ir_dir"], tc.n_synthetic_irs, cfg.seed)
    metrics = _metrics(cfg)
    for p in presets:
        net = build_teacher_micro(p, seed=cfg.seed, width=cfg.raw["model"]["teacher_width"])
        run = train_teacher(net, data, tc, metrics, cfg.run_dir / "checkpoints" / p, irs)
        best = run.checkpoints[0].metadata
        print(f"{p}: kept {len(run.checkpoints)} checkpoints, best valid accuracy {best['valid_accuracy']:.3f} "
              f"at epoch {best['epoch']}")
    return EXIT_OK


def cmd_soup(cfg: RunConfig, args) -> int:
    if args.inputs:
        paths = [Path(p) for p in args.inputs]
        out = Path(args.output) if args.output else cfg.run_dir / "checkpoints" / "soup.ckpt"
    else:
        presets = args.preset or cfg.raw["model"]["teachers"]
        if len(presets) != 1 and args.output:
            raise ConfigError("--output needs exactly one --preset")
        for p in presets:
            paths = sorted((cfg.run_dir / "checkpoints" / p).glob("*.ckpt"))
            if not paths:
                raise InputError(f"no checkpoints for {p} under {cfg.run_dir / 'checkpoints' / p}")
            ck = model_soup([load_checkpoint(q) for q in paths])
            dest = Path(args.output) if args.output else _soup_path(cfg, p)
            save_checkpoint(ck, dest)
            print(f"{p}: averaged {len(paths)} checkpoints -> {dest}")
        return EXIT_OK
    ck = model_soup([load_checkpoint(q) for q in paths])
    save_checkpoint(ck, out)
    print(f"averaged {len(paths)} checkpoints -> {out}")
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args) -> int:
    data = _dataset(cfg)
    sc = cfg.train_config("student")
    m = cfg.raw["model"]
    teachers = []
    for p in m["teachers"]:
        path = _soup_path(cfg, p)
        if not path.exists():
            raise InputError(f"teacher {p}: {path} not found (run train-teacher and soup first)")
        teachers.append(load_checkpoint(path).to_network())
    ft = None
    if sc.distill.beta > 0:
        if m["feature_teacher"] == "auto":
            ft = pick_feature_teacher(teachers, data)
        else:
            ft = next((t for t in teachers if t.spec.name == m["feature_teacher"]), None)
            if ft is None:
                raise ConfigError(f"model.feature_teacher: {m['feature_teacher']!r} is not among model.teachers")
    soft = None
    if sc.distill.alpha > 0 and cfg.raw["distill"]["soft_targets"] == "offline":
        soft = precompute_soft_targets(teachers, data)
    student = build_student_micro(m["student_width"], seed=cfg.seed)
    irs = load_irs(cfg.raw["paths"]["ir_dir"], sc.n_synthetic_irs, cfg.seed)
    tr = StudentTrainer(student, data, sc, teachers, ft, soft, metrics=_metrics(cfg))
    fit_students([tr], data, sc, irs)
    ck = Checkpoint.from_network(student, id=f"{student.spec.name}@e{sc.epochs}", epoch=sc.epochs, seed=sc.seed)
    save_checkpoint(ck, cfg.run_dir / "checkpoints" / "student.ckpt")
    res = evaluate(student, data, "test")
    _write_report(cfg, "distill_eval.json", {"model": student.spec.name, "split": "test", **res.to_dict()})
    print(f"student test accuracy {res.accuracy:.3f}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    data = _dataset(cfg)
    net = load_checkpoint(args.checkpoint).to_network()
    res = evaluate(net, data, args.split)
    payload = {"model": net.spec.name, "checkpoint": str(args.checkpoint), "split": args.split, **res.to_dict()}
    _write_report(cfg, f"eval_{net.spec.name}_{args.split}.json", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_audit(cfg: RunConfig, args) -> int:
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint).to_network()
    else:
        net = build_student_micro(cfg.raw["model"]["student_width"], seed=cfg.seed)
    fc = net.spec.frontend_config
    a = cfg.raw["audit"]
    report = complexity_report(net, (1, fc.n_mels, fc.n_frames(CLIP_SAMPLES)), a["dtype_width"])
    verdict = check_constraints(report, a["memory_bytes"], a["macs"])
    _write_report(cfg, "audit.txt", format_report(report, verdict))
    _write_report(cfg, "audit.json", report_json(report, verdict))
    print(report_json(report, verdict) if args.json else format_report(report, verdict))
    return EXIT_OK if verdict.passed else EXIT_FAIL


COMMANDS = {
    "featurize": cmd_featurize,
    "synth": cmd_synth,
    "train-teacher": cmd_train_teacher,
    "soup": cmd_soup,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set distill.T=4 (repeatable)")
    common.add_argument("--run-dir", help="output directory (overrides paths.run_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualkd", description="Dual-level distillation pipeline for scene classification")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("featurize", parents=[common], help="waveforms -> log-Mel arrays")
    p.add_argument("--input", nargs="*", help="WAV files; without this the configured dataset is featurized")
    p = sub.add_parser("synth", parents=[common], help="write the synthetic dataset as WAV files plus metadata")
    p.add_argument("--n-per-class", type=int)
    p = sub.add_parser("train-teacher", parents=[common], help="train teachers, keeping top-k checkpoints")
    p.add_argument("--preset", action="append", help="teacher preset (repeatable; default: model.teachers)")
    p = sub.add_parser("soup", parents=[common], help="average checkpoints")
    p.add_argument("--preset", action="append")
    p.add_argument("--inputs", nargs="*", help="checkpoint files to average")
    p.add_argument("--output")
    sub.add_parser("distill", parents=[common], help="distill the student from the teacher soups")
    p = sub.add_parser("evaluate", parents=[common], help="accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p = sub.add_parser("audit", parents=[common], help="parameter memory and MACs against the budgets")
    p.add_argument("--checkpoint")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed, args.run_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    cfg.save(cfg.run_dir / "config.json")
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DualKDError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
