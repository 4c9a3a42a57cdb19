"""Command-line entry point: make-teacher, distill, render, eval, bench, ingest."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ConfigError

log = logging.getLogger("nerfdistill")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="run config JSON file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out-dir", default=None, help="directory for outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nerfdistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-teacher", help="build and save a frozen teacher")
    _add_common(p)
    p.add_argument("--kind", choices=("random", "procedural"), default=None)

    p = sub.add_parser("distill", help="distill a teacher checkpoint into a student")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--resume", default=None, help="training checkpoint to resume from")
    p.add_argument("--dataset", default=None, help="dataset root with dataset.json used as the real pool")

    p = sub.add_parser("render", help="render images from a teacher or student checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--z-seed", type=int, default=0)
    p.add_argument("--poses", default="orbit:8", help="orbit:K sweeps yaw over the prior range")
    p.add_argument("--out", default=None, help="alias of --out-dir")

    p = sub.add_parser("eval", help="evaluate a checkpoint against its teacher")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--metric", choices=("fid", "kid", "psnr", "pose"), action="append", required=True)
    p.add_argument("--num-samples", type=int, default=None)

    p = sub.add_parser("bench", help="memory/throughput benchmark of teacher vs student")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--batches", default=None, help="comma-separated batch sizes")
    p.add_argument("--memory-budget-mb", type=int, default=None)

    p = sub.add_parser("ingest", help="validate a dataset manifest")
    _add_common(p)
    p.add_argument("--root", required=True)
    return parser


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args):
    from .runconfig import load_run_config

    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.teacher.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def cmd_make_teacher(args) -> int:
    from .teacher import TeacherConfig, build_teacher, save_checkpoint

    cfg = _load_config(args)
    tc = cfg.teacher
    if args.kind is not None and args.kind != tc.kind:
        tc = TeacherConfig.from_dict({**tc.to_dict(), "kind": args.kind})
    out = _out_dir(args, "runs/teacher")
    teacher = build_teacher(tc)
    path = out / "teacher.ckpt"
    save_checkpoint(teacher, path, {"command": "make-teacher"})
    print(json.dumps({"teacher": str(path), "kind": tc.kind, "seed": tc.seed}))
    return 0


def cmd_distill(args) -> int:
    from .dataset import ingest_dataset
    from .student import StudentConfig
    from .teacher import load_checkpoint
    from .trainer import ImagePool, run_distillation

    cfg = _load_config(args)
    teacher = load_checkpoint(args.teacher)
    if hasattr(teacher, "student"):
        raise ConfigError(f"{args.teacher} is a student checkpoint")
    sc = StudentConfig.for_teacher(teacher.config, **{"seed": cfg.train.seed, **cfg.student})
    real = None
    if args.dataset:
        manifest = ingest_dataset(args.dataset)
        hr = manifest.load_images(teacher.config.high_res)
        real = ImagePool.from_images(hr, manifest.poses().float(), teacher.config.low_res)
    out = _out_dir(args, "runs/distill")
    result = run_distillation(cfg.train, teacher, sc, out, resume=args.resume, real_pool=real)
    print(json.dumps({"student": str(result.checkpoint_path), "metrics": str(result.log_path),
                      "step": result.state.step, "stage": result.state.stage}))
    return 0


def _parse_poses(spec: str, prior) -> torch.Tensor:
    from .camera import poses_from_angles

    kind, _, count = spec.partition(":")
    if kind != "orbit" or not count.isdigit() or int(count) < 1:
        raise ConfigError(f"--poses must look like orbit:K, got {spec!r}")
    k = int(count)
    lo, hi = prior.yaw_range
    yaws = [0.5 * (lo + hi)] if k == 1 else [lo + (hi - lo) * i / (k - 1) for i in range(k)]
    return poses_from_angles([[y, 0.0] for y in yaws], prior)


def cmd_render(args) -> int:
    from PIL import Image

    from .evaluation.suite import image_fn, reference_teacher
    from .teacher import load_checkpoint

    model = load_checkpoint(args.model)
    teacher = reference_teacher(model)
    c = _parse_poses(args.poses, teacher.config.prior)
    g = torch.Generator().manual_seed(args.z_seed)
    z = torch.randn(1, teacher.config.z_dim, generator=g).expand(len(c), -1)
    images = image_fn(model)(z, c)
    out = _out_dir(args, "runs/render")
    names = []
    for i, img in enumerate(images):
        arr = (img.permute(1, 2, 0).numpy() * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
        name = f"view_{i:03d}.png"
        Image.fromarray(arr).save(out / name)
        names.append([name, [float(v) for v in c[i].tolist()]])
    (out / "dataset.json").write_text(json.dumps({"labels": names}, indent=1))
    print(json.dumps({"out_dir": str(out), "images": len(names)}))
    return 0


def cmd_eval(args) -> int:
    from .evaluation.suite import evaluate
    from .teacher import load_checkpoint

    cfg = _load_config(args)
    spec = cfg.eval
    if args.num_samples is not None:
        spec = replace(spec, num_samples=args.num_samples)
    model = load_checkpoint(args.model)
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args, "runs/eval")
    rows = []
    for metric in args.metric:
        report = evaluate(model, metric, spec, seed=seed)
        rows.append(report.to_dict())
    with open(out / "metrics.jsonl", "a") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    csv_path = out / "metrics.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        if new:
            writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    from .evaluation.bench import benchmark_efficiency, max_feasible_batch

    cfg = _load_config(args)
    spec = cfg.bench
    batches = [int(b) for b in args.batches.split(",")] if args.batches else spec.batches
    budget_mb = args.memory_budget_mb or spec.memory_budget_mb
    out = _out_dir(args, "runs/bench")
    records = benchmark_efficiency(args.teacher, args.student, batches, budget_mb * 2 ** 20, spec.repeats,
                                   spec.warmup, spec.threads, seed=args.seed or 0, out_dir=out,
                                   lock_path=out / "bench.lock")
    print(json.dumps({"csv": str(out / "bench.csv"), "plot": str(out / "bench.png"),
                      "max_batch": {k: max_feasible_batch(records, k) for k in ("volumetric", "convolutional")}}))
    return 0


def cmd_ingest(args) -> int:
    from .dataset import ingest_dataset

    manifest = ingest_dataset(args.root)
    summary = manifest.summary()
    summary["warnings"] = manifest.warnings
    if args.out_dir:
        out = _out_dir(args, args.out_dir)
        (out / "manifest_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return 0


COMMANDS = {"make-teacher": cmd_make_teacher, "distill": cmd_distill, "render": cmd_render, "eval": cmd_eval,
            "bench": cmd_bench, "ingest": cmd_ingest}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
