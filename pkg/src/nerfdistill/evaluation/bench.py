"""Inference memory/throughput benchmark: volumetric teacher vs convolutional student.

Each (generator, batch size) point runs in a fresh subprocess so peak memory
is attributable: the worker records resident memory after loading the model,
caps its address space at that point plus the memory budget, runs warmup and
timed forwards, and reports the peak resident-set growth. Allocation failures
and budget overruns are recorded as infeasible points.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import resource
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import torch
from filelock import FileLock, Timeout

from .metrics import config_hash

KINDS = ("volumetric", "convolutional")


class BenchmarkBusyError(RuntimeError):
    pass


@dataclass
class BenchRecord:
    generator: str
    batch_size: int
    feasible: bool
    peak_memory_bytes: int
    throughput: float  # images per second (0 when infeasible)
    resolution: int
    hardware: str
    config_hash: str
    error: str = ""

    def __post_init__(self):
        if self.feasible and not (self.throughput > 0 and self.peak_memory_bytes > 0):
            raise ValueError("feasible records need positive throughput and peak memory")

    def to_dict(self) -> dict:
        return asdict(self)


def hardware_descriptor(threads: int) -> str:
    return f"{platform.machine()}/{os.cpu_count()}cpu/torch-{torch.__version__}/threads-{threads}"


def max_feasible_batch(records: Iterable[BenchRecord], generator: str) -> int:
    sizes = [r.batch_size for r in records if r.generator == generator and r.feasible]
    return max(sizes, default=0)


def throughput_at(records: Iterable[BenchRecord], generator: str, batch_size: int) -> float:
    for r in records:
        if r.generator == generator and r.batch_size == batch_size and r.feasible:
            return r.throughput
    return 0.0


# ---------------------------------------------------------------------------
# worker side
# ---------------------------------------------------------------------------

def _status_bytes(key: str) -> int:
    with open("/proc/self/status") as fh:
        for line in fh:
            if line.startswith(key + ":"):
                return int(line.split()[1]) * 1024
    return 0


def _peak_rss_bytes() -> int:
    # VmHWM belongs to this address space; ru_maxrss would carry over the parent's RSS through fork+exec
    return _status_bytes("VmHWM")


def _worker(args) -> dict:
    torch.set_num_threads(args.threads)
    from ..teacher import load_checkpoint, teacher_forward
    from ..camera import sample_pose_batch

    model = load_checkpoint(args.checkpoint)
    teacher = model.teacher if args.kind == "convolutional" else model
    g = torch.Generator().manual_seed(args.seed)
    z = torch.randn(args.batch, teacher.config.z_dim, generator=g)
    c = sample_pose_batch(teacher.config.prior, args.batch, g)

    if args.kind == "volumetric":
        run = lambda: teacher_forward(model, z, c).hr  # noqa: E731
    else:
        def run():
            with torch.no_grad():
                return model(z, c).hr

    baseline = _status_bytes("VmRSS")
    if args.budget > 0:
        limit = _status_bytes("VmSize") + args.budget
        resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
    try:
        for _ in range(args.warmup):
            out = run()
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            out = run()
            times.append(time.perf_counter() - t0)
        if out.shape[-1] != teacher.config.high_res:
            raise RuntimeError("unexpected output resolution")
    except (MemoryError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        return {"feasible": False, "peak": max(_peak_rss_bytes() - baseline, 0), "throughput": 0.0,
                "error": f"out of memory: {msg}"[:200]}
    peak = max(_peak_rss_bytes() - baseline, 1)
    if args.budget > 0 and peak > args.budget:
        return {"feasible": False, "peak": peak, "throughput": 0.0, "error": "over memory budget"}
    return {"feasible": True, "peak": peak, "throughput": args.batch / statistics.median(times), "error": ""}


# ---------------------------------------------------------------------------
# driver side
# ---------------------------------------------------------------------------

def _run_point(checkpoint: Path, kind: str, batch: int, budget: int, repeats: int, warmup: int,
               threads: int, seed: int, timeout: float) -> dict:
    cmd = [sys.executable, "-m", "nerfdistill.evaluation.bench", "--worker", "--checkpoint", str(checkpoint),
           "--kind", kind, "--batch", str(batch), "--budget", str(budget), "--repeats", str(repeats),
           "--warmup", str(warmup), "--threads", str(threads), "--seed", str(seed)]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired:
        return {"feasible": False, "peak": 0, "throughput": 0.0, "error": "timeout"}
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith("{")]
    if proc.returncode != 0 or not lines:
        # a worker killed by the allocator is an infeasible point, not a crash
        tail = (proc.stderr.strip().splitlines() or ["worker failed"])[-1]
        return {"feasible": False, "peak": 0, "throughput": 0.0, "error": tail[:200]}
    return json.loads(lines[-1])


def benchmark_efficiency(teacher, student, batch_sizes: Sequence[int], memory_budget: int = 1 << 30,
                         repeats: int = 5, warmup: int = 1, threads: int = 1, seed: int = 0,
                         out_dir=None, lock_path=None, timeout: float = 900.0) -> List[BenchRecord]:
    """Measure both generators at each batch size; write CSV, JSONL and a plot if ``out_dir`` is set.

    ``teacher`` / ``student`` are models or checkpoint paths (the student as a
    ``DistilledGenerator``). Batches above a generator's first infeasible size
    are recorded as infeasible without running. Only one benchmark may run at a
    time per lock file.
    """
    from ..teacher import save_checkpoint

    if repeats < 5:
        raise ValueError("at least 5 timed repetitions are required")
    batch_sizes = sorted(set(int(b) for b in batch_sizes))
    if not batch_sizes or batch_sizes[0] < 1:
        raise ValueError("batch sizes must be positive")
    lock_path = Path(lock_path or Path(tempfile.gettempdir()) / "nerfdistill-bench.lock")
    lock = FileLock(str(lock_path))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise BenchmarkBusyError(f"another benchmark holds {lock_path}") from exc
    try:
        with tempfile.TemporaryDirectory() as tmp:
            paths = {}
            for kind, model in (("volumetric", teacher), ("convolutional", student)):
                if isinstance(model, (str, Path)):
                    paths[kind] = Path(model)
                else:
                    paths[kind] = Path(tmp) / f"{kind}.ckpt"
                    save_checkpoint(model, paths[kind])
            from ..teacher import load_checkpoint

            t_model = load_checkpoint(paths["volumetric"])
            s_model = load_checkpoint(paths["convolutional"])
            if t_model.config.high_res != s_model.teacher.config.high_res:
                raise ValueError("teacher and student output resolutions differ")
            resolution = t_model.config.high_res
            chash = config_hash({"teacher": t_model.config.to_dict(), "student": s_model.config.to_dict(),
                                 "batches": batch_sizes, "budget": memory_budget, "repeats": repeats,
                                 "threads": threads})
            hw = hardware_descriptor(threads)
            records = []
            for kind in KINDS:
                failed = False
                for b in batch_sizes:
                    if failed:
                        res = {"feasible": False, "peak": 0, "throughput": 0.0,
                               "error": "skipped: smaller batch infeasible"}
                    else:
                        res = _run_point(paths[kind], kind, b, memory_budget, repeats, warmup, threads, seed,
                                         timeout)
                        failed = not res["feasible"]
                    records.append(BenchRecord(kind, b, res["feasible"], int(res["peak"]), float(res["throughput"]),
                                               resolution, hw, chash, res["error"]))
    finally:
        lock.release()
    if out_dir is not None:
        write_outputs(records, out_dir)
    return records


def write_outputs(records: List[BenchRecord], out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(BenchRecord.__dataclass_fields__))
        writer.writeheader()
        for r in records:
            writer.writerow(r.to_dict())
    jsonl_path = out_dir / "bench.jsonl"
    jsonl_path.write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))
    png_path = out_dir / "bench.png"
    plot_records(records, png_path)
    return {"csv": csv_path, "jsonl": jsonl_path, "png": png_path}


def plot_records(records: List[BenchRecord], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_mem, ax_tp) = plt.subplots(1, 2, figsize=(9, 3.5))
    for kind, marker in zip(KINDS, ("o", "s")):
        pts = [r for r in records if r.generator == kind and r.feasible]
        if not pts:
            continue
        xs = [r.batch_size for r in pts]
        ax_mem.plot(xs, [r.peak_memory_bytes / 2 ** 20 for r in pts], marker=marker, label=kind)
        ax_tp.plot(xs, [r.throughput for r in pts], marker=marker, label=kind)
    for ax, label in ((ax_mem, "peak memory (MiB)"), (ax_tp, "throughput (images/s)")):
        ax.set_xscale("log", base=2)
        ax.set_xlabel("batch size")
        ax.set_ylabel(label)
        if ax.lines:
            ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def read_csv(path) -> List[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(BenchRecord(row["generator"], int(row["batch_size"]), row["feasible"] == "True",
                                   int(row["peak_memory_bytes"]), float(row["throughput"]), int(row["resolution"]),
                                   row["hardware"], row["config_hash"], row["error"]))
    return out


def _main(argv: Optional[Sequence[str]] = None) -> int:
    p = argparse.ArgumentParser(description="benchmark worker (internal)")
    p.add_argument("--worker", action="store_true")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--budget", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    print(json.dumps(_worker(args)), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(_main())
