"""Two-stage distillation of the frozen teacher into the convolutional student."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from . import config as cfgutil
from .camera import PosePrior, sample_latents, sample_pose_batch
from .checkpoint import load_container, save_container
from .discriminator import DualDiscriminator
from .evaluation.metrics import mean_psnr
from .losses import (LossReport, LossWeights, PerceptualLoss, adversarial_d, adversarial_g,
                     dual_discriminator_input, reconstruction_terms, total_loss)
from .student import DistilledGenerator, Student, StudentConfig, build_student
from .teacher import RenderBundle, Teacher, save_checkpoint, teacher_forward

log = logging.getLogger(__name__)

TRANSITIONS = ("fixed-steps", "metric-threshold")
SAMPLE_MODES = ("online", "cache")

# offsets that give each random stream its own seed
_CACHE_STREAM, _PROBE_STREAM, _REAL_STREAM, _TRAIN_STREAM, _MIX_STREAM = 1, 2, 3, 4, 5


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    alpha: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    smooth_l1_beta: float = 1.0
    g_lr: float = 2.5e-3
    d_lr: float = 2e-3
    g_betas: Tuple[float, float] = (0.9, 0.99)
    d_betas: Tuple[float, float] = (0.0, 0.99)
    # "cosine" anneals the generator learning rate to zero over total_steps
    lr_schedule: str = "constant"
    total_steps: int = 2000
    stage1_steps: int = 1500
    transition: str = "fixed-steps"
    transition_psnr: float = 25.0
    r1_gamma: float = 1.0
    r1_interval: int = 16
    sample_mode: str = "cache"
    cache_size: int = 1024
    real_pool_size: int = 256
    render_batch: int = 16
    probe_size: int = 32
    probe_every: int = 100
    log_every: int = 10
    checkpoint_every: int = 0
    prefetch: int = 0
    disc_channels: int = 32
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.transition not in TRANSITIONS:
            raise ValueError(f"transition must be one of {TRANSITIONS}")
        if self.sample_mode not in SAMPLE_MODES:
            raise ValueError(f"sample_mode must be one of {SAMPLE_MODES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        for name in ("batch_size", "total_steps", "render_batch", "probe_size", "r1_interval", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("stage1_steps", "cache_size", "real_pool_size", "probe_every", "checkpoint_every", "prefetch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sample_mode == "cache" and self.cache_size < 1:
            raise ValueError("cache mode needs cache_size >= 1")

    @property
    def stage2_enabled(self) -> bool:
        return self.stage1_steps < self.total_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_betas"] = list(self.g_betas)
        d["d_betas"] = list(self.d_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cfgutil.from_dict(cls, d)


@dataclass
class ImagePool:
    """Images with their cameras: HR ``(N, 3, H, W)``, LR ``(N, 3, h, w)``, ``c (N, 25)``."""

    hr: torch.Tensor
    lr: torch.Tensor
    c: torch.Tensor

    def __post_init__(self):
        if not (len(self.hr) == len(self.lr) == len(self.c)):
            raise ValueError("pool tensors disagree in length")

    def __len__(self) -> int:
        return len(self.hr)

    def take(self, idx: torch.Tensor) -> "ImagePool":
        return ImagePool(self.hr[idx], self.lr[idx], self.c[idx])

    @classmethod
    def from_bundle(cls, bundle: RenderBundle) -> "ImagePool":
        return cls(bundle.hr, bundle.lr, bundle.c)

    @classmethod
    def from_images(cls, hr: torch.Tensor, c: torch.Tensor, low_res: int) -> "ImagePool":
        lr = F.interpolate(hr, size=(low_res, low_res), mode="area")
        return cls(hr, lr, c)


@dataclass
class TrainState:
    step: int = 0
    stage: int = 1
    transition_step: Optional[int] = None
    transition_psnr: Optional[float] = None
    last_probe_psnr: Optional[float] = None
    sample_rng: Optional[torch.Tensor] = None
    mix_rng: Optional[torch.Tensor] = None

    def to_tree(self) -> dict:
        return {k: v for k, v in asdict(self).items()}

    @classmethod
    def from_tree(cls, tree: dict) -> "TrainState":
        return cls(**tree)


@dataclass
class Models:
    teacher: Teacher
    student: Student
    discriminator: Optional[DualDiscriminator]
    g_opt: torch.optim.Optimizer
    d_opt: Optional[torch.optim.Optimizer]
    perceptual: PerceptualLoss


@dataclass
class Batch:
    bundle: RenderBundle
    real: Optional[ImagePool] = None
    from_rendered: Optional[torch.Tensor] = None


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _generator(seed: int, stream: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1000 + stream)


def make_sample(teacher: Teacher, prior: PosePrior, generator: Optional[torch.Generator] = None,
                n: int = 1, render_batch: int = 64):
    """Draw ``z ~ N(0, I)`` and ``c ~ prior`` and render them with the frozen teacher.

    Returns ``(z, c, bundle)``. Rendering uses the deterministic evaluation mode
    so the target of a given ``(z, c)`` is unique.
    """
    z = sample_latents(n, teacher.config.z_dim, generator)
    c = sample_pose_batch(prior, n, generator)
    return z, c, render_bundles(teacher, z, c, render_batch)


def render_bundles(teacher: Teacher, z: torch.Tensor, c: torch.Tensor, render_batch: int = 64) -> RenderBundle:
    parts = [teacher_forward(teacher, z[i:i + render_batch], c[i:i + render_batch])
             for i in range(0, len(z), render_batch)]
    return RenderBundle(z=z, c=c, w=torch.cat([p.w for p in parts]),
                        features=torch.cat([p.features for p in parts]),
                        hr=torch.cat([p.hr for p in parts]),
                        alpha=torch.cat([p.alpha for p in parts]))


def mix_real_batch(real: ImagePool, rendered: ImagePool, alpha: float, generator: Optional[torch.Generator] = None,
                   batch_size: Optional[int] = None) -> Tuple[ImagePool, torch.Tensor]:
    """Discriminator "real" batch: each slot comes from ``rendered`` with probability ``alpha``.

    Slot i of a rendered pick is ``rendered[i]`` when the pool holds at least
    ``batch_size`` images, otherwise a uniformly drawn index; real picks are drawn
    uniformly from ``real``. Returns the batch and a boolean mask of rendered slots.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    n = batch_size or len(rendered)
    if alpha > 0 and len(rendered) == 0:
        raise ValueError("rendered pool is empty but alpha > 0")
    if alpha < 1 and len(real) == 0:
        raise ValueError("real pool is empty but alpha < 1")
    from_rendered = torch.rand(n, generator=generator) < alpha
    real_idx = torch.randint(max(len(real), 1), (n,), generator=generator)
    if len(rendered) >= n:
        rend_idx = torch.arange(n)
    else:
        rend_idx = torch.randint(max(len(rendered), 1), (n,), generator=generator)
    pools = []
    for pool, idx in ((rendered, rend_idx), (real, real_idx)):
        pools.append(pool.take(idx.clamp(max=max(len(pool) - 1, 0))) if len(pool) else None)
    rend, re = pools
    mask = from_rendered
    pick = lambda a, b: torch.where(mask.view(-1, *([1] * (a.ndim - 1))), a, b)  # noqa: E731
    if re is None:
        return rend, mask
    if rend is None:
        return re, mask
    return ImagePool(pick(rend.hr, re.hr), pick(rend.lr, re.lr), pick(rend.c, re.c)), mask


class TeacherSampler:
    """Yields training batches of teacher renders, from a cache or online."""

    def __init__(self, teacher: Teacher, prior: PosePrior, config: TrainConfig,
                 cache: Optional[RenderBundle] = None):
        self.teacher = teacher
        self.prior = prior
        self.config = config
        self.cache = cache
        self._queue: Optional[queue.Queue] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def next(self, generator: torch.Generator) -> RenderBundle:
        cfg = self.config
        if cfg.sample_mode == "cache":
            idx = torch.randint(len(self.cache.z), (cfg.batch_size,), generator=generator)
            return self.cache.select(idx)
        if cfg.prefetch > 0 and not cfg.deterministic:
            return self._prefetched()
        return make_sample(self.teacher, self.prior, generator, cfg.batch_size, cfg.render_batch)[2]

    def _prefetched(self) -> RenderBundle:
        if self._thread is None:
            self._queue = queue.Queue(maxsize=self.config.prefetch)
            worker_gen = _generator(self.config.seed, _TRAIN_STREAM + 100)

            def work():
                while not self._stop.is_set():
                    item = make_sample(self.teacher, self.prior, worker_gen, self.config.batch_size,
                                       self.config.render_batch)[2]
                    while not self._stop.is_set():
                        try:
                            self._queue.put(item, timeout=0.1)
                            break
                        except queue.Full:
                            continue

            self._thread = threading.Thread(target=work, daemon=True)
            self._thread.start()
        return self._queue.get()

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def build_models(teacher: Teacher, student: Student, config: TrainConfig) -> Models:
    disc = d_opt = None
    if config.stage2_enabled:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed + 17)
            disc = DualDiscriminator(student.config.low_res * student.config.sr_factor,
                                     channels=config.disc_channels, pose_center=student.pose_center,
                                     pose_scale=student.pose_scale)
        d_opt = torch.optim.Adam(disc.parameters(), lr=config.d_lr, betas=tuple(config.d_betas))
    g_opt = torch.optim.Adam(student.parameters(), lr=config.g_lr, betas=tuple(config.g_betas))
    return Models(teacher, student, disc, g_opt, d_opt, PerceptualLoss())


def _dump_nonfinite(report: LossReport, batch: Batch, step: int, seed: int, dump_dir: Optional[Path]) -> str:
    info = {"step": step, "seed": seed, "terms": {k: float(v.detach()) for k, v in report.terms.items()}}
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / f"nonfinite_step{step:07d}.ckpt"
        save_container(path, {"z": batch.bundle.z, "c": batch.bundle.c, "w": batch.bundle.w}, "diagnostic", info)
        info["dump"] = str(path)
    return json.dumps(info, sort_keys=True)


def train_step(state: TrainState, batch: Batch, models: Models, config: TrainConfig,
               dump_dir: Optional[Path] = None) -> LossReport:
    """One generator update and, in stage 2, one discriminator update.

    Stage 1 never evaluates the discriminator. Increments ``state.step``.
    """
    student, disc = models.student, models.discriminator
    stage = state.stage
    if stage == 2 and disc is None:
        raise RuntimeError("stage 2 needs a discriminator")
    bundle = batch.bundle
    student.train()

    out = student(bundle.w, bundle.c)
    terms = reconstruction_terms(out, bundle, config.weights, models.perceptual, config.smooth_l1_beta)
    if stage == 2 and config.weights.adversarial > 0:
        disc.requires_grad_(False)
        terms["adversarial"] = adversarial_g(disc, dual_discriminator_input(out.hr, out.lr), bundle.c)
        disc.requires_grad_(True)
    report = total_loss(terms, config.weights, stage)
    if not torch.isfinite(report.total):
        raise NonFiniteLossError("non-finite generator loss: "
                                 + _dump_nonfinite(report, batch, state.step, config.seed, dump_dir))
    models.g_opt.zero_grad(set_to_none=True)
    report.total.backward()
    models.g_opt.step()

    if stage == 2:
        real = batch.real
        fake = dual_discriminator_input(out.hr.detach(), out.lr.detach())
        real_img = dual_discriminator_input(real.hr, real.lr)
        lazy = config.r1_gamma > 0 and state.step % config.r1_interval == 0
        d_loss = adversarial_d(disc, real_img, fake, real.c, bundle.c,
                               r1_gamma=config.r1_gamma if lazy else 0.0, r1_scale=config.r1_interval)
        if not torch.isfinite(d_loss):
            raise NonFiniteLossError("non-finite discriminator loss: "
                                     + _dump_nonfinite(report, batch, state.step, config.seed, dump_dir))
        models.d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        models.d_opt.step()
        report.discriminator = d_loss.detach()
    state.step += 1
    return report


@torch.no_grad()
def probe_psnr(student: Student, probe: RenderBundle, batch: int = 64) -> float:
    """Mean per-image PSNR of the student's HR output against the teacher's, clamped to [0, 1]."""
    was_training = student.training
    student.eval()
    hr = torch.cat([student(probe.w[i:i + batch], probe.c[i:i + batch]).hr for i in range(0, len(probe.w), batch)])
    student.train(was_training)
    return mean_psnr(hr.clamp(0, 1), probe.hr.clamp(0, 1))


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    if not enabled:
        yield
        return
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

@dataclass
class DistillResult:
    generator: DistilledGenerator
    state: TrainState
    log_path: Path
    checkpoint_path: Path
    probe: RenderBundle
    history: List[dict]


class MetricsLog:
    """Line-delimited JSON records, keys sorted, no wall-clock fields."""

    def __init__(self, path: Path, keep_until_step: Optional[int] = None):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if keep_until_step is not None and path.exists():
            for line in path.read_text().splitlines():
                rec = json.loads(line)
                if rec.get("step", 0) <= keep_until_step:
                    kept.append(line)
        path.write_text("".join(line + "\n" for line in kept))
        self.records = [json.loads(line) for line in kept]

    def write(self, record: dict):
        self.records.append(record)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _teacher_pool(teacher: Teacher, prior: PosePrior, n: int, seed: int, stream: int, render_batch: int):
    return make_sample(teacher, prior, _generator(seed, stream), n, render_batch)[2]


def _load_or_render_cache(path: Path, teacher: Teacher, prior: PosePrior, config: TrainConfig,
                          probe: RenderBundle) -> RenderBundle:
    # the probe digest catches teacher changes the config does not describe
    digest = hashlib.sha256(probe.hr.detach().contiguous().numpy().tobytes()).hexdigest()[:16]
    key = {"seed": config.seed, "n": config.cache_size, "teacher": teacher.config.to_dict(), "probe": digest}
    if path.exists():
        kind, tree, meta = load_container(path)
        if kind == "teacher_cache" and meta.get("key") == json.loads(json.dumps(key)):
            return RenderBundle(**tree)
    bundle = _teacher_pool(teacher, prior, config.cache_size, config.seed, _CACHE_STREAM, config.render_batch)
    tree = {"z": bundle.z, "c": bundle.c, "w": bundle.w, "features": bundle.features, "hr": bundle.hr,
            "alpha": bundle.alpha}
    save_container(path, tree, "teacher_cache", {"key": key})
    return bundle


def _lr_at(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "cosine":
        return config.g_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, config.total_steps) / config.total_steps))
    return config.g_lr


def save_train_checkpoint(path: Path, models: Models, state: TrainState, config: TrainConfig) -> None:
    tree = {"student": dict(models.student.state_dict()),
            "student_config": models.student.config.to_dict(),
            "g_opt": models.g_opt.state_dict(),
            "state": state.to_tree(),
            "train_config": config.to_dict()}
    if models.discriminator is not None:
        tree["discriminator"] = dict(models.discriminator.state_dict())
        tree["d_opt"] = models.d_opt.state_dict()
    save_container(path, tree, "train_state", {"step": state.step})


def _load_train_checkpoint(path: Path, models: Models) -> TrainState:
    kind, tree, _ = load_container(path)
    if kind != "train_state":
        raise ValueError(f"{path} is not a training checkpoint")
    models.student.load_state_dict(tree["student"], strict=True)
    models.g_opt.load_state_dict(tree["g_opt"])
    if models.discriminator is not None:
        models.discriminator.load_state_dict(tree["discriminator"], strict=True)
        models.d_opt.load_state_dict(tree["d_opt"])
    return TrainState.from_tree(tree["state"])


def run_distillation(config: TrainConfig, teacher: Teacher, student_config: Optional[StudentConfig] = None,
                     out_dir="runs/distill", resume: Optional[str] = None,
                     real_pool: Optional[ImagePool] = None, prior: Optional[PosePrior] = None,
                     max_steps: Optional[int] = None) -> DistillResult:
    """Run the two-stage curriculum and write logs and checkpoints to ``out_dir``.

    Layout of ``out_dir``: ``metrics.jsonl``, ``checkpoints/step_XXXXXXX.ckpt``,
    ``student.ckpt`` (self-contained generator) and ``teacher_cache.ckpt`` in
    cache mode. ``max_steps`` stops early (the schedule still assumes
    ``total_steps``), which is how interrupted runs are simulated.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prior = prior or teacher.config.prior
    student_config = student_config or StudentConfig.for_teacher(teacher.config, seed=config.seed)
    if student_config.low_res != teacher.config.low_res or student_config.sr_factor != teacher.config.sr_factor:
        raise ValueError("student and teacher resolutions differ")
    if not teacher.frozen:
        raise ValueError("the teacher must be frozen")

    with deterministic_mode(config.deterministic):
        student = build_student(student_config, teacher, prior)
        models = build_models(teacher, student, config)
        probe = _teacher_pool(teacher, prior, config.probe_size, config.seed, _PROBE_STREAM, config.render_batch)
        cache = None
        if config.sample_mode == "cache":
            cache = _load_or_render_cache(out_dir / "teacher_cache.ckpt", teacher, prior, config, probe)
        if config.stage2_enabled and real_pool is None and config.alpha < 1.0:
            # no external dataset: an independent set of teacher renders plays the real data
            real_pool = ImagePool.from_bundle(
                _teacher_pool(teacher, prior, max(config.real_pool_size, 1), config.seed, _REAL_STREAM,
                              config.render_batch))
        real_pool = real_pool or ImagePool(torch.empty(0), torch.empty(0), torch.empty(0))

        sample_gen = _generator(config.seed, _TRAIN_STREAM)
        mix_gen = _generator(config.seed, _MIX_STREAM)
        if resume is not None:
            state = _load_train_checkpoint(Path(resume), models)
            sample_gen.set_state(state.sample_rng)
            mix_gen.set_state(state.mix_rng)
            metrics = MetricsLog(out_dir / "metrics.jsonl", keep_until_step=state.step)
        else:
            state = TrainState()
            metrics = MetricsLog(out_dir / "metrics.jsonl", keep_until_step=-1)
            metrics.write({"event": "start", "step": 0, "config": config.to_dict(),
                           "student": student_config.to_dict()})

        sampler = TeacherSampler(teacher, prior, config, cache)
        stop_at = config.total_steps if max_steps is None else min(max_steps, config.total_steps)
        ckpt_dir = out_dir / "checkpoints"
        try:
            while state.step < stop_at:
                if state.stage == 1 and config.stage2_enabled and _should_transition(state, config, models, probe):
                    psnr = probe_psnr(student, probe)
                    state.stage = 2
                    state.transition_step = state.step
                    state.transition_psnr = psnr
                    metrics.write({"event": "transition", "step": state.step, "probe_psnr": psnr})
                for group in models.g_opt.param_groups:
                    group["lr"] = _lr_at(config, state.step)
                bundle = sampler.next(sample_gen)
                batch = Batch(bundle)
                if state.stage == 2:
                    batch.real, batch.from_rendered = mix_real_batch(real_pool, ImagePool.from_bundle(bundle),
                                                                     config.alpha, mix_gen, config.batch_size)
                report = train_step(state, batch, models, config, dump_dir=out_dir / "diagnostics")
                if state.step % config.log_every == 0 or state.step == stop_at:
                    rec = {"event": "train", "step": state.step, "stage": state.stage}
                    rec.update(report.scalars())
                    metrics.write(rec)
                if config.probe_every and state.step % config.probe_every == 0:
                    state.last_probe_psnr = probe_psnr(student, probe)
                    metrics.write({"event": "probe", "step": state.step, "stage": state.stage,
                                   "probe_psnr": state.last_probe_psnr})
                if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    state.sample_rng = sample_gen.get_state()
                    state.mix_rng = mix_gen.get_state()
                    name = f"step_{state.step:07d}.ckpt"
                    save_train_checkpoint(ckpt_dir / name, models, state, config)
                    metrics.write({"event": "checkpoint", "step": state.step, "file": f"checkpoints/{name}"})
        finally:
            sampler.close()

        final_psnr = probe_psnr(student, probe)
        state.sample_rng = sample_gen.get_state()
        state.mix_rng = mix_gen.get_state()
        if state.step >= config.total_steps:
            metrics.write({"event": "final", "step": state.step, "stage": state.stage, "probe_psnr": final_psnr})
        generator = DistilledGenerator(teacher, student.eval())
        ckpt_path = out_dir / "student.ckpt"
        save_checkpoint(generator, ckpt_path, {"step": state.step, "stage": state.stage})
        save_train_checkpoint(ckpt_dir / "last.ckpt", models, state, config)
    return DistillResult(generator, state, metrics.path, ckpt_path, probe, metrics.records)


def _should_transition(state: TrainState, config: TrainConfig, models: Models, probe: RenderBundle) -> bool:
    if state.step >= config.stage1_steps:
        return True
    if config.transition == "metric-threshold" and config.probe_every and state.step > 0 \
            and state.step % config.probe_every == 0 and state.last_probe_psnr is not None:
        return state.last_probe_psnr >= config.transition_psnr
    return False
