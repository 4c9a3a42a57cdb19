"""Metric evaluation of a teacher or distilled generator against the teacher."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch

from ..camera import sample_latents, sample_pose_batch
from ..teacher import Teacher, teacher_forward
from .embed import FixedEmbedder, embed_images
from .metrics import MetricReport, config_hash, fid, kid, mean_psnr
from .pose import fit_pose_regressor, pose_accuracy

METRICS = ("fid", "kid", "psnr", "pose")


@dataclass
class EvalSpec:
    num_samples: int = 256
    regressor_samples: int = 1024
    regressor_epochs: int = 30
    kid_subsets: int = 50
    kid_subset_size: int = 100
    batch: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def image_fn(model) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    """``(z, c) -> HR images in [0, 1]`` for a teacher or a distilled generator."""
    if isinstance(model, Teacher):
        return lambda z, c: teacher_forward(model, z, c).hr.clamp(0, 1)

    def run(z, c):
        with torch.no_grad():
            return model(z, c).hr.clamp(0, 1)
    return run


def reference_teacher(model) -> Teacher:
    return model if isinstance(model, Teacher) else model.teacher


def _render(fn, z, c, batch):
    return torch.cat([fn(z[i:i + batch], c[i:i + batch]) for i in range(0, len(z), batch)])


def _draw(teacher: Teacher, n: int, seed: int):
    g = torch.Generator().manual_seed(seed)
    return sample_latents(n, teacher.config.z_dim, g), sample_pose_batch(teacher.config.prior, n, g)


def evaluate(model, metric: str, spec: EvalSpec = EvalSpec(), seed: int = 0,
             reference: Optional[Teacher] = None) -> MetricReport:
    """Compute one metric for ``model`` against the (embedded) teacher.

    * ``psnr``: mean per-image PSNR of model vs teacher HR images for the same (z, c).
    * ``fid`` / ``kid``: model samples vs independent teacher samples, embedded
      with the fixed random embedder.
    * ``pose``: (yaw, pitch) MSE of a regressor fitted on teacher renders.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    teacher = reference or reference_teacher(model)
    fn = image_fn(model)
    ref_fn = image_fn(teacher)
    n = spec.num_samples
    chash = config_hash({"metric": metric, "spec": spec.to_dict(), "seed": seed,
                         "teacher": teacher.config.to_dict(),
                         "model": getattr(model, "config", None) and model.config.to_dict()})
    z, c = _draw(teacher, n, seed)
    if metric == "psnr":
        value = mean_psnr(_render(fn, z, c, spec.batch), _render(ref_fn, z, c, spec.batch))
        return MetricReport("psnr", value, n, chash, True)
    if metric in ("fid", "kid"):
        embedder = FixedEmbedder()
        zr, cr = _draw(teacher, n, seed + 7919)
        feats = embed_images(_render(fn, z, c, spec.batch), embedder)
        ref = embed_images(_render(ref_fn, zr, cr, spec.batch), embedder)
        if metric == "fid":
            return MetricReport("fid", fid(feats, ref), n, chash, False)
        value = kid(feats, ref, spec.kid_subsets, min(spec.kid_subset_size, n), seed)
        return MetricReport("kid", value, n, chash, False)
    zt, ct = _draw(teacher, spec.regressor_samples, seed + 104729)
    regressor = fit_pose_regressor(_render(ref_fn, zt, ct, spec.batch), ct, epochs=spec.regressor_epochs,
                                   seed=seed, lookat=teacher.config.prior.lookat)
    return MetricReport("pose", pose_accuracy(fn, z, c, regressor, spec.batch), n, chash, False)
