"""Pose-conditioned convolutional student G2D.

The student never sees ``z``: it consumes the teacher's style code ``w`` and
the camera ``c``, maps them to its own style code ``w'`` and predicts the
teacher's 32-channel low-resolution render with modulated convolutions, then
super-resolves with a head copied from the teacher.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from . import config as cfgutil
from .camera import POSE_DIM, PosePrior, sample_pose_batch
from .layers import MLP, SuperResolution, SynthesisNetwork, count_macs, count_parameters
from .teacher import Teacher, TeacherConfig
from .triplane import FEATURE_CHANNELS


@dataclass
class StudentConfig:
    w_dim: int = 16             # teacher style-code width
    style_dim: int = 128        # w'
    mapping_layers: int = 4
    low_res: int = 32
    channel_base: int = 2048
    channel_max: int = 128
    variant: str = "plain"
    sr_factor: int = 2
    sr_hidden: int = 16
    # per-entry pose scale floor; entries that do not vary over the prior are left unscaled
    pose_scale_floor: float = 1e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        return cfgutil.from_dict(cls, d)

    @classmethod
    def for_teacher(cls, teacher_config: TeacherConfig, **overrides) -> "StudentConfig":
        base = dict(w_dim=teacher_config.w_dim, low_res=teacher_config.low_res,
                    sr_factor=teacher_config.sr_factor, sr_hidden=teacher_config.sr_hidden)
        base.update(overrides)
        return cls(**base)


@dataclass
class StudentOutput:
    features: torch.Tensor  # (B, 32, h, w)
    hr: torch.Tensor        # (B, 3, H, W)
    style: Optional[torch.Tensor] = None

    @property
    def lr(self) -> torch.Tensor:
        return self.features[:, :3]


def pose_statistics(prior: PosePrior, n: int = 4096, seed: int = 0, floor: float = 1e-3):
    """Canonical pose vector and per-entry RMS deviation from it over the prior."""
    canonical = torch.as_tensor(prior.canonical().flat, dtype=torch.float32)
    c = sample_pose_batch(prior, n, torch.Generator().manual_seed(seed))
    rms = (c - canonical).pow(2).mean(dim=0).sqrt()
    return canonical, torch.where(rms > floor, rms, torch.ones_like(rms))


class Student(nn.Module):
    def __init__(self, config: StudentConfig, prior: Optional[PosePrior] = None):
        super().__init__()
        self.config = config
        prior = prior or PosePrior()
        canonical, scale = pose_statistics(prior, floor=config.pose_scale_floor)
        self.register_buffer("pose_center", canonical)
        self.register_buffer("pose_scale", scale)
        self.mapping = MLP(config.w_dim + POSE_DIM, config.style_dim, config.style_dim, config.mapping_layers)
        self.synthesis = SynthesisNetwork(config.style_dim, config.low_res, FEATURE_CHANNELS,
                                          config.channel_base, config.channel_max, config.variant)
        self.superres = SuperResolution(FEATURE_CHANNELS, config.sr_factor, config.sr_hidden)

    def normalize_pose(self, c: torch.Tensor) -> torch.Tensor:
        return (c - self.pose_center.to(c.dtype)) / self.pose_scale.to(c.dtype)

    def map_style(self, w: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if w.shape[-1] != self.config.w_dim:
            raise ValueError(f"expected teacher style codes of width {self.config.w_dim}, got {w.shape[-1]}")
        return self.mapping(torch.cat([w, self.normalize_pose(c)], dim=1))

    def predict_features(self, style: torch.Tensor) -> torch.Tensor:
        return self.synthesis(style)

    def super_resolve(self, features: torch.Tensor) -> torch.Tensor:
        return self.superres(features)

    def forward(self, w: torch.Tensor, c: torch.Tensor) -> StudentOutput:
        style = self.map_style(w, c)
        features = self.predict_features(style)
        return StudentOutput(features=features, hr=self.super_resolve(features), style=style)

    def init_from_teacher(self, teacher: Teacher) -> "Student":
        """Copy the teacher's super-resolution weights; they stay trainable."""
        src = teacher.superres.state_dict()
        dst = self.superres.state_dict()
        if src.keys() != dst.keys() or any(src[k].shape != dst[k].shape for k in src):
            raise ValueError("teacher and student super-resolution heads do not match")
        if teacher.superres.factor != self.superres.factor:
            raise ValueError("teacher and student super-resolution factors differ")
        with torch.no_grad():
            for k, v in src.items():
                dst[k].copy_(v)
        for p in self.superres.parameters():
            p.requires_grad_(True)
        return self

    def op_audit(self) -> dict:
        """Parameter and per-image multiply-accumulate counts."""
        w = torch.zeros(1, self.config.w_dim)
        c = self.pose_center[None].clone()
        return {"parameters": count_parameters(self), "macs_per_image": count_macs(self, w, c)}


def build_student(config: StudentConfig, teacher: Optional[Teacher] = None,
                  prior: Optional[PosePrior] = None) -> Student:
    if teacher is not None:
        prior = prior or teacher.config.prior
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        student = Student(config, prior)
    if teacher is not None:
        student.init_from_teacher(teacher)
    return student


def student_forward(student: Student, w: torch.Tensor, c: torch.Tensor) -> StudentOutput:
    return student(w, c)


class DistilledGenerator(nn.Module):
    """Teacher mapping + student renderer: ``(z, c) -> StudentOutput``.

    Used for inference and metrics so a student checkpoint is self-contained.
    """

    def __init__(self, teacher: Teacher, student: Student):
        super().__init__()
        self.teacher = teacher
        self.student = student

    @property
    def config(self) -> StudentConfig:
        return self.student.config

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> StudentOutput:
        with torch.no_grad():
            w = self.teacher.map_latent(z, c)
        return self.student(w, c)

    def checkpoint_tree(self) -> dict:
        return {"teacher": self.teacher.checkpoint_tree(),
                "config": self.student.config.to_dict(),
                "prior": self.teacher.config.prior.to_dict(),
                "state": dict(self.student.state_dict())}

    @classmethod
    def from_checkpoint_tree(cls, tree: dict) -> "DistilledGenerator":
        teacher = Teacher.from_checkpoint_tree(tree["teacher"])
        student = Student(StudentConfig.from_dict(tree["config"]), PosePrior.from_dict(tree["prior"]))
        student.load_state_dict(tree["state"], strict=True)
        return cls(teacher, student.eval())
