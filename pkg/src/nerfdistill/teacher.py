"""Frozen tri-plane NeRF-GAN teacher.

The teacher maps ``(z, c)`` to a style code ``w``, synthesizes tri-planes from
``w``, volume-renders a 32-channel low-resolution feature image and
super-resolves it. Two variants share that pipeline:

* ``kind="random"``: randomly initialized style-modulated tri-plane synthesis
  and MLP decoder (architecture stand-in, no photorealism);
* ``kind="procedural"``: the latent parameterizes colored Gaussian blobs whose
  geometry is known analytically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from . import config as cfgutil
from .camera import POSE_DIM, PosePrior, sample_pose_batch
from .checkpoint import load_container, save_container
from .layers import MLP, SuperResolution, SynthesisNetwork, set_requires_grad
from .rendering import RenderConfig, RenderOutput, render_view
from .triplane import FEATURE_CHANNELS, BlobDecoder, BlobScene, ProceduralBlobs, TriPlaneDecoder, TriPlanes

POSE_MODES = ("true", "canonical", "zero")


@dataclass
class TeacherConfig:
    kind: str = "procedural"
    z_dim: int = 8
    w_dim: int = 128
    mapping_layers: int = 4
    # procedural: size of the pose branch appended to w (w_dim = z_dim + pose_embed_dim)
    pose_embed_dim: int = 8
    pose_conditioning: str = "true"
    plane_resolution: int = 64
    plane_channels: int = 32
    synthesis_channel_base: int = 1024
    synthesis_channel_max: int = 64
    synthesis_variant: str = "plain"
    decoder_hidden: int = 64
    num_blobs: int = 4
    half_extent: float = 1.0
    low_res: int = 32
    sr_factor: int = 2
    sr_hidden: int = 16
    sr_zero_init: bool = False
    sr_residual_gain: float = 0.1
    render: RenderConfig = field(default_factory=RenderConfig)
    prior: PosePrior = field(default_factory=PosePrior)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("random", "procedural"):
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.pose_conditioning not in POSE_MODES:
            raise ValueError(f"pose_conditioning must be one of {POSE_MODES}")
        if self.kind == "procedural":
            if self.z_dim < 6:
                raise ValueError("procedural teacher needs z_dim >= 6")
            self.w_dim = self.z_dim + self.pose_embed_dim
            self.plane_channels = max(self.plane_channels, 4 * self.num_blobs)

    @property
    def high_res(self) -> int:
        return self.low_res * self.sr_factor

    def to_dict(self) -> dict:
        return {f: cfgutil.to_dict(getattr(self, f)) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        return cfgutil.from_dict(cls, d)


@dataclass
class RenderBundle:
    """Teacher outputs for a batch of ``(z, c)``; images are NCHW."""

    z: torch.Tensor
    c: torch.Tensor
    w: torch.Tensor
    features: torch.Tensor  # (B, 32, h, w)
    hr: torch.Tensor        # (B, 3, H, W)
    alpha: Optional[torch.Tensor] = None
    scene: Optional[BlobScene] = None

    @property
    def lr(self) -> torch.Tensor:
        return self.features[:, :3]

    def select(self, idx) -> "RenderBundle":
        return RenderBundle(self.z[idx], self.c[idx], self.w[idx], self.features[idx], self.hr[idx],
                            None if self.alpha is None else self.alpha[idx])


def _normalize_2nd_moment(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class LatentPoseMapping(nn.Module):
    """M3D: normalized z and an embedding of c, concatenated, through an MLP."""

    def __init__(self, z_dim: int, w_dim: int, num_layers: int = 4):
        super().__init__()
        self.embed_c = nn.Linear(POSE_DIM, w_dim)
        self.net = MLP(z_dim + w_dim, w_dim, w_dim, num_layers)

    def forward(self, z: torch.Tensor, c: torch.Tensor, pose_on: bool = True) -> torch.Tensor:
        x = _normalize_2nd_moment(z)
        y = _normalize_2nd_moment(self.embed_c(c))
        if not pose_on:
            y = torch.zeros_like(y)
        return self.net(torch.cat([x, y], dim=1))


class ProceduralMapping(nn.Module):
    """w = [z, tanh(P (c - c_canonical))]: the scene code passes through unchanged."""

    def __init__(self, z_dim: int, pose_embed_dim: int, canonical: torch.Tensor, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed + 1)
        self.register_buffer("proj", torch.randn(pose_embed_dim, POSE_DIM, generator=g))
        self.register_buffer("canonical", canonical.clone())
        self.z_dim = z_dim

    def forward(self, z: torch.Tensor, c: torch.Tensor, pose_on: bool = True) -> torch.Tensor:
        pose = torch.tanh((c - self.canonical.to(c.dtype)) @ self.proj.to(c.dtype).T)
        if not pose_on:
            pose = torch.zeros_like(pose)
        return torch.cat([z.to(c.dtype), pose], dim=1)


class Teacher(nn.Module):
    """G3D: mapping -> tri-plane synthesis -> volume rendering -> super-resolution."""

    def __init__(self, config: TeacherConfig):
        super().__init__()
        self.config = config
        canonical = torch.as_tensor(config.prior.canonical().flat, dtype=torch.float32)
        self.register_buffer("canonical_pose", canonical)
        if config.kind == "random":
            self.mapping = LatentPoseMapping(config.z_dim, config.w_dim, config.mapping_layers)
            self.synthesis = SynthesisNetwork(config.w_dim, config.plane_resolution, 3 * config.plane_channels,
                                              config.synthesis_channel_base, config.synthesis_channel_max,
                                              config.synthesis_variant)
            self.decoder = TriPlaneDecoder(config.plane_channels, config.decoder_hidden, FEATURE_CHANNELS)
            self.blobs = None
        else:
            self.mapping = ProceduralMapping(config.z_dim, config.pose_embed_dim, canonical, config.seed)
            self.blobs = ProceduralBlobs(config.z_dim, config.num_blobs, config.plane_resolution,
                                         config.plane_channels, config.half_extent, seed=config.seed)
            self.synthesis = None
            self.decoder = BlobDecoder(config.num_blobs, FEATURE_CHANNELS)
        self.superres = SuperResolution(FEATURE_CHANNELS, config.sr_factor, config.sr_hidden,
                                        zero_init_residual=config.sr_zero_init,
                                        residual_gain=config.sr_residual_gain)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def freeze(self) -> "Teacher":
        set_requires_grad(self, False)
        return self.eval()

    def map_latent(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        mode = self.config.pose_conditioning
        if mode == "canonical":
            c = self.canonical_pose.to(c.dtype).expand_as(c)
        return self.mapping(z, c, pose_on=(mode != "zero"))

    def synthesize_triplanes(self, w: torch.Tensor) -> TriPlanes:
        return self._synthesize(w)[0]

    def _synthesize(self, w: torch.Tensor):
        if self.blobs is not None:
            planes, scene = self.blobs(w[:, :self.config.z_dim])
            return planes, scene
        N, C = self.config.plane_resolution, self.config.plane_channels
        planes = self.synthesis(w).reshape(len(w), 3, C, N, N)
        return TriPlanes(planes, self.config.half_extent), None

    def render(self, planes: TriPlanes, c: torch.Tensor, generator: Optional[torch.Generator] = None,
               resolution: Optional[int] = None) -> RenderOutput:
        return render_view(planes, self.decoder, c, resolution or self.config.low_res, self.config.render,
                           generator)

    def super_resolve(self, features: torch.Tensor) -> torch.Tensor:
        return self.superres(features)

    def forward(self, z: torch.Tensor, c: torch.Tensor, generator: Optional[torch.Generator] = None) -> RenderBundle:
        w = self.map_latent(z, c)
        planes, scene = self._synthesize(w)
        out = self.render(planes, c, generator)
        hr = self.super_resolve(out.features)
        return RenderBundle(z=z, c=c, w=w, features=out.features, hr=hr, alpha=out.alpha, scene=scene)

    def checkpoint_tree(self) -> dict:
        return {"config": self.config.to_dict(), "state": dict(self.state_dict())}

    @classmethod
    def from_checkpoint_tree(cls, tree: dict) -> "Teacher":
        model = cls(TeacherConfig.from_dict(tree["config"]))
        model.load_state_dict(tree["state"], strict=True)
        return model.freeze()


def build_teacher(config: TeacherConfig) -> Teacher:
    """Seeded construction; the result is frozen."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = Teacher(config)
    return model.freeze()


def teacher_forward(teacher: Teacher, z: torch.Tensor, c: torch.Tensor,
                    generator: Optional[torch.Generator] = None) -> RenderBundle:
    """Inference through the frozen teacher; no autograd graph is recorded."""
    with torch.no_grad():
        return teacher(z, c, generator)


def sample_teacher(teacher: Teacher, n: int, generator: Optional[torch.Generator] = None,
                   prior: Optional[PosePrior] = None, render_generator: Optional[torch.Generator] = None,
                   batch_size: int = 64) -> RenderBundle:
    """Draw ``n`` latents and poses and render them in batches."""
    prior = prior or teacher.config.prior
    z = torch.randn(n, teacher.config.z_dim, generator=generator)
    c = sample_pose_batch(prior, n, generator)
    parts = [teacher_forward(teacher, z[i:i + batch_size], c[i:i + batch_size], render_generator)
             for i in range(0, n, batch_size)]
    return RenderBundle(z=z, c=c, w=torch.cat([p.w for p in parts]),
                        features=torch.cat([p.features for p in parts]),
                        hr=torch.cat([p.hr for p in parts]),
                        alpha=torch.cat([p.alpha for p in parts]))


def save_checkpoint(model: nn.Module, path, metadata: Optional[dict] = None) -> None:
    kind = "student" if hasattr(model, "student") else "teacher"
    meta = {"seed": getattr(getattr(model, "config", None), "seed", None)}
    meta.update(metadata or {})
    save_container(path, model.checkpoint_tree(), kind, meta)


def load_checkpoint(path) -> nn.Module:
    kind, tree, _ = load_container(path)
    if kind == "teacher":
        return Teacher.from_checkpoint_tree(tree)
    if kind == "student":
        from .student import DistilledGenerator

        return DistilledGenerator.from_checkpoint_tree(tree)
    from .checkpoint import CheckpointError

    raise CheckpointError(f"{path}: checkpoint of kind {kind!r} does not hold a model")
