"""Reconstruction and adversarial objectives for distillation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from torch import nn

from . import config as cfgutil


class LossShapeError(ValueError):
    pass


@dataclass
class LossWeights:
    lr_smooth_l1: float = 1.0
    lr_perceptual: float = 1.0
    # optional pixel term on the high-resolution image, off by default
    hr_smooth_l1: float = 0.0
    hr_perceptual: float = 1.0
    adversarial: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cfgutil.from_dict(cls, d)


@dataclass
class LossReport:
    """Per-term generator values (already weighted) and their sum.

    ``discriminator`` holds the discriminator loss of the same step, if any; it is
    not part of ``total``.
    """

    stage: int
    terms: Dict[str, torch.Tensor] = field(default_factory=dict)
    total: Optional[torch.Tensor] = None
    discriminator: Optional[torch.Tensor] = None

    def scalars(self) -> Dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        if self.total is not None:
            out["total"] = float(self.total.detach())
        if self.discriminator is not None:
            out["d_loss"] = float(self.discriminator)
        return out


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise LossShapeError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def smooth_l1(a: torch.Tensor, b: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean Huber-style penalty: 0.5 d^2 / beta below beta, |d| - 0.5 beta above."""
    _check_same_shape(a, b, "smooth_l1")
    if not beta > 0:
        raise ValueError("beta must be positive")
    d = (a - b).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()


class PerceptualLoss(nn.Module):
    """Feature-space distance under a frozen, seeded convolutional extractor.

    The extractor is a small random network (no pretrained weights are
    available offline). Inputs in [0, 1] are mapped to [-1, 1]; the loss is the
    mean over layers of the mean squared activation difference.
    """

    def __init__(self, channels=(16, 32, 64), seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        prev = 3
        for ch in channels:
            conv = nn.Conv2d(prev, ch, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (prev * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            prev = ch
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def activations(self, x: torch.Tensor):
        h = x * 2.0 - 1.0
        feats = []
        for i, conv in enumerate(self.convs):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        _check_same_shape(a, b, "perceptual_loss")
        if a.shape[1] != 3:
            raise LossShapeError("perceptual_loss expects RGB images")
        fa = self.activations(a)
        fb = self.activations(b)
        return torch.stack([(x - y).pow(2).mean() for x, y in zip(fa, fb)]).mean()


_default_perceptual: Optional[PerceptualLoss] = None


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, extractor: Optional[PerceptualLoss] = None) -> torch.Tensor:
    global _default_perceptual
    if extractor is None:
        if _default_perceptual is None:
            _default_perceptual = PerceptualLoss()
        extractor = _default_perceptual
    return extractor.to(a.dtype)(a, b)


def dual_discriminator_input(hr: torch.Tensor, lr: torch.Tensor) -> torch.Tensor:
    """``(B, 3, H, W)`` and ``(B, 3, h, w)`` -> ``(B, 6, H, W)``: HR next to the upsampled LR."""
    if hr.ndim != 4 or lr.ndim != 4 or hr.shape[:2] != lr.shape[:2]:
        raise LossShapeError("expected matching (B, C, H, W) images")
    H, W = hr.shape[-2:]
    h, w = lr.shape[-2:]
    if H * w != W * h:
        raise LossShapeError(f"aspect ratios differ: {H}x{W} vs {h}x{w}")
    if (h, w) != (H, W):
        lr = F.interpolate(lr, size=(H, W), mode="bilinear", align_corners=False)
    return torch.cat([hr, lr], dim=1)


def adversarial_g(discriminator: nn.Module, fake: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss softplus(-D(fake, c)), batch mean."""
    return F.softplus(-discriminator(fake, c)).mean()


def r1_penalty(discriminator: nn.Module, real: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Per-sample squared gradient norm of D's logit w.r.t. its real input, batch mean."""
    real = real.detach().requires_grad_(True)
    logits = discriminator(real, c)
    if not logits.requires_grad:
        return logits.new_zeros(())
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return logits.new_zeros(())
    return grad.pow(2).flatten(1).sum(1).mean()


def adversarial_d(discriminator: nn.Module, real: torch.Tensor, fake: torch.Tensor, c_real: torch.Tensor,
                  c_fake: Optional[torch.Tensor] = None, r1_gamma: float = 0.0,
                  r1_scale: float = 1.0) -> torch.Tensor:
    """softplus(D(fake)) + softplus(-D(real)) + (gamma / 2) * ||grad_real D||^2.

    ``r1_scale`` multiplies the penalty (lazy regularization applies it every
    k steps with scale k).
    """
    c_fake = c_real if c_fake is None else c_fake
    loss = F.softplus(discriminator(fake.detach(), c_fake)).mean() + F.softplus(-discriminator(real, c_real)).mean()
    if r1_gamma > 0:
        loss = loss + 0.5 * r1_gamma * r1_scale * r1_penalty(discriminator, real, c_real)
    return loss


def reconstruction_terms(student_out, bundle, weights: LossWeights, perceptual: Optional[PerceptualLoss] = None,
                         beta: float = 1.0) -> Dict[str, torch.Tensor]:
    """Weighted low- and high-resolution reconstruction terms.

    Terms with weight zero are skipped entirely.
    """
    terms: Dict[str, torch.Tensor] = {}
    if weights.lr_smooth_l1 > 0:
        terms["lr_smooth_l1"] = weights.lr_smooth_l1 * smooth_l1(student_out.features, bundle.features, beta)
    if weights.lr_perceptual > 0:
        terms["lr_perceptual"] = weights.lr_perceptual * perceptual_loss(student_out.lr, bundle.lr, perceptual)
    if weights.hr_smooth_l1 > 0:
        terms["hr_smooth_l1"] = weights.hr_smooth_l1 * smooth_l1(student_out.hr, bundle.hr, beta)
    if weights.hr_perceptual > 0:
        terms["hr_perceptual"] = weights.hr_perceptual * perceptual_loss(student_out.hr, bundle.hr, perceptual)
    return terms


def total_loss(terms: Dict[str, torch.Tensor], weights: LossWeights, stage: int) -> LossReport:
    """Sum the reconstruction terms and, in stage 2, the weighted adversarial term.

    ``terms`` holds weighted reconstruction terms plus the raw ``"adversarial"``
    generator loss if it was computed. In stage 1 the adversarial term is dropped
    whatever its weight.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    report = LossReport(stage=stage)
    for name, value in terms.items():
        if name == "adversarial":
            if stage == 2 and weights.adversarial > 0:
                report.terms[name] = weights.adversarial * value
        else:
            report.terms[name] = value
    if report.terms:
        report.total = torch.stack(list(report.terms.values())).sum()
    else:
        report.total = torch.zeros(())
    return report
