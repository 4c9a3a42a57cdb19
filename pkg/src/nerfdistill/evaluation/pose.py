"""Pose accuracy: a small CNN regresses (yaw, pitch) from generated images."""
from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from ..camera import pose_angles


class UntrainedRegressorError(ValueError):
    pass


class PoseRegressor(nn.Module):
    """Conv net from RGB images (resized to ``input_size``) to (yaw, pitch) in radians."""

    def __init__(self, input_size: int = 64, width: int = 16, lookat=(0.0, 0.0, 0.0)):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, 4 * width]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        side = input_size // 16
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(chans[-1] * side * side, 128), nn.LeakyReLU(0.2),
                                  nn.Linear(128, 2))
        self.input_size = input_size
        self.lookat = tuple(lookat)
        self.register_buffer("target_mean", torch.zeros(2))
        self.register_buffer("target_std", torch.ones(2))
        self.fitted = False
        self.holdout_mse: Optional[float] = None
        self.pose_variance: Optional[float] = None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images.float().clamp(0, 1)
        if x.shape[-1] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False,
                              antialias=True)
        out = self.head(self.features(x * 2 - 1))
        return out * self.target_std + self.target_mean

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
        was = self.training
        self.eval()
        out = torch.cat([self(images[i:i + batch]) for i in range(0, len(images), batch)])
        self.train(was)
        return out


def angle_variance(angles: torch.Tensor) -> float:
    """Mean over (yaw, pitch) of the per-angle variance, the MSE of always predicting the mean."""
    return float(angles.double().var(dim=0, unbiased=False).mean())


def fit_pose_regressor(images: torch.Tensor, c: torch.Tensor, holdout: float = 0.2, epochs: int = 30,
                       batch_size: int = 64, lr: float = 1e-3, noise: float = 0.02, seed: int = 0,
                       shuffle_labels: bool = False, lookat=(0.0, 0.0, 0.0)) -> PoseRegressor:
    """Fit a regressor on (teacher image, pose) pairs and record its held-out MSE.

    ``noise`` adds Gaussian pixel noise during training so small rendering
    differences do not dominate the prediction. ``shuffle_labels`` permutes
    the training targets (a leakage control).
    """
    if len(images) != len(c) or len(images) < 10:
        raise ValueError("need at least 10 aligned (image, pose) pairs")
    g = torch.Generator().manual_seed(seed)
    angles = pose_angles(c.double(), lookat).float()
    perm = torch.randperm(len(images), generator=g)
    n_hold = max(1, int(round(holdout * len(images))))
    hold, train = perm[:n_hold], perm[n_hold:]
    train_y = angles[train]
    if shuffle_labels:
        train_y = train_y[torch.randperm(len(train_y), generator=g)]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PoseRegressor(input_size=min(64, images.shape[-1]), lookat=lookat)
    model.target_mean.copy_(train_y.mean(0))
    model.target_std.copy_(train_y.std(0).clamp_min(1e-6))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps_per_epoch = math.ceil(len(train) / batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * steps_per_epoch)
    train_x = images[train]
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(train), generator=g)
        for i in range(0, len(train), batch_size):
            idx = order[i:i + batch_size]
            x = train_x[idx]
            if noise > 0:
                x = x + noise * torch.randn(x.shape, generator=g)
            pred = model(x)
            loss = ((pred - train_y[idx]) / model.target_std).pow(2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
    model.eval()
    pred = model.predict(images[hold])
    model.holdout_mse = float((pred.double() - angles[hold].double()).pow(2).mean())
    model.pose_variance = angle_variance(angles[hold])
    model.fitted = True
    return model


def train_pose_regressor(teacher, n_samples: int, seed: int = 0, prior=None, render_batch: int = 64,
                         **kwargs) -> PoseRegressor:
    """Render ``n_samples`` random (z, c) pairs with the frozen teacher and fit a regressor on them."""
    from ..teacher import sample_teacher

    prior = prior or teacher.config.prior
    bundle = sample_teacher(teacher, n_samples, torch.Generator().manual_seed(seed), prior,
                            batch_size=render_batch)
    return fit_pose_regressor(bundle.hr, bundle.c, seed=seed, lookat=prior.lookat, **kwargs)


def pose_accuracy(generator: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], z: torch.Tensor,
                  c: torch.Tensor, regressor: PoseRegressor, batch: int = 64) -> float:
    """MSE between the queried (yaw, pitch) and the angles regressed from ``generator(z, c)`` images."""
    if not getattr(regressor, "fitted", False):
        raise UntrainedRegressorError("pose regressor has not been trained")
    target = pose_angles(c.double(), regressor.lookat)
    preds = []
    with torch.no_grad():
        for i in range(0, len(z), batch):
            preds.append(regressor.predict(generator(z[i:i + batch], c[i:i + batch])))
    return float((torch.cat(preds).double() - target).pow(2).mean())
