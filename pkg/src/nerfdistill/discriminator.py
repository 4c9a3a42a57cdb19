"""Pose-conditioned dual discriminator."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .camera import POSE_DIM
from .layers import lrelu


class DualDiscriminator(nn.Module):
    """Scores 6-channel (HR, upsampled LR) images given the camera ``c``.

    A strided conv trunk produces an image embedding ``h``; the logit is
    ``out(h) + <h, embed(c)> / sqrt(dim)`` (projection conditioning).
    """

    def __init__(self, resolution: int = 64, in_channels: int = 6, channels: int = 32,
                 channel_max: int = 128, embed_dim: int = 128, pose_center=None, pose_scale=None):
        super().__init__()
        log_res = int(math.log2(resolution))
        if 2 ** log_res != resolution or resolution < 8:
            raise ValueError("discriminator resolution must be a power of two >= 8")
        self.resolution = resolution
        self.from_img = nn.Conv2d(in_channels, channels, 1)
        blocks = []
        ch = channels
        for _ in range(log_res - 2):
            nxt = min(ch * 2, channel_max)
            blocks.append(nn.Conv2d(ch, nxt, 3, stride=2, padding=1))
            ch = nxt
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(ch * 16, embed_dim)
        self.out = nn.Linear(embed_dim, 1)
        self.embed_c = nn.Linear(POSE_DIM, embed_dim)
        self.embed_dim = embed_dim
        self.register_buffer("pose_center", torch.zeros(POSE_DIM) if pose_center is None else pose_center.clone())
        self.register_buffer("pose_scale", torch.ones(POSE_DIM) if pose_scale is None else pose_scale.clone())

    def forward(self, img: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if img.shape[-1] != self.resolution or img.shape[-2] != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} inputs")
        x = lrelu(self.from_img(img))
        for block in self.blocks:
            x = lrelu(block(x))
        h = lrelu(self.fc(x.flatten(1)))
        cn = (c - self.pose_center.to(c.dtype)) / self.pose_scale.to(c.dtype)
        proj = (h * self.embed_c(cn)).sum(dim=1, keepdim=True) / math.sqrt(self.embed_dim)
        return (self.out(h) + proj).squeeze(1)
