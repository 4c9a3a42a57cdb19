"""Fixed random convolutional embedder used in place of a pretrained classifier for FID/KID."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class FixedEmbedder(nn.Module):
    """Seeded, frozen conv net mapping RGB images to ``dim``-d features.

    Images are resized to ``input_size``, mapped to [-1, 1] and pooled through
    four strided stages; the output concatenates spatial means and standard
    deviations of the last stage, projected to ``dim``.
    """

    def __init__(self, dim: int = 64, input_size: int = 64, width: int = 32, seed: int = 2024):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = [3, width, width * 2, width * 2, width * 4]
        self.convs = nn.ModuleList()
        for a, b in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(a, b, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (a * 9)) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
        self.proj = nn.Linear(2 * chans[-1], dim, bias=False)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=g) / (2 * chans[-1]) ** 0.5)
        self.input_size = input_size
        self.dim = dim
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images.float().clamp(0, 1)
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False,
                              antialias=True)
        h = x * 2 - 1
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        stats = torch.cat([h.mean(dim=(2, 3)), h.std(dim=(2, 3))], dim=1)
        return self.proj(stats)


def embed_images(images: torch.Tensor, embedder: FixedEmbedder = None, batch: int = 256) -> torch.Tensor:
    embedder = embedder or FixedEmbedder()
    return torch.cat([embedder(images[i:i + batch]) for i in range(0, len(images), batch)])
