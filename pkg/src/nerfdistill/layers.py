"""Style-modulated convolutional building blocks shared by teacher and student."""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

ACT_GAIN = math.sqrt(2.0)
VARIANTS = ("plain", "filtered")


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * ACT_GAIN


def _binomial_kernel(dtype, device) -> torch.Tensor:
    k = torch.tensor([1.0, 3.0, 3.0, 1.0], dtype=dtype, device=device)
    k = torch.outer(k, k)
    return k / k.sum()


def fir_upsample2(x: torch.Tensor) -> torch.Tensor:
    """Zero-insertion x2 upsampling followed by a 4x4 binomial low-pass."""
    C = x.shape[1]
    k = (_binomial_kernel(x.dtype, x.device) * 4).expand(C, 1, 4, 4)
    return F.conv_transpose2d(x, k, stride=2, padding=1, groups=C)


def fir_downsample2(x: torch.Tensor) -> torch.Tensor:
    C = x.shape[1]
    k = _binomial_kernel(x.dtype, x.device).expand(C, 1, 4, 4)
    return F.conv2d(x, k, stride=2, padding=1, groups=C)


def filtered_lrelu(x: torch.Tensor) -> torch.Tensor:
    # nonlinearity evaluated at twice the sampling rate to limit aliasing
    return fir_downsample2(lrelu(fir_upsample2(x)))


def upsample2(x: torch.Tensor, variant: str) -> torch.Tensor:
    if variant == "filtered":
        return fir_upsample2(x)
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class MLP(nn.Module):
    """Stack of fully connected layers with leaky-ReLU between them."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = lrelu(layer(x))
        return x


class ModulatedConv2d(nn.Module):
    """Convolution whose input channels are scaled by an affine function of ``w``.

    With ``demodulate`` the per-sample effective weights are rescaled to unit
    L2 norm per output channel. Implemented by scaling activations instead of
    weights, which is numerically the same and keeps a single shared kernel.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, w_dim: int,
                 demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.affine = nn.Linear(w_dim, in_channels)
        nn.init.normal_(self.affine.weight, std=1.0 / math.sqrt(w_dim))
        nn.init.ones_(self.affine.bias)
        self.demodulate = demodulate
        self.padding = kernel_size // 2
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        styles = self.affine(w)
        weight = self.weight * self.weight_gain
        x = F.conv2d(x * styles[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            wsq = weight.pow(2).sum(dim=(2, 3))  # (out, in)
            d = torch.rsqrt(styles.pow(2) @ wsq.T + 1e-8)
            x = x * d[:, :, None, None]
        return x + self.bias[None, :, None, None]


class SynthesisBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, w_dim: int, img_channels: int,
                 variant: str, first: bool = False):
        super().__init__()
        self.first = first
        self.variant = variant
        if not first:
            self.conv0 = ModulatedConv2d(in_channels, out_channels, 3, w_dim)
        self.conv1 = ModulatedConv2d(out_channels if not first else in_channels, out_channels, 3, w_dim)
        self.to_img = ModulatedConv2d(out_channels, img_channels, 1, w_dim, demodulate=False)

    def _act(self, x):
        return filtered_lrelu(x) if self.variant == "filtered" else lrelu(x)

    def forward(self, x, img, w):
        if not self.first:
            x = upsample2(x, self.variant)
            x = self._act(self.conv0(x, w))
        x = self._act(self.conv1(x, w))
        y = self.to_img(x, w)
        img = y if img is None else upsample2(img, self.variant) + y
        return x, img


class SynthesisNetwork(nn.Module):
    """Learned constant -> modulated conv blocks at 4, 8, ..., ``resolution``.

    Outputs are accumulated through per-resolution 1x1 modulated projections
    (skip architecture). ``variant="filtered"`` swaps bilinear upsampling and
    plain leaky ReLU for FIR-filtered resampling and a filtered nonlinearity.
    """

    def __init__(self, w_dim: int, resolution: int, out_channels: int, channel_base: int = 1024,
                 channel_max: int = 128, variant: str = "plain"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown synthesis variant {variant!r}")
        log_res = int(math.log2(resolution))
        if 2 ** log_res != resolution or resolution < 4:
            raise ValueError("resolution must be a power of two >= 4")
        self.resolution = resolution
        self.out_channels = out_channels
        self.variant = variant
        resolutions = [2 ** i for i in range(2, log_res + 1)]
        channels = {r: min(channel_base // r, channel_max) for r in resolutions}
        self.const = nn.Parameter(torch.randn(channels[4], 4, 4))
        blocks = []
        prev = channels[4]
        for r in resolutions:
            blocks.append(SynthesisBlock(prev, channels[r], w_dim, out_channels, variant, first=(r == 4)))
            prev = channels[r]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        x = self.const.unsqueeze(0).expand(len(w), -1, -1, -1)
        img = None
        for block in self.blocks:
            x, img = block(x, img, w)
        return img


class SuperResolution(nn.Module):
    """Upsample the feature image and add a convolutional RGB residual.

    The output RGB is ``upsample(features[:, :3]) + residual(upsample(features))``.
    With ``zero_init_residual`` the head starts as pure upsampling.
    """

    def __init__(self, in_channels: int = 32, factor: int = 2, hidden: int = 16,
                 zero_init_residual: bool = False, residual_gain: float = 1.0):
        super().__init__()
        if factor < 1:
            raise ValueError("super-resolution factor must be >= 1")
        self.in_channels = in_channels
        self.factor = factor
        self.conv0 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 3, 1)
        if zero_init_residual:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        elif residual_gain != 1.0:
            with torch.no_grad():
                self.out.weight.mul_(residual_gain)
                self.out.bias.mul_(residual_gain)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} feature channels, got {features.shape[1]}")
        if self.factor > 1:
            features = F.interpolate(features, scale_factor=self.factor, mode="bilinear", align_corners=False)
        h = lrelu(self.conv0(features))
        h = lrelu(self.conv1(h))
        return features[:, :3] + self.out(h)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def count_macs(fn, *args, **kwargs) -> int:
    """Multiply-accumulates of the matmul/conv ops executed by ``fn(*args)``."""
    from torch.utils.flop_counter import FlopCounterMode

    with FlopCounterMode(display=False) as counter:
        fn(*args, **kwargs)
    return counter.get_total_flops() // 2


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def maybe_generator(seed: Optional[int]) -> Optional[torch.Generator]:
    return None if seed is None else torch.Generator().manual_seed(seed)
