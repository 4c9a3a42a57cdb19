"""Tri-plane feature fields and point-wise decoding.

Planes are stored channels-first as ``(B, 3, C, N, N)`` in the order XY, XZ,
YZ. For a plane spanned by world axes (a, b), the normalized coordinate a
selects the column and b the row, with ``align_corners`` semantics: -1 and +1
hit the centers of the first and last texels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

FEATURE_CHANNELS = 32
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class TriPlanes:
    planes: torch.Tensor  # (B, 3, C, N, N)
    half_extent: float = 1.0

    def __post_init__(self):
        if self.planes.ndim != 5 or self.planes.shape[1] != 3:
            raise ValueError(f"planes must be (B, 3, C, N, N), got {tuple(self.planes.shape)}")
        if self.planes.shape[-1] != self.planes.shape[-2]:
            raise ValueError("planes must be square")
        if not self.half_extent > 0:
            raise ValueError("half_extent must be positive")

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]

    @property
    def channels(self) -> int:
        return self.planes.shape[2]


def project_points(x: torch.Tensor, half_extent: float = 1.0) -> torch.Tensor:
    """Normalized 2D coordinates of ``x (B, M, 3)`` on each plane -> ``(B, 3, M, 2)``."""
    coords = x / half_extent
    return torch.stack([coords[..., list(axes)] for axes in PLANE_AXES], dim=1)


def query_triplane(triplanes: TriPlanes, x: torch.Tensor) -> torch.Tensor:
    """Sum of bilinear lookups on the three planes.

    Args:
        triplanes: planes of shape ``(B, 3, C, N, N)``.
        x: world-space points ``(B, M, 3)``. Points outside the scene box are
            clamped to the plane border.

    Returns:
        ``(B, M, C)`` aggregated features.
    """
    planes = triplanes.planes
    B, _, C, N, _ = planes.shape
    M = x.shape[1]
    grid = project_points(x, triplanes.half_extent).reshape(B * 3, 1, M, 2)
    feats = F.grid_sample(planes.reshape(B * 3, C, N, N), grid.to(planes.dtype), mode="bilinear",
                          padding_mode="border", align_corners=True)
    return feats.reshape(B, 3, C, M).sum(dim=1).transpose(1, 2)


@dataclass
class FieldSample:
    density: torch.Tensor   # (..., ) >= 0
    features: torch.Tensor  # (..., F <= 32); first three channels are RGB


class TriPlaneDecoder(nn.Module):
    """Lightweight MLP from aggregated plane features to density and 32 radiance features."""

    def __init__(self, in_channels: int, hidden: int = 64, out_features: int = FEATURE_CHANNELS,
                 zero_init_output: bool = False):
        super().__init__()
        self.out_features = out_features
        self.hidden = nn.Linear(in_channels, hidden)
        self.out = nn.Linear(hidden, 1 + out_features)
        if zero_init_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, features: torch.Tensor) -> FieldSample:
        h = F.softplus(self.hidden(features))
        raw = self.out(h)
        return FieldSample(density=F.softplus(raw[..., 0]), features=torch.sigmoid(raw[..., 1:]))


def decode_field(features: torch.Tensor, decoder: nn.Module) -> FieldSample:
    return decoder(features)


# ---------------------------------------------------------------------------
# Procedural blob scenes
# ---------------------------------------------------------------------------

@dataclass
class BlobScene:
    """K isotropic Gaussian density blobs per batch item."""

    centers: torch.Tensor     # (B, K, 3) world units
    radii: torch.Tensor       # (B, K)
    amplitudes: torch.Tensor  # (B, K) peak density
    colors: torch.Tensor      # (B, K, 3) in (0, 1)

    @property
    def num_blobs(self) -> int:
        return self.centers.shape[1]

    def density(self, x: torch.Tensor) -> torch.Tensor:
        """Analytic density at points ``x (B, M, 3)``."""
        d2 = (x[:, :, None, :] - self.centers[:, None]).pow(2).sum(-1)
        return (self.amplitudes[:, None] * torch.exp(-0.5 * d2 / self.radii[:, None] ** 2)).sum(-1)


class ProceduralBlobs(nn.Module):
    """Deterministic map from a latent code to a blob scene and its tri-plane encoding.

    Each blob has a fixed template (center, radius, density) around which the latent
    moves, rescales and recolors it. The template layout is asymmetric so that the
    camera pose can be read off a rendered image.

    Encoding: channel k < K stores one third of blob k's log-density on each
    plane (the squared distance splits additively over axis pairs), channels
    K + 3k .. K + 3k + 2 store one third of its color. ``BlobDecoder`` turns the
    summed features back into density and color.
    """

    def __init__(self, z_dim: int = 8, num_blobs: int = 4, plane_resolution: int = 64,
                 plane_channels: Optional[int] = None, half_extent: float = 1.0,
                 offset_scale: float = 0.06, optical_depth: float = 8.0, seed: int = 0):
        super().__init__()
        if z_dim < 6:
            raise ValueError("procedural scenes need z_dim >= 6")
        min_channels = 4 * num_blobs
        plane_channels = plane_channels or min_channels
        if plane_channels < min_channels:
            raise ValueError(f"{num_blobs} blobs need at least {min_channels} plane channels")
        self.z_dim = z_dim
        self.num_blobs = num_blobs
        self.plane_resolution = plane_resolution
        self.plane_channels = plane_channels
        self.half_extent = half_extent
        self.offset_scale = offset_scale

        g = torch.Generator().manual_seed(seed)
        centers = torch.zeros(num_blobs, 3)
        radii = torch.full((num_blobs,), 0.3)
        if num_blobs > 1:
            # satellites on the camera-facing hemisphere of the central body
            dirs = torch.randn(num_blobs - 1, 3, generator=g)
            dirs[:, 2] = dirs[:, 2].abs() + 0.5
            dirs = dirs / dirs.norm(dim=-1, keepdim=True)
            centers[1:] = 0.32 * dirs
            radii[1:] = 0.09 + 0.05 * torch.rand(num_blobs - 1, generator=g)
        if num_blobs == 1:
            radii[0] = 0.15
        # peak density chosen so the optical depth through each blob center is fixed
        amplitudes = optical_depth / (radii * math.sqrt(2 * math.pi))
        self.register_buffer("template_centers", centers)
        self.register_buffer("template_radii", radii)
        self.register_buffer("amplitudes", amplitudes)
        scale = 1.0 / math.sqrt(z_dim)
        self.register_buffer("center_proj", torch.randn(num_blobs, 3, z_dim, generator=g) * scale)
        self.register_buffer("radius_proj", torch.randn(num_blobs, z_dim, generator=g) * scale)
        self.register_buffer("color_proj", torch.randn(num_blobs, 3, z_dim, generator=g) * scale * 1.5)
        self.register_buffer("color_base", torch.randn(num_blobs, 3, generator=g) * 0.8)

    def scene(self, z: torch.Tensor) -> BlobScene:
        z = z.to(self.center_proj.dtype)
        offsets = self.offset_scale * torch.tanh(torch.einsum("kdz,bz->bkd", self.center_proj, z))
        centers = self.template_centers + offsets
        radii = self.template_radii * torch.exp(0.2 * torch.tanh(z @ self.radius_proj.T))
        colors = torch.sigmoid(self.color_base + torch.einsum("kdz,bz->bkd", self.color_proj, z))
        amplitudes = self.amplitudes.expand(len(z), -1)
        return BlobScene(centers, radii, amplitudes, colors)

    def encode(self, scene: BlobScene) -> TriPlanes:
        B, K = scene.centers.shape[:2]
        N, C = self.plane_resolution, self.plane_channels
        dtype = scene.centers.dtype
        axis = torch.linspace(-1.0, 1.0, N, dtype=dtype, device=scene.centers.device) * self.half_extent
        inv = 1.0 / (4.0 * scene.radii ** 2)  # (B, K)
        log_amp = torch.log(scene.amplitudes) / 3.0
        planes = torch.zeros(B, 3, C, N, N, dtype=dtype, device=scene.centers.device)
        for p, (a, b) in enumerate(PLANE_AXES):
            da = (axis[None, None, :] - scene.centers[:, :, a, None]) ** 2  # (B, K, N) along columns
            db = (axis[None, None, :] - scene.centers[:, :, b, None]) ** 2  # (B, K, N) along rows
            logd = -(db[:, :, :, None] + da[:, :, None, :]) * inv[:, :, None, None]
            planes[:, p, :K] = logd + log_amp[:, :, None, None]
            planes[:, p, K:4 * K] = (scene.colors.reshape(B, 3 * K) / 3.0)[:, :, None, None]
        return TriPlanes(planes, self.half_extent)

    def forward(self, z: torch.Tensor):
        scene = self.scene(z)
        return self.encode(scene), scene


def procedural_triplanes(z: torch.Tensor, blobs: Optional[ProceduralBlobs] = None):
    """Tri-planes plus the analytic blob description for latent codes ``z (B, d_z)``."""
    if blobs is None:
        blobs = ProceduralBlobs(z_dim=z.shape[-1])
    return blobs(z)


class BlobDecoder(nn.Module):
    """Closed-form decoder for ``ProceduralBlobs`` planes.

    density = sum_k exp(f_k); RGB is the density-weighted mix of blob colors;
    channels 3..3+K hold the per-blob responsibilities, the rest are zero.
    Only the 3 + K nonzero channels are returned; the renderer pads the
    composited image to ``out_features``.
    """

    def __init__(self, num_blobs: int, out_features: int = FEATURE_CHANNELS):
        super().__init__()
        if 3 + num_blobs > out_features:
            raise ValueError("too many blobs for the feature width")
        self.num_blobs = num_blobs
        self.out_features = out_features

    def forward(self, features: torch.Tensor) -> FieldSample:
        K = self.num_blobs
        logd = features[..., :K]
        colors = features[..., K:4 * K].unflatten(-1, (K, 3)).clamp(0.0, 1.0)
        # log-densities are bounded above by the blob amplitudes, so exp cannot overflow;
        # normalizing by hand is much cheaper than softmax over a short last axis
        dens = torch.exp(logd)
        density = dens.sum(-1)
        resp = dens / density.clamp_min(torch.finfo(dens.dtype).tiny)[..., None]
        rgb = (resp[..., None] * colors).sum(-2)
        return FieldSample(density=density, features=torch.cat([rgb, resp], dim=-1))
