"""Two-pass (coarse + importance) volumetric rendering of tri-plane fields."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

from .camera import PoseLike, generate_rays
from .triplane import TriPlanes, query_triplane


class RenderValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    near: float = 1.7
    far: float = 3.7
    n_coarse: int = 48
    n_fine: int = 48
    # rays per chunk; None evaluates all rays at once
    chunk: Optional[int] = None

    def __post_init__(self):
        if not self.near < self.far:
            raise RenderValidationError(f"near ({self.near}) must be < far ({self.far})")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise RenderValidationError("need n_coarse >= 1 and n_fine >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RaySamples:
    depths: torch.Tensor     # (B, R, S)
    deltas: torch.Tensor     # (B, R, S)
    positions: torch.Tensor  # (B, R, S, 3)


@dataclass
class RenderOutput:
    features: torch.Tensor  # (B, 32, H, W); channels 0..2 are the low-res RGB
    weights: torch.Tensor   # (B, H*W, S)
    alpha: torch.Tensor     # (B, H, W) accumulated opacity
    depths: torch.Tensor    # (B, H*W, S) sample depths used for compositing

    @property
    def rgb(self) -> torch.Tensor:
        return self.features[:, :3]


def _deltas(depths: torch.Tensor, far: float) -> torch.Tensor:
    # last interval runs to the far plane
    tail = far - depths[..., -1:]
    return torch.cat([depths[..., 1:] - depths[..., :-1], tail], dim=-1)


def stratified_samples(origins: torch.Tensor, directions: torch.Tensor, near: float, far: float,
                       n_coarse: int, generator: Optional[torch.Generator] = None) -> RaySamples:
    """One sample per uniform bin of ``[near, far]``.

    With ``generator=None`` every sample sits at its bin midpoint; otherwise it
    is jittered uniformly inside its bin.
    """
    if not near < far:
        raise RenderValidationError(f"near ({near}) must be < far ({far})")
    if n_coarse < 1:
        raise RenderValidationError("n_coarse must be >= 1")
    B, R, _ = origins.shape
    dtype, device = origins.dtype, origins.device
    width = (far - near) / n_coarse
    lower = near + width * torch.arange(n_coarse, dtype=dtype, device=device)
    if generator is None:
        offsets = torch.full((B, R, n_coarse), 0.5, dtype=dtype, device=device)
    else:
        offsets = torch.rand(B, R, n_coarse, generator=generator, dtype=dtype).to(device)
    depths = lower + width * offsets
    positions = origins[..., None, :] + depths[..., None] * directions[..., None, :]
    return RaySamples(depths, _deltas(depths, far), positions)


def composite(densities: torch.Tensor, features: torch.Tensor, deltas: torch.Tensor):
    """Discrete emission-absorption quadrature along each ray.

    Args:
        densities: ``(..., S)`` nonnegative.
        features: ``(..., S, F)``.
        deltas: ``(..., S)`` interval lengths.

    Returns:
        ``(output (..., F), weights (..., S))`` with
        ``w_k = exp(-sum_{j<k} sigma_j delta_j) * (1 - exp(-sigma_k delta_k))``.
    """
    if bool((densities < 0).any()):
        raise RenderValidationError("densities must be nonnegative")
    tau = densities * deltas
    alpha = -torch.expm1(-tau)
    optical = torch.cumsum(tau, dim=-1)
    transmittance = torch.exp(-torch.cat([torch.zeros_like(optical[..., :1]), optical[..., :-1]], dim=-1))
    weights = transmittance * alpha
    return (weights[..., None] * features).sum(dim=-2), weights


def sample_pdf(bin_edges: torch.Tensor, weights: torch.Tensor, n_samples: int,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Inverse-CDF sampling of a piecewise-constant PDF.

    Args:
        bin_edges: ``(..., S + 1)`` increasing edges.
        weights: ``(..., S)`` nonnegative bin masses. Rows that sum to zero fall
            back to a uniform PDF.
        n_samples: samples per row.
        generator: random quantiles if given; otherwise the stratified
            deterministic quantiles ``(k + 1) / (n_samples + 1)``.

    Returns:
        ``(..., n_samples)`` sorted sample locations.
    """
    if bool((weights < 0).any()):
        raise RenderValidationError("pdf weights must be nonnegative")
    weights = weights.detach()
    total = weights.sum(dim=-1, keepdim=True)
    uniform = torch.full_like(weights, 1.0 / weights.shape[-1])
    pdf = torch.where(total > 0, weights / total.clamp_min(torch.finfo(weights.dtype).tiny), uniform)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)
    cdf[..., -1] = 1.0
    cdf = torch.cummax(cdf, dim=-1).values

    batch_shape = weights.shape[:-1]
    if generator is None:
        u = torch.arange(1, n_samples + 1, dtype=weights.dtype, device=weights.device) / (n_samples + 1)
        u = u.expand(*batch_shape, n_samples).contiguous()
    else:
        u = torch.rand(*batch_shape, n_samples, generator=generator, dtype=weights.dtype).to(weights.device)
        u, _ = torch.sort(u, dim=-1)

    # first bin whose upper cdf value is >= u; zero-mass bins are never selected
    idx = torch.searchsorted(cdf[..., 1:].contiguous(), u, right=False)
    idx = idx.clamp(max=weights.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, idx)
    cdf_hi = torch.gather(cdf, -1, idx + 1)
    edge_lo = torch.gather(bin_edges.expand(*batch_shape, -1), -1, idx)
    edge_hi = torch.gather(bin_edges.expand(*batch_shape, -1), -1, idx + 1)
    denom = cdf_hi - cdf_lo
    frac = torch.where(denom > 0, (u - cdf_lo) / denom.clamp_min(torch.finfo(denom.dtype).tiny),
                       torch.zeros_like(u))
    return edge_lo + frac.clamp(0.0, 1.0) * (edge_hi - edge_lo)


def hierarchical_resample(coarse_weights: torch.Tensor, near: float, far: float, n_fine: int,
                          generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Importance depths from the coarse weights over the stratification bins of [near, far]."""
    n_coarse = coarse_weights.shape[-1]
    edges = torch.linspace(near, far, n_coarse + 1, dtype=coarse_weights.dtype, device=coarse_weights.device)
    return sample_pdf(edges, coarse_weights, n_fine, generator)


def _evaluate(triplanes: TriPlanes, decoder: nn.Module, positions: torch.Tensor):
    B, R, S, _ = positions.shape
    feats = query_triplane(triplanes, positions.reshape(B, R * S, 3))
    sample = decoder(feats)
    return sample.density.reshape(B, R, S), sample.features.reshape(B, R, S, -1)


def render_rays(triplanes: TriPlanes, decoder: nn.Module, origins: torch.Tensor, directions: torch.Tensor,
                config: RenderConfig, generator: Optional[torch.Generator] = None):
    """Coarse pass, importance pass, composite over the sorted union of samples."""
    coarse = stratified_samples(origins, directions, config.near, config.far, config.n_coarse, generator)
    sigma_c, feat_c = _evaluate(triplanes, decoder, coarse.positions)
    if config.n_fine == 0:
        out, weights = composite(sigma_c, feat_c, coarse.deltas)
        return out, weights, coarse.depths

    _, weights_c = composite(sigma_c, feat_c, coarse.deltas)
    fine_depths = hierarchical_resample(weights_c, config.near, config.far, config.n_fine, generator)
    fine_pos = origins[..., None, :] + fine_depths[..., None] * directions[..., None, :]
    sigma_f, feat_f = _evaluate(triplanes, decoder, fine_pos)

    depths, order = torch.sort(torch.cat([coarse.depths, fine_depths], dim=-1), dim=-1)
    sigma = torch.gather(torch.cat([sigma_c, sigma_f], dim=-1), -1, order)
    feats = torch.cat([feat_c, feat_f], dim=-2)
    feats = torch.gather(feats, -2, order[..., None].expand(*order.shape, feats.shape[-1]))
    out, weights = composite(sigma, feats, _deltas(depths, config.far))
    return out, weights, depths


def render_view(triplanes: TriPlanes, decoder: nn.Module, pose: PoseLike, resolution: int,
                config: RenderConfig = RenderConfig(), generator: Optional[torch.Generator] = None) -> RenderOutput:
    """Render a ``resolution`` x ``resolution`` feature image per batch item.

    Evaluation mode (``generator=None``) is deterministic: midpoint coarse
    samples and fixed importance quantiles.
    """
    origins, directions = generate_rays(pose, resolution, dtype=triplanes.planes.dtype)
    origins = origins.to(triplanes.planes.device)
    directions = directions.to(triplanes.planes.device)
    B = triplanes.planes.shape[0]
    if origins.shape[0] != B:
        if origins.shape[0] != 1:
            raise RenderValidationError("pose batch does not match tri-plane batch")
        origins, directions = origins.expand(B, -1, -1), directions.expand(B, -1, -1)

    R = origins.shape[1]
    chunk = config.chunk or R
    outs, weights, depths = [], [], []
    for start in range(0, R, chunk):
        o, w, d = render_rays(triplanes, decoder, origins[:, start:start + chunk],
                              directions[:, start:start + chunk], config, generator)
        outs.append(o)
        weights.append(w)
        depths.append(d)
    out = torch.cat(outs, dim=1)
    width = getattr(decoder, "out_features", out.shape[-1])
    if out.shape[-1] < width:
        # decoders may skip channels that are identically zero
        out = torch.cat([out, out.new_zeros(*out.shape[:-1], width - out.shape[-1])], dim=-1)
    weights = torch.cat(weights, dim=1)
    # contiguous NCHW so reductions downstream do not depend on where the tensor came from
    features = out.transpose(1, 2).reshape(B, -1, resolution, resolution).contiguous()
    alpha = weights.sum(dim=-1).reshape(B, resolution, resolution)
    return RenderOutput(features=features, weights=weights, alpha=alpha, depths=torch.cat(depths, dim=1))
