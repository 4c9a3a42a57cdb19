"""Distribution and correspondence metrics: FID, KID, PSNR."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import torch

PSNR_CAP = 99.0


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    metric: str
    value: float
    num_samples: int
    config_hash: str
    higher_is_better: bool

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise MetricError(f"{self.metric}: non-finite value {self.value}")
        if self.num_samples < 1:
            raise MetricError(f"{self.metric}: sample count must be recorded")

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(config) -> str:
    """Short stable digest of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _as_float64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError("features must be (n, d)")
    return x


def fid(features_a, features_b, residual_tol: float = 1e-3) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    Raises MetricError if the matrix square root of the covariance product is
    inaccurate (relative residual above ``residual_tol``).
    """
    a = _as_float64(features_a)
    b = _as_float64(features_b)
    if a.shape[1] != b.shape[1]:
        raise MetricError("feature dimensions differ")
    if len(a) < 2 or len(b) < 2:
        raise MetricError("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    prod = cov_a @ cov_b
    root, _ = scipy.linalg.sqrtm(prod, disp=False)
    scale = max(np.linalg.norm(prod), 1e-30)
    residual = np.linalg.norm(root @ root - prod) / scale
    if not np.isfinite(residual) or residual > residual_tol:
        raise MetricError(f"covariance square root residual {residual:.3g} exceeds {residual_tol:g}")
    root = root.real
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(root))
    # tiny negative values come from round-off; larger ones are real errors
    if value < -1e-6 * max(1.0, np.trace(cov_a) + np.trace(cov_b)):
        raise MetricError(f"negative Frechet distance {value}")
    return max(value, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(features_a, features_b, num_subsets: int = 100, subset_size: int = 1000, seed: int = 0) -> float:
    """Unbiased squared MMD with a cubic polynomial kernel, averaged over random subsets."""
    a = _as_float64(features_a)
    b = _as_float64(features_b)
    if a.shape[1] != b.shape[1]:
        raise MetricError("feature dimensions differ")
    m = subset_size
    if m > len(a) or m > len(b):
        raise MetricError(f"subset size {m} exceeds sample count ({len(a)}, {len(b)})")
    if m < 2:
        raise MetricError("subset size must be >= 2")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(num_subsets):
        x = a[rng.choice(len(a), m, replace=False)]
        y = b[rng.choice(len(b), m, replace=False)]
        kxx = _poly_kernel(x, x)
        kyy = _poly_kernel(y, y)
        kxy = _poly_kernel(x, y)
        sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        total += sxx + syy - 2.0 * kxy.mean()
    return float(total / num_subsets)


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) in dB, capped at ``cap`` (also used when MSE is 0)."""
    if a.shape != b.shape:
        raise MetricError(f"psnr: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float((a.double() - b.double()).pow(2).mean())
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(data_range ** 2 / mse))


def psnr_per_image(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP) -> torch.Tensor:
    """Per-image PSNR for ``(B, ...)`` batches, each capped at ``cap``."""
    if a.shape != b.shape:
        raise MetricError(f"psnr: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = (a.double() - b.double()).pow(2).flatten(1).mean(1)
    out = 10.0 * torch.log10(1.0 / mse.clamp_min(1e-300))
    return out.clamp(max=cap)


def mean_psnr(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP) -> float:
    return float(psnr_per_image(a, b, cap).mean())
