"""Camera parameters, pose priors and pinhole ray generation.

Conventions used throughout the package:

* extrinsics are camera-to-world 4x4 matrices with OpenCV axes
  (+x right, +y down, +z forward);
* intrinsics are 3x3 matrices normalized by the image width, so the principal
  point of a centered camera is (0.5, 0.5);
* a pose is flattened to 25 floats: row-major extrinsic (16) followed by the
  row-major intrinsic (9).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

POSE_DIM = 25
ORTHONORMAL_TOL = 1e-5
WORLD_UP = (0.0, 1.0, 0.0)


class PoseValidationError(ValueError):
    pass


class PriorConfigError(ValueError):
    pass


def _check_extrinsic(extrinsic: np.ndarray) -> None:
    if extrinsic.shape != (4, 4):
        raise PoseValidationError(f"extrinsic must be 4x4, got {extrinsic.shape}")
    if not np.all(np.isfinite(extrinsic)):
        raise PoseValidationError("extrinsic has non-finite entries")
    if not np.array_equal(extrinsic[3], [0.0, 0.0, 0.0, 1.0]):
        raise PoseValidationError(f"extrinsic bottom row must be (0,0,0,1), got {extrinsic[3]}")
    rot = extrinsic[:3, :3]
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > ORTHONORMAL_TOL:
        raise PoseValidationError(f"rotation block is not orthonormal (max error {err:.3g})")
    if np.linalg.det(rot) <= 0:
        raise PoseValidationError("rotation block has negative determinant")


def _check_intrinsic(intrinsic: np.ndarray) -> None:
    if intrinsic.shape != (3, 3):
        raise PoseValidationError(f"intrinsic must be 3x3, got {intrinsic.shape}")
    if not np.all(np.isfinite(intrinsic)):
        raise PoseValidationError("intrinsic has non-finite entries")


def flatten_pose(extrinsic, intrinsic) -> np.ndarray:
    """Pack (extrinsic, intrinsic) into the 25-float conditioning vector."""
    extrinsic = np.asarray(extrinsic, dtype=np.float64)
    intrinsic = np.asarray(intrinsic, dtype=np.float64)
    _check_extrinsic(extrinsic)
    _check_intrinsic(intrinsic)
    return np.concatenate([extrinsic.reshape(16), intrinsic.reshape(9)])


def unflatten_pose(flat) -> Tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (POSE_DIM,):
        raise PoseValidationError(f"flat pose must have {POSE_DIM} entries, got shape {flat.shape}")
    return flat[:16].reshape(4, 4).copy(), flat[16:].reshape(3, 3).copy()


@dataclass(frozen=True, eq=False)
class CameraPose:
    """A validated camera: camera-to-world extrinsic and width-normalized intrinsic."""

    extrinsic: np.ndarray
    intrinsic: np.ndarray

    def __post_init__(self):
        ext = np.array(self.extrinsic, dtype=np.float64)
        intr = np.array(self.intrinsic, dtype=np.float64)
        _check_extrinsic(ext)
        _check_intrinsic(intr)
        object.__setattr__(self, "extrinsic", ext)
        object.__setattr__(self, "intrinsic", intr)

    @property
    def flat(self) -> np.ndarray:
        return flatten_pose(self.extrinsic, self.intrinsic)

    @classmethod
    def from_flat(cls, flat) -> "CameraPose":
        return cls(*unflatten_pose(flat))

    @property
    def center(self) -> np.ndarray:
        return self.extrinsic[:3, 3].copy()

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.flat, dtype=dtype)


def intrinsic_matrix(focal: float, cx: float = 0.5, cy: float = 0.5) -> np.ndarray:
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


def look_at(eye, target, up=WORLD_UP) -> np.ndarray:
    """Camera-to-world matrix for a camera at `eye` looking at `target`.

    The camera's +y axis (image down) is aligned with -up as far as possible.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise PoseValidationError("eye and target coincide")
    forward = forward / norm
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise PoseValidationError("viewing direction is parallel to the up vector")
    right = right / rnorm
    down = np.cross(forward, right)
    ext = np.eye(4)
    ext[:3, 0] = right
    ext[:3, 1] = down
    ext[:3, 2] = forward
    ext[:3, 3] = eye
    return ext


def orbit_pose(yaw: float, pitch: float, radius: float = 2.7, lookat=(0.0, 0.0, 0.0),
               focal: float = 2.0) -> CameraPose:
    """Camera on a sphere around `lookat`; yaw about world +y, pitch is elevation.

    yaw = pitch = 0 places the camera on the +z axis looking back at the target.
    """
    lookat = np.asarray(lookat, dtype=np.float64)
    offset = radius * np.array([
        math.sin(yaw) * math.cos(pitch),
        math.sin(pitch),
        math.cos(yaw) * math.cos(pitch),
    ])
    return CameraPose(look_at(lookat + offset, lookat), intrinsic_matrix(focal))


def pose_angles(c: torch.Tensor, lookat=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """Recover (yaw, pitch) of orbit cameras from flattened poses `(..., 25)`."""
    center = c[..., [3, 7, 11]] - torch.as_tensor(lookat, dtype=c.dtype, device=c.device)
    radius = center.norm(dim=-1)
    yaw = torch.atan2(center[..., 0], center[..., 2])
    pitch = torch.asin((center[..., 1] / radius).clamp(-1.0, 1.0))
    return torch.stack([yaw, pitch], dim=-1)


@dataclass
class PosePrior:
    """Distribution over training/evaluation cameras.

    ``kind="orbit"`` samples yaw and pitch uniformly in their ranges on a sphere of
    ``radius`` around ``lookat``. ``kind="empirical"`` draws uniformly from
    ``poses`` (an ``(M, 25)`` array, e.g. read from a dataset manifest).
    """

    kind: str = "orbit"
    radius: float = 2.7
    yaw_range: Tuple[float, float] = (math.radians(-40.0), math.radians(40.0))
    pitch_range: Tuple[float, float] = (math.radians(-30.0), math.radians(30.0))
    lookat: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    focal: float = 2.0
    poses: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("orbit", "empirical"):
            raise PriorConfigError(f"unknown prior kind {self.kind!r}")
        if self.kind == "empirical":
            if self.poses is None or len(self.poses) == 0:
                raise PriorConfigError("empirical prior needs a non-empty pose list")
            for flat in np.asarray(self.poses):
                CameraPose.from_flat(flat)
            return
        if not self.radius > 0:
            raise PriorConfigError("radius must be positive")
        for name, (lo, hi) in (("yaw", self.yaw_range), ("pitch", self.pitch_range)):
            if lo > hi:
                raise PriorConfigError(f"empty {name} range [{lo}, {hi}]")
        if max(abs(self.pitch_range[0]), abs(self.pitch_range[1])) >= math.pi / 2 - 1e-3:
            raise PriorConfigError("pitch must stay inside (-pi/2, pi/2)")
        if not self.focal > 0:
            raise PriorConfigError("focal must be positive")

    def canonical(self) -> CameraPose:
        if self.kind == "empirical":
            return CameraPose.from_flat(np.asarray(self.poses)[0])
        return orbit_pose(0.0, 0.0, self.radius, self.lookat, self.focal)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "radius": self.radius, "yaw_range": list(self.yaw_range),
               "pitch_range": list(self.pitch_range), "lookat": list(self.lookat), "focal": self.focal}
        if self.poses is not None:
            out["poses"] = np.asarray(self.poses).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PosePrior":
        d = dict(d)
        for key in ("yaw_range", "pitch_range", "lookat"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("poses") is not None:
            d["poses"] = np.asarray(d["poses"], dtype=np.float64)
        return cls(**d)


def _uniform(lo: float, hi: float, n: int, generator: Optional[torch.Generator]) -> torch.Tensor:
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    return lo + (hi - lo) * u


def sample_angles(prior: PosePrior, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Draw `(n, 2)` (yaw, pitch) pairs from an orbit prior."""
    if prior.kind != "orbit":
        raise PriorConfigError("angle sampling needs an orbit prior")
    yaw = _uniform(*prior.yaw_range, n, generator)
    pitch = _uniform(*prior.pitch_range, n, generator)
    return torch.stack([yaw, pitch], dim=-1)


def poses_from_angles(angles, prior: PosePrior, dtype=torch.float32) -> torch.Tensor:
    angles = torch.as_tensor(angles, dtype=torch.float64).reshape(-1, 2)
    flats = [orbit_pose(float(y), float(p), prior.radius, prior.lookat, prior.focal).flat
             for y, p in angles.tolist()]
    return torch.as_tensor(np.stack(flats), dtype=dtype)


def sample_pose_batch(prior: PosePrior, n: int, generator: Optional[torch.Generator] = None,
                      dtype=torch.float32) -> torch.Tensor:
    """Draw `n` flattened poses `(n, 25)` from the prior."""
    if prior.kind == "empirical":
        poses = torch.as_tensor(np.asarray(prior.poses), dtype=dtype)
        idx = torch.randint(len(poses), (n,), generator=generator)
        return poses[idx]
    return poses_from_angles(sample_angles(prior, n, generator), prior, dtype)


def sample_pose(prior: PosePrior, generator: Optional[torch.Generator] = None) -> CameraPose:
    return CameraPose.from_flat(sample_pose_batch(prior, 1, generator, torch.float64)[0].numpy())


def sample_latents(n: int, z_dim: int, generator: Optional[torch.Generator] = None,
                   dtype=torch.float32) -> torch.Tensor:
    return torch.randn(n, z_dim, generator=generator, dtype=dtype)


PoseLike = Union[CameraPose, torch.Tensor, np.ndarray, Sequence[float]]


def _as_flat_batch(pose: PoseLike, dtype) -> torch.Tensor:
    if isinstance(pose, CameraPose):
        pose = pose.flat
    c = torch.as_tensor(pose)
    if dtype is None:
        dtype = c.dtype if c.is_floating_point() else torch.float32
    c = c.to(dtype)
    if c.shape[-1] != POSE_DIM:
        raise PoseValidationError(f"pose vectors must have {POSE_DIM} entries")
    return c.reshape(-1, POSE_DIM)


def generate_rays(pose: PoseLike, resolution: int, dtype=None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pinhole rays through the pixel centers of a ``resolution`` x ``resolution`` image.

    Returns ``(origins, directions)``, each ``(B, resolution**2, 3)`` with pixels in
    row-major order. Directions are unit length and expressed in world space.
    """
    if resolution < 1:
        raise PoseValidationError("resolution must be >= 1")
    c = _as_flat_batch(pose, dtype)
    cam2world = c[:, :16].reshape(-1, 4, 4)
    intrinsic = c[:, 16:].reshape(-1, 3, 3)
    det = torch.linalg.det(intrinsic.double())
    if bool((det.abs() < 1e-12).any()):
        raise PoseValidationError("intrinsic matrix is singular")

    centers = (torch.arange(resolution, dtype=c.dtype, device=c.device) + 0.5) / resolution
    v, u = torch.meshgrid(centers, centers, indexing="ij")
    pix = torch.stack([u.reshape(-1), v.reshape(-1), torch.ones_like(u).reshape(-1)], dim=-1)
    cam_dirs = torch.linalg.solve(intrinsic, pix.T.unsqueeze(0).expand(len(c), 3, -1))
    dirs = torch.einsum("bij,bjn->bni", cam2world[:, :3, :3], cam_dirs)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = cam2world[:, None, :3, 3].expand_as(dirs)
    return origins, dirs
