"""Dataset manifests: ``dataset.json`` listing ``[relative/path.png, [25 floats]]`` entries."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from .camera import POSE_DIM, CameraPose, PoseValidationError, pose_angles

log = logging.getLogger(__name__)

MANIFEST_NAME = "dataset.json"


class DatasetValidationError(ValueError):
    """Raised with one line per problem found in the manifest."""

    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("dataset validation failed:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class DatasetManifest:
    root: Path
    entries: List[Tuple[str, List[float]]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def poses(self) -> torch.Tensor:
        if not self.entries:
            return torch.empty(0, POSE_DIM, dtype=torch.float64)
        return torch.tensor([pose for _, pose in self.entries], dtype=torch.float64)

    def summary(self) -> dict:
        out = {"root": str(self.root), "num_images": len(self.entries)}
        if self.entries:
            angles = torch.rad2deg(pose_angles(self.poses()))
            out["yaw_deg"] = [float(angles[:, 0].min()), float(angles[:, 0].max())]
            out["pitch_deg"] = [float(angles[:, 1].min()), float(angles[:, 1].max())]
            radius = self.poses()[:, [3, 7, 11]].norm(dim=-1)
            out["radius"] = [float(radius.min()), float(radius.max())]
        return out

    def load_images(self, resolution: Optional[int] = None) -> torch.Tensor:
        """All images as a float ``(N, 3, H, W)`` tensor in [0, 1], optionally resized."""
        from PIL import Image

        imgs = []
        for rel, _ in self.entries:
            with Image.open(self.root / rel) as im:
                im = im.convert("RGB")
                if resolution is not None and im.size != (resolution, resolution):
                    im = im.resize((resolution, resolution), Image.BILINEAR)
                imgs.append(torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1))
        if not imgs:
            return torch.empty(0, 3, resolution or 0, resolution or 0)
        return torch.stack(imgs)


def write_manifest(root, entries) -> Path:
    """Write ``dataset.json`` as ``{"labels": [[path, pose], ...]}``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    labels = [[str(rel), [float(v) for v in pose]] for rel, pose in entries]
    path.write_text(json.dumps({"labels": labels}, indent=1))
    return path


def ingest_dataset(root) -> DatasetManifest:
    """Read and validate ``root/dataset.json``.

    Accepts either a bare entry list or ``{"labels": [...]}``. Every image must
    exist and decode, and every pose must be 25 finite floats forming a valid
    camera; all problems are collected before raising.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DatasetValidationError([f"{path}: manifest not found"])
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetValidationError([f"{path}: invalid JSON ({exc})"]) from exc
    if isinstance(data, dict):
        data = data.get("labels")
    if not isinstance(data, list):
        raise DatasetValidationError([f"{path}: expected a list of [path, pose] entries"])

    problems, entries = [], []
    for i, entry in enumerate(data):
        where = f"entry {i}"
        if not isinstance(entry, (list, tuple)) or len(entry) != 2 or not isinstance(entry[0], str):
            problems.append(f"{where}: expected [\"relative/path.png\", [25 floats]]")
            continue
        rel, pose = entry
        where = f"entry {i} ({rel})"
        ok = True
        if not isinstance(pose, (list, tuple)) or len(pose) != POSE_DIM:
            n = len(pose) if isinstance(pose, (list, tuple)) else "non-list"
            problems.append(f"{where}: pose has {n} values, expected {POSE_DIM}")
            ok = False
        elif not all(isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v) for v in pose):
            problems.append(f"{where}: pose contains non-numeric or non-finite values")
            ok = False
        else:
            try:
                CameraPose.from_flat(np.asarray(pose, dtype=np.float64))
            except PoseValidationError as exc:
                problems.append(f"{where}: invalid camera ({exc})")
                ok = False
        img_path = root / rel
        if not img_path.is_file():
            problems.append(f"{where}: image file missing")
            ok = False
        else:
            try:
                with Image.open(img_path) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                problems.append(f"{where}: image not decodable ({exc.__class__.__name__})")
                ok = False
        if ok:
            entries.append((rel, [float(v) for v in pose]))
    if problems:
        raise DatasetValidationError(problems)
    manifest = DatasetManifest(root, entries)
    if not entries:
        manifest.warnings.append(f"{path}: manifest is empty")
        log.warning("%s: manifest is empty", path)
    return manifest
