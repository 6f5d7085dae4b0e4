"""Pseudo-label providers.

The student is supervised only by what a teacher produces for each
sample: a 3D box ``Y``, a 2D presence score ``D`` and a pedestrian mask
``S``.  Two providers implement the same interface:

* :class:`OracleTeacher` reads the simulator's ground truth.
* :class:`ExternalTeacher` reads labels precomputed by external detectors
  from a JSON label file::

      {"seg000012": {"box3d": {"center": [x, y, z], "size": [l, w, h], "yaw": r},
                     "confidence": 0.93,
                     "mask": "masks/seg000012.png"}, ...}

  ``box3d`` may be null when the detector found nothing; ``mask`` may be
  omitted (all background).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box3D
from .ingest import INPUT_SIZE, resize_nearest


@dataclass(frozen=True)
class SampleContext:
    sample_id: str
    t_center: float
    frame_index: int
    frame: dict  # manifest frame record
    root: Path | None = None


@dataclass(frozen=True)
class PseudoLabels:
    Y: Box3D
    D: float
    S: np.ndarray  # uint8 (256, 256) in {0, 1}

    def __post_init__(self):
        if not 0.0 <= self.D <= 1.0:
            raise ValueError(f"D must lie in [0, 1], got {self.D}")
        if not np.isin(self.S, (0, 1)).all():
            raise ValueError("S must be a binary mask")


class TeacherProvider:
    """Interface shared by all pseudo-label sources."""

    mask_size = INPUT_SIZE

    def pseudo_box3d(self, ctx: SampleContext) -> Box3D | None:
        raise NotImplementedError

    def pseudo_detect2d(self, ctx: SampleContext) -> float:
        raise NotImplementedError

    def pseudo_segmask(self, ctx: SampleContext) -> np.ndarray:
        raise NotImplementedError

    def labels(self, ctx: SampleContext) -> PseudoLabels | None:
        """All three labels, or None when no 3D box is available."""
        box = self.pseudo_box3d(ctx)
        if box is None:
            return None
        return PseudoLabels(box, float(self.pseudo_detect2d(ctx)), self.pseudo_segmask(ctx))


def _binary_mask(path, size) -> np.ndarray:
    with Image.open(path) as im:
        m = np.asarray(im.convert("L")) > 127
    return resize_nearest(m, size).astype(np.uint8)


class OracleTeacher(TeacherProvider):
    """Ground truth of the simulator, standing in for trained detectors."""

    def __init__(self, root, manifest: dict | None = None):
        self.root = Path(root)
        if manifest is None:
            with open(self.root / "manifest.json") as fh:
                manifest = json.load(fh)
        self.manifest = manifest

    def _frame(self, ctx: SampleContext) -> dict:
        return ctx.frame if ctx.frame is not None else self.manifest["frames"][ctx.frame_index]

    def pseudo_box3d(self, ctx):
        rec = self._frame(ctx).get("box3d")
        return None if rec is None else Box3D.from_dict(rec)

    def pseudo_segmask(self, ctx):
        frame = self._frame(ctx)
        if frame.get("mask") is None:
            return np.zeros(self.mask_size, dtype=np.uint8)
        return _binary_mask(self.root / frame["mask"], self.mask_size)

    def pseudo_detect2d(self, ctx):
        # derived from the resized silhouette, so D and S can never disagree
        return 1.0 if self.pseudo_segmask(ctx).any() else 0.0

    def labels(self, ctx):
        box = self.pseudo_box3d(ctx)
        if box is None:
            return None
        mask = self.pseudo_segmask(ctx)
        return PseudoLabels(box, 1.0 if mask.any() else 0.0, mask)


class ExternalTeacher(TeacherProvider):
    """Labels produced offline by external 3D/2D detectors and a segmenter."""

    def __init__(self, label_file, root=None):
        label_file = Path(label_file)
        with open(label_file) as fh:
            self.records = json.load(fh)
        self.root = Path(root) if root is not None else label_file.parent

    def _rec(self, ctx) -> dict:
        return self.records.get(ctx.sample_id, {})

    def pseudo_box3d(self, ctx):
        rec = self._rec(ctx).get("box3d")
        return None if rec is None else Box3D.from_dict(rec)

    def pseudo_detect2d(self, ctx):
        return float(np.clip(self._rec(ctx).get("confidence", 0.0), 0.0, 1.0))

    def pseudo_segmask(self, ctx):
        path = self._rec(ctx).get("mask")
        if path is None:
            return np.zeros(self.mask_size, dtype=np.uint8)
        return _binary_mask(self.root / path, self.mask_size)
