"""3D box type shared by the teacher, model heads and metrics.

Boxes live in the rig frame: origin on the floor below the rig center,
x forward (camera axis), y left, z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BOX_DIM = 7


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size must have three components")
        if any(not s > 0 for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def to_array(self) -> np.ndarray:
        """Flat (x, y, z, l, w, h, yaw) vector."""
        return np.array([*self.center, *self.size, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, v) -> "Box3D":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != BOX_DIM:
            raise ValueError(f"expected {BOX_DIM} box parameters, got {v.shape[0]}")
        return cls(tuple(v[:3]), tuple(v[3:6]), float(v[6]))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(tuple(d["center"]), tuple(d["size"]), float(d.get("yaw", 0.0)))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned (min, max) corners, ignoring yaw."""
        c = np.asarray(self.center)
        half = np.asarray(self.size) / 2.0
        return c - half, c + half

    def is_finite(self) -> bool:
        return all(math.isfinite(x) for x in self.to_array())
