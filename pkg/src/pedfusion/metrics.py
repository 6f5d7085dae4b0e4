"""Box metrics for the single-pedestrian regime.

Every sample has exactly one prediction and one ground truth, with no
confidence ranking, so AP at a threshold reduces to the fraction of samples
whose IoU clears it.
"""

from __future__ import annotations

import numpy as np

from .boxes import Box3D

IOU_THRESHOLDS = tuple(round(0.20 + 0.05 * i, 2) for i in range(7))


def _as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, Box3D):
        return boxes.to_array()[None]
    if len(boxes) and isinstance(boxes[0], Box3D):
        return np.stack([b.to_array() for b in boxes])
    a = np.asarray(boxes, dtype=np.float64)
    return a.reshape(-1, 7)


def iou3d(a, b):
    """Axis-aligned 3D IoU (yaw ignored).

    Takes two :class:`Box3D` or two ``(N, 7)`` arrays; returns a float or an
    ``(N,)`` array.
    """
    scalar = isinstance(a, Box3D) and isinstance(b, Box3D)
    A, B = _as_boxes(a), _as_boxes(b)
    if A.shape != B.shape:
        raise ValueError(f"box array shapes differ: {A.shape} vs {B.shape}")
    a_lo, a_hi = A[:, :3] - A[:, 3:6] / 2, A[:, :3] + A[:, 3:6] / 2
    b_lo, b_hi = B[:, :3] - B[:, 3:6] / 2, B[:, :3] + B[:, 3:6] / 2
    overlap = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    inter = np.prod(overlap, axis=1)
    union = np.prod(A[:, 3:6], axis=1) + np.prod(B[:, 3:6], axis=1) - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    iou = np.clip(iou, 0.0, 1.0)
    return float(iou[0]) if scalar else iou


def ap_from_ious(ious, tau: float) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("no samples to score")
    return float(np.mean(ious >= tau - 1e-12))


def ap_at_threshold(preds, gts, tau: float) -> float:
    """Fraction of samples with IoU >= tau."""
    P, G = _as_boxes(preds), _as_boxes(gts)
    if len(P) != len(G):
        raise ValueError(f"{len(P)} predictions for {len(G)} ground truths")
    return ap_from_ious(iou3d(P, G), tau)


def ap_table(preds, gts, thresholds=IOU_THRESHOLDS) -> dict:
    P, G = _as_boxes(preds), _as_boxes(gts)
    if len(P) != len(G):
        raise ValueError(f"{len(P)} predictions for {len(G)} ground truths")
    ious = iou3d(P, G)
    return {t: ap_from_ious(ious, t) for t in thresholds}


def ap_average(preds, gts, thresholds=IOU_THRESHOLDS) -> float:
    """Mean AP over the IoU thresholds 0.20, 0.25, ..., 0.50."""
    return float(np.mean(list(ap_table(preds, gts, thresholds).values())))


def center_distance(preds, gts, signed: bool = False) -> tuple[float, float]:
    """Mean per-axis deviation (Dx, Dy) of box centers.

    Absolute deviations by default; ``signed=True`` gives the plain mean
    difference, which can cancel out.
    """
    P, G = _as_boxes(preds), _as_boxes(gts)
    if len(P) == 0:
        raise ValueError("center_distance needs at least one sample")
    if len(P) != len(G):
        raise ValueError(f"{len(P)} predictions for {len(G)} ground truths")
    d = P[:, :2] - G[:, :2]
    if not signed:
        d = np.abs(d)
    return float(d[:, 0].mean()), float(d[:, 1].mean())
