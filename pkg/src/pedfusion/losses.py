"""Training objectives.

All losses take torch tensors (numpy/scalars are converted) and return a
0-dim tensor so they can be back-propagated.
"""

from __future__ import annotations

import torch

EPS = 1e-7


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def wrap_diff(d: torch.Tensor) -> torch.Tensor:
    """Angle difference wrapped into (-pi, pi]."""
    w = torch.atan2(torch.sin(d), torch.cos(d))
    return torch.where(w <= -torch.pi, w + 2 * torch.pi, w)


def loss_regression(y, y_hat) -> torch.Tensor:
    """Mean squared error over the 7 box parameters and the batch.

    The yaw residual is wrapped before squaring.
    """
    y_hat = _t(y_hat)
    y = _t(y, y_hat).to(y_hat.dtype)
    if y.shape != y_hat.shape:
        raise ValueError(f"box shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    diff = y_hat - y
    diff = torch.cat([diff[..., :6], wrap_diff(diff[..., 6:7])], dim=-1)
    return (diff ** 2).mean()


def binary_cross_entropy(target, prob, eps: float = EPS) -> torch.Tensor:
    prob = _t(prob)
    target = _t(target, prob).to(prob.dtype)
    if target.shape != prob.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(prob.shape)}")
    p = prob.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def loss_detection(d, d_hat, eps: float = EPS) -> torch.Tensor:
    """Binary cross-entropy between teacher presence ``d`` and ``d_hat``."""
    return binary_cross_entropy(d, d_hat, eps)


def loss_segmentation(s, s_hat, eps: float = EPS) -> torch.Tensor:
    """Per-pixel binary cross-entropy; ``s_hat`` is the class-1 probability map.

    A full ``(B, 2, H, W)`` softmax output is also accepted.
    """
    s_hat = _t(s_hat)
    s = _t(s, s_hat)
    if s_hat.dim() == 4 and s_hat.shape[1] == 2 and s.dim() == 3:
        s_hat = s_hat[:, 1]
    return binary_cross_entropy(s, s_hat, eps)


def loss_total(l_r, l_d, l_s, lambda1: float = 0.3, lambda2: float = 0.3,
               use_detection: bool = True, use_segmentation: bool = True):
    """``l_r + lambda1 * l_d + lambda2 * l_s``; disabled terms contribute 0."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    total = l_r
    if use_detection:
        total = total + lambda1 * l_d
    if use_segmentation:
        total = total + lambda2 * l_s
    return total
