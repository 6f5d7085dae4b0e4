"""Student network: audio branch, visual branch, gated fusion and heads.

Tensor layouts:

* spectrogram ``(B, mics, n_freq, n_time)``, 4 x 256 x 256 by default
* image ``(B, 3, H, W)`` in [0, 1]
* audio / visual features ``(B, C, F)``
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

MIN_BOX_SIZE = 1e-4
GATING_MODES = ("paper-literal", "visual-only")
_GATING_ALIASES = {"literal": "paper-literal", "paper_literal": "paper-literal",
                   "visual_only": "visual-only"}


def canonical_gating(mode: str) -> str:
    mode = _GATING_ALIASES.get(mode, mode)
    if mode not in GATING_MODES:
        raise ValueError(f"gating_mode must be one of {GATING_MODES}, got {mode!r}")
    return mode


@dataclass
class ModelConfig:
    feature_dim: int = 512
    audio_channels: int = 64
    visual_channels: int = 64
    time_widths: tuple = (3, 5, 7)
    freq_heights: tuple = (3, 5, 7)
    kernels_per_scale: int = 8
    pooled_bins: int = 8
    mic_channels: int = 4
    input_size: int = 256
    gating_mode: str = "paper-literal"
    attention: bool = True
    head_sizes: tuple = (512, 256)
    box_dim: int = 7
    detect_hidden: int = 64
    visual_backbone: str = "compact"
    backbone_channels: tuple = (16, 32, 48, 64)
    freeze_backbone: bool = False
    decoder_channels: int = 8
    seg_grid: int = 32

    def __post_init__(self):
        self.time_widths = tuple(int(w) for w in self.time_widths)
        self.freq_heights = tuple(int(h) for h in self.freq_heights)
        self.head_sizes = tuple(int(h) for h in self.head_sizes)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.gating_mode = canonical_gating(self.gating_mode)
        dims = (self.feature_dim, self.audio_channels, self.visual_channels, self.kernels_per_scale,
                self.pooled_bins, self.mic_channels, self.input_size, self.box_dim,
                self.detect_hidden, self.decoder_channels, self.seg_grid,
                *self.time_widths, *self.freq_heights, *self.head_sizes, *self.backbone_channels)
        if min(dims) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.box_dim != 7:
            raise ValueError("box_dim is fixed at 7 (center, size, yaw)")
        if self.input_size % self.seg_grid or self.input_size // self.seg_grid != 8:
            raise ValueError("segmentation decoder doubles three times: input_size must be 8 * seg_grid")
        if self.visual_backbone not in ("compact", "resnet18", "resnet50"):
            raise ValueError(f"unknown visual backbone {self.visual_backbone!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class AudioNet(nn.Module):
    """Full-axis time and frequency kernels over stacked mel-spectrograms.

    Time kernels cover the whole frequency axis and ``w`` frames and slide
    along time only; frequency kernels cover the whole time axis and ``h``
    bands and slide along frequency only.  Each response is averaged into
    ``pooled_bins`` bins, and the concatenated features go through a single
    linear map to ``(audio_channels, feature_dim)``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, k = cfg.input_size, cfg.kernels_per_scale
        self.time_convs = nn.ModuleList(
            nn.Conv2d(cfg.mic_channels, k, kernel_size=(n, w)) for w in cfg.time_widths)
        self.freq_convs = nn.ModuleList(
            nn.Conv2d(cfg.mic_channels, k, kernel_size=(h, n)) for h in cfg.freq_heights)
        n_feat = k * cfg.pooled_bins * (len(cfg.time_widths) + len(cfg.freq_heights))
        self.fc = nn.Linear(n_feat, cfg.audio_channels * cfg.feature_dim)
        # (mean, std) applied to the input; identity until fitted on training data
        self.register_buffer("input_stats", torch.tensor([0.0, 1.0]))

    def set_input_stats(self, mean: float, std: float):
        if not std > 0:
            raise ValueError(f"input std must be positive, got {std}")
        self.input_stats.copy_(torch.tensor([float(mean), float(std)]))

    def feature_maps(self, spec: torch.Tensor, circular: bool = False):
        """Pre-pooling responses: lists of ``(B, k, T')`` and ``(B, k, F')``.

        ``circular`` wraps the sliding axis so outputs keep the input length
        (used to probe translation behaviour).
        """
        n = self.cfg.input_size
        if spec.dim() != 4 or tuple(spec.shape[1:]) != (self.cfg.mic_channels, n, n):
            raise ValueError(f"expected spectrogram (B, {self.cfg.mic_channels}, {n}, {n}), "
                             f"got {tuple(spec.shape)}")
        b = spec.shape[0]
        spec = (spec - self.input_stats[0]) / self.input_stats[1]
        along_time = spec.reshape(b, -1, n)  # (B, mics*freq, time)
        along_freq = spec.transpose(2, 3).reshape(b, -1, n)  # (B, mics*time, freq)
        time_maps = [F.relu(full_axis_conv(along_time, c.weight, c.bias, circular)) for c in self.time_convs]
        freq_w = [c.weight.transpose(2, 3) for c in self.freq_convs]
        freq_maps = [F.relu(full_axis_conv(along_freq, w, c.bias, circular))
                     for w, c in zip(freq_w, self.freq_convs)]
        return time_maps, freq_maps

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        time_maps, freq_maps = self.feature_maps(spec)
        bins = self.cfg.pooled_bins
        time_feat = torch.cat([F.adaptive_avg_pool1d(m, bins) for m in time_maps], dim=1)
        freq_feat = torch.cat([F.adaptive_avg_pool1d(m, bins) for m in freq_maps], dim=1)
        feat = torch.cat([time_feat.flatten(1), freq_feat.flatten(1)], dim=1)
        return self.fc(feat).view(-1, self.cfg.audio_channels, self.cfg.feature_dim)


def full_axis_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                   circular: bool = False) -> torch.Tensor:
    """Conv2d whose kernel spans one input axis completely, as a matmul.

    ``x`` is ``(B, D, L)`` with the spanned axis folded into ``D``;
    ``weight`` is ``(k, C, S, w)`` with ``C * S == D`` and ``w`` the extent
    along the sliding axis.  Equivalent to ``F.conv2d`` (cross-correlation)
    but one GEMM plus ``w`` shifted adds, which is much faster on CPU for
    kernels this tall.
    """
    k, w = weight.shape[0], weight.shape[-1]
    if circular:
        x = torch.cat([x[..., x.shape[-1] - w // 2:], x, x[..., :w - 1 - w // 2]], dim=-1)
    length = x.shape[-1] - w + 1
    wr = weight.permute(3, 0, 1, 2).reshape(w * k, -1)
    z = torch.matmul(wr, x).view(x.shape[0], w, k, x.shape[-1])
    y = z[:, 0, :, :length]
    for j in range(1, w):
        y = y + z[:, j, :, j:j + length]
    return y + bias[:, None]


def _compact_backbone(channels) -> nn.Sequential:
    layers, c_in = [], 3
    for c in channels:
        layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(c),
                   nn.ReLU(inplace=True)]
        c_in = c
    return nn.Sequential(*layers)


def _resnet_backbone(name: str) -> tuple[nn.Module, int]:
    import torchvision

    net = getattr(torchvision.models, name)(weights=None)
    body = nn.Sequential(*list(net.children())[:-2])
    return body, net.fc.in_features


class VisualNet(nn.Module):
    """Backbone, one trainable conv layer, per-channel projection to F."""

    def __init__(self, cfg: ModelConfig, backbone: nn.Module | None = None,
                 backbone_out: int | None = None, backbone_stride: int | None = None):
        super().__init__()
        self.cfg = cfg
        if backbone is None:
            if cfg.visual_backbone == "compact":
                backbone = _compact_backbone(cfg.backbone_channels)
                backbone_out, backbone_stride = cfg.backbone_channels[-1], 2 ** len(cfg.backbone_channels)
            else:
                backbone, backbone_out = _resnet_backbone(cfg.visual_backbone)
                backbone_stride = 32
        self.backbone = backbone
        self.frozen = cfg.freeze_backbone
        if self.frozen:
            for p in self.backbone.parameters():
                p.requires_grad_(False)
        self.conv = nn.Conv2d(backbone_out, cfg.visual_channels, 3, padding=1)
        side = -(-cfg.input_size // backbone_stride)
        self.proj = nn.Linear(side * side, cfg.feature_dim)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.backbone.eval()
        return self

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        n = self.cfg.input_size
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, n, n):
            raise ValueError(f"expected image (B, 3, {n}, {n}), got {tuple(image.shape)}")
        if self.frozen:
            with torch.no_grad():
                x = self.backbone(image)
        else:
            x = self.backbone(image)
        x = F.relu(self.conv(x))
        return self.proj(x.flatten(2))


class DetectHead(nn.Module):
    """Pedestrian-in-view confidence from visual features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.visual_channels * cfg.feature_dim, cfg.detect_hidden)
        self.fc2 = nn.Linear(cfg.detect_hidden, 1)

    def logits(self, visual_feat: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(visual_feat.flatten(1)))).squeeze(1)

    def forward(self, visual_feat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(visual_feat))


def fuse(audio_feat: torch.Tensor, visual_feat: torch.Tensor, d_hat,
         gating_mode: str = "paper-literal", attention: bool = True) -> torch.Tensor:
    """Confidence-gated fusion, summed over the channel axis.

    paper-literal: ``sum_c (D * [audio; visual])``.
    visual-only:   ``sum_c [audio; D * visual]``.
    Without attention the gate is fixed at 1.  Accepts ``(C, F)`` or
    ``(B, C, F)`` features with a matching scalar or ``(B,)`` gate.
    """
    if audio_feat.shape[-1] != visual_feat.shape[-1]:
        raise ValueError(f"feature length mismatch: {audio_feat.shape[-1]} vs {visual_feat.shape[-1]}")
    mode = canonical_gating(gating_mode)
    gate = torch.as_tensor(d_hat, dtype=audio_feat.dtype, device=audio_feat.device)
    if not attention:
        gate = torch.ones_like(gate)
    if audio_feat.dim() == 3:
        gate = gate.reshape(-1, 1, 1)
    if mode == "paper-literal":
        return (torch.cat([audio_feat, visual_feat], dim=-2) * gate).sum(dim=-2)
    return torch.cat([audio_feat, visual_feat * gate], dim=-2).sum(dim=-2)


def box_activation(raw: torch.Tensor) -> torch.Tensor:
    """Raw head output -> (center, softplus size, yaw wrapped to (-pi, pi])."""
    center = raw[..., 0:3]
    # floor keeps sizes positive where softplus underflows in float32
    size = F.softplus(raw[..., 3:6]) + MIN_BOX_SIZE
    yaw = torch.atan2(torch.sin(raw[..., 6:7]), torch.cos(raw[..., 6:7]))
    # atan2 returns -pi only for sin == -0.0; fold it to +pi
    yaw = torch.where(yaw <= -torch.pi, yaw + 2 * torch.pi, yaw)
    return torch.cat([center, size, yaw], dim=-1)


class RegressHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, d = [], cfg.feature_dim
        for h in cfg.head_sizes:
            layers += [nn.Linear(d, h), nn.ReLU(inplace=True)]
            d = h
        layers.append(nn.Linear(d, cfg.box_dim))
        self.mlp = nn.Sequential(*layers)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return box_activation(self.mlp(fused))


class SegDecoder(nn.Module):
    """Audio feature -> 32x32 map -> three conv/upsample stages -> 2-class softmax."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g, c = cfg.seg_grid, cfg.decoder_channels
        self.fc = nn.Linear(cfg.audio_channels * cfg.feature_dim, g * g)
        self.stages = nn.ModuleList([nn.Conv2d(1, c, 3, padding=1),
                                     nn.Conv2d(c, c, 3, padding=1),
                                     nn.Conv2d(c, c, 3, padding=1)])
        self.classifier = nn.Conv2d(3 * c, 2, 1)

    def forward(self, audio_feat: torch.Tensor) -> torch.Tensor:
        g, n = self.cfg.seg_grid, self.cfg.input_size
        c = self.cfg.decoder_channels
        x = self.fc(audio_feat.flatten(1)).view(-1, 1, g, g)
        w = self.classifier.weight
        logits = self.classifier.bias.view(1, 2, 1, 1)
        for i, conv in enumerate(self.stages):
            h = F.relu(conv(x))
            # the 1x1 classifier commutes with bilinear upsampling, so each
            # stage's share of it is applied before upsampling to full size
            part = F.conv2d(h, w[:, i * c:(i + 1) * c])
            part = F.interpolate(part, scale_factor=2, mode="bilinear", align_corners=False)
            if part.shape[-1] != n:
                part = F.interpolate(part, size=(n, n), mode="bilinear", align_corners=False)
            logits = logits + part
            if i + 1 < len(self.stages):
                x = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.softmax(logits, dim=1)

    def forward_stacked(self, audio_feat: torch.Tensor) -> torch.Tensor:
        """Reference form: upsample every stage output, stack, then 1x1 conv."""
        g, n = self.cfg.seg_grid, self.cfg.input_size
        x = self.fc(audio_feat.flatten(1)).view(-1, 1, g, g)
        outs = []
        for conv in self.stages:
            x = F.interpolate(F.relu(conv(x)), scale_factor=2, mode="bilinear", align_corners=False)
            outs.append(x)
        stacked = torch.cat([o if o.shape[-1] == n else
                             F.interpolate(o, size=(n, n), mode="bilinear", align_corners=False)
                             for o in outs], dim=1)
        return torch.softmax(self.classifier(stacked), dim=1)


class StudentOutput(NamedTuple):
    box: torch.Tensor  # (B, 7)
    d_hat: torch.Tensor  # (B,)
    seg: torch.Tensor | None  # (B, 2, H, W) class probabilities
    audio_feat: torch.Tensor | None = None
    visual_feat: torch.Tensor | None = None
    fused: torch.Tensor | None = None


class StudentNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, backbone: nn.Module | None = None, **backbone_kw):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.audio = AudioNet(self.cfg)
        self.visual = VisualNet(self.cfg, backbone, **backbone_kw)
        self.detect = DetectHead(self.cfg)
        self.regress = RegressHead(self.cfg)
        self.seg = SegDecoder(self.cfg)

    def forward(self, spec: torch.Tensor, image: torch.Tensor, with_seg: bool = True,
                return_features: bool = False) -> StudentOutput:
        audio_feat = self.audio(spec)
        visual_feat = self.visual(image)
        d_hat = self.detect(visual_feat)
        fused = fuse(audio_feat, visual_feat, d_hat, self.cfg.gating_mode, self.cfg.attention)
        box = self.regress(fused)
        seg = self.seg(audio_feat) if with_seg else None
        if return_features:
            return StudentOutput(box, d_hat, seg, audio_feat, visual_feat, fused)
        return StudentOutput(box, d_hat, seg)

    def parameter_groups(self) -> dict[str, nn.Module]:
        """Named sub-networks, for probing and reporting."""
        return {"audio": self.audio, "visual": self.visual, "fusion_gate": self.detect,
                "regress": self.regress, "seg": self.seg}
