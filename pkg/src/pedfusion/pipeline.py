"""Optimization loop, checkpoints and inference."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .boxes import Box3D
from .ingest import DEFAULT_BRIGHTNESS_RANGE, INPUT_SIZE, mel_spectrogram, resize, resize_nearest
from .losses import loss_detection, loss_regression, loss_segmentation, loss_total
from .metrics import IOU_THRESHOLDS, ap_table, center_distance
from .model import ModelConfig, StudentNet, canonical_gating

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pedfusion-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    lambda1: float = 0.3
    lambda2: float = 0.3
    seed: int = 0
    brightness_range: tuple = DEFAULT_BRIGHTNESS_RANGE
    gating_mode: str = "paper-literal"
    enable_detection_loss: bool = True
    enable_segmentation_loss: bool = True
    zero_audio: bool = False  # visual-only baseline
    normalize_audio: bool = True  # standardize spectrograms with training-set statistics
    num_threads: int | None = None

    def __post_init__(self):
        self.brightness_range = tuple(float(v) for v in self.brightness_range)
        self.gating_mode = canonical_gating(self.gating_mode)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr >= 0 are required")

    @property
    def attention(self) -> bool:
        # without the detection loss the gate has nothing to learn from
        return self.enable_detection_loss

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        """``base`` with gating and attention switches taken from this config."""
        base = base or ModelConfig()
        return dataclasses.replace(base, gating_mode=self.gating_mode, attention=self.attention)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def build_model(model_cfg: ModelConfig | None = None, seed: int = 0) -> StudentNet:
    torch.manual_seed(seed)
    return StudentNet(model_cfg or ModelConfig())


# --- data ------------------------------------------------------------------


class InMemorySamples:
    """List-backed dataset with the same ``get`` contract as SampleStore."""

    def __init__(self, items):
        self.items = list(items)

    def __len__(self):
        return len(self.items)

    def get(self, i):
        return self.items[i]

    @property
    def records(self):
        return [it[3] for it in self.items]


@dataclass
class Batch:
    spec: torch.Tensor  # (B, 4, 256, 256)
    image: torch.Tensor  # (B, 3, 256, 256)
    box: torch.Tensor  # (B, 7)
    detect: torch.Tensor  # (B,)
    mask: torch.Tensor  # (B, 256, 256)
    ids: list = field(default_factory=list)


def _record_field(rec, name, default=None):
    if isinstance(rec, dict):
        return rec.get(name, default)
    return getattr(rec, name, default)


def make_batch(dataset, indices, brightness=None, zero_audio: bool = False,
               size=INPUT_SIZE) -> Batch:
    """Stack samples into network tensors.

    ``brightness`` is None (unchanged), a scalar, or one factor per sample.
    """
    specs, images, boxes, dets, masks, ids = [], [], [], [], [], []
    for i in indices:
        spec, image, mask, rec = dataset.get(int(i))
        specs.append(torch.from_numpy(np.array(spec, dtype=np.float32)))
        images.append(torch.from_numpy(np.array(image, dtype=np.float32)))
        masks.append(torch.from_numpy(np.array(mask, dtype=np.float32)))
        boxes.append(Box3D.from_dict(_record_field(rec, "box3d")).to_array())
        dets.append(float(_record_field(rec, "detect", 0.0)))
        ids.append(_record_field(rec, "sample_id", str(i)))
    spec = resize(torch.stack(specs), size)
    if zero_audio:
        spec = torch.zeros_like(spec)
    image = resize(torch.stack(images), size, channels_last=True).permute(0, 3, 1, 2).contiguous()
    if brightness is not None:
        b = torch.as_tensor(np.broadcast_to(np.asarray(brightness, dtype=np.float32), (len(ids),)).copy())
        if torch.any(b < 0) or torch.any(b > 1):
            raise ValueError("brightness factors must lie in [0, 1]")
        image = image * b.view(-1, 1, 1, 1)
    mask = torch.stack(masks)
    if tuple(mask.shape[-2:]) != tuple(size):
        mask = torch.stack([torch.from_numpy(resize_nearest(m.numpy(), size)) for m in mask])
    return Batch(spec, image, torch.as_tensor(np.stack(boxes), dtype=torch.float32),
                 torch.as_tensor(dets, dtype=torch.float32), mask, ids)


def compute_losses(out, batch: Batch, cfg: TrainConfig) -> dict:
    l_r = loss_regression(batch.box.to(out.box.dtype), out.box)
    l_d = loss_detection(batch.detect.to(out.d_hat.dtype), out.d_hat)
    if out.seg is not None:
        l_s = loss_segmentation(batch.mask.to(out.seg.dtype), out.seg[:, 1])
    else:
        l_s = torch.zeros((), dtype=out.box.dtype)
    l_t = loss_total(l_r, l_d, l_s, cfg.lambda1, cfg.lambda2,
                     cfg.enable_detection_loss, cfg.enable_segmentation_loss)
    return {"L_r": l_r, "L_d": l_d, "L_s": l_s, "L_t": l_t}


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict  # name -> float32 numpy array
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: StudentNet, meta: dict | None = None) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().astype("<f4").copy() for k, v in model.state_dict().items()}
        return cls(copy.deepcopy(model.cfg), state, dict(meta or {}))

    def build(self) -> StudentNet:
        model = StudentNet(self.model_config)
        expected = model.state_dict()
        if set(expected) != set(self.state):
            missing = sorted(set(expected) - set(self.state))
            extra = sorted(set(self.state) - set(expected))
            raise CheckpointError(f"checkpoint does not match model: missing {missing[:3]}, extra {extra[:3]}")
        tensors = {}
        for k, v in self.state.items():
            if tuple(v.shape) != tuple(expected[k].shape):
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {tuple(expected[k].shape)}")
            tensors[k] = torch.from_numpy(np.asarray(v, dtype=np.float32).copy())
        model.load_state_dict(tensors)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """npz container: little-endian float32 arrays plus a JSON header entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "model_config": ckpt.model_config.to_dict(), "meta": ckpt.meta,
              "names": sorted(ckpt.state)}
    arrays = {f"param/{k}": np.asarray(v, dtype="<f4") for k, v in ckpt.state.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not a checkpoint file")
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            state = {k: z[f"param/{k}"].astype(np.float32) for k in header["names"]}
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, json.JSONDecodeError, EOFError) as exc:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({exc})") from exc
    return Checkpoint(ModelConfig.from_dict(header["model_config"]), state, header.get("meta", {}))


def as_model(source) -> StudentNet:
    if isinstance(source, StudentNet):
        return source
    if isinstance(source, Checkpoint):
        return source.build()
    return load_checkpoint(source).build()


# --- prediction / validation ----------------------------------------------


def _input_size(model) -> tuple[int, int]:
    return (model.cfg.input_size, model.cfg.input_size)


@torch.no_grad()
def predict(model: StudentNet, dataset, brightness: float | None = None,
            zero_audio: bool = False, batch_size: int = 32):
    """Boxes ``(N, 7)`` and confidences ``(N,)`` for every sample of ``dataset``."""
    was_training = model.training
    model.eval()
    boxes, dets = [], []
    dtype = next(model.parameters()).dtype
    for s in range(0, len(dataset), batch_size):
        batch = make_batch(dataset, range(s, min(s + batch_size, len(dataset))),
                           brightness=brightness, zero_audio=zero_audio, size=_input_size(model))
        out = model(batch.spec.to(dtype), batch.image.to(dtype), with_seg=False)
        boxes.append(out.box.double().numpy())
        dets.append(out.d_hat.double().numpy())
    model.train(was_training)
    if not boxes:
        return np.zeros((0, 7)), np.zeros(0)
    return np.concatenate(boxes), np.concatenate(dets)


def dataset_boxes(dataset) -> np.ndarray:
    return np.stack([Box3D.from_dict(_record_field(dataset.get(i)[3], "box3d")).to_array()
                     for i in range(len(dataset))])


def validation_metrics(model, dataset, zero_audio: bool = False) -> dict:
    preds, _ = predict(model, dataset, zero_audio=zero_audio)
    gts = dataset_boxes(dataset)
    aps = ap_table(preds, gts)
    dx, dy = center_distance(preds, gts)
    return {"ap_ave": float(np.mean(list(aps.values()))), "ap_03": aps[0.3],
            "ap_by_threshold": {f"{t:.2f}": v for t, v in aps.items()}, "Dx": dx, "Dy": dy}


# --- training --------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, record: dict):
        self.epochs.append(record)

    def losses(self, key: str = "L_t") -> list:
        return [e[key] for e in self.epochs]

    def write(self, path):
        with open(path, "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def _dump_divergence(out_dir, info: dict):
    if out_dir is None:
        return None
    path = Path(out_dir) / "divergence.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(info, fh, indent=1, default=str)
    return path


def spectrogram_stats(dataset) -> tuple[float, float]:
    """Mean and standard deviation over every spectrogram value of ``dataset``."""
    total, sq, count = 0.0, 0.0, 0
    for i in range(len(dataset)):
        spec = np.asarray(dataset.get(i)[0], dtype=np.float64)
        total += spec.sum()
        sq += np.square(spec).sum()
        count += spec.size
    mean = total / count
    std = math.sqrt(max(sq / count - mean * mean, 0.0))
    return mean, (std if std > 0 else 1.0)


def make_optimizer(model, lr: float):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, fused=True)


def train(model: StudentNet, train_set, val_set, config: TrainConfig, out_dir=None,
          progress=None):
    """Fit ``model`` on ``train_set``; returns ``(best Checkpoint, TrainLog)``.

    The checkpoint holds the epoch with the best validation AP@Ave (ties
    broken by the smaller mean center distance).  With ``out_dir`` the
    checkpoint and per-epoch log are written there too.
    """
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if config.num_threads:
        torch.set_num_threads(config.num_threads)
    if model.cfg.gating_mode != config.gating_mode or model.cfg.attention != config.attention:
        raise TrainingError("model gating/attention does not match the training config; "
                            "build it from TrainConfig.model_config()")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if config.normalize_audio:
        model.audio.set_input_stats(*spectrogram_stats(train_set))
    opt = make_optimizer(model, config.lr)
    dtype = next(model.parameters()).dtype
    use_seg = config.enable_segmentation_loss
    tlog = TrainLog()
    best_key, best = None, Checkpoint.from_model(model, {"epoch": 0})
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        t0 = time.time()
        model.train()
        order = rng.permutation(n)
        sums = {"L_r": 0.0, "L_d": 0.0, "L_s": 0.0, "L_t": 0.0}
        for step, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            factors = rng.uniform(*config.brightness_range, size=len(idx))
            batch = make_batch(train_set, idx, brightness=factors, zero_audio=config.zero_audio,
                               size=_input_size(model))
            out = model(batch.spec.to(dtype), batch.image.to(dtype), with_seg=use_seg)
            losses = compute_losses(out, batch, config)
            values = {k: float(v.detach()) for k, v in losses.items()}
            if not all(math.isfinite(v) for v in values.values()):
                path = _dump_divergence(out_dir, {"epoch": epoch, "step": step, "losses": values,
                                                  "sample_ids": batch.ids, "config": config.to_dict()})
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {values}"
                                    + (f" (state dumped to {path})" if path else ""))
            opt.zero_grad(set_to_none=True)
            losses["L_t"].backward()
            opt.step()
            for k in sums:
                sums[k] += values[k] * len(idx)
        record = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        if val_set is not None and len(val_set):
            record["val"] = validation_metrics(model, val_set, zero_audio=config.zero_audio)
            key = (record["val"]["ap_ave"], -(record["val"]["Dx"] + record["val"]["Dy"]))
        else:
            key = (0.0, -record["L_t"])
        record["wall_time"] = time.time() - t0
        tlog.append(record)
        if best_key is None or key > best_key:
            best_key = key
            best = Checkpoint.from_model(model, {"epoch": epoch, "val": record.get("val"),
                                                 "train_config": config.to_dict()})
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in record.items()
                                          if isinstance(v, float)})
        if progress is not None:
            progress(record)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, out_dir / "checkpoint.npz")
        tlog.write(out_dir / "train_log.jsonl")
    return best, tlog


# --- inference -------------------------------------------------------------


@torch.no_grad()
def infer(source, audio_segment, image, with_seg: bool = False, sample_rate: int = 48000):
    """Box and in-view confidence from one audio window and one image.

    ``source`` is a checkpoint path, :class:`Checkpoint` or model.
    ``audio_segment`` is an :class:`~pedfusion.ingest.AudioSegment` or a
    ``(4, L)`` array; ``image`` is ``(H, W, 3)`` in [0, 1].
    Returns ``(Box3D, d_hat)``, plus the class-1 mask when ``with_seg``.
    """
    model = as_model(source)
    model.eval()
    dtype = next(model.parameters()).dtype
    spec = mel_spectrogram(audio_segment, sample_rate=sample_rate)
    size = _input_size(model)
    spec_t = resize(torch.from_numpy(spec), size)[None].to(dtype)
    img = np.asarray(image, dtype=np.float32)
    img_t = resize(torch.from_numpy(img), size, channels_last=True).permute(2, 0, 1)[None].to(dtype)
    out = model(spec_t, img_t, with_seg=with_seg)
    box = Box3D.from_array(out.box[0].double().numpy())
    d_hat = float(out.d_hat[0])
    if with_seg:
        return box, d_hat, out.seg[0, 1].double().numpy()
    return box, d_hat


def ablation_configs(base: TrainConfig | None = None) -> list[tuple[str, TrainConfig]]:
    """The four attention/segmentation on-off combinations."""
    base = base or TrainConfig()
    rows = []
    for att in (False, True):
        for seg in (False, True):
            name = f"attention={'on' if att else 'off'},segmentation={'on' if seg else 'off'}"
            rows.append((name, dataclasses.replace(base, enable_detection_loss=att,
                                                   enable_segmentation_loss=seg)))
    return rows


__all__ = [
    "Batch", "Checkpoint", "CheckpointError", "InMemorySamples", "TrainConfig", "TrainLog",
    "TrainingError", "ablation_configs", "as_model", "build_model", "compute_losses", "infer",
    "load_checkpoint", "make_batch", "predict", "save_checkpoint", "spectrogram_stats", "train", "validation_metrics",
    "IOU_THRESHOLDS",
]
