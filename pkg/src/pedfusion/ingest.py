"""From synchronized raw streams to training samples.

Audio is cut into non-overlapping 0.4 s windows, each paired with the
camera frame nearest its center.  Low-energy windows are dropped, the rest
become log-mel spectrograms; images and spectrograms are resized to the
network input size.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.io import wavfile

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 0.4
N_MELS = 128
WINDOW = 2048
HOP = 1024
INPUT_SIZE = (256, 256)
DEFAULT_BRIGHTNESS_RANGE = (0.05, 1.0)
STORE_VERSION = 1


class IngestError(ValueError):
    pass


@dataclass
class AudioSegment:
    samples: np.ndarray  # (channels, L), values in [-1, 1]
    sample_rate: int
    t_start: float
    index: int = 0

    @property
    def length(self) -> int:
        return self.samples.shape[-1]

    @property
    def t_center(self) -> float:
        return self.t_start + 0.5 * self.length / self.sample_rate


# --- segmentation ----------------------------------------------------------


def read_wav(path) -> tuple[int, np.ndarray]:
    """Memory-mapped S16LE read; returns (rate, int16 array of shape (N, C))."""
    rate, data = wavfile.read(str(path), mmap=True)
    if data.dtype != np.int16:
        raise IngestError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return rate, data


def segment_stream(audio, frame_times, sample_rate: int, window: float = SEGMENT_SECONDS,
                   return_dropped: bool = False):
    """Tile ``audio`` into consecutive windows and pair each with a frame.

    ``audio`` is either a float ``(C, N)`` array in [-1, 1] or the raw
    ``(N, C)`` int16 array from :func:`read_wav`.  Each window is paired with
    the index of the frame nearest its center; a window without a frame
    within half a frame period is dropped.  Returns a list of
    ``(AudioSegment, frame_index)``, plus the drop count if
    ``return_dropped``.
    """
    a = audio if hasattr(audio, "dtype") else np.asarray(audio)
    pcm = a.dtype == np.int16
    n_samples = a.shape[0] if pcm else a.shape[-1]
    seg_len = int(round(window * sample_rate))
    frame_times = np.asarray(frame_times, dtype=np.float64)
    if len(frame_times) > 1:
        half_period = 0.5 * float(np.median(np.diff(frame_times)))
    else:
        half_period = 0.5 * window
    out = []
    dropped = 0
    for k in range(n_samples // seg_len):
        s0 = k * seg_len
        chunk = a[s0:s0 + seg_len].T if pcm else a[:, s0:s0 + seg_len]
        samples = (np.asarray(chunk, dtype=np.float32) / 32768.0) if pcm else np.asarray(chunk, dtype=np.float32)
        seg = AudioSegment(samples, sample_rate, s0 / sample_rate, index=k)
        if len(frame_times) == 0:
            dropped += 1
            continue
        j = int(np.argmin(np.abs(frame_times - seg.t_center)))
        if abs(frame_times[j] - seg.t_center) > half_period + 1e-9:
            dropped += 1
            continue
        out.append((seg, j))
    if dropped:
        log.info("dropped %d segment(s) without a frame near their center", dropped)
    if return_dropped:
        return out, dropped
    return out


# --- energy gating ---------------------------------------------------------


def segment_energy(seg) -> float:
    """Mean squared amplitude over channels and samples."""
    x = seg.samples if isinstance(seg, AudioSegment) else np.asarray(seg)
    return float(np.mean(np.square(x, dtype=np.float64)))


@dataclass
class EnergyFilter:
    """Keeps segments whose energy reaches the mean energy of the fit set."""

    threshold: float | None = None

    def fit(self, energies) -> "EnergyFilter":
        energies = np.asarray(list(energies), dtype=np.float64)
        if energies.size == 0:
            raise IngestError("cannot fit an energy threshold on zero segments")
        self.threshold = float(np.mean(energies))
        return self

    def keep_mask(self, energies) -> np.ndarray:
        if self.threshold is None:
            raise IngestError("energy filter is not fitted")
        return np.asarray(energies, dtype=np.float64) >= self.threshold

    def to_dict(self) -> dict:
        return {"threshold": self.threshold}


def energy_filter(segments, threshold: float | None = None):
    """Drop segments quieter than the mean energy of ``segments``.

    Pass a previously fitted ``threshold`` to reuse it (e.g. the training
    pool's threshold on validation data).
    """
    segments = list(segments)
    if not segments:
        raise IngestError("energy_filter needs at least one segment")
    energies = [segment_energy(s) for s in segments]
    filt = EnergyFilter(threshold) if threshold is not None else EnergyFilter().fit(energies)
    keep = filt.keep_mask(energies)
    return [s for s, k in zip(segments, keep) if k]


# --- mel spectrogram -------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz): band k spans edges[k]..edges[k+2]."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the rfft bins, unit peak, shape (n_mels, n_fft//2+1)."""
    edges = mel_band_edges(n_mels, sample_rate)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


_FB_CACHE: dict = {}


def mel_spectrogram(seg, sample_rate: int | None = None, n_mels: int = N_MELS,
                    window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    """log(1 + mel power) per channel, shape ``(C, n_mels, n_frames)``.

    Periodic Hann window, no centering or padding, so
    ``n_frames = (L - window) // hop + 1``.
    """
    if isinstance(seg, AudioSegment):
        x, sample_rate = seg.samples, seg.sample_rate
    else:
        x = np.asarray(seg)
        if sample_rate is None:
            raise IngestError("sample_rate is required for raw arrays")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    length = x.shape[-1]
    if length < window:
        raise IngestError(f"segment of {length} samples is shorter than the {window}-sample window")
    n_frames = (length - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    frames = x[:, idx] * hann  # (C, n_frames, window)
    power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
    key = (n_mels, window, sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(n_mels, window, sample_rate)
    mel = np.einsum("mf,ctf->cmt", _FB_CACHE[key], power)
    return np.log1p(mel).astype(np.float32)


# --- resizing / augmentation -----------------------------------------------


def resize(x, size=INPUT_SIZE, channels_last: bool = False):
    """Bilinear resize (half-pixel centers, no antialiasing).

    Accepts ``(H, W)``, ``(C, H, W)`` or, with ``channels_last``,
    ``(H, W, C)``; a leading batch axis ``(N, C, H, W)`` is also accepted.
    numpy in, numpy out; torch in, torch out.
    """
    is_np = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x) if is_np else x)
    if t.numel() == 0:
        raise IngestError("cannot resize an empty array")
    if not t.is_floating_point():
        t = t.float()
    nd = t.dim()
    if nd == 2:
        t4 = t[None, None]
    elif nd == 3:
        t4 = (t.permute(2, 0, 1) if channels_last else t)[None]
    elif nd == 4:
        t4 = t.permute(0, 3, 1, 2) if channels_last else t
    else:
        raise IngestError(f"resize expects 2-4 dims, got {nd}")
    size = tuple(int(s) for s in size)
    if tuple(t4.shape[-2:]) != size:
        t4 = F.interpolate(t4, size=size, mode="bilinear", align_corners=False)
    if nd == 2:
        out = t4[0, 0]
    elif nd == 3:
        out = t4[0].permute(1, 2, 0) if channels_last else t4[0]
    else:
        out = t4.permute(0, 2, 3, 1) if channels_last else t4
    return out.numpy() if is_np else out


def resize_nearest(mask, size=INPUT_SIZE) -> np.ndarray:
    """Nearest-neighbour resize sampling source pixel floor((i + 0.5) * scale)."""
    m = np.asarray(mask)
    h, w = m.shape[:2]
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return m[rows][:, cols]


def brightness_augment(image, factor: float):
    if not 0.0 <= factor <= 1.0:
        raise IngestError(f"brightness factor must lie in [0, 1], got {factor}")
    return image * factor


def sample_brightness(rng: np.random.Generator, low_high=DEFAULT_BRIGHTNESS_RANGE, size=None):
    low, high = low_high
    if not 0.0 <= low <= high <= 1.0:
        raise IngestError(f"invalid brightness range {low_high}")
    return rng.uniform(low, high, size=size)


def load_image(path) -> np.ndarray:
    """PNG -> float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# --- splitting -------------------------------------------------------------


def split_dataset(items, train_frac: float = 0.8, seed: int = 0):
    """Deterministic shuffled split into (train, val) lists."""
    items = list(items)
    if not 0.0 < train_frac < 1.0:
        raise IngestError(f"train_frac must lie in (0, 1), got {train_frac}")
    if len(items) < 2:
        raise IngestError("need at least two samples to split")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(np.clip(round(train_frac * len(items)), 1, len(items) - 1))
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]


# --- processed-sample store ------------------------------------------------
#
# data.bin holds, per sample, three shape-prefixed little-endian float32
# arrays: spectrogram (C, n_mels, frames), image (256, 256, 3) and the
# pseudo-label mask (256, 256).  Each array is encoded as
#   uint32 ndim | uint32 dims[ndim] | float32 data
# index.json lists the records with byte offsets, labels and split.


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _unpack_array(buf, offset: int):
    (ndim,) = struct.unpack_from("<I", buf, offset)
    shape = struct.unpack_from(f"<{ndim}I", buf, offset + 4)
    start = offset + 4 + 4 * ndim
    n = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(shape)
    return arr, start + 4 * n


@dataclass
class SampleRecord:
    sample_id: str
    split: str
    t_start: float
    t_center: float
    frame_index: int
    frame_timestamp: float
    energy: float
    box3d: dict
    detect: float
    in_fov: bool
    offset: int = 0
    source: dict = field(default_factory=dict)


class SampleWriter:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.out_dir / "data.bin", "wb")
        self.records: list[SampleRecord] = []

    def add(self, record: SampleRecord, spec: np.ndarray, image: np.ndarray, mask: np.ndarray):
        record.offset = self._fh.tell()
        for a in (spec, image, mask):
            self._fh.write(_pack_array(a))
        self.records.append(record)

    def close(self, meta: dict):
        self._fh.close()
        index = {"version": STORE_VERSION, "meta": meta,
                 "records": [r.__dict__ for r in self.records]}
        with open(self.out_dir / "index.json", "w") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)


class SampleStore:
    """Read-only view of a processed-sample store.

    Arrays are memory-mapped; ``get`` returns (spec, image, mask, record).
    """

    def __init__(self, path, split: str | None = None, records=None, _shared=None):
        self.path = Path(path)
        if _shared is None:
            with open(self.path / "index.json") as fh:
                index = json.load(fh)
            if index.get("version") != STORE_VERSION:
                raise IngestError(f"unsupported sample store version {index.get('version')}")
            self.meta = index["meta"]
            all_records = [SampleRecord(**r) for r in index["records"]]
            self._buf = np.memmap(self.path / "data.bin", dtype=np.uint8, mode="r")
        else:
            self.meta, all_records, self._buf = _shared
        if records is None:
            records = [r for r in all_records if split is None or r.split == split]
        self.records = records
        self._all = all_records

    def subset(self, split: str | None = None, predicate=None) -> "SampleStore":
        recs = [r for r in self.records if (split is None or r.split == split)
                and (predicate is None or predicate(r))]
        return SampleStore(self.path, records=recs, _shared=(self.meta, self._all, self._buf))

    def __len__(self):
        return len(self.records)

    def get(self, i: int):
        r = self.records[i]
        spec, off = _unpack_array(self._buf, r.offset)
        image, off = _unpack_array(self._buf, off)
        mask, _ = _unpack_array(self._buf, off)
        return spec, image, mask, r

    def boxes(self) -> np.ndarray:
        from .boxes import Box3D
        return np.stack([Box3D.from_dict(r.box3d).to_array() for r in self.records]) \
            if self.records else np.zeros((0, 7))


# --- full preprocessing ----------------------------------------------------


@dataclass
class IngestConfig:
    window: float = SEGMENT_SECONDS
    n_mels: int = N_MELS
    n_fft: int = WINDOW
    hop: int = HOP
    input_size: tuple = INPUT_SIZE
    train_frac: float = 0.8
    filter_validation: bool = True
    seed: int = 0


def preprocess(dataset_dir, out_dir, teacher=None, config: IngestConfig | None = None) -> SampleStore:
    """Simulator/recording layout -> processed-sample store.

    Segments are split 80/20 first; the energy threshold is fitted on the
    training pool and reused for validation.
    """
    from .teacher import OracleTeacher, SampleContext

    config = config or IngestConfig()
    dataset_dir = Path(dataset_dir)
    with open(dataset_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    teacher = teacher or OracleTeacher(dataset_dir, manifest)
    rate, pcm = read_wav(dataset_dir / manifest["audio"]["file"])
    frame_times = np.array([f["timestamp"] for f in manifest["frames"]])
    pairs, n_unpaired = segment_stream(pcm, frame_times, rate, config.window, return_dropped=True)
    if len(pairs) < 2:
        raise IngestError("recording too short: fewer than two segments")
    train_pairs, val_pairs = split_dataset(pairs, config.train_frac, config.seed)
    train_pairs.sort(key=lambda p: p[0].index)
    val_pairs.sort(key=lambda p: p[0].index)
    energy_of = {seg.index: segment_energy(seg) for seg, _ in pairs}
    filt = EnergyFilter().fit(energy_of[s.index] for s, _ in train_pairs)

    writer = SampleWriter(out_dir)
    counts = {"segments": len(pairs), "unpaired": n_unpaired, "energy_dropped": 0, "no_box": 0}
    for split, group in (("train", train_pairs), ("val", val_pairs)):
        for seg, j in group:
            if (split == "train" or config.filter_validation) and not filt.keep_mask(energy_of[seg.index]):
                counts["energy_dropped"] += 1
                continue
            frame = manifest["frames"][j]
            ctx = SampleContext(f"seg{seg.index:06d}", seg.t_center, j, frame, dataset_dir)
            labels = teacher.labels(ctx)
            if labels is None:
                counts["no_box"] += 1
                continue
            spec = mel_spectrogram(seg, n_mels=config.n_mels, window=config.n_fft, hop=config.hop)
            image = resize(load_image(dataset_dir / frame["image"]), config.input_size, channels_last=True)
            rec = SampleRecord(
                sample_id=ctx.sample_id, split=split, t_start=seg.t_start, t_center=seg.t_center,
                frame_index=j, frame_timestamp=float(frame["timestamp"]),
                energy=energy_of[seg.index], box3d=labels.Y.to_dict(), detect=float(labels.D),
                in_fov=bool(frame.get("in_fov", labels.D > 0.5)), source=manifest.get("source", {}),
            )
            writer.add(rec, spec, image, labels.S.astype(np.float32))
    meta = {"ingest": config.__dict__ | {"input_size": list(config.input_size)},
            "energy_threshold": filt.threshold, "counts": counts,
            "sample_rate": rate, "source": manifest.get("source", {})}
    writer.close(meta)
    log.info("preprocess: %s", counts)
    return SampleStore(out_dir)


def frames_for(length: int, window: int = WINDOW, hop: int = HOP) -> int:
    return (length - window) // hop + 1 if length >= window else 0


__all__ = [
    "AudioSegment", "EnergyFilter", "IngestConfig", "IngestError", "SampleRecord", "SampleStore",
    "brightness_augment", "energy_filter", "load_image", "mel_band_edges", "mel_filterbank",
    "mel_spectrogram", "preprocess", "read_wav", "resize", "resize_nearest", "sample_brightness",
    "segment_energy", "segment_stream", "split_dataset", "hz_to_mel", "mel_to_hz", "frames_for",
]
