"""Synthetic single-pedestrian scenes for the audio-visual rig.

The simulated rig sits at the center of a rectangular area.  Four
microphones form a cross around the rig center, a pinhole camera looks
along +x of the rig frame.  A pedestrian random-walks through the area and
produces one footstep pulse every ``step_interval_s`` seconds.

Two frames are used:

* area frame: origin at a floor corner of the area, positions in
  ``[0, area_x] x [0, area_y]``.  Trajectories are stored in this frame.
* rig frame: origin on the floor below the rig center, x forward, y left,
  z up.  Microphones, camera and ground-truth boxes use this frame.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import wave
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box3D, wrap_angle

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MIN_SOURCE_DISTANCE = 0.01
PULSE_DURATION_S = 0.010
PULSE_DECAY_S = 0.002
PULSE_ATTACK_S = 0.0005
PULSE_BAND_HZ = (200.0, 2500.0)
PULSE_PARTIALS = 4
NOISE_BLOCK_S = 1.0


class ConfigurationError(ValueError):
    pass


class SimulationWarning(UserWarning):
    pass


def _cross_mics(radius=0.5, height=1.0):
    # front, left, back, right
    return (
        (radius, 0.0, height),
        (0.0, radius, height),
        (-radius, 0.0, height),
        (0.0, -radius, height),
    )


@dataclass
class SceneConfig:
    area_extent: tuple = (4.5, 3.5, 3.0)
    mic_positions: tuple = field(default_factory=_cross_mics)
    camera_position: tuple = (0.0, 0.0, 1.2)
    camera_yaw: float = 0.0
    camera_hfov: float = 90.0
    image_size: tuple = (320, 240)  # width, height
    sample_rate: int = 48000
    frame_rate: int = 20
    speed_of_sound: float = 343.0
    noise_snr_db: float = 20.0
    person_dims: tuple = (0.5, 0.5, 1.7)
    step_interval_s: float = 0.5
    max_speed: float = 1.5
    source_height: float = 0.0
    footstep_amplitude: float = 0.5  # peak amplitude at 1 m
    seed: int = 0

    def __post_init__(self):
        self.area_extent = tuple(float(v) for v in self.area_extent)
        self.mic_positions = tuple(tuple(float(c) for c in m) for m in self.mic_positions)
        self.camera_position = tuple(float(v) for v in self.camera_position)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.person_dims = tuple(float(v) for v in self.person_dims)
        self.validate()

    def validate(self):
        if len(self.area_extent) != 3 or min(self.area_extent) <= 0:
            raise ConfigurationError(f"area_extent must be three positive lengths: {self.area_extent}")
        if len(self.mic_positions) != 4 or any(len(m) != 3 for m in self.mic_positions):
            raise ConfigurationError("mic_positions must hold four (x, y, z) points")
        if len(self.person_dims) != 3 or min(self.person_dims) <= 0:
            raise ConfigurationError(f"person_dims must be positive: {self.person_dims}")
        for name in ("sample_rate", "frame_rate", "speed_of_sound", "step_interval_s",
                     "max_speed", "footstep_amplitude"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 < self.camera_hfov < 180:
            raise ConfigurationError("camera_hfov must lie in (0, 180) degrees")
        if min(self.image_size) <= 0:
            raise ConfigurationError("image_size must be positive")

    @property
    def rig_center(self) -> np.ndarray:
        """Rig origin expressed in the area frame (x, y)."""
        return np.array(self.area_extent[:2]) / 2.0

    @property
    def mics(self) -> np.ndarray:
        return np.asarray(self.mic_positions, dtype=np.float64)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown scene config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Trajectory:
    times: np.ndarray  # (N,)
    positions: np.ndarray  # (N, 2), area frame
    headings: np.ndarray  # (N,)

    def __len__(self):
        return len(self.times)

    @property
    def duration(self) -> float:
        """Covered time span; one frame period past the last sample."""
        if len(self.times) < 2:
            return 0.0 if len(self.times) == 0 else float("inf")
        return float(self.times[-1] + (self.times[1] - self.times[0]))

    def position_at(self, t) -> np.ndarray:
        """Linearly interpolated area-frame position(s) at time(s) ``t``."""
        t = np.asarray(t, dtype=np.float64)
        x = np.interp(t, self.times, self.positions[:, 0])
        y = np.interp(t, self.times, self.positions[:, 1])
        return np.stack([x, y], axis=-1)

    def heading_at(self, t) -> float:
        i = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1))
        return float(self.headings[i])


def to_rig(xy_area, config: SceneConfig) -> np.ndarray:
    return np.asarray(xy_area, dtype=np.float64) - config.rig_center


def generate_trajectory(config: SceneConfig, duration: float, seed: int | None = None) -> Trajectory:
    """Bounded random walk sampled at the camera frame rate.

    Speed follows a clipped mean-reverting process below ``max_speed``;
    heading drifts randomly and reflects off the area walls.
    """
    if not duration > 0:
        raise ConfigurationError(f"duration must be positive, got {duration}")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    n = int(round(duration * config.frame_rate))
    dt = 1.0 / config.frame_rate
    margin = max(config.person_dims[:2]) / 2.0
    lo = np.array([margin, margin])
    hi = np.array(config.area_extent[:2]) - margin
    if np.any(hi <= lo):
        raise ConfigurationError("area too small for the person footprint")

    cruise = 0.6 * config.max_speed
    pos = rng.uniform(lo, hi)
    heading = rng.uniform(-np.pi, np.pi)
    speed = cruise
    positions = np.empty((n, 2))
    headings = np.empty(n)
    for i in range(n):
        positions[i] = pos
        headings[i] = heading
        speed += 0.5 * (cruise - speed) * dt + 0.4 * math.sqrt(dt) * rng.normal()
        speed = float(np.clip(speed, 0.2 * config.max_speed, 0.95 * config.max_speed))
        heading += 1.2 * math.sqrt(dt) * rng.normal()
        step = speed * dt * np.array([math.cos(heading), math.sin(heading)])
        new = pos + step
        # mirror at the walls; a fold never lengthens the step
        for k in range(2):
            if new[k] < lo[k]:
                new[k] = 2 * lo[k] - new[k]
                step[k] = -step[k]
            elif new[k] > hi[k]:
                new[k] = 2 * hi[k] - new[k]
                step[k] = -step[k]
        new = np.clip(new, lo, hi)
        heading = math.atan2(step[1], step[0])
        pos = new
    times = np.arange(n) * dt
    return Trajectory(times, positions, wrap_angle(headings))


# --- audio -----------------------------------------------------------------


@dataclass(frozen=True)
class Footstep:
    time: float
    position: np.ndarray  # rig frame (x, y, z)
    gain: float
    freqs: np.ndarray
    phases: np.ndarray
    weights: np.ndarray


def footstep_pulse(t, freqs, phases, weights) -> np.ndarray:
    """Band-limited, exponentially decaying 10 ms pulse evaluated at ``t``.

    ``t`` is relative to the pulse onset.  The pulse is zero outside
    ``[0, PULSE_DURATION_S)``.
    """
    t = np.asarray(t, dtype=np.float64)
    inside = (t >= 0) & (t < PULSE_DURATION_S)
    tt = np.where(inside, t, 0.0)
    attack = np.where(tt < PULSE_ATTACK_S, 0.5 - 0.5 * np.cos(np.pi * tt / PULSE_ATTACK_S), 1.0)
    env = attack * np.exp(-tt / PULSE_DECAY_S)
    carrier = np.zeros_like(tt)
    for f, p, w in zip(freqs, phases, weights):
        carrier += w * np.sin(2 * np.pi * f * tt + p)
    return np.where(inside, env * carrier, 0.0)


def _pulse_params(rng):
    freqs = rng.uniform(*PULSE_BAND_HZ, size=PULSE_PARTIALS)
    phases = rng.uniform(0, 2 * np.pi, size=PULSE_PARTIALS)
    weights = rng.uniform(0.5, 1.0, size=PULSE_PARTIALS)
    # normalize to unit peak on a fine grid
    grid = np.linspace(0, PULSE_DURATION_S, 4001)[:-1]
    weights = weights / np.max(np.abs(footstep_pulse(grid, freqs, phases, weights)))
    return freqs, phases, weights


def footstep_events(traj: Trajectory, config: SceneConfig) -> list[Footstep]:
    """Footstep schedule for a trajectory: one step per interval, mild jitter."""
    if len(traj) == 0:
        raise ConfigurationError("trajectory is empty")
    rng = np.random.default_rng([config.seed, 1])
    interval = config.step_interval_s
    span = traj.duration if len(traj) > 1 else interval
    steps = []
    t = rng.uniform(0, interval)
    while t < span:
        xy = to_rig(traj.position_at(t), config)
        freqs, phases, weights = _pulse_params(rng)
        steps.append(Footstep(
            time=float(t),
            position=np.array([xy[0], xy[1], config.source_height]),
            gain=float(rng.uniform(0.85, 1.15)),
            freqs=freqs, phases=phases, weights=weights,
        ))
        t += interval * float(rng.uniform(0.9, 1.1))
    return steps


def noise_sigma(config: SceneConfig) -> float:
    """White-noise std giving ``noise_snr_db`` against the pulse power at 1 m."""
    if math.isinf(config.noise_snr_db) and config.noise_snr_db > 0:
        return 0.0
    rng = np.random.default_rng([config.seed, 3])
    freqs, phases, weights = _pulse_params(rng)
    t = np.arange(int(PULSE_DURATION_S * config.sample_rate)) / config.sample_rate
    ref = config.footstep_amplitude * footstep_pulse(t, freqs, phases, weights)
    p_signal = float(np.mean(ref ** 2))
    return math.sqrt(p_signal / 10 ** (config.noise_snr_db / 10.0))


def total_samples(traj: Trajectory, config: SceneConfig) -> int:
    return int(round(len(traj) / config.frame_rate * config.sample_rate))


def synthesize_audio(traj: Trajectory, config: SceneConfig, start: int = 0,
                     stop: int | None = None, steps: list[Footstep] | None = None) -> np.ndarray:
    """Render the 4-channel microphone signals, shape ``(4, stop - start)``.

    Each footstep reaches microphone ``m`` after ``distance / c`` seconds with
    amplitude ``footstep_amplitude * gain / distance``.  Delays are applied
    exactly by evaluating the pulse in continuous time.  Noise is drawn in
    fixed one-second blocks so any ``[start, stop)`` window is identical to
    the same slice of the full render.
    """
    if len(traj) == 0:
        raise ConfigurationError("trajectory is empty")
    fs = config.sample_rate
    n_total = total_samples(traj, config)
    stop = n_total if stop is None else min(stop, n_total)
    if not 0 <= start <= stop:
        raise ConfigurationError(f"bad sample range [{start}, {stop})")
    if steps is None:
        steps = footstep_events(traj, config)
    mics = config.mics
    out = np.zeros((4, stop - start), dtype=np.float64)
    pulse_len = int(math.ceil(PULSE_DURATION_S * fs)) + 2
    clamped = 0
    for st in steps:
        dist = np.linalg.norm(mics - st.position, axis=1)
        if np.any(dist < MIN_SOURCE_DISTANCE):
            clamped += 1
            dist = np.maximum(dist, MIN_SOURCE_DISTANCE)
        for m in range(4):
            arrival = st.time + dist[m] / config.speed_of_sound
            n0 = int(math.floor(arrival * fs))
            lo, hi = max(n0, start), min(n0 + pulse_len, stop)
            if lo >= hi:
                continue
            n = np.arange(lo, hi)
            amp = config.footstep_amplitude * st.gain / dist[m]
            out[m, lo - start:hi - start] += amp * footstep_pulse(n / fs - arrival, st.freqs, st.phases, st.weights)
    if clamped:
        warnings.warn(f"{clamped} footstep(s) within {MIN_SOURCE_DISTANCE} m of a microphone; "
                      "distance clamped", SimulationWarning, stacklevel=2)

    sigma = noise_sigma(config)
    if sigma > 0 and stop > start:
        block = int(NOISE_BLOCK_S * fs)
        for b in range(start // block, (stop - 1) // block + 1):
            rng = np.random.default_rng([config.seed, 2, b])
            noise = rng.normal(0.0, sigma, size=(4, block))
            b0 = b * block
            lo, hi = max(b0, start), min(b0 + block, stop)
            out[:, lo - start:hi - start] += noise[:, lo - b0:hi - b0]
    return out


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def from_pcm16(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32) / 32768.0


# --- camera ----------------------------------------------------------------

WALL_COLOR = np.array([0.55, 0.60, 0.65])
FLOOR_COLOR = np.array([0.42, 0.40, 0.36])
SHIRT_COLOR = np.array([0.85, 0.25, 0.20])
PANTS_COLOR = np.array([0.15, 0.20, 0.55])
SKIN_COLOR = np.array([0.90, 0.75, 0.60])


def focal_length_px(config: SceneConfig) -> float:
    return (config.image_size[0] / 2.0) / math.tan(math.radians(config.camera_hfov) / 2.0)


def project_person(xy_rig, config: SceneConfig):
    """Pixel bounds ``(u0, u1, v0, v1)`` of the person billboard, or None.

    None means the person is behind (or on) the image plane.
    """
    cam = np.asarray(config.camera_position)
    fwd = np.array([math.cos(config.camera_yaw), math.sin(config.camera_yaw)])
    right = np.array([fwd[1], -fwd[0]])
    rel = np.asarray(xy_rig, dtype=np.float64) - cam[:2]
    depth = float(rel @ fwd)
    if depth < 0.05:
        return None
    lateral = float(rel @ right)
    f = focal_length_px(config)
    w_img, h_img = config.image_size
    half_w = config.person_dims[1] / 2.0
    height = config.person_dims[2]
    u0 = w_img / 2.0 + f * (lateral - half_w) / depth
    u1 = w_img / 2.0 + f * (lateral + half_w) / depth
    v0 = h_img / 2.0 + f * (cam[2] - height) / depth
    v1 = h_img / 2.0 + f * cam[2] / depth
    return u0, u1, v0, v1


def render_frame(traj: Trajectory, t: float, config: SceneConfig, brightness: float = 1.0,
                 return_mask: bool = False):
    """Render the camera image at time ``t`` as float32 ``(H, W, 3)`` in [0, 1].

    With ``return_mask`` the boolean person silhouette is returned as well.
    """
    if not 0.0 <= brightness <= 1.0:
        raise ConfigurationError(f"brightness must lie in [0, 1], got {brightness}")
    if len(traj) and not (traj.times[0] - 1e-9 <= t <= traj.duration + 1e-9):
        raise ConfigurationError(f"t={t} outside trajectory span")
    w_img, h_img = config.image_size
    img = np.empty((h_img, w_img, 3))
    horizon = h_img / 2.0
    rows = np.arange(h_img) + 0.5
    img[rows < horizon] = WALL_COLOR
    img[rows >= horizon] = FLOOR_COLOR
    mask = np.zeros((h_img, w_img), dtype=bool)

    bounds = project_person(to_rig(traj.position_at(t), config), config)
    if bounds is not None:
        u0, u1, v0, v1 = bounds
        cols = np.arange(w_img) + 0.5
        col_in = (cols >= u0) & (cols < u1)
        row_in = (rows >= v0) & (rows < v1)
        mask = row_in[:, None] & col_in[None, :]
        if mask.any():
            # head / shirt / pants bands with horizontal stripes
            rel = (rows - v0) / max(v1 - v0, 1e-9)
            tex = np.where(rel < 0.13, 0, np.where(rel < 0.55, 1, 2))
            palette = np.stack([SKIN_COLOR, SHIRT_COLOR, PANTS_COLOR])
            stripe = 1.0 - 0.25 * (np.floor(rel * 24) % 2)
            row_color = palette[tex] * stripe[:, None]
            img = np.where(mask[..., None], row_color[:, None, :], img)
    img = (img * brightness).astype(np.float32)
    if return_mask:
        return img, mask
    return img


# --- dataset ---------------------------------------------------------------


def ground_truth_box(traj: Trajectory, t: float, config: SceneConfig) -> Box3D:
    xy = to_rig(traj.position_at(t), config)
    l, w, h = config.person_dims
    return Box3D((xy[0], xy[1], h / 2.0), (l, w, h), traj.heading_at(t))


def _round(v, nd=6):
    return [round(float(x), nd) for x in v]


def generate_dataset(config: SceneConfig, duration: float, out_path) -> dict:
    """Write a synchronized synthetic recording under ``out_path``.

    Layout::

        manifest.json   per-frame records and the audio entry
        audio.wav       4-channel S16LE PCM, one continuous stream
        frames/NNNNNN.png
        masks/NNNNNN.png

    Returns the manifest dict.
    """
    out = Path(out_path)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    traj = generate_trajectory(config, duration)
    steps = footstep_events(traj, config)
    n_audio = total_samples(traj, config)
    fs = config.sample_rate
    with wave.open(str(out / "audio.wav"), "wb") as wf:
        wf.setnchannels(4)
        wf.setsampwidth(2)
        wf.setframerate(fs)
        chunk = 10 * fs
        for s0 in range(0, n_audio, chunk):
            block = synthesize_audio(traj, config, s0, min(s0 + chunk, n_audio), steps=steps)
            wf.writeframes(to_pcm16(block.T).tobytes())

    frames = []
    for i, t in enumerate(traj.times):
        img, mask = render_frame(traj, float(t), config, return_mask=True)
        name = f"{i:06d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out / "frames" / name)
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / "masks" / name)
        box = ground_truth_box(traj, float(t), config)
        frames.append({
            "index": i,
            "timestamp": round(float(t), 6),
            "image": f"frames/{name}",
            "mask": f"masks/{name}",
            "box3d": {"center": _round(box.center), "size": _round(box.size), "yaw": round(box.yaw, 6)},
            "in_fov": bool(mask.any()),
            "position_area": _round(traj.positions[i]),
        })

    manifest = {
        "version": MANIFEST_VERSION,
        "source": {"kind": "simulator", "seed": config.seed},
        "duration": float(duration),
        "frame_rate": config.frame_rate,
        "config": config.to_dict(),
        "audio": {"file": "audio.wav", "sample_rate": fs, "channels": 4,
                  "sample_format": "S16LE", "num_samples": n_audio},
        "frames": frames,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    log.info("wrote %d frames and %d audio samples to %s", len(frames), n_audio, out)
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        return json.load(fh)
