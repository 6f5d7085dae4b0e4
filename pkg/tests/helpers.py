"""Small shared fixtures for model/pipeline/evaluation tests."""

import numpy as np

from pedfusion.model import ModelConfig
from pedfusion.pipeline import InMemorySamples, TrainConfig, build_model

TINY = ModelConfig(input_size=32, seg_grid=4, feature_dim=16, audio_channels=4, visual_channels=4,
                   head_sizes=(32, 16), detect_hidden=8, kernels_per_scale=2, pooled_bins=4,
                   backbone_channels=(4, 8, 8, 8))


def synthetic_samples(n, seed=0, size=32):
    """Random samples whose box center is a simple function of the spectrogram."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        spec = rng.random((4, 128, 17)).astype(np.float32)
        image = (rng.random((size, size, 3)) * 0.5).astype(np.float32)
        mask = np.zeros((size, size), dtype=np.float32)
        inside = i % 2 == 0
        if inside:
            mask[size // 4:size // 2, size // 4:size // 2] = 1
            image[mask > 0] = (1.0, 0.0, 0.0)
        center = [float(spec[0].mean() * 4 - 2), float(spec[1].mean() * 4 - 2), 0.85]
        rec = {"sample_id": f"s{i}", "box3d": {"center": center, "size": [0.5, 0.5, 1.7],
                                               "yaw": float(rng.uniform(-3, 3))},
               "detect": float(inside), "in_fov": inside}
        items.append((spec, image, mask, rec))
    return InMemorySamples(items)


def tiny_model(cfg=None, seed=0):
    cfg = cfg or TrainConfig()
    return build_model(cfg.model_config(TINY), seed=seed)


# one (name, passed, detail) entry per acceptance criterion, printed at session end
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []
