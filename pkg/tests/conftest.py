import numpy as np
import pytest

from pedfusion.simulator import SceneConfig, Trajectory


def stationary(config: SceneConfig, xy_rig, duration: float = 1.0) -> Trajectory:
    """Trajectory that stands still at ``xy_rig`` (rig frame)."""
    n = int(round(duration * config.frame_rate))
    times = np.arange(n) / config.frame_rate
    pos = np.tile(np.asarray(xy_rig, dtype=np.float64) + config.rig_center, (n, 1))
    return Trajectory(times, pos, np.zeros(n))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 24 s simulated recording shared by ingest/teacher/cli tests."""
    from pedfusion.simulator import generate_dataset
    out = tmp_path_factory.mktemp("sim24")
    cfg = SceneConfig(seed=3)
    manifest = generate_dataset(cfg, 24.0, out)
    return out, manifest, cfg


@pytest.fixture(scope="session")
def small_store(small_dataset, tmp_path_factory):
    from pedfusion.ingest import preprocess
    root, _, _ = small_dataset
    return preprocess(root, tmp_path_factory.mktemp("store24"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
