"""Evaluation harness: per-condition reports, text tables and BEV plots."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box3D
from .metrics import ap_table, center_distance
from .pipeline import _record_field, as_model, dataset_boxes, predict

FOV_FILTERS = ("all", "in", "out")


@dataclass(frozen=True)
class Condition:
    name: str = "normal"
    brightness: float | None = None  # None: images as recorded
    fov: str = "all"

    def __post_init__(self):
        if self.fov not in FOV_FILTERS:
            raise ValueError(f"fov filter must be one of {FOV_FILTERS}, got {self.fov!r}")


NORMAL = Condition("normal")
DARK = Condition("dark", brightness=0.0)


def condition(dark: bool = False, fov: str = "all") -> Condition:
    base = "dark" if dark else "normal"
    name = base if fov == "all" else f"{base}/{fov}-fov"
    return Condition(name, 0.0 if dark else None, fov)


@dataclass
class EvalReport:
    approach: str
    condition: str
    ap_by_threshold: dict
    ap_ave: float
    ap_03: float
    dx: float
    dy: float
    dx_signed: float
    dy_signed: float
    n_samples: int
    mean_d_hat: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def mean_center_distance(self) -> float:
        return 0.5 * (self.dx + self.dy)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ap_by_threshold"] = {f"{t:.2f}": v for t, v in self.ap_by_threshold.items()}
        return d


def report_from_predictions(preds, gts, approach: str = "model", condition_name: str = "normal",
                            d_hat=None) -> EvalReport:
    preds, gts = np.asarray(preds, dtype=np.float64), np.asarray(gts, dtype=np.float64)
    if len(gts) == 0:
        raise ValueError("cannot evaluate an empty set")
    aps = ap_table(preds, gts)
    dx, dy = center_distance(preds, gts)
    sdx, sdy = center_distance(preds, gts, signed=True)
    return EvalReport(approach, condition_name, aps, float(np.mean(list(aps.values()))), aps[0.3],
                      dx, dy, sdx, sdy, len(gts),
                      float(np.mean(d_hat)) if d_hat is not None and len(d_hat) else float("nan"))


def filter_fov(dataset, fov: str):
    if fov == "all":
        return dataset
    want = fov == "in"
    keep = [i for i in range(len(dataset)) if bool(_record_field(dataset.get(i)[3], "in_fov")) == want]
    return _Subset(dataset, keep)


class _Subset:
    def __init__(self, base, indices):
        self.base, self.indices = base, list(indices)

    def __len__(self):
        return len(self.indices)

    def get(self, i):
        return self.base.get(self.indices[i])


def evaluate(source, dataset, conditions=(NORMAL,), approach: str = "model",
             zero_audio: bool = False) -> list[EvalReport]:
    """One report per condition for a checkpoint (path, Checkpoint or model)."""
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    model = as_model(source)
    reports = []
    for cond in conditions:
        subset = filter_fov(dataset, cond.fov)
        if len(subset) == 0:
            raise ValueError(f"no samples left for condition {cond.name!r}")
        preds, d_hat = predict(model, subset, brightness=cond.brightness, zero_audio=zero_audio)
        reports.append(report_from_predictions(preds, dataset_boxes(subset), approach, cond.name, d_hat))
    return reports


def mean_position_baseline(train_boxes, dataset, approach: str = "mean-position",
                           condition_name: str = "normal") -> EvalReport:
    """Reference predictor: every sample gets the mean training box."""
    gts = dataset_boxes(dataset)
    mean = np.asarray(train_boxes, dtype=np.float64).mean(axis=0)
    return report_from_predictions(np.tile(mean, (len(gts), 1)), gts, approach, condition_name)


def oracle_report(dataset, approach: str = "oracle") -> EvalReport:
    gts = dataset_boxes(dataset)
    return report_from_predictions(gts, gts, approach)


# --- tables ----------------------------------------------------------------

TABLE_COLUMNS = ("Approach", "Dx", "Dy", "AP@0.3", "AP@Ave")


def _pct(v: float) -> str:
    return f"{100 * v:.1f}%"


def format_table(reports, with_condition: bool = True) -> str:
    """Aligned plain-text table with the columns Approach, Dx, Dy, AP@0.3, AP@Ave."""
    header = list(TABLE_COLUMNS)
    rows = []
    for r in reports:
        name = f"{r.approach} [{r.condition}]" if with_condition else r.approach
        rows.append([name, f"{r.dx:.2f}", f"{r.dy:.2f}", _pct(r.ap_03), _pct(r.ap_ave)])
    return _align([header] + rows)


def format_ablation_table(rows) -> str:
    """``rows`` is a list of ``(attention, segmentation, EvalReport)``."""
    out = [["Attention", "Segmentation", "Dx", "Dy", "AP@Ave"]]
    for att, seg, r in rows:
        out.append(["yes" if att else "no", "yes" if seg else "no",
                    f"{r.dx:.2f}", f"{r.dy:.2f}", _pct(r.ap_ave)])
    return _align(out)


def _align(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def write_reports(reports, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1, sort_keys=True)
    return path


# --- bird's-eye view -------------------------------------------------------

GT_COLOR = "red"
PRED_COLOR = "green"


def _bev_corners(box: Box3D) -> np.ndarray:
    l, w = box.size[0], box.size[1]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2.0
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center[:2])


def visualize_bev(pred: Box3D, gt: Box3D, out_file, scene=None, title: str | None = None):
    """Top-down plot: area footprint, rig origin, mics, GT (red), prediction (green)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Polygon, Rectangle

    from .simulator import SceneConfig

    scene = scene or SceneConfig()
    out_file = Path(out_file)
    ax_x, ax_y = scene.area_extent[0], scene.area_extent[1]
    fig, ax = plt.subplots(figsize=(5, 5 * ax_y / ax_x + 0.4))
    ax.add_patch(Rectangle((-ax_x / 2, -ax_y / 2), ax_x, ax_y, fill=False, color="0.4", lw=1))
    ax.plot([0], [0], marker="+", color="k", ms=10)
    mics = scene.mics
    ax.plot(mics[:, 0], mics[:, 1], "o", color="tab:blue", ms=5, label="microphones")
    half = np.radians(scene.camera_hfov) / 2
    reach = max(ax_x, ax_y)
    cam = np.asarray(scene.camera_position[:2])
    for a in (scene.camera_yaw - half, scene.camera_yaw + half):
        ax.plot([cam[0], cam[0] + reach * np.cos(a)], [cam[1], cam[1] + reach * np.sin(a)],
                ":", color="0.6", lw=0.8)
    ax.add_patch(Polygon(_bev_corners(gt), closed=True, fill=False, edgecolor=GT_COLOR, lw=2,
                         label="ground truth"))
    ax.add_patch(Polygon(_bev_corners(pred), closed=True, fill=False, edgecolor=PRED_COLOR, lw=2,
                         label="prediction"))
    ax.set_xlim(-ax_x / 2 - 0.2, ax_x / 2 + 0.2)
    ax.set_ylim(-ax_y / 2 - 0.2, ax_y / 2 + 0.2)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    try:
        out_file.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_file, dpi=100)
    finally:
        plt.close(fig)
    return out_file
