"""Command-line entry point: simulate, preprocess, train, eval, infer, viz, ablation.

Every subcommand takes ``--seed`` (default 7) and ``--config``, a YAML or
JSON file with optional ``scene``, ``ingest``, ``model`` and ``train``
sections mirroring the config dataclasses.  Command-line flags override
the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

DEFAULT_SEED = 7

log = logging.getLogger("pedfusion")


def load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    unknown = set(data) - {"scene", "ingest", "model", "train"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return data


def _scene_config(args, cfg):
    from .simulator import SceneConfig
    return SceneConfig.from_dict({**cfg.get("scene", {}), "seed": args.seed})


def _train_config(args, cfg):
    from .pipeline import TrainConfig
    d = dict(cfg.get("train", {}))
    d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    if getattr(args, "no_attention", False):
        d["enable_detection_loss"] = False
    if getattr(args, "no_segmentation", False):
        d["enable_segmentation_loss"] = False
    if getattr(args, "gating", None):
        d["gating_mode"] = args.gating
    if getattr(args, "zero_audio", False):
        d["zero_audio"] = True
    return TrainConfig.from_dict(d)


def _model_config(cfg, train_cfg):
    from .model import ModelConfig
    return train_cfg.model_config(ModelConfig.from_dict(cfg.get("model", {})))


def cmd_simulate(args, cfg):
    from .simulator import generate_dataset
    manifest = generate_dataset(_scene_config(args, cfg), args.duration, args.out)
    print(f"wrote {len(manifest['frames'])} frames, {manifest['audio']['num_samples']} audio samples "
          f"to {args.out}")


def cmd_preprocess(args, cfg):
    from .ingest import IngestConfig, preprocess
    from .teacher import ExternalTeacher
    icfg = IngestConfig(**{**cfg.get("ingest", {}), "seed": args.seed})
    teacher = ExternalTeacher(args.teacher_labels) if args.teacher_labels else None
    store = preprocess(args.data, args.out, teacher=teacher, config=icfg)
    counts = store.meta["counts"]
    print(f"{len(store)} samples ({len(store.subset('train'))} train / {len(store.subset('val'))} val); "
          f"{counts}")


def cmd_train(args, cfg):
    from .ingest import SampleStore
    from .pipeline import build_model, train
    tcfg = _train_config(args, cfg)
    store = SampleStore(args.data)
    model = build_model(_model_config(cfg, tcfg), seed=args.seed)
    out = Path(args.out)

    def progress(rec):
        val = rec.get("val", {})
        print(f"epoch {rec['epoch']}: L_t={rec['L_t']:.4f} L_r={rec['L_r']:.4f} "
              f"AP@Ave={val.get('ap_ave', float('nan')):.3f} Dx={val.get('Dx', float('nan')):.2f} "
              f"Dy={val.get('Dy', float('nan')):.2f}", flush=True)

    ckpt, _ = train(model, store.subset("train"), store.subset("val"), tcfg, out_dir=out, progress=progress)
    with open(out / "config.json", "w") as fh:
        json.dump({"train": tcfg.to_dict(), "model": ckpt.model_config.to_dict()}, fh, indent=1)
    print(f"best epoch {ckpt.meta.get('epoch')}; checkpoint at {out / 'checkpoint.npz'}")


def cmd_eval(args, cfg):
    from .evaluation import condition, evaluate, format_table, mean_position_baseline, write_reports
    from .ingest import SampleStore
    from .pipeline import load_checkpoint
    store = SampleStore(args.data)
    data = store.subset(args.split)
    ckpt = load_checkpoint(args.checkpoint)
    zero = bool(ckpt.meta.get("train_config", {}).get("zero_audio", False))
    conds = [condition(dark=args.dark, fov=args.fov)]
    reports = evaluate(ckpt, data, conds, approach=args.name, zero_audio=zero)
    rows = reports
    if args.baseline:
        rows = [mean_position_baseline(store.subset("train").boxes(), data,
                                       condition_name=conds[0].name)] + reports
    print(format_table(rows))
    if args.out:
        write_reports(rows, Path(args.out) / "report.json")
        (Path(args.out) / "report.txt").write_text(format_table(rows) + "\n")


def cmd_infer(args, cfg):
    from .ingest import SEGMENT_SECONDS, load_image, read_wav
    from .pipeline import infer
    rate, pcm = read_wav(args.audio)
    s0 = int(round(args.start * rate))
    n = int(round(SEGMENT_SECONDS * rate))
    if s0 < 0 or s0 + n > len(pcm):
        raise ValueError(f"window [{args.start}, {args.start + SEGMENT_SECONDS}) s lies outside the recording")
    audio = np.asarray(pcm[s0:s0 + n].T, dtype=np.float32) / 32768.0
    image = load_image(args.image)
    if args.dark:
        image = image * 0.0
    box, d_hat = infer(args.checkpoint, audio, image, sample_rate=rate)
    print(json.dumps({"box3d": box.to_dict(), "d_hat": d_hat}))


def cmd_viz(args, cfg):
    from .boxes import Box3D
    from .evaluation import visualize_bev
    from .ingest import SampleStore
    from .pipeline import as_model, predict
    store = SampleStore(args.data).subset(args.split)
    if args.sample_id:
        idx = [i for i, r in enumerate(store.records) if r.sample_id == args.sample_id]
        if not idx:
            raise ValueError(f"sample {args.sample_id} not in the {args.split} split")
        i = idx[0]
    else:
        i = args.index
    one = store.subset(predicate=lambda r, sid=store.records[i].sample_id: r.sample_id == sid)
    preds, d_hat = predict(as_model(args.checkpoint), one, brightness=0.0 if args.dark else None)
    rec = one.records[0]
    out = visualize_bev(Box3D.from_array(preds[0]), Box3D.from_dict(rec.box3d), args.out,
                        scene=_scene_config(args, cfg),
                        title=f"{rec.sample_id}  t={rec.t_center:.1f}s  D={d_hat[0]:.2f}")
    print(f"wrote {out}")


def cmd_ablation(args, cfg):
    from .evaluation import evaluate, format_ablation_table, write_reports
    from .ingest import SampleStore
    from .pipeline import ablation_configs, build_model, train
    base = _train_config(args, cfg)
    store = SampleStore(args.data)
    rows, reports = [], []
    for name, tcfg in ablation_configs(base):
        model = build_model(_model_config(cfg, tcfg), seed=args.seed)
        ckpt, _ = train(model, store.subset("train"), store.subset("val"), tcfg,
                        out_dir=Path(args.out) / name.replace(",", "_").replace("=", "-"))
        rep = evaluate(ckpt, store.subset("val"), approach=name)[0]
        rows.append((tcfg.enable_detection_loss, tcfg.enable_segmentation_loss, rep))
        reports.append(rep)
    table = format_ablation_table(rows)
    print(table)
    write_reports(reports, Path(args.out) / "ablation.json")
    (Path(args.out) / "ablation.txt").write_text(table + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("-v", "--verbose", action="store_true")

    ablate = argparse.ArgumentParser(add_help=False)
    ablate.add_argument("--epochs", type=int)
    ablate.add_argument("--gating", choices=["literal", "visual-only"])
    ablate.add_argument("--zero-audio", action="store_true", help="visual-only baseline: audio input zeroed")

    p = argparse.ArgumentParser(prog="pedfusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic recording")
    s.add_argument("--duration", type=float, default=300.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", parents=[common], help="recording -> sample store")
    s.add_argument("--data", required=True, help="simulator/recording directory")
    s.add_argument("--out", required=True)
    s.add_argument("--teacher-labels", help="external teacher label file (default: simulator oracle)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common, ablate], help="train the student")
    s.add_argument("--data", required=True, help="sample store")
    s.add_argument("--out", required=True)
    s.add_argument("--no-attention", action="store_true")
    s.add_argument("--no-segmentation", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="sample store")
    s.add_argument("--split", default="val", choices=["train", "val"])
    s.add_argument("--dark", action="store_true", help="brightness-0 images")
    s.add_argument("--fov", default="all", choices=["in", "out", "all"])
    s.add_argument("--name", default="student")
    s.add_argument("--baseline", action="store_true", help="add the mean-position baseline row")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="box for one audio window and image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--audio", required=True, help="4-channel S16LE WAV")
    s.add_argument("--start", type=float, required=True, help="window start [s]")
    s.add_argument("--image", required=True)
    s.add_argument("--dark", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("viz", parents=[common], help="bird's-eye view of one prediction")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="sample store")
    s.add_argument("--split", default="val", choices=["train", "val"])
    s.add_argument("--sample-id")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--dark", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_viz)

    s = sub.add_parser("ablation", parents=[common, ablate],
                       help="train and evaluate the four attention/segmentation variants")
    s.add_argument("--data", required=True, help="sample store")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config_file(args.config)
        args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - reported as exit status 1
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["build_parser", "main", "load_config_file"]
