"""Command line: make-data, train, eval, infer, visualize, flops.

Relative output paths are resolved under ``$GAZEOBJ_OUTPUT`` when it is set.
Exit codes: 0 success, 1 unexpected error, 2 configuration error, 3 data
error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, RunConfig, load_config

OUTPUT_ENV = "GAZEOBJ_OUTPUT"

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("gazeobj")


class DataError(Exception):
    pass


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_samples(path, limit=None):
    from .data import read_dataset

    if path is None:
        raise ConfigError("no dataset path given")
    try:
        samples = []
        for s in read_dataset(path):
            samples.append(s)
            if limit is not None and len(samples) >= limit:
                break
    except (ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"dataset {path} is empty")
    return samples


def _load_model(path):
    from .training import model_from_checkpoint

    try:
        return model_from_checkpoint(path)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2) + "\n")
    tmp.replace(path)


# -- subcommands -------------------------------------------------------------

def cmd_make_data(args) -> int:
    from .data import SceneSpec, dataset_digest, write_dataset

    try:
        spec = SceneSpec(image_size=args.image_size, grid=args.grid,
                         num_classes=args.num_classes, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    root = write_dataset(spec, args.n, output_path(args.out))
    print(json.dumps({"path": str(root), "samples": args.n, "digest": dataset_digest(root)}))
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    over = {k: getattr(args, k) for k in ("train_data", "val_data", "output_dir", "max_steps", "seed")
            if getattr(args, k, None) is not None}
    return replace(cfg, **over) if over else cfg


def cmd_train(args) -> int:
    from .pipeline import evaluate
    from .training import Trainer, jsonl_logger, smoothed

    if args.resume:
        from .training import load_checkpoint

        try:
            cfg = RunConfig.from_dict(load_checkpoint(args.resume)["config"])
        except (FileNotFoundError, ValueError) as exc:
            raise DataError(f"cannot resume from {args.resume}: {exc}") from exc
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("train needs --config or --resume")
    cfg = _apply_overrides(cfg, args)
    out = output_path(cfg.output_dir)
    samples = _load_samples(cfg.train_data)
    log_fn = jsonl_logger(out / "train_log.jsonl")
    if args.resume:
        trainer = Trainer.resume(args.resume, samples, log_fn)
        trainer.cfg = cfg
    else:
        trainer = Trainer(cfg, samples, log_fn)
    _write_json(out / "config.json", cfg.to_dict())
    trainer.fit(checkpoint_dir=out)
    summary = {"steps": trainer.step, "final_loss": smoothed(trainer.history, "total"),
               "checkpoint": str(out / "last.pt")}
    if cfg.val_data:
        report, _ = evaluate(trainer.model, _load_samples(cfg.val_data), sigma=cfg.sigma,
                             conf_threshold=cfg.conf_threshold, nms_threshold=cfg.nms_threshold,
                             top_k=cfg.top_k)
        _write_json(out / "report.json", report.to_dict())
        summary["report"] = report.to_dict()
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import write_records
    from .pipeline import evaluate

    model, cfg = _load_model(args.checkpoint)
    samples = _load_samples(args.data, args.limit)
    report, preds = evaluate(model, samples, sigma=cfg.sigma, conf_threshold=cfg.conf_threshold,
                             nms_threshold=cfg.nms_threshold, top_k=cfg.top_k)
    out = output_path(args.out)
    _write_json(out / "report.json", report.to_dict())
    write_records(out / "predictions.jsonl", [p.to_record(s.image_id) for s, p in zip(samples, preds)])
    print(report.to_json())
    return EXIT_OK


def cmd_infer(args) -> int:
    from PIL import Image

    from .pipeline import infer, save_heatmap_png

    model, cfg = _load_model(args.checkpoint)
    try:
        with Image.open(args.image) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"cannot read image {args.image}: {exc}") from exc
    try:
        res = infer(model, image, args.head_box, conf_threshold=cfg.conf_threshold,
                    nms_threshold=cfg.nms_threshold, top_k=cfg.top_k)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    gaze = res["gaze_object"]
    record = {"image": str(args.image), "boxes": [b.to_dict() for b in res["boxes"]],
              "gaze_object": gaze.to_dict() if gaze is not None else None}
    if args.out:
        out = output_path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_heatmap_png(res["heatmap"], out / "heatmap.png")
        _write_json(out / "inference.json", record)
    print(json.dumps(record))
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .pipeline import visualize

    model, cfg = _load_model(args.checkpoint)
    samples = _load_samples(args.data, args.index + 1)
    if args.index >= len(samples):
        raise DataError(f"dataset has {len(samples)} samples, index {args.index} requested")
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    visualize(model, samples[args.index], out, args.panel_size, conf_threshold=cfg.conf_threshold,
              nms_threshold=cfg.nms_threshold, top_k=cfg.top_k)
    print(json.dumps({"path": str(out)}))
    return EXIT_OK


def cmd_flops(args) -> int:
    from .defocus import flop_count_json
    from .model import model_flop_count

    if args.stages:
        try:
            text = Path(args.stages).read_text()
            print(flop_count_json(text))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read stage list {args.stages}: {exc}") from exc
        return EXIT_OK
    base = load_config(args.config).model if args.config else ModelConfig()
    single = replace(base, upsample="defocus", num_det_heads=1)
    variants = {"defocus": single, "interpolate": replace(single, upsample="interpolate"),
                "three_heads": replace(single, num_det_heads=3)}
    totals = {k: model_flop_count(v)["total_macs"] for k, v in variants.items()}
    print(json.dumps({"total_macs": totals,
                      "defocus_cheaper": totals["defocus"] < totals["interpolate"],
                      "single_head_cheaper": totals["defocus"] < totals["three_heads"]}, indent=2))
    return EXIT_OK


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gazeobj", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, default=8)
    s.add_argument("--image-size", type=int, default=224)
    s.add_argument("--num-classes", type=int, default=24)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="train from a TOML/JSON config")
    s.add_argument("--config")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--train-data", dest="train_data")
    s.add_argument("--val-data", dest="val_data")
    s.add_argument("--output-dir", dest="output_dir")
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint, write report.json")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="eval")
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="predict boxes, heatmap and gaze object for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--head-box", dest="head_box", type=float, nargs=4, required=True,
                   metavar=("X1", "Y1", "X2", "Y2"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("visualize", help="render the four-panel figure for one sample")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--panel-size", dest="panel_size", type=int, default=224)
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("flops", help="MAC counts of a stage list or of model variants")
    s.add_argument("--stages", help="JSON stage list")
    s.add_argument("--config", help="config whose model section is compared")
    s.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import TrainingDiverged

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error[diverged]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
