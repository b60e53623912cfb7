"""Command-line surface: train, render, eval, remove, extract, info, make-toy.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Config precedence for training keys: built-in defaults < config file
(line-oriented ``key = value``) < command-line flags. The SPLAT_THREADS
environment variable caps the worker count for multi-frame rendering.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataset import (
    DEFAULT_HOLDOUT_EVERY,
    camera_from_colmap,
    load_dataset,
    save_image_rgb,
    save_mask,
)
from .colmap_io import parse_colmap
from .edit import assign_classes, export_ply, extract_classes, import_ply, remove_classes
from .exceptions import DataError, NumericalError, SplatError
from .metrics import EvalReport, miou, psnr, ssim
from .optim import TrainConfig, save_optim_state, train
from .raster import rasterize_forward, render_label_map
from .scene import ClassTable, GaussianSet, class_probs, init_from_points
from .toy import make_toy


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


class _OutputLock:
    """Guards an output directory against concurrent writers."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".semsplat.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def worker_count(num_tasks: int) -> int:
    cap = os.environ.get("SPLAT_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, num_tasks))


def parse_config_file(path) -> dict[str, str]:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise DataError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, value = text.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _parse_background(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise DataError(f"background must be three numbers, got {text!r}")
    return tuple(float(p) for p in parts)


_CONFIG_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def build_train_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        file_values = parse_config_file(args.config)
        overrides = {}
        for key, raw in file_values.items():
            if key == "background":
                overrides[key] = _parse_background(raw)
            elif key in _CONFIG_FIELD_TYPES:
                kind = _CONFIG_FIELD_TYPES[key]
                overrides[key] = int(raw) if kind in (int, "int") else float(raw)
            elif key == "holdout_every":
                continue  # consumed by the dataset loader
            else:
                raise DataError(f"unknown config key {key!r} in {args.config}")
        config = config.replace(**overrides)
    flag_map = {
        "iters": "iterations",
        "seed": "seed",
        "sh_degree": "sh_degree",
        "lambda_ssim": "lambda_ssim",
        "lambda_sem": "lambda_sem",
        "densify_start": "densify_start",
        "densify_stop": "densify_stop",
        "densify_interval": "densify_interval",
        "densify_grad_threshold": "densify_grad_threshold",
        "opacity_reset_interval": "opacity_reset_interval",
        "checkpoint_interval": "checkpoint_interval",
    }
    overrides = {}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "background", None) is not None:
        overrides["background"] = _parse_background(args.background)
    return config.replace(**overrides)


def _holdout_every(args) -> int:
    if args.holdout_every is not None:
        return args.holdout_every
    if args.config:
        file_values = parse_config_file(args.config)
        if "holdout_every" in file_values:
            return int(file_values["holdout_every"])
    return DEFAULT_HOLDOUT_EVERY


def _resolve_class_ids(names_or_ids, table: ClassTable | None, num_classes: int) -> set[int]:
    ids = set()
    for item in names_or_ids:
        for token in item.split(","):
            token = token.strip()
            if not token:
                continue
            if token.isdigit():
                cid = int(token)
                if cid >= num_classes:
                    raise DataError(f"class id {cid} outside 0..{num_classes - 1}")
                ids.add(cid)
            elif table is not None:
                try:
                    ids.add(table.id_of(token))
                except KeyError as exc:
                    raise DataError(str(exc)) from None
            else:
                raise DataError(
                    f"class {token!r} cannot be resolved: checkpoint has no embedded class table"
                )
    return ids


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    config = build_train_config(args)
    dataset = load_dataset(data_dir, holdout_every=_holdout_every(args))

    with _OutputLock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        xyz, rgb = dataset.sparse.point_cloud()
        gs = init_from_points(xyz, rgb, dataset.classes.num_classes, sh_degree=config.sh_degree)
        extent = dataset.scene_extent()
        print(
            f"training {gs.count} initial Gaussians, {len(dataset.split.train)} train / "
            f"{len(dataset.split.test)} test frames, extent {extent:.3f}"
        )

        def progress(it, entry):
            if it % max(1, config.iterations // 10) == 0 or it == config.iterations:
                print(
                    f"iter {it:6d}  total {entry['total']:.5f}  l1 {entry['l1']:.5f}  "
                    f"ce {entry['ce']:.5f}  gaussians {entry['count']}"
                )

        result = train(
            dataset.split, gs, config, extent,
            class_table=dataset.classes,
            checkpoint_dir=out_dir if config.checkpoint_interval else None,
            progress=progress,
        )

        export_ply(result.gaussians, out_dir / "final.ply", dataset.classes)
        save_optim_state(result.state, out_dir / "final.optim")
        with open(out_dir / "loss_curve.csv", "w") as fh:
            fh.write("iteration,frame,l1,dssim,ce,total,count\n")
            for row in result.log:
                fh.write(
                    f"{row['iteration']},{row['frame']},{row['l1']!r},{row['dssim']!r},"
                    f"{row['ce']!r},{row['total']!r},{row['count']}\n"
                )

        if dataset.split.test:
            report = _evaluate(result.gaussians, dataset.split.test, dataset.classes, config.background)
            _write_report(report, out_dir)
            print(f"held-out: psnr {report.mean_psnr:.2f} dB  ssim {report.mean_ssim:.4f}  miou {report.miou:.4f}")
        else:
            print("no held-out frames; skipping evaluation")
    return 0


def _render_frames(gs: GaussianSet, cameras, background):
    def render_one(camera):
        return rasterize_forward(gs, camera, background)

    if len(cameras) <= 1 or worker_count(len(cameras)) == 1:
        return [render_one(c) for c in cameras]
    with ThreadPoolExecutor(max_workers=worker_count(len(cameras))) as pool:
        return list(pool.map(render_one, cameras))


def _evaluate(gs: GaussianSet, frames, classes: ClassTable, background) -> EvalReport:
    outputs = _render_frames(gs, [f.camera for f in frames], background)
    report = EvalReport(class_names=list(classes.names))
    preds, gts = [], []
    for frame, output in zip(frames, outputs):
        report.frame_names.append(frame.name)
        report.psnr_values.append(psnr(output.rgb, frame.rgb))
        report.ssim_values.append(ssim(output.rgb, frame.rgb))
        preds.append(render_label_map(output, classes.ignore_label).ravel())
        gts.append(frame.mask.ravel())
    per_class, mean = miou(
        np.concatenate(preds), np.concatenate(gts), classes.num_classes, classes.ignore_label
    )
    report.per_class_iou = per_class
    report.miou = mean
    return report


def _write_report(report: EvalReport, out_dir: Path) -> None:
    (out_dir / "eval.txt").write_text(report.to_table())
    (out_dir / "eval.kv").write_text(report.to_kv())


def _load_checkpoint(path, num_classes=None):
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    return import_ply(path, num_classes=num_classes)


def _apply_edits(gs: GaussianSet, table: ClassTable | None, args) -> GaussianSet:
    if getattr(args, "remove", None):
        gs = remove_classes(gs, _resolve_class_ids(args.remove, table, gs.num_classes))
    if getattr(args, "extract", None):
        gs = extract_classes(gs, _resolve_class_ids(args.extract, table, gs.num_classes))
    return gs


def cmd_render(args) -> int:
    gs, table = _load_checkpoint(args.checkpoint)
    gs = _apply_edits(gs, table, args)
    background = _parse_background(args.background) if args.background else (0.0, 0.0, 0.0)

    data_root = Path(args.data)
    sparse_dir = data_root / "sparse" / "0" if (data_root / "sparse").exists() else data_root
    model = parse_colmap(sparse_dir)
    image_ids = sorted(model.images)
    cameras = [camera_from_colmap(model, iid) for iid in image_ids]
    names = [Path(model.images[iid].name).stem for iid in image_ids]

    out_dir = Path(args.out)
    with _OutputLock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = _render_frames(gs, cameras, background)
        for name, output in zip(names, outputs):
            save_image_rgb(out_dir / f"{name}.png", output.rgb)
            if args.labels:
                ignore = table.ignore_label if table else 255
                save_mask(out_dir / f"{name}_labels.png", render_label_map(output, ignore))
    print(f"rendered {len(cameras)} views to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    gs, table = _load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, holdout_every=args.holdout_every or DEFAULT_HOLDOUT_EVERY)
    frames = dataset.split.test if args.split == "test" else dataset.split.train
    if not frames:
        raise DataError(
            "test split is empty; lower --holdout-every so at least one frame is held out"
        )
    classes = table or dataset.classes
    background = _parse_background(args.background) if args.background else (0.0, 0.0, 0.0)
    report = _evaluate(gs, frames, classes, background)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_report(report, out_dir)
    print(report.to_table())
    return 0


def cmd_remove(args) -> int:
    gs, table = _load_checkpoint(args.checkpoint)
    ids = _resolve_class_ids(args.classes, table, gs.num_classes)
    edited = remove_classes(gs, ids, min_confidence=args.min_confidence)
    export_ply(edited, args.out, table)
    print(f"kept {edited.count}/{gs.count} Gaussians after removing classes {sorted(ids)}")
    return 0


def cmd_extract(args) -> int:
    gs, table = _load_checkpoint(args.checkpoint)
    ids = _resolve_class_ids(args.classes, table, gs.num_classes)
    edited = extract_classes(gs, ids)
    export_ply(edited, args.out, table)
    print(f"kept {edited.count}/{gs.count} Gaussians for classes {sorted(ids)}")
    return 0


def cmd_info(args) -> int:
    gs, table = _load_checkpoint(args.checkpoint)
    print(f"gaussians: {gs.count}")
    print(f"sh degree: {gs.max_sh_degree}")
    print(f"classes:   {gs.num_classes}")
    if gs.count:
        assignment = assign_classes(gs)
        counts = np.bincount(assignment.class_ids, minlength=gs.num_classes)
        probs = class_probs(gs.semantic_logits)
        for cid in range(gs.num_classes):
            name = table.names[cid] if table else f"class {cid}"
            mean_conf = float(probs[assignment.class_ids == cid].max(axis=1).mean()) if counts[cid] else 0.0
            print(f"  {cid:3d} {name:<20} {counts[cid]:8d} gaussians  mean confidence {mean_conf:.3f}")
    return 0


def cmd_make_toy(args) -> int:
    out = make_toy(args.out, seed=args.seed, num_views=args.views, image_size=args.size)
    print(f"toy dataset written to {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="semsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a scene from a dataset directory")
    p.add_argument("--data", required=True, help="dataset root (images/, masks/, sparse/0/, classes.txt)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sh-degree", dest="sh_degree", type=int)
    p.add_argument("--lambda-ssim", dest="lambda_ssim", type=float)
    p.add_argument("--lambda-sem", dest="lambda_sem", type=float)
    p.add_argument("--densify-start", dest="densify_start", type=int)
    p.add_argument("--densify-stop", dest="densify_stop", type=int)
    p.add_argument("--densify-interval", dest="densify_interval", type=int)
    p.add_argument("--densify-grad-threshold", dest="densify_grad_threshold", type=float)
    p.add_argument("--opacity-reset-interval", dest="opacity_reset_interval", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--holdout-every", dest="holdout_every", type=int)
    p.add_argument("--background", help="background color, e.g. '0,0,0'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render checkpoint views for a camera set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root or COLMAP model directory")
    p.add_argument("--out", required=True)
    p.add_argument("--remove", action="append", default=[], help="class names/ids to remove (repeatable)")
    p.add_argument("--extract", action="append", default=[], help="class names/ids to keep (repeatable)")
    p.add_argument("--labels", action="store_true", help="also write label-map PNGs")
    p.add_argument("--background")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--holdout-every", dest="holdout_every", type=int)
    p.add_argument("--background")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("remove", help="remove semantic classes from an asset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", action="append", required=True, help="class names/ids (repeatable or comma-separated)")
    p.add_argument("--min-confidence", dest="min_confidence", type=float)
    p.set_defaults(func=cmd_remove)

    p = sub.add_parser("extract", help="keep only the listed semantic classes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", action="append", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("info", help="inspect a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("make-toy", help="generate the synthetic verification dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_make_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
