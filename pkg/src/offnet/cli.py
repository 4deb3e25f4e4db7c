"""``offnet`` command line: preprocess, train, eval, infer, visualize, ablate, selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant failure.
Log verbosity comes from ``OFFNET_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import __version__
from .core import DimensionError
from .dataset import (
    DatasetError,
    FormatError,
    FrameLoadError,
    FrameRecord,
    SplitManifest,
    decode_ground_truth,
    encode_prediction,
    read_png,
    resize_nearest,
    scan_dataset,
    write_png,
)
from .evaluation import SplitEvaluation, evaluate_masks
from .geometry import (
    CalibrationError,
    densify_depth,
    encode_depth_png,
    encode_normal_png,
    estimate_normals,
    project_points,
    read_calibration,
    read_point_cloud,
    write_bytes,
)
from .model import CheckpointError, ConfigError, ModelConfig, build_model, load_checkpoint, toy_config
from .preprocess import NORMAL_WINDOW
from .training import SampleCache, TrainConfig, TrainingError, fit, predict_probability

log = logging.getLogger("offnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
HEADER = f"# offnet {__version__}"
OVERLAY_COLOR = np.array([0.0, 255.0, 0.0])
OVERLAY_ALPHA = 0.5
LEGEND_HEIGHT = 16
MODEL_CONFIG_NAME = "model.cfg"


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


DATA_ERRORS = (
    DatasetError,
    FormatError,
    FrameLoadError,
    CalibrationError,
    ConfigError,
    CheckpointError,
    DimensionError,
    TrainingError,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers -------------------------------------------------------------------

def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} needs --{name.replace('_', '-')}")


def _manifest(args) -> SplitManifest:
    if not Path(args.root).is_dir():
        raise UsageError(f"dataset root {args.root} is not a directory")
    return scan_dataset(args.root, args.split_file)


def _records(args) -> list[FrameRecord]:
    records = _manifest(args).split(args.split)
    if not records:
        raise DatasetError(f"split {args.split!r} has no frames under {args.root}")
    return records


def _model_config(args) -> ModelConfig:
    """--model-config, else the config saved beside the checkpoint, else the toy network."""
    if args.model_config:
        return ModelConfig.load(args.model_config)
    if args.checkpoint:
        beside = Path(args.checkpoint).parent / MODEL_CONFIG_NAME
        if beside.is_file():
            return ModelConfig.load(beside)
    return toy_config()


def _load_model(args):
    _require(args, "checkpoint")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    cfg = _model_config(args)
    model = build_model(cfg, args.seed)
    load_checkpoint(args.checkpoint, model)
    return model


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Order-preserving map, threaded when ``jobs > 1``."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def prediction_path(out_dir: Path, record: FrameRecord) -> Path:
    return Path(out_dir) / record.sequence_id / f"{record.frame_id}.png"


def _write_report(out: Path, ev: SplitEvaluation, title: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(f"{HEADER}\n{ev.to_text(title)}")
    (out / "per_frame.csv").write_text(ev.to_csv())


# -- preprocess ------------------------------------------------------------------

def preprocess_frame(record: FrameRecord, root: Path, out: Path) -> list[Path]:
    """Sparse depth, dense depth and normals at the image's native size."""
    with Image.open(record.image_path) as img:
        width, height = img.size
    calib = read_calibration(record.calib_path)
    cloud = read_point_cloud(record.cloud_path)
    sparse = project_points(cloud, calib, width, height)
    dense = densify_depth(sparse)
    normals = estimate_normals(dense, calib, NORMAL_WINDOW)
    seq_dir = record.image_path.parent.parent
    try:
        rel = seq_dir.relative_to(root)
    except ValueError:
        rel = Path(record.sequence_id)
    written = []
    for sub, data in (
        ("sparse_depth", encode_depth_png(sparse)),
        ("dense_depth", encode_depth_png(dense)),
        ("normal", encode_normal_png(normals)),
    ):
        path = out / rel / sub / f"{record.frame_id}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_bytes(path, data)
        written.append(path)
    return written


def cmd_preprocess(args) -> int:
    _require(args, "root", "out")
    records = _manifest(args).all_records()
    root, out = Path(args.root), Path(args.out)

    def work(record):
        try:
            return preprocess_frame(record, root, out), None
        except Exception as exc:  # noqa: BLE001 - reported per frame
            return [], f"{record.name}: {exc}"

    results = _map(work, records, args.jobs)
    failures = [err for _, err in results if err]
    for err in failures:
        log.error("preprocess failed for %s", err)
    n_files = sum(len(paths) for paths, _ in results)
    print(f"preprocessed {len(records) - len(failures)}/{len(records)} frames, {n_files} rasters written to {out}")
    return EXIT_DATA if failures else EXIT_OK


# -- train / eval / infer --------------------------------------------------------------

def cmd_train(args) -> int:
    _require(args, "root")
    cfg = ModelConfig.load(args.model_config) if args.model_config else toy_config()
    tcfg = TrainConfig.load(args.train_config) if args.train_config else TrainConfig()
    changes = {"seed": args.seed}
    if args.out:
        changes["checkpoint_dir"] = args.out
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    tcfg = TrainConfig(**{**tcfg.__dict__, **changes})

    manifest = _manifest(args)
    if not manifest.train or not manifest.val:
        raise DatasetError("training needs non-empty training and validation splits")
    cache = SampleCache(cfg.input_w, cfg.input_h)
    train, val = cache.many(manifest.train), cache.many(manifest.val)
    model = build_model(cfg, tcfg.seed)
    Path(tcfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(tcfg.checkpoint_dir) / MODEL_CONFIG_NAME)
    result = fit(model, train, val, tcfg)
    print(f"best epoch {result.best_epoch}: {result.best_path}")
    return EXIT_OK


def predict_split(model, records: Sequence[FrameRecord]):
    cfg = model.config
    samples = SampleCache(cfg.input_w, cfg.input_h).many(records)
    return samples, predict_probability(model, samples)


def cmd_infer(args) -> int:
    _require(args, "root", "out")
    model = _load_model(args)
    samples, probs = predict_split(model, _records(args))
    for s, p in zip(samples, probs):
        path = prediction_path(Path(args.out), s.record)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(path, encode_prediction(p, args.threshold))
    print(f"wrote {len(samples)} prediction masks to {args.out}")
    return EXIT_OK


def _gt_at(record: FrameRecord, shape: tuple[int, int]) -> np.ndarray:
    gt = decode_ground_truth(read_png(record.gt_path))
    tri = gt.tri_class
    if tri.shape != shape:
        tri = resize_nearest(tri, *shape)
    return type(gt)(tri, gt.warnings).binary


def evaluate_prediction_dir(records: Sequence[FrameRecord], pred_dir: Path, jobs: int = 1) -> SplitEvaluation:
    """Score saved 255/0 masks against ground truth resampled to the mask size."""

    def load(record):
        path = prediction_path(pred_dir, record)
        if not path.is_file():
            raise FrameLoadError(f"missing prediction {path}")
        pred = read_png(path)
        if pred.ndim != 2:
            raise FormatError(f"{path}: prediction mask must be single-channel")
        return record.name, pred > 127, _gt_at(record, pred.shape)

    return evaluate_masks(_map(load, records, jobs))


def cmd_eval(args) -> int:
    _require(args, "root", "out")
    records = _records(args)
    if args.predictions:
        ev = evaluate_prediction_dir(records, Path(args.predictions), args.jobs)
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint or --predictions")
        model = _load_model(args)
        samples, probs = predict_split(model, records)
        ev = evaluate_masks((s.record.name, p >= args.threshold, s.labels) for s, p in zip(samples, probs))
    _write_report(Path(args.out), ev, f"{args.split} split")
    sys.stdout.write(ev.to_text(f"{args.split} split"))
    return EXIT_OK


# -- visualize ----------------------------------------------------------------------

def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend traversable pixels halfway toward pure green."""
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise DimensionError(f"prediction {mask.shape} does not match image {image.shape[:2]}")
    blended = (1 - OVERLAY_ALPHA) * image.astype(np.float64) + OVERLAY_ALPHA * OVERLAY_COLOR
    out = np.where(mask[..., None], np.floor(blended + 0.5), image)
    return out.astype(np.uint8)


def legend_strip(width: int) -> np.ndarray:
    strip = Image.new("RGB", (width, LEGEND_HEIGHT), (255, 255, 255))
    draw = ImageDraw.Draw(strip)
    sw = LEGEND_HEIGHT - 6
    draw.rectangle([3, 3, 3 + sw, 3 + sw], fill=(0, 255, 0))
    draw.text((sw + 8, 2), "traversable", fill=(0, 0, 0))
    return np.array(strip)


def render_overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    blended = overlay(image, mask)
    return np.concatenate([blended, legend_strip(blended.shape[1])], axis=0)


def cmd_visualize(args) -> int:
    _require(args, "root", "out", "predictions")
    count = 0
    for record in _records(args):
        rgb = read_png(record.image_path)
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[..., None], 3, axis=-1)
        pred = read_png(prediction_path(Path(args.predictions), record)) > 127
        path = prediction_path(Path(args.out), record)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(path, render_overlay(rgb[..., :3], pred))
        count += 1
    print(f"wrote {count} overlays to {args.out}")
    return EXIT_OK


# -- ablate / selftest --------------------------------------------------------------

def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation

    _require(args, "root", "out")
    base = ModelConfig.load(args.model_config) if args.model_config else toy_config()
    tcfg = TrainConfig.load(args.train_config) if args.train_config else TrainConfig(batch_size=2, epochs=50)
    changes = {"seed": args.seed}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    tcfg = TrainConfig(**{**tcfg.__dict__, **changes})
    manifest = _manifest(args)
    cache = SampleCache(base.input_w, base.input_h)
    train = cache.many(manifest.train)
    held_out = cache.many(manifest.val) if manifest.val else train
    if not manifest.val:
        log.info("no validation split; reporting training-set metrics")
    rows = run_ablation(base, train, held_out, tcfg, args.seed)
    table = format_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(f"{HEADER}\n{table}")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise InvariantError(f"selftest failed: {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "visualize": cmd_visualize,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--root", help="dataset root")
    common.add_argument("--out", help="output directory")
    common.add_argument("--model-config", help="model config file (key = value)")
    common.add_argument("--train-config", help="training config file (key = value)")
    common.add_argument("--checkpoint", help="model checkpoint (.offn)")
    common.add_argument("--threshold", type=float, default=0.5, help="traversable probability cut-off")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker threads for frame-parallel steps")
    common.add_argument("--split", default="testing", help="split for eval/infer/visualize")
    common.add_argument("--split-file", help="optional '<split> <sequence>' listing")
    common.add_argument("--predictions", help="directory of saved prediction masks")
    common.add_argument("--epochs", type=int, help="override the training config's epoch count")
    common.add_argument("--batch-size", type=int, help="override the training config's batch size")

    parser = _Parser(prog="offnet", description="Camera-LiDAR off-road freespace detection")
    parser.add_argument("--version", action="version", version=f"offnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _configure_logging() -> None:
    level = os.environ.get("OFFNET_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"OFFNET_LOG must be one of {', '.join(levels)}, not {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"offnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"offnet: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except DATA_ERRORS as exc:
        print(f"offnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - anything else is a broken invariant
        log.debug("internal failure", exc_info=True)
        print(f"offnet: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
