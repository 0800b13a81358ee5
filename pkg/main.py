"""
地面認識単眼3D検出ツールキット - コマンドライン
アンカー統計の収集、地面フィルタの監査、奥行き事前分布の書き出し、
予測の後処理最適化、評価、合成データ生成を行う。
"""
import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

# モジュールパスを追加
sys.path.insert(0, str(Path(__file__).parent))

from modules.anchor_engine import (
    build_grid,
    collect_stats,
    encode_targets,
    filter_ground,
    load_stats,
    save_stats,
    stats_table,
)
from modules.camera_geometry import depth_prior_map
from modules.data_store import DataStore
from modules.evaluation import Detection, evaluate
from modules.gac_core import write_raster
from modules.kitti_io import (
    intrinsics_from_calibration,
    parse_calibration,
    parse_labels,
    prepare_frame,
    write_calibration,
    write_labels,
    write_predictions,
)
from modules.manager_factory import get_managers
from modules.post_optim import mean_improvement, refine_detection
from modules.settings_manager import RunConfig
from modules.synthetic_scenes import generate
from modules.utils import ConfigError, GacError, MissingDataError, ParseError, parallel_map

logger = logging.getLogger("gac")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_COMPUTATION = 2


# ---------------------------------------------------------------------------
# フレーム単位の処理（プロセスプールから呼ぶためトップレベル）

def _load_prepared(task):
    calib_text, label_text, cfg = task
    calib = parse_calibration(calib_text)
    labels = parse_labels(label_text) if label_text is not None else []
    intr, calib, labels = prepare_frame(calib, labels, cfg.crop_top, cfg.image_size, cfg.input_size, cfg.camera)
    return intr, calib, labels


def _audit_frame(task):
    calib_text, label_text, cfg, grid = task
    intr, _, labels = _load_prepared((calib_text, label_text, cfg))
    mask = filter_ground(grid, intr, cfg.ground, cfg.anchor.ground_tolerance)
    targets = encode_targets(grid, labels, intr, cfg.anchor.iou_fg, cfg.anchor.iou_bg,
                             classes=cfg.anchor.classes, force_min_iou=cfg.anchor.force_min_iou)
    negatives = targets.class_targets == 0
    foreground = targets.regression.anchor_indices
    return {
        "kept": int(mask.sum()),
        "per_row": mask.reshape(grid.rows, -1).sum(axis=1),
        "negatives": int(negatives.sum()),
        "negatives_removed": int((negatives & ~mask).sum()),
        "gt_anchors": int(foreground.size),
        "gt_anchors_kept": int(mask[foreground].sum()),
    }


def _prior_frame(task):
    calib_text, cfg = task
    intr, _, _ = _load_prepared((calib_text, None, cfg))
    rows = math.ceil(intr.image_h / cfg.anchor.stride)
    cols = math.ceil(intr.image_w / cfg.anchor.stride)
    return depth_prior_map(intr, cfg.ground, cfg.anchor.stride, rows, cols)


def _postopt_frame(task):
    frame_id, calib_text, pred_text, cfg = task
    try:
        records = parse_labels(pred_text)
    except ParseError as e:
        return frame_id, None, str(e)
    width, height = cfg.image_size
    intr = intrinsics_from_calibration(parse_calibration(calib_text), cfg.camera, width, height)
    refined, outcomes = [], []
    for record in records:
        if record.is_dontcare or record.location[2] <= 0:
            refined.append(record)
            continue
        detection = Detection.from_label(record)
        outcome = refine_detection(detection, intr, cfg.hill_climb)
        outcomes.append(outcome)
        if outcome.detection is detection:
            refined.append(record)
            continue
        box = outcome.detection.box3d
        refined.append(replace(record, alpha=outcome.detection.alpha, location=box.center, rotation_y=box.yaw))
    return frame_id, (refined, mean_improvement(outcomes), sum(o.flagged for o in outcomes)), None


# ---------------------------------------------------------------------------
# サブコマンド

def _frame_ids(cfg: RunConfig, store: DataStore) -> List[str]:
    if cfg.split is not None:
        return DataStore.read_split(cfg.split)
    ids = store.list("calib")
    if not ids:
        raise ConfigError(f"no frames found under {store.root / 'calib'}")
    return ids


def cmd_stats(cfg: RunConfig, store: DataStore, args) -> int:
    ids = _frame_ids(cfg, store)
    store.require(ids)
    tasks = [(store.get("calib", f), store.get("labels", f), cfg) for f in ids]
    frames = parallel_map(_load_prepared, tasks, jobs=cfg.jobs)
    grid = build_grid(frames[0][0], cfg.anchor.stride, cfg.anchor.scales, cfg.anchor.ratios)
    corpus = [(labels, calib) for _, calib, labels in frames]
    stats = collect_stats(grid, corpus, cfg.anchor.stats_iou, cfg.anchor.min_support,
                          cfg.anchor.classes, jobs=cfg.jobs)
    target = cfg.out / "anchor_stats.txt"
    save_stats(stats, target)
    print(stats_table(stats).to_string(index=False))
    logger.info("wrote %s (%d shapes, %d frames)", target, len(stats.shapes), len(ids))
    return EXIT_OK


def cmd_filter_audit(cfg: RunConfig, store: DataStore, args) -> int:
    stats_path = Path(args.stats) if args.stats else cfg.out / "anchor_stats.txt"
    if not stats_path.exists():
        raise ConfigError(f"statistics file not found: {stats_path}")
    stats = load_stats(stats_path)
    ids = _frame_ids(cfg, store)
    store.require(ids)
    intr, _, _ = _load_prepared((store.get("calib", ids[0]), None, cfg))
    grid = build_grid(intr, cfg.anchor.stride, cfg.anchor.scales, cfg.anchor.ratios).with_stats(stats)

    tasks = [(store.get("calib", f), store.get("labels", f), cfg, grid) for f in ids]
    results = parallel_map(_audit_frame, tasks, jobs=cfg.jobs)
    total = grid.num_anchors * len(results)
    kept = sum(r["kept"] for r in results)
    negatives = sum(r["negatives"] for r in results)
    removed = sum(r["negatives_removed"] for r in results)
    gt_anchors = sum(r["gt_anchors"] for r in results)
    gt_kept = sum(r["gt_anchors_kept"] for r in results)
    per_row = np.sum([r["per_row"] for r in results], axis=0)

    summary = pd.DataFrame([{
        "frames": len(results),
        "tolerance": cfg.anchor.ground_tolerance,
        "total": total,
        "kept": kept,
        "keep_fraction": kept / total if total else 0.0,
        "negatives_removed_fraction": removed / negatives if negatives else 0.0,
        "gt_anchor_survival": gt_kept / gt_anchors if gt_anchors else 1.0,
    }])
    rows = pd.DataFrame({
        "row": np.arange(grid.rows),
        "kept": per_row.astype(int),
        "total": grid.cols * grid.num_shapes * len(results),
    })
    text = summary.to_string(index=False) + "\n\n" + rows.to_string(index=False) + "\n"
    target = cfg.out / "filter_audit.txt"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_priors(cfg: RunConfig, store: DataStore, args) -> int:
    ids = _frame_ids(cfg, store)
    store.require(ids, data_types=("calib",))
    maps = parallel_map(_prior_frame, [(store.get("calib", f), cfg) for f in ids], jobs=cfg.jobs)
    out_dir = cfg.out / "priors"
    for frame_id, prior in zip(ids, maps):
        write_raster(prior, out_dir / f"{frame_id}.bin")
    logger.info("wrote %d prior rasters (%dx%dx%d) to %s", len(maps), *maps[0].data.shape, out_dir)
    return EXIT_OK


def cmd_postopt(cfg: RunConfig, store: DataStore, args) -> int:
    if not args.predictions:
        raise ConfigError("--predictions is required")
    predictions = DataStore(args.predictions, {"predictions": "."})
    ids = DataStore.read_split(cfg.split) if cfg.split is not None else predictions.list("predictions")
    store.require(ids, data_types=("calib",))
    present = [f for f in ids if predictions.exists("predictions", f)]
    if len(present) < len(ids):
        logger.warning("%d frames have no prediction file", len(ids) - len(present))
    tasks = [(f, store.get("calib", f), predictions.get("predictions", f), cfg) for f in present]
    output = DataStore(cfg.out)
    improvements = []
    for frame_id, result, error in parallel_map(_postopt_frame, tasks, jobs=cfg.jobs):
        if error is not None:
            logger.warning("frame %s skipped: %s", frame_id, error)
            continue
        records, improvement, flagged = result
        improvements.append(improvement)
        logger.debug("frame %s: mean IoU improvement %.6f (%d flagged)", frame_id, improvement, flagged)
        output.create("refined", frame_id, write_predictions(records))
    mean = float(np.mean(improvements)) if improvements else 0.0
    logger.info("refined %d frames, mean IoU improvement %.6f", len(improvements), mean)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, store: DataStore, args) -> int:
    if not args.predictions:
        raise ConfigError("--predictions is required")
    gt_dir = Path(args.gt) if args.gt else store.root / store.directories["labels"]
    frame_ids = DataStore.read_split(cfg.split) if cfg.split is not None else None
    report = evaluate(args.predictions, gt_dir, cfg.evaluation, frame_ids)
    cfg.out.mkdir(parents=True, exist_ok=True)
    text = report.format_report()
    (cfg.out / "eval_report.txt").write_text(text, encoding="utf-8")
    (cfg.out / "eval_metrics.txt").write_text(report.format_metrics(), encoding="utf-8")
    print(text, end="")
    if report.absent:
        logger.error("%d requested metrics are absent (no ground truth): %s",
                     len(report.absent), ", ".join(report.absent[:5]))
        return EXIT_INPUT
    return EXIT_OK


def cmd_synth(cfg: RunConfig, store: DataStore, args) -> int:
    corpus = generate(cfg.scene, cfg.synth_frames, jobs=cfg.jobs)
    output = DataStore(cfg.out)
    ids = []
    for index, (calib, labels) in enumerate(corpus):
        output.create("calib", index, write_calibration(calib))
        output.create("labels", index, write_labels(labels, precise=True))
        ids.append(f"{index:06d}")
    DataStore.write_split(cfg.out / "split.txt", ids)
    logger.info("wrote %d synthetic frames to %s", len(ids), cfg.out)
    return EXIT_OK


COMMANDS = {
    "stats": cmd_stats,
    "filter-audit": cmd_filter_audit,
    "priors": cmd_priors,
    "postopt": cmd_postopt,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# 引数

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gac", description="ground-aware monocular 3D detection toolkit")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key-value configuration file")
    shared.add_argument("--data-root", help="KITTI-style dataset root (calib/, label_2/)")
    shared.add_argument("--split", help="newline-separated frame id list")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--jobs", type=int, help="worker processes (0 = all cores)")
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")
    shared.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    stats = sub.add_parser("stats", parents=[shared], help="collect per-anchor 3D statistics")
    stats.add_argument("--stride", type=int)
    stats.add_argument("--iou", type=float, help="statistics matching IoU")

    audit = sub.add_parser("filter-audit", parents=[shared], help="report ground-filter effect")
    audit.add_argument("--stats", help="anchor statistics file (default OUT/anchor_stats.txt)")
    audit.add_argument("--tolerance", help="ground tolerance in meters, 'inf' disables filtering")

    priors = sub.add_parser("priors", parents=[shared], help="write depth-prior rasters")
    priors.add_argument("--stride", type=int)

    postopt = sub.add_parser("postopt", parents=[shared], help="refine predictions by hill climbing")
    postopt.add_argument("--predictions", help="directory of KITTI prediction files")
    postopt.add_argument("--mode", choices=["angle", "angle_depth"])

    ev = sub.add_parser("eval", parents=[shared], help="KITTI-style AP evaluation")
    ev.add_argument("--predictions", help="directory of KITTI prediction files")
    ev.add_argument("--gt", help="ground-truth label directory (default DATA_ROOT/label_2)")

    synth = sub.add_parser("synth", parents=[shared], help="write a synthetic corpus")
    synth.add_argument("--frames", type=int)
    synth.add_argument("--seed", type=int)
    return parser


def _overrides(args) -> Dict[str, Optional[str]]:
    mapping = {
        "data.root": args.data_root,
        "data.split": args.split,
        "data.out": args.out,
        "run.jobs": args.jobs,
        "anchor.stride": getattr(args, "stride", None),
        "anchor.stats_iou": getattr(args, "iou", None),
        "anchor.ground_tolerance": getattr(args, "tolerance", None),
        "postopt.mode": getattr(args, "mode", None),
        "synth.frames": getattr(args, "frames", None),
        "synth.seed": getattr(args, "seed", None),
    }
    overrides = {k: str(v) for k, v in mapping.items() if v is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings, store = get_managers(args.config, _overrides(args))
        level = "DEBUG" if args.verbose else str(settings.get("log.level", "INFO")).upper()
        logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        cfg = settings.to_run_config(require_data=args.command != "synth")
        return COMMANDS[args.command](cfg, store, args)
    except (ConfigError, ParseError, MissingDataError, OSError) as e:
        logger.error("%s", e)
        return EXIT_INPUT
    except GacError as e:
        logger.error("%s", e)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())
