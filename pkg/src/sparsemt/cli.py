"""Command-line entry point: init-weights, gen-scene, infer, eval, bench.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
inputs, inconsistent weights).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import CLASS_NAMES, ConfigError, PipelineConfig, desk_config, parse_config
from .heads import DetGrid, bev_cell_labels, load_boxes, save_boxes
from .losses import bev_loss, det_loss, gaussian_splat_targets, labels_to_targets, multitask_total, seg_loss, update_iou_targets
from .metrics import confusion, format_iou_report, panoptic_quality
from .model import param_shapes
from .pointcloud import PointCloud, PointCloudFormatError, check_pose, load_point_cloud, merge_frames, save_point_cloud
from .weights import WeightFormatError, WeightStore, init_weights, load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path) -> PipelineConfig:
    return desk_config() if path is None else parse_config(path)


def _check_weights(ws: WeightStore, cfg: PipelineConfig, need_stage2: bool) -> None:
    want = param_shapes(cfg)
    have = ws.shapes()
    for name, shape in want.items():
        if name.startswith("s2.") and not need_stage2:
            continue
        if name not in have:
            raise DataError(f"weights lack tensor {name!r} required by the config")
        if tuple(have[name]) != tuple(shape):
            raise DataError(f"tensor {name!r} has shape {tuple(have[name])}, config implies {tuple(shape)}")
    if need_stage2 and "s2.cls.weight" not in have:
        raise DataError("--stage2 requested but the weights have no second-stage tensors")


# ---------------------------------------------------------------- init-weights

def cmd_init_weights(args) -> int:
    cfg = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    ws = init_weights(cfg, seed)
    save_weights(ws, args.out)
    n = sum(int(np.prod(s)) for s in ws.shapes().values())
    print(f"wrote {len(ws)} tensors ({n} values) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- gen-scene

def _parse_objects(text: str) -> dict:
    out = {}
    for item in filter(None, text.split(",")):
        try:
            cls, count = item.split(":")
            out[int(cls)] = int(count)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad object spec {item!r}; expected CLASS:COUNT") from None
    return out


def cmd_gen_scene(args) -> int:
    from .scene import SceneSpec, generate_scene

    spec = SceneSpec(extent=args.extent, objects=args.objects, poles=args.poles, walls=args.walls,
                     points_per_object=args.points_per_object, ground_points=args.ground_points,
                     points_per_pole=args.points_per_pole, points_per_wall=args.points_per_wall,
                     noise=args.noise, seed=args.seed)
    scene = generate_scene(spec)
    save_point_cloud(scene.cloud, args.out, args.format)
    if args.boxes_out:
        save_boxes(scene.boxes, args.boxes_out)
    if args.panoptic_out:
        from .pipeline import write_panoptic

        write_panoptic(args.panoptic_out, *scene.panoptic)
    print(f"wrote {len(scene.cloud)} points and {len(scene.boxes)} boxes to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- infer

def _load_pose(path) -> np.ndarray:
    try:
        vals = np.array(Path(path).read_text().split(), dtype=np.float64)
    except ValueError:
        raise DataError(f"{path}: pose file must hold 16 numbers") from None
    if vals.size != 16:
        raise DataError(f"{path}: pose file must hold 16 numbers, found {vals.size}")
    try:
        return check_pose(vals.reshape(4, 4))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _frame_outputs(args, src: Path, multi: bool) -> dict:
    def target(opt, suffix):
        if opt is None:
            return None
        return Path(opt) / (src.stem + suffix) if multi else Path(opt)

    out = target(args.out, ".labels")
    paths = {
        "labels": out,
        "boxes": target(args.boxes_out, ".boxes.csv"),
        "ply": target(args.ply_out, ".ply"),
        "logits": target(args.logits_out, ".logits.npz"),
        "panoptic": None,
    }
    if args.panoptic:
        paths["panoptic"] = target(args.panoptic_out, ".panoptic.txt") or out.with_name(out.name + ".panoptic.txt")
    return paths


def _run_frame(args, cfg, ws, src: Path, past, multi: bool) -> str:
    from .pipeline import infer, save_logits, write_labels, write_panoptic, write_ply

    pc = load_point_cloud(src, args.format)
    if pc.features.shape[1] != cfg.point_features:
        raise DataError(f"{src}: cloud has {pc.features.shape[1]} extra features, config expects {cfg.point_features}")
    if past:
        frames = [(load_point_cloud(p, args.format), _load_pose(pose)) for p, pose in past]
        pc = merge_frames(pc, frames)
    res = infer(pc, cfg, ws, tta=args.tta, stage2=args.stage2, panoptic=args.panoptic)
    cur = pc.current_mask
    paths = _frame_outputs(args, src, multi)
    write_labels(paths["labels"], res.labels[cur])
    if paths["boxes"]:
        save_boxes(res.boxes, paths["boxes"])
    if paths["panoptic"]:
        write_panoptic(paths["panoptic"], res.panoptic[0][cur], res.panoptic[1][cur])
    if paths["ply"]:
        write_ply(paths["ply"], pc.xyz[cur], res.labels[cur])
    if paths["logits"]:
        save_logits(paths["logits"], res)
    msg = f"{src}: {int(cur.sum())} points, {len(res.boxes)} boxes -> {paths['labels']}"
    if args.timings:
        for k, v in res.timings.items():
            msg += f"\n  {k:<12} " + (f"{1000 * v:10.2f} ms" if isinstance(v, float) else f"{v:10d}")
    return msg


def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    ws = load_weights(args.weights)
    _check_weights(ws, cfg, args.stage2)
    inputs = [Path(p) for p in args.input]
    multi = len(inputs) > 1
    if multi and args.past:
        raise DataError("--past works with a single --input only")
    if multi:
        for opt in (args.out, args.boxes_out, args.ply_out, args.logits_out, args.panoptic_out):
            if opt is not None:
                Path(opt).mkdir(parents=True, exist_ok=True)
    jobs = [(src, args.past or []) for src in inputs]
    if args.workers > 1 and multi:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            msgs = list(pool.map(lambda j: _run_frame(args, cfg, ws, j[0], j[1], multi), jobs))
    else:
        msgs = [_run_frame(args, cfg, ws, src, past, multi) for src, past in jobs]
    print("\n".join(msgs))
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _gt_labels(args):
    if args.gt_labels:
        from .pipeline import read_labels

        return read_labels(args.gt_labels), None
    pc = load_point_cloud(args.gt, args.gt_format, has_labels=True)
    if pc.labels is None:
        raise DataError(f"{args.gt}: cloud carries no labels")
    return pc.labels, pc


def _loss_report(args, cfg: PipelineConfig, gt_cloud: PointCloud) -> str:
    from .gcp import BevGeometry
    from .pipeline import load_logits
    from .voxelizer import VoxelMap, majority_vote_labels

    d = load_logits(args.logits)
    vm = VoxelMap(d["unique_coords"], d["point_to_voxel"], d["points_per_voxel"], d["point_coords"],
                  tuple(int(v) for v in d["grid_size"]))
    if len(vm.point_to_voxel) != len(gt_cloud):
        raise DataError("logits dump and ground-truth cloud have different point counts")
    g = d["geometry"]
    geom = BevGeometry(float(g[0]), float(g[1]), float(g[2]), float(g[3]), int(g[4]), int(g[5]))
    k = d["seg_logits"].shape[1]
    parts = {}
    vox_t = labels_to_targets(majority_vote_labels(gt_cloud, vm, k))
    seg, seg_parts = seg_loss(d["seg_logits"], vox_t)
    bev, bev_parts = bev_loss(d["bev_seg_logits"], labels_to_targets(bev_cell_labels(gt_cloud, geom, k)))
    parts.update({f"seg.{n}": v for n, v in seg_parts.items()})
    parts.update({f"bev.{n}": v for n, v in bev_parts.items()})
    task = {"seg": seg, "bev": bev}
    if args.gt_boxes:
        pred = DetGrid(d["heatmap"], d["reg"], d["iou"])
        targets = gaussian_splat_targets(load_boxes(args.gt_boxes), geom, cfg.thing_classes)
        det, det_parts = det_loss(pred, update_iou_targets(pred, targets, geom))
        parts.update({f"det.{n}": v for n, v in det_parts.items()})
        task["det"] = det
    total, _ = multitask_total(task, {n: 1.0 for n in task})
    lines = ["loss report"]
    lines += [f"{name:<14} {value:.6f}" for name, value in parts.items()]
    lines += [f"{name + '.total':<14} {value:.6f}" for name, value in task.items()]
    lines.append(f"{'total':<14} {total:.6f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .pipeline import read_labels, read_panoptic

    cfg = _load_config(args.config)
    pred = read_labels(args.pred)
    gt, gt_cloud = _gt_labels(args)
    if gt_cloud is not None:
        gt = gt[gt_cloud.current_mask]
    if len(pred) != len(gt):
        raise DataError(f"prediction has {len(pred)} labels, ground truth {len(gt)}")
    cm = confusion(pred, gt, cfg.num_classes)
    names = CLASS_NAMES if cfg.num_classes == len(CLASS_NAMES) else None
    blocks = [format_iou_report(cm, names)]
    if args.pred_panoptic or args.gt_panoptic:
        if not (args.pred_panoptic and args.gt_panoptic):
            raise DataError("panoptic evaluation needs both --pred-panoptic and --gt-panoptic")
        res = panoptic_quality(read_panoptic(args.pred_panoptic), read_panoptic(args.gt_panoptic),
                               cfg.num_classes, cfg.thing_classes)
        blocks.append(f"PQ {res.mean_pq:.4f}  SQ {res.mean_sq:.4f}  RQ {res.mean_rq:.4f}")
    if args.logits:
        if gt_cloud is None:
            raise DataError("--logits needs --gt (a labelled cloud), not --gt-labels")
        blocks.append(_loss_report(args, cfg, gt_cloud))
    report = "\n\n".join(blocks) + "\n"
    if args.report_out:
        Path(args.report_out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


# ---------------------------------------------------------------- bench

def cmd_bench(args) -> int:
    from .bench import bench_sparse_vs_dense, bench_stages, format_bench_report

    cfg = _load_config(args.config)
    ws = load_weights(args.weights) if args.weights else init_weights(cfg, cfg.seed)
    _check_weights(ws, cfg, True)
    rows = bench_stages(cfg, ws, args.sizes, args.seed)
    dense = None
    if args.dense_oracle:
        dense = bench_sparse_vs_dense(tuple(args.grid), args.occupancy, args.channels, args.seed, args.repeats)
    report = format_bench_report(rows, dense)
    if args.report_out:
        Path(args.report_out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsemt", description=__doc__.splitlines()[0],
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cfg_help = "JSON config file (default: the 128x128x40 desk preset)"
    fmt = dict(choices=("binary", "csv"), default="binary", help="point-cloud file format")

    s = sub.add_parser("init-weights", help="write seeded initial weights for a config")
    s.add_argument("--config", help=cfg_help)
    s.add_argument("--seed", type=int, help="RNG seed (default: the config's seed)")
    s.add_argument("--out", required=True, help="output weight file")
    s.set_defaults(func=cmd_init_weights)

    s = sub.add_parser("gen-scene", help="write a synthetic labelled scene",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--out", required=True, help="output point-cloud file (labels included)")
    s.add_argument("--format", **fmt)
    s.add_argument("--seed", type=int, default=0, help="RNG seed")
    s.add_argument("--extent", type=float, default=6.0, help="half-width of the square scene in metres")
    s.add_argument("--objects", type=_parse_objects, default={1: 2, 7: 1, 6: 1},
                   help="objects as CLASS:COUNT pairs, comma separated (e.g. 1:2,7:1)")
    s.add_argument("--poles", type=int, default=3, help="number of poles")
    s.add_argument("--walls", type=int, default=2, help="number of walls")
    s.add_argument("--points-per-object", type=int, default=1000, help="surface points per object")
    s.add_argument("--ground-points", type=int, default=14500, help="ground samples before box removal")
    s.add_argument("--points-per-pole", type=int, default=300, help="points per pole")
    s.add_argument("--points-per-wall", type=int, default=1500, help="points per wall")
    s.add_argument("--noise", type=float, default=0.02, help="Gaussian jitter sigma in metres")
    s.add_argument("--boxes-out", help="write ground-truth boxes as CSV")
    s.add_argument("--panoptic-out", help="write ground-truth (semantic, instance) pairs; .bin for u16")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("infer", help="run the network on point clouds",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--config", help=cfg_help)
    s.add_argument("--weights", required=True, help="weight file")
    s.add_argument("--input", required=True, nargs="+", help="point-cloud file(s)")
    s.add_argument("--format", **fmt)
    s.add_argument("--out", required=True,
                   help="per-point u8 label file; a directory when several inputs are given")
    s.add_argument("--past", nargs=2, action="append", metavar=("CLOUD", "POSE"),
                   help="past frame and its 4x4 pose file (16 numbers) into the current frame; repeatable")
    s.add_argument("--tta", action="store_true", help="average class probabilities over the TTA set")
    s.add_argument("--stage2", action="store_true", help="run second-stage refinement")
    s.add_argument("--panoptic", action="store_true", help="write per-point (semantic, instance) pairs")
    s.add_argument("--panoptic-out", help="panoptic output path (default: <out>.panoptic.txt); .bin for u16")
    s.add_argument("--boxes-out", help="write decoded boxes as CSV")
    s.add_argument("--ply-out", help="write a colour-coded PLY of the labelled points")
    s.add_argument("--logits-out", help="dump raw head outputs (.npz) for eval's loss report")
    s.add_argument("--workers", type=int, default=1, help="frames processed in parallel")
    s.add_argument("--timings", action="store_true", help="print per-stage timings")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against ground truth",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--config", help=cfg_help)
    s.add_argument("--pred", required=True, help="predicted u8 label file")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--gt", help="labelled ground-truth point cloud")
    g.add_argument("--gt-labels", help="ground-truth u8 label file")
    s.add_argument("--gt-format", **fmt)
    s.add_argument("--pred-panoptic", help="predicted panoptic pairs")
    s.add_argument("--gt-panoptic", help="ground-truth panoptic pairs")
    s.add_argument("--logits", help="logits dump from infer --logits-out; adds a loss report")
    s.add_argument("--gt-boxes", help="ground-truth boxes CSV for the detection losses")
    s.add_argument("--report-out", help="also write the report to this file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time each pipeline stage and optionally the dense oracle",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--config", help=cfg_help)
    s.add_argument("--weights", help="weight file (default: seeded init)")
    s.add_argument("--sizes", type=int, nargs="+", default=[5000, 10000, 20000], help="scene point counts")
    s.add_argument("--seed", type=int, default=0, help="scene and tensor seed")
    s.add_argument("--dense-oracle", action="store_true",
                   help="also time one submanifold layer against the dense oracle")
    s.add_argument("--grid", type=int, nargs=3, default=[40, 128, 128], metavar=("D", "H", "W"),
                   help="grid for the dense comparison")
    s.add_argument("--occupancy", type=float, default=0.02, help="active fraction for the dense comparison")
    s.add_argument("--channels", type=int, default=16, help="C_in = C_out for the dense comparison")
    s.add_argument("--repeats", type=int, default=1, help="best-of repeats for the dense comparison")
    s.add_argument("--report-out", help="also write the report to this file")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ConfigError, PointCloudFormatError, WeightFormatError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
