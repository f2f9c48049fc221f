"""Command-line entry point: ``tornadoseg <subcommand> [options]``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration error,
3 I/O or file-format error, 4 contract violation, 5 training divergence.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import model as M
from .diagnostics import loss_gradient_suite, op_gradient_suite
from .evaluation import ConfusionMatrix, format_report
from .exceptions import ConfigError, ContractError, DivergenceError, FormatError, MappingError
from .losses import class_frequencies
from .pointcloud import (
    SEMANTIC_KITTI_CLASSES,
    LabelArray,
    inverse_mapping,
    read_kitti_bin,
    read_label_file,
    remap_labels,
    truncate_cloud,
    write_label_file,
)
from .postprocess import knn_refine
from .projection import spherical_project
from .synthetic import TOY_CLASSES, make_dataset
from .tensor import no_grad
from .trainer import evaluate_frames, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5


def _write_lines(path: Path, lines) -> None:
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def write_range_image(prefix, channels: np.ndarray, names) -> None:
    """Raw little-endian float32 ``C x H x W`` dump plus a text header."""
    prefix = Path(prefix)
    c, h, w = channels.shape
    Path(f"{prefix}.bin").write_bytes(np.ascontiguousarray(channels, dtype="<f4").tobytes())
    header = [f"dims = {c} {h} {w}", "dtype = float32 little-endian",
              "order = channel, row, column (row-major)", f"channels = {','.join(names)}"]
    _write_lines(Path(f"{prefix}.txt"), header)


# ----------------------------------------------------------------------------
# subcommands


def cmd_project(args, cfg: C.RunConfig) -> int:
    cloud = read_kitti_bin(args.input)
    if args.crop:
        cloud, _ = truncate_cloud(cloud, None, cfg.crop())
    image, pmap = spherical_project(cloud, cfg.spherical())
    write_range_image(args.output, image.channels, image.channel_names)
    mask = image.valid_mask.astype(np.uint8)
    Path(f"{args.output}.mask").write_bytes(mask.tobytes())
    uv = np.column_stack([pmap.u, pmap.v, pmap.in_bounds]).astype("<i4")
    Path(f"{args.output}.uv").write_bytes(uv.tobytes())
    print(f"projected {cloud.count} points, {int(mask.sum())} valid pixels -> {args.output}.bin")
    return EXIT_OK


def cmd_gradcheck(args, cfg: C.RunConfig) -> int:
    results = op_gradient_suite(args.op_instances, args.seed)
    results += loss_gradient_suite(args.instances, args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all gradient checks passed" if ok else "some gradient checks failed")
    return EXIT_OK if ok else EXIT_CHECK


def _train_outputs(out: Path, result, mcfg: M.ModelConfig, stats_text: str | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "metrics.log", result.log)
    _write_lines(out / "validation.log", result.validation)
    M.save_model(out / "model.ckpt", result.params, mcfg)
    M.save_model(out / "best.ckpt", result.best_params, mcfg)
    if stats_text is not None:
        (out / "class_stats.txt").write_text(stats_text, encoding="utf-8")


def toy_configs(args, cfg: C.RunConfig):
    mcfg = M.ModelConfig.toy(height=args.height, width=args.width, channels=args.channels,
                             num_classes=len(TOY_CLASSES))
    tcfg = cfg.train()
    batch = args.batch or args.frames
    epochs = math.ceil(args.steps / math.ceil(args.frames / batch))
    tcfg = replace(tcfg, model=mcfg, batch_size=batch, epochs=epochs,
                   max_steps=args.steps, augment=None, validate_every=args.validate_every,
                   seed=args.seed if args.seed is not None else tcfg.seed)
    return mcfg, tcfg


def cmd_train_toy(args, cfg: C.RunConfig) -> int:
    mcfg, tcfg = toy_configs(args, cfg)
    data = make_dataset(mcfg.projection, args.frames, seed=tcfg.seed)
    result = train(data, tcfg)
    out = Path(args.output)
    stats = class_frequencies([lab.semantic for _, lab in data], mcfg.num_classes)
    _train_outputs(out, result, mcfg, stats.to_text())
    frames = [M.prepare_frame(c, mcfg) for c, _ in data]
    cm = evaluate_frames(result.params, mcfg, frames, [lab.semantic for _, lab in data])
    table, kv = format_report(cm, TOY_CLASSES)
    (out / "train_eval.txt").write_text(kv, encoding="utf-8")
    print(table, end="")
    print(f"steps={result.steps} accuracy={cm.accuracy():.4f}")
    return EXIT_OK


def _scan_pairs(root: Path):
    scans = sorted((root / "velodyne").glob("*.bin"))
    if not scans:
        raise FileNotFoundError(f"no scans under {root / 'velodyne'}")
    pairs = []
    for scan in scans:
        label = root / "labels" / f"{scan.stem}.label"
        pairs.append((scan, label))
    return pairs


def load_labeled_dir(root, cfg: C.RunConfig):
    data = []
    for scan, label_path in _scan_pairs(Path(root)):
        cloud = read_kitti_bin(scan)
        labels = remap_labels(read_label_file(label_path), cfg.class_map)
        cloud, labels = truncate_cloud(cloud, labels, cfg.crop())
        data.append((cloud, labels))
    return data


def cmd_train(args, cfg: C.RunConfig) -> int:
    train_dir = cfg.get("data", "train_dir")
    if not train_dir:
        raise ConfigError("data.train_dir is not set")
    data = load_labeled_dir(train_dir, cfg)
    val_dir = cfg.get("data", "val_dir")
    val = load_labeled_dir(val_dir, cfg) if val_dir else None
    tcfg = cfg.train()
    result = train(data, tcfg, validation=val, on_step=print if args.verbose else None)
    stats = class_frequencies([lab.semantic for _, lab in data], tcfg.model.num_classes)
    _train_outputs(Path(args.output), result, tcfg.model, stats.to_text())
    print(f"steps={result.steps} best_miou={float(result.best_miou)!r}")
    return EXIT_OK


def cmd_infer(args, cfg: C.RunConfig) -> int:
    params, mcfg = M.load_model(args.checkpoint)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    inverse = inverse_mapping(cfg.class_map) if args.raw_ids else None
    knn = cfg.knn()
    for scan in args.inputs:
        cloud = read_kitti_bin(scan)
        frame = M.prepare_frame(cloud, mcfg)
        with no_grad():
            logits = M.forward_frames([frame], params, mcfg, training=False).point_logits[0].data
        pred = np.argmax(logits, axis=1)
        if args.knn:
            pred = _refine_points(cloud, pred, mcfg.projection, knn)
        if inverse is not None:
            pred = np.array([inverse[int(p)] for p in pred], dtype=np.int64)
        write_label_file(out / f"{Path(scan).stem}.label", LabelArray(pred))
    print(f"wrote {len(args.inputs)} label files to {out}")
    return EXIT_OK


def _refine_points(cloud, point_labels, proj, knn_cfg, label_image=None):
    image, pmap = spherical_project(cloud, proj)
    if label_image is None:
        label_image = np.zeros(image.valid_mask.shape, dtype=np.int64)
        label_image[image.valid_mask] = point_labels[image.winner_index[image.valid_mask]]
    out = np.array(point_labels, dtype=np.int64, copy=True)
    ok = pmap.in_bounds
    out[ok] = knn_refine(label_image, image.pixel_range(), image.valid_mask,
                         pmap.u[ok], pmap.v[ok], image.range[ok], knn_cfg)
    return out


def cmd_refine(args, cfg: C.RunConfig) -> int:
    proj = cfg.spherical()
    cloud = read_kitti_bin(args.points)
    raw = Path(args.label_image).read_bytes()
    expected = proj.height * proj.width * 4
    if len(raw) != expected:
        raise FormatError(f"label image has {len(raw)} bytes, expected {expected} "
                          f"({proj.height} x {proj.width} uint32)")
    label_image = np.frombuffer(raw, dtype="<u4").reshape(proj.height, proj.width).astype(np.int64)
    image, pmap = spherical_project(cloud, proj)
    fallback = label_image[pmap.v, pmap.u]
    out = _refine_points(cloud, fallback, proj, cfg.knn(), label_image)
    out[~pmap.in_bounds] = 0
    write_label_file(args.output, LabelArray(out))
    print(f"refined {cloud.count} points -> {args.output}")
    return EXIT_OK


def _label_files(items):
    files = []
    for item in items:
        p = Path(item)
        files.extend(sorted(p.glob("*.label")) if p.is_dir() else [p])
    return files


def cmd_eval(args, cfg: C.RunConfig) -> int:
    preds, truths = _label_files(args.pred), _label_files(args.truth)
    if len(preds) != len(truths):
        raise ContractError(f"{len(preds)} prediction files for {len(truths)} ground-truth files")
    if args.train_ids:
        n = args.num_classes
        names = [str(c) for c in range(n)]
    else:
        n = cfg.get("model", "num_classes")
        names = list(SEMANTIC_KITTI_CLASSES) if n == len(SEMANTIC_KITTI_CLASSES) else None
    cm = ConfusionMatrix(n)
    for p, t in zip(preds, truths):
        pl, tl = read_label_file(p), read_label_file(t)
        if not args.train_ids:
            pl, tl = remap_labels(pl, cfg.class_map), remap_labels(tl, cfg.class_map)
        cm.accumulate(pl.semantic, tl.semantic)
    table, kv = format_report(cm, names)
    print(table, end="")
    if args.kv:
        Path(args.kv).write_text(kv, encoding="utf-8")
    else:
        print(kv, end="")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--workers", type=int, default=1,
                        help="accepted for interface stability; work runs in one process")

    parser = argparse.ArgumentParser(
        prog="tornadoseg",
        description="LiDAR semantic segmentation on range images with pillar features.",
        epilog="configuration keys (compiled defaults):\n" + C.describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", parents=[common], help="dump the range image of a scan")
    p.add_argument("input", help="scan in .bin format")
    p.add_argument("-o", "--output", required=True, help="output prefix")
    p.add_argument("--crop", action="store_true", help="apply the crop box first")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=100, help="random instances per loss")
    p.add_argument("--op-instances", type=int, default=20, help="random instances per operator")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", parents=[common], help="train on synthetic ray-cast scenes")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=0, help="frames per step (0: all)")
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--validate-every", type=int, default=50, help="epochs between evaluations")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("train", parents=[common], help="train on a SemanticKITTI-layout directory")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--verbose", action="store_true", help="print every metrics line")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict per-point labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="scans in .bin format")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--knn", action="store_true", help="apply range-image KNN refinement")
    p.add_argument("--raw-ids", action="store_true", help="export raw dataset ids")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("refine", parents=[common], help="KNN refinement of a label image")
    p.add_argument("--points", required=True, help="scan in .bin format")
    p.add_argument("--label-image", required=True, help="H x W uint32 little-endian labels")
    p.add_argument("-o", "--output", required=True, help="output .label file")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="IoU table from .label files")
    p.add_argument("--pred", nargs="+", required=True, help="files or directories")
    p.add_argument("--truth", nargs="+", required=True, help="files or directories")
    p.add_argument("--train-ids", action="store_true", help="files already hold training ids")
    p.add_argument("--num-classes", type=int, default=19, help="class count with --train-ids")
    p.add_argument("--kv", help="write key=value results here instead of stdout")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = C.load(args.config, args.set)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, MappingError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
