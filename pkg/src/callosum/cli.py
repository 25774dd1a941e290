"""``callosum`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys
from pathlib import Path

import yaml

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("callosum")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path):
    from .dataset import DataError

    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise DataError(f"{p}: cannot parse config: {exc}") from None
    if not isinstance(data, dict):
        raise DataError(f"{p}: config must be a mapping")
    return data


def _prepare_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if getattr(args, "config", None):
        shutil.copyfile(args.config, out / f"config.{args.command}{Path(args.config).suffix or '.yaml'}")
    return out


def _threshold(value):
    try:
        t = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if not 0.0 < t < 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1), got {t}")
    return t


def _positive_int(value):
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _parse_region(text, manifest):
    if text in ("train", "val", "test"):
        coords = manifest.split_coords(text)
        if not coords:
            raise UsageError(f"split {text!r} is empty")
        return text, coords
    try:
        xs, ys = text.split(",")
        x0, x1 = (int(v) for v in xs.split(":"))
        y0, y1 = (int(v) for v in ys.split(":"))
    except ValueError:
        raise UsageError(f"region must be a split name or 'x0:x1,y0:y1', got {text!r}") from None
    if not (0 <= x0 < x1 <= manifest.grid_nx and 0 <= y0 < y1 <= manifest.grid_ny):
        raise UsageError(f"region {text} outside the {manifest.grid_nx}x{manifest.grid_ny} grid")
    return text, [(ix, iy) for iy in range(y0, y1) for ix in range(x0, x1)]


# -- subcommands -------------------------------------------------------------


def cmd_synth(args):
    from .synthgen import generate_mosaic, spec_grid_from_config

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    grid, pixel_nm, splits = spec_grid_from_config(cfg)
    annotated = cfg.get("annotated_rows")
    out = _prepare_out(args)
    manifest = generate_mosaic(grid, out, pixel_nm=pixel_nm, splits=splits)
    if annotated is not None:
        from .dataset import save_manifest

        a0, a1 = (int(v) for v in annotated)
        for (ix, iy), e in manifest.entries.items():
            if not a0 <= iy < a1:
                e.label_path, e.annotated = None, False
        save_manifest(manifest, out / "manifest.tsv")
    print(f"wrote {len(manifest.entries)} patches ({manifest.grid_nx}x{manifest.grid_ny}) to {out}")
    return EXIT_OK


def _build_model(cfg, args):
    from .model import EncoderConfig, init_random, load_snapshot, surgery_import

    mcfg = EncoderConfig.from_dict(cfg.get("model") or {})
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    init = args.init or cfg.get("init")
    if init is None:
        return init_random(mcfg, seed), "random"
    p = Path(init)
    if not p.is_file():
        from .dataset import DataError

        raise DataError(f"initial weights not found: {p}")
    try:
        model, _ = load_snapshot(p)
        return model, f"snapshot {p}"
    except (ValueError, KeyError):
        model, report = surgery_import(p, mcfg, seed)
        (Path(args.out) / "load_report.json").write_text(report.to_text())
        return model, f"surgery import {p}"


def cmd_train(args):
    import torch

    from .dataset import DataError, load_manifest
    from .model import save_snapshot
    from .train import TrainConfig, TrainState, load_split, train_loop

    cfg = _load_config(args.config)
    tcfg_d = dict(cfg.get("train") or {})
    if args.seed is not None:
        tcfg_d["seed"] = args.seed
    tcfg = TrainConfig.from_dict(tcfg_d)
    manifest = load_manifest(args.manifest)
    train_set = load_split(manifest, "train")
    val_set = load_split(manifest, "val")
    if not train_set:
        raise DataError("manifest has no annotated train patches")
    if not val_set:
        raise DataError("manifest has no annotated val patches")
    torch.set_num_threads(max(1, args.workers or 1))
    out = _prepare_out(args)
    state = None
    if args.resume:
        state = TrainState.load(args.resume)
    model, origin = _build_model(cfg, args)
    logger.info("model from %s", origin)
    mode = "a" if state is not None else "w"
    with open(out / "train.log", mode, encoding="utf-8") as log:
        state = train_loop(model, train_set, val_set, tcfg, state=state, log=log, out_dir=out)
    state.save(out / "state.pt", tcfg)
    model.load_state_dict(state.model_state)
    save_snapshot(model, out / "final.pt", {"step": state.step})
    if state.best_model_state is not None:
        model.load_state_dict(state.best_model_state)
        save_snapshot(model, out / "best.pt", {"step": state.best_step, "val_miou": state.best_miou})
    print(f"trained to step {state.step}; best val mIoU {state.best_miou:.4f} at step {state.best_step}")
    return EXIT_OK


def cmd_expand(args):
    from .dataset import load_manifest
    from .infer import BandState, expand_band
    from .model import load_snapshot, snapshot_id

    manifest = load_manifest(args.manifest)
    model, _ = load_snapshot(args.snapshot)
    state = BandState.from_manifest(manifest)
    out = _prepare_out(args)
    state, export = expand_band(
        state, model, manifest, args.band_height, out, threshold=args.threshold, snapshot=snapshot_id(args.snapshot)
    )
    if export is None:
        print("all rows annotated; nothing to expand")
        return EXIT_OK
    note = " (clipped to grid)" if export.clipped else ""
    print(f"exported rows [{export.y_range[0]}, {export.y_range[1]}){note} to {export.directory}")
    return EXIT_OK


def cmd_ingest(args):
    from .dataset import load_manifest
    from .infer import BandState, ingest_corrections, read_band_info

    manifest = load_manifest(args.manifest)
    info = read_band_info(args.band if args.band else args.corrected)
    state = BandState.from_manifest(manifest)
    state = dataclasses.replace(state, pending=(int(info["y_start"]), int(info["y_end"])))
    out = Path(args.out)
    new_state, _ = ingest_corrections(
        state, manifest, args.corrected, manifest_path=out / "manifest.tsv", label_dir=out / "labels"
    )
    a0, a1 = new_state.annotated
    print(f"annotated rows now [{a0}, {a1}); manifest written to {out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_eval(args):
    from .dataset import DataError, load_manifest, read_label
    from .evaluate import IoUReport, benchmark_csv, benchmark_report
    from .infer import predict_patches
    from .model import load_snapshot, to_class_mask

    manifest = load_manifest(args.manifest)
    name, coords = _parse_region(args.region, manifest)
    unlabeled = [c for c in coords if not manifest.entries.get(c) or not manifest.entries[c].annotated]
    if unlabeled:
        raise DataError("region patches without labels: " + ", ".join(f"({x}, {y})" for x, y in unlabeled))
    model, _ = load_snapshot(args.snapshot)
    report = IoUReport(region=name)
    for (ix, iy), probs in predict_patches(model, manifest, coords):
        report.add(to_class_mask(probs, args.threshold), read_label(manifest, ix, iy))
    out = _prepare_out(args)
    method = args.method or Path(args.snapshot).stem
    results = [(method, report)]
    (out / "eval.csv").write_text(benchmark_csv(results))
    print(f"region {name}: mIoU {report.miou:.4f} (axon {report.iou_axon:.4f}, myelin {report.iou_myelin:.4f})")
    print(benchmark_report(results))
    return EXIT_OK


def _metric_spec(cfg):
    from .morphometry import MetricGridSpec

    keys = {"metric_patch_px", "downsample_factor", "min_area"}
    unknown = set(cfg) - keys
    if unknown:
        raise UsageError(f"unknown metric config keys: {sorted(unknown)}")
    return MetricGridSpec(**cfg)


def cmd_morpho(args):
    from .dataset import load_manifest, load_roi
    from .morphometry import MissingLabelsError, render_maps, slide_morphometry

    spec = _metric_spec(_load_config(args.config))
    manifest = load_manifest(args.manifest)
    gx, gy = spec.grid_dims(manifest)
    print(f"metric grid {gx}x{gy}")
    roi = load_roi(args.roi, (gx, gy)) if args.roi else None
    out = _prepare_out(args)
    try:
        grid = slide_morphometry(manifest, spec, roi, workers=args.workers or os.cpu_count() or 1,
                                 resume_path=out / "cells.jsonl")
    except MissingLabelsError as exc:
        listing = "".join(f"{ix}\t{iy}\n" for ix, iy in exc.coords)
        (out / "missing_labels.tsv").write_text(listing)
        raise
    render_maps(grid, out)
    print(grid.summary_line())
    return EXIT_OK


def cmd_maps(args):
    from .morphometry import read_metrics_csv, render_maps

    grid = read_metrics_csv(args.metrics)
    out = _prepare_out(args)
    render_maps(grid, out)
    print(grid.summary_line())
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="callosum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, manifest=True, config=True):
        if manifest:
            p.add_argument("--manifest", required=True)
        if config:
            p.add_argument("--config")
        p.add_argument("--out", required=True)
        p.add_argument("--workers", type=_positive_int)
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic mosaic"), manifest=False)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="fine-tune a model on the train split"))
    p.add_argument("--init", help="snapshot or promptable-segmentation checkpoint to start from")
    p.add_argument("--resume", help="training state to continue from")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("expand", help="predict and export the next band for proofreading"))
    p.add_argument("--snapshot", required=True)
    p.add_argument("--band-height", type=_positive_int, required=True)
    p.add_argument("--threshold", type=_threshold, default=0.5)
    p.set_defaults(func=cmd_expand)

    p = common(sub.add_parser("ingest", help="attach proofread band labels to the manifest"))
    p.add_argument("--corrected", required=True)
    p.add_argument("--band", help="exported band directory holding BAND-INFO (default: --corrected)")
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("eval", help="mIoU of a snapshot over a region"))
    p.add_argument("--snapshot", required=True)
    p.add_argument("--region", default="test", help="train/val/test or x0:x1,y0:y1 in patches")
    p.add_argument("--threshold", type=_threshold, default=0.5)
    p.add_argument("--method", help="row name in the comparison table")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("morpho", help="aggregate morphometry and distribution maps"))
    p.add_argument("--roi", help="ROI image at metric-grid resolution")
    p.set_defaults(func=cmd_morpho)

    p = common(sub.add_parser("maps", help="re-render maps from metrics.csv"), manifest=False, config=False)
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_maps)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    from .dataset import DataError
    from .model import ConfigError, SurgeryError
    from .synthgen import InfeasiblePacking, SpecError

    try:
        return args.func(args)
    except UsageError as exc:
        print(f"callosum {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SpecError, InfeasiblePacking, ConfigError, SurgeryError, FileNotFoundError) as exc:
        print(f"callosum {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"callosum {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"callosum {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
