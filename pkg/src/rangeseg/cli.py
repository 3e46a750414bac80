"""Command-line entry point.

Every run-config key is also a flag (``--epochs 5``, ``--knn-K 3``) that
overrides the config file and profile. Exit codes: 0 ok, 1 usage or
configuration problem, 2 bad input data, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from .config import PROFILES, RunConfig, apply_overrides, make_config, parse_config
from .errors import DataError, NumericError, RangeSegError

log = logging.getLogger("rangeseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("config overrides")
    g.add_argument("--config", help="key = value run config file")
    g.add_argument("--profile", choices=sorted(PROFILES))
    for f in dataclasses.fields(RunConfig):
        if f.name == "profile":
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="V",
                       default=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_flags()
    parser = _Parser(prog="rangeseg", description="Range-image LiDAR segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("stats", parents=[common], help="modality statistics and class frequencies")

    p = sub.add_parser("project", parents=[common], help="project one scan to a range-image archive")
    p.add_argument("scan")
    p.add_argument("out")
    p.add_argument("--labels", dest="label_file")
    p.add_argument("--normalize", action="store_true", help="z-score with the stats sidecar")

    sub.add_parser("train", parents=[common], help="train and checkpoint a network")

    p = sub.add_parser("eval", parents=[common], help="point-level IoU of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--csv", dest="csv_out")

    p = sub.add_parser("predict", parents=[common], help="label one scan")
    p.add_argument("checkpoint")
    p.add_argument("scan")
    p.add_argument("out")
    p.add_argument("--pgm", help="also write the per-pixel class image")

    p = sub.add_parser("bench", parents=[common], help="throughput per pipeline stage")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--no-forward", action="store_true")

    p = sub.add_parser("synth", parents=[common], help="generate labelled synthetic scans")
    p.add_argument("spec")
    p.add_argument("count", type=int)
    p.add_argument("out_dir_synth", metavar="out")

    p = sub.add_parser("ablate", parents=[common], help="train every fusion/input cell briefly")
    p.add_argument("--cell-epochs", type=int, default=5)
    p.add_argument("--csv", dest="csv_out")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        text = path.read_text()
        if args.profile:
            text += f"\nprofile = {args.profile}\n"
        cfg = parse_config(text, base_dir=path.parent)
    else:
        cfg = make_config(args.profile or "desk")
    keys = {f.name for f in dataclasses.fields(RunConfig)}
    cfg = apply_overrides(cfg, {k: v for k, v in vars(args).items() if k in keys})
    cfg.validate(outputs=("stats", "frequencies") if args.command == "stats" else ())
    return cfg


def _stats(cfg, args):
    from .train import cmd_stats

    stats, freqs = cmd_stats(cfg)
    for name, c in stats.channels.items():
        print(f"{name:<10} mean {c.mean: .6g}  std {c.std:.6g}")
    print(f"labelled fraction {float(freqs[1:].sum()):.4f}")


def _project(cfg, args):
    from .projection import ModalityStats, normalize, project_scan, write_rimg
    from .train import resolve_class_map
    from .scanio import read_scan

    cmap = resolve_class_map(cfg.class_map) if args.label_file else None
    scan = read_scan(args.scan, args.label_file, cmap)
    images = project_scan(scan, cfg.projection())
    if args.normalize:
        if not cfg.stats:
            raise UsageError("--normalize needs --stats")
        images = normalize(images, ModalityStats.load(cfg.stats))
    Path(args.out).write_bytes(write_rimg(images))
    print(f"{int(images.valid_mask.sum())} valid pixels, {int((~images.kept).sum())} occluded points, "
          f"{images.n_dropped} dropped")


def _train(cfg, args):
    from .train import cmd_train

    state = cmd_train(cfg)
    print(f"epochs {state.epoch}  steps {state.step}  loss {state.running_loss:.4f}  "
          f"best val mIoU {state.best_miou:.4f}")


def _eval(cfg, args):
    from .metrics import format_csv, format_table
    from .train import cmd_eval

    res = cmd_eval(cfg, args.checkpoint)
    print(format_table(res["rows"]), end="")
    print(f"2D mIoU (before back-projection) {res['miou_2d']:.4f}")
    if args.csv_out:
        Path(args.csv_out).write_text(format_csv(res["rows"]))


def _predict(cfg, args):
    from .train import cmd_predict

    labels = cmd_predict(cfg, args.checkpoint, args.scan, args.out, args.pgm)
    print(f"wrote {len(labels)} labels to {args.out}")


def _bench(cfg, args):
    from .train import cmd_bench

    report = cmd_bench(cfg, runs=args.runs, warmup=args.warmup, include_forward=not args.no_forward)
    for stage, rate in report.items():
        print(f"{stage:<24} {rate:10.2f} scans/s")


def _synth(cfg, args):
    from .scanio import save_scan
    from .synth import generate_scan, load_scene_spec, vary
    from .train import resolve_class_map

    if args.count < 0:
        raise UsageError("count must be >= 0")
    spec = load_scene_spec(args.spec)
    cmap = resolve_class_map(cfg.class_map)
    out = Path(args.out_dir_synth)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        scan = generate_scan(vary(spec, i))
        save_scan(scan, out / f"{i:06d}.bin", out / f"{i:06d}.label", cmap)
    print(f"wrote {args.count} scans to {out}")


def _ablate(cfg, args):
    from .train import _load_stats_and_weights, ablation_matrix, load_samples, resolve_class_map

    cmap = resolve_class_map(cfg.class_map)
    stats, weights = _load_stats_and_weights(cfg, cmap)
    train = load_samples(cfg.train_scans, cfg.train_labels, cmap, cfg.subsample)
    val = load_samples(cfg.val_scans, cfg.val_labels, cmap) if cfg.val_scans else train
    rows = ablation_matrix(cfg, train, val, stats, weights, cmap.num_classes, args.cell_epochs)
    for r in rows:
        print(f"{r['input_mode']:<8} {r['fusion']:<6} {r['modalities']:<24} mIoU {r['miou']:.4f}")
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


COMMANDS = {"stats": _stats, "project": _project, "train": _train, "eval": _eval,
            "predict": _predict, "bench": _bench, "synth": _synth, "ablate": _ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"rangeseg: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"rangeseg: error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"rangeseg: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"rangeseg: data error: {exc}", file=sys.stderr)
        return 2
    except RangeSegError as exc:
        print(f"rangeseg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
