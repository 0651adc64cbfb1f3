"""Command-line front-end.

Subcommands: synth, infer, evaluate, gradcheck, cluster. Every run is
reproducible byte-for-byte given the same config and seed. Exit codes:
0 success, 1 validation failure, 2 I/O error, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import figures, pipeline
from .config import ConfigError, RunConfig, config_help_lines, load_config
from .dataio import PanopticFormatError, read_panoptic
from .fixtures import BundleError, load_bundle
from .losses import gradcheck_report
from .matching import hungarian
from .numerics import kmeans

GRADCHECK_TOLERANCE = 1e-4

_EPILOG = "config keys (defaults):\n" + "\n".join(config_help_lines())


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--jobs", type=int, metavar="N", help="parallel image workers")
    p.add_argument("--seed", type=int, metavar="N", help="base RNG seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ovpanseg",
        description="Open-vocabulary panoptic segmentation on precomputed features",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("synth", "write a synthetic dataset (bundles, ground truth, weights)"),
        ("infer", "run the pipeline and write panoptic PNG/JSON per image"),
        ("evaluate", "score predictions against ground truth (PQ family, mIoU)"),
        ("gradcheck", "verify analytic loss gradients against finite differences"),
        ("cluster", "k-means cluster maps of the backbone features"),
    ]:
        p = sub.add_parser(name, help=doc, epilog=_EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_common(p)
        if name == "evaluate":
            p.add_argument("--pred", metavar="DIR",
                           help="prediction directory (default: out dir)")
        if name == "cluster":
            p.add_argument("--k", type=int, metavar="K",
                           help="cluster count (default: n_gt_segments)")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if getattr(args, "k", None) is not None:
        overrides.append(f"cluster_k={args.k}")
    return load_config(args.config, overrides)


def cmd_synth(cfg: RunConfig) -> int:
    names = pipeline.write_synth_dataset(cfg, cfg.out_dir)
    print(f"wrote {len(names)} images to {cfg.out_dir}")
    return 0


def cmd_infer(cfg: RunConfig) -> int:
    names = pipeline.infer_dataset(cfg)
    print(f"inferred {len(names)} images -> {cfg.out_dir}")
    return 0


def _report_table(report: dict) -> str:
    rows = [("category", "pq", "sq", "rq", "tp", "fp", "fn", "seen", "thing")]
    for cat_id in sorted(report["per_category"]):
        info = report["per_category"][cat_id]
        if not info["gt_present"]:
            continue
        rows.append((info["name"], f"{info['pq']:.4f}", f"{info['sq']:.4f}",
                     f"{info['rq']:.4f}", str(info["tp"]), str(info["fp"]),
                     str(info["fn"]), "y" if info["is_seen"] else "n",
                     "y" if info["is_thing"] else "n"))
    totals = report["totals"]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.append("")
    for key in ("PQ", "SQ", "RQ", "PQ_th", "PQ_st", "PQ_seen", "PQ_unseen", "mIoU"):
        lines.append(f"{key:10s} {totals[key]:.4f}")
    lines.append(f"{'images':10s} {report['n_images']}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: RunConfig, pred_dir: str | None) -> int:
    report = pipeline.evaluate_dataset(cfg, pred_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(_report_table(report))
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category_id", "name", "pq", "sq", "rq", "tp", "fp", "fn",
                         "is_seen", "is_thing", "gt_present"])
        for cat_id in sorted(report["per_category"]):
            info = report["per_category"][cat_id]
            writer.writerow([cat_id, info["name"], info["pq"], info["sq"], info["rq"],
                             info["tp"], info["fp"], info["fn"],
                             int(info["is_seen"]), int(info["is_thing"]),
                             int(info["gt_present"])])
    figures.render_pq_figure(report, out / "report_pq.png")
    print(_report_table(report))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    errors = gradcheck_report(seeds=20)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"max_relative_error": errors, "tolerance": GRADCHECK_TOLERANCE}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    worst = max(errors.values())
    for name in sorted(errors):
        status = "ok" if errors[name] <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:12s} max rel err {errors[name]:.3e}  {status}")
    if worst > GRADCHECK_TOLERANCE:
        print(f"gradient check failed (worst {worst:.3e} > {GRADCHECK_TOLERANCE})",
              file=sys.stderr)
        return 3
    return 0


def _feature_clusters(feat: np.ndarray, k: int, seed: int) -> np.ndarray:
    d, h, w = feat.shape
    pts = feat.reshape(d, -1).T
    assign, _ = kmeans(pts, k, seed=seed)
    return assign.reshape(h, w)


def _best_permutation_agreement(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """Max fraction of positions matching under a cluster-to-segment relabeling."""
    confusion = np.zeros((k, k), dtype=np.float64)
    for c in range(k):
        for s in range(k):
            confusion[c, s] = np.sum((pred == c) & (gt == s))
    assign = hungarian(-confusion)
    matched = sum(confusion[c, s] for c, s in assign.pairs)
    return float(matched / pred.size)


def cmd_cluster(cfg: RunConfig) -> int:
    if cfg.bundle_dir is None:
        raise FileNotFoundError("bundle_dir is not set")
    k = cfg.cluster_k if cfg.cluster_k is not None else cfg.n_gt_segments
    names = pipeline.dataset_image_names(cfg.bundle_dir)
    gt_dir = Path(cfg.gt_dir) if cfg.gt_dir else Path(cfg.bundle_dir) / "gt"
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in names:
        bundle = load_bundle(Path(cfg.bundle_dir) / "bundles" / name)
        sam_map = _feature_clusters(bundle.f_sam, k, cfg.seed)
        clip_map = _feature_clusters(bundle.f_clip, k, cfg.seed)
        gt_cells = None
        sam_agree = clip_agree = None
        gt_png = gt_dir / f"{name}.png"
        if gt_png.is_file():
            gt_pan = read_panoptic(gt_png, gt_dir / f"{name}.json")
            gt_cells = _segment_labels_on_grid(gt_pan.segment_ids, *sam_map.shape)
            n_gt = len(np.unique(gt_cells))
            if n_gt == k:
                sam_agree = _best_permutation_agreement(sam_map, gt_cells, k)
                gt_clip = _segment_labels_on_grid(gt_pan.segment_ids, *clip_map.shape)
                clip_agree = _best_permutation_agreement(clip_map, gt_clip, k)
        figures.render_cluster_figure(sam_map, clip_map, gt_cells,
                                      out / f"cluster_{name}.png", title=name)
        rows.append({"image": name, "k": k,
                     "sam_agreement": sam_agree, "clip_agreement": clip_agree})
    with (out / "cluster_summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image", "k", "sam_agreement",
                                                "clip_agreement"])
        writer.writeheader()
        writer.writerows(rows)
    (out / "cluster_summary.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n")
    for r in rows:
        sam_txt = "n/a" if r["sam_agreement"] is None else f"{r['sam_agreement']:.3f}"
        print(f"{r['image']}: k={k} spatial-agreement={sam_txt}")
    return 0


def _segment_labels_on_grid(segment_ids: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """Ground-truth segment label of each feature-grid cell (center pixel rule)."""
    h, w = segment_ids.shape
    ys = ((np.arange(gh) + 0.5) * (h / gh)).astype(np.int64).clip(0, h - 1)
    xs = ((np.arange(gw) + 0.5) * (w / gw)).astype(np.int64).clip(0, w - 1)
    labels = segment_ids[np.ix_(ys, xs)]
    # relabel to 0..n-1 in sorted-id order
    uniq = np.unique(labels)
    lut = {int(v): i for i, v in enumerate(uniq)}
    return np.vectorize(lut.get)(labels)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _config_from_args(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "infer":
            return cmd_infer(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.pred)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "cluster":
            return cmd_cluster(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, BundleError, PanopticFormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
