"""Batch command line: ``regcd {synth,warpgen,register,detect,pipeline,eval}``.

Exit codes: 0 success, 1 processing error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import report
from .errors import ConfigError, RegCDError
from .evalbench import (confusion, draw_distortion, generate_scenario, metrics_report,
                        registration_error, synthetic_pair, write_bundle)
from .geomest import Homography, OverlapPolygon, polygon_mask
from .pipeline import PipelineConfig, detect_pair, register_pair
from .raster import load_raster, save_raster

log = logging.getLogger("regcd")

EXIT_OK, EXIT_PROCESSING, EXIT_USAGE = 0, 1, 2


class Artifacts:
    """Tracks files written by a command so a failed run can remove them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.written: List[Path] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def raster(self, name: str, r) -> None:
        save_raster(r, self.path(name))

    def discard(self) -> None:
        for p in reversed(self.written):
            p.unlink(missing_ok=True)
        self.written.clear()


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    return replace(cfg, **overrides) if overrides else cfg


def _metrics_outputs(art: Artifacts, rep: dict, stem: str = "metrics") -> None:
    art.json(f"{stem}.json", rep)
    c = rep["confusion"]
    report.write_csv(art.path(f"{stem}.csv"),
                     ["precision", "recall", "f1", "iou", "oa", "tp", "fp", "fn", "tn"],
                     [[rep["precision"], rep["recall"], rep["f1"], rep["iou"], rep["oa"],
                       c["tp"], c["fp"], c["fn"], c["tn"]]])


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(args, art: Artifacts) -> int:
    pair = synthetic_pair(args.width, args.height, seed=args.seed or 0)
    art.raster("t1.png", pair.t1)
    art.raster("t2_aligned.png", pair.t2_aligned)
    art.raster("gt_change.png", pair.gt_change)
    return EXIT_OK


def cmd_warpgen(args, art: Artifacts) -> int:
    t1, t2, gt = (load_raster(p) for p in (args.t1, args.t2_aligned, args.gt_change))
    spec = draw_distortion(args.level, args.seed or 0)
    sc = generate_scenario(t1, t2, gt, spec)
    write_bundle(sc, art.dir)
    art.written += [art.dir / n for n in ("t1.png", "t2_distorted.png", "gt_change.png", "gt_h.json", "spec.json")]
    if args.figures:
        report.plot_scenario(sc.t1, sc.t2_distorted, sc.gt_change,
                             f"level {spec.level}: rotation {spec.rotation_deg:.2f} deg, "
                             f"shift ({spec.shift_frac[0]:+.3f}, {spec.shift_frac[1]:+.3f})",
                             art.path("figures/scenario.png"))
    return EXIT_OK


def _write_registration(art: Artifacts, reg, cfg: PipelineConfig, t1, t2, figures: bool) -> None:
    art.json("h.json", reg.homography.to_json())
    art.raster("t2_registered.png", reg.t2_registered)
    art.json("overlap.json", reg.overlap.to_json())
    art.raster("validity.png", reg.validity)
    art.json("keypoints.json", reg.keypoints.to_json())
    rep = reg.report()
    art.json("register_report.json", rep)
    report.write_csv(art.path("keypoint_counts.csv"), ["level", "keypoints", "inliers"],
                     [[lv, rep["keypoints"][lv], rep["inliers"][lv]]
                      for lv in ("original", "stride2", "stride4", "total")])
    art.json("config.json", cfg.to_json())
    if figures:
        report.plot_matches(t1, t2, reg.keypoints, reg.inliers, art.path("figures/matches.png"))


def cmd_register(args, art: Artifacts) -> int:
    cfg = _config(args)
    t1, t2 = load_raster(args.t1), load_raster(args.t2)
    reg = register_pair(t1, t2, cfg)
    _write_registration(art, reg, cfg, t1, t2, args.figures)
    rep = reg.report()
    log.info("registered with %d/%d inliers", rep["inliers"]["total"], rep["keypoints"]["total"])
    return EXIT_OK


def _write_detection(art: Artifacts, cm) -> None:
    art.raster("change_map.png", cm.binary)
    art.raster("probs.png", cm.probs_raster())


def cmd_detect(args, art: Artifacts) -> int:
    cfg = _config(args)
    t1, t2r, validity = (load_raster(p) for p in (args.t1, args.t2_registered, args.validity))
    overlap = OverlapPolygon.from_json(json.loads(Path(args.overlap).read_text())) if args.overlap else None
    cm = detect_pair(t1, t2r, validity, cfg, overlap)
    _write_detection(art, cm)
    art.json("config.json", cfg.to_json())
    if args.figures:
        report.plot_change_overlay(t1, cm, art.path("figures/change_overlay.png"), overlap=overlap)
    return EXIT_OK


def cmd_pipeline(args, art: Artifacts) -> int:
    cfg = _config(args)
    t1, t2 = load_raster(args.t1), load_raster(args.t2)
    gt = load_raster(args.gt) if args.gt else None
    reg = register_pair(t1, t2, cfg)
    _write_registration(art, reg, cfg, t1, t2, args.figures)
    cm = detect_pair(t1, reg.t2_registered, reg.validity, cfg, reg.overlap)
    _write_detection(art, cm)

    if gt is not None or args.gt_h:
        summary = {}
        if gt is not None:
            mask = polygon_mask(reg.overlap, t1.width, t1.height)
            summary.update(metrics_report(confusion(cm.binary, gt, mask)))
        if args.gt_h:
            gt_h = Homography.from_json(json.loads(Path(args.gt_h).read_text()))
            mean_px, max_px = registration_error(reg.homography, gt_h, t1.width, t1.height)
            summary["registration_error"] = {"mean_px": mean_px, "max_px": max_px}
        if gt is not None:
            _metrics_outputs(art, summary)
        else:
            art.json("metrics.json", summary)
    if args.figures:
        report.plot_change_overlay(t1, cm, art.path("figures/change_overlay.png"), gt=gt, overlap=reg.overlap)
    return EXIT_OK


def cmd_eval(args, art: Artifacts) -> int:
    pred, gt = load_raster(args.pred), load_raster(args.gt)
    mask = load_raster(args.mask) if args.mask else None
    _metrics_outputs(art, metrics_report(confusion(pred, gt, mask)))
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
    p.add_argument("--workers", type=int, default=None, help="worker threads (overrides the config)")
    if config:
        p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--figures", action="store_true", help="also render diagnostic figures")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="regcd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic bi-temporal pair with ground-truth changes")
    _common(p, config=False)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("warpgen", help="distort an aligned pair into a benchmark scenario bundle")
    p.add_argument("t1")
    p.add_argument("t2_aligned")
    p.add_argument("gt_change")
    p.add_argument("--level", type=int, choices=(1, 2, 3), required=True)
    _common(p, config=False)
    p.set_defaults(func=cmd_warpgen)

    p = sub.add_parser("register", help="estimate the T2->T1 homography and warp T2")
    p.add_argument("t1")
    p.add_argument("t2")
    _common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("detect", help="tiled change detection on a registered pair")
    p.add_argument("t1")
    p.add_argument("t2_registered")
    p.add_argument("validity")
    p.add_argument("--overlap", default=None, help="overlap.json to mask the change map with")
    _common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("pipeline", help="register then detect, with optional evaluation")
    p.add_argument("t1")
    p.add_argument("t2")
    p.add_argument("--gt", default=None, help="ground-truth change mask (metrics inside the overlap)")
    p.add_argument("--gt-h", default=None, help="ground-truth homography JSON (registration error)")
    _common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="pixel metrics of a change map against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--mask", default=None, help="0/255 evaluation mask")
    _common(p, config=False)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("regcd: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    art = Artifacts(args.out)
    try:
        art.dir.mkdir(parents=True, exist_ok=True)
        return args.func(args, art)
    except ConfigError as exc:
        art.discard()
        print(f"regcd: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RegCDError, OSError, ValueError) as exc:
        art.discard()
        print(f"regcd: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_PROCESSING


if __name__ == "__main__":
    sys.exit(main())
