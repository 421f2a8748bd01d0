"""``sparseanno`` batch command line.

Every subcommand reads files, writes its outputs into ``--out`` and a
``manifest.json`` describing the resolved parameters, input digests and
output digests.  ``sparseanno replay <manifest>`` re-runs a subcommand from
its manifest.

Exit codes: 0 success, 1 parse/integrity/I-O failure, 2 bad arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, config
from .assign import MODES, AssignmentMatrix, AssignOptions, ProposalSet, assign
from .dataset import (
    Dataset,
    DatasetError,
    DetectionSet,
    IntegrityError,
    load_dataset,
    load_detections,
    save_dataset,
)
from .evaluator import (
    calibrate,
    category_aps,
    load_thresholds,
    match_detections,
    save_thresholds,
    threshold_sweep,
    withheld_split,
    write_sweep,
)
from .jsonio import file_digest, read_json, write_json, write_text_atomic
from .loss import ScoreMatrix, classification_loss
from .partstats import all_pairs, derive_part_map, load_part_map, stats_report, write_report
from .scenesim import REGIMES, SceneConfig, report_tsv, run_experiment
from .sparsify import load_deletions, save_deletions, sparsify, sparsity_stats

log = logging.getLogger("sparseanno")

MANIFEST_FILE = "manifest.json"
SEED_ENV = "SPARSEANNO_SEED"


class CliError(Exception):
    pass


def _float_in(lo: float, hi: float, lo_open: bool = False, hi_open: bool = False) -> Callable[[str], float]:
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        ok_lo = v > lo if lo_open else v >= lo
        ok_hi = v < hi if hi_open else v <= hi
        if not (math.isfinite(v) and ok_lo and ok_hi):
            raise argparse.ArgumentTypeError(
                f"{v} outside {'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}"
            )
        return v

    return parse


unit = _float_in(0.0, 1.0)
open_unit = _float_in(0.0, 1.0, lo_open=True, hi_open=True)
half_open_unit = _float_in(0.0, 1.0, lo_open=True)


def _non_negative_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _positive_int(text: str) -> int:
    v = _non_negative_int(text)
    if v == 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None
    if vals != sorted(vals):
        raise argparse.ArgumentTypeError("thresholds must be ascending")
    return vals


def _regime_list(text: str) -> list[str]:
    vals = [t.strip() for t in text.split(",") if t.strip()]
    bad = [v for v in vals if v not in REGIMES]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown regimes {bad}; choose from {', '.join(REGIMES)}")
    return vals


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return _non_negative_int(raw)
    except argparse.ArgumentTypeError:
        raise CliError(f"{SEED_ENV}={raw!r} is not a non-negative integer") from None


# --- subcommand handlers ---------------------------------------------------
# Each returns ({name: path} outputs, [input paths]).


def _load(args) -> Dataset:
    return load_dataset(args.dataset, args.verifications)


def cmd_stats(args):
    d = _load(args)
    out = Path(args.out)
    inputs = [args.dataset, args.verifications]
    outputs = {}
    if args.part_map:
        pmap = load_part_map(args.part_map, d)
        inputs.append(args.part_map)
    else:
        candidates = stats_report(d, all_pairs(d), args.tau, args.jobs)
        outputs["candidates"] = write_report(out / "candidates.tsv", candidates, d)
        pmap = derive_part_map(candidates, args.min_included, args.max_co_occur)
    rows = stats_report(d, pmap, args.tau, args.jobs)
    outputs["stats"] = write_report(out / "stats.tsv", rows, d)
    outputs["part_map"] = write_json(out / "part_map.json", pmap.to_json())
    return outputs, inputs


def cmd_sparsify(args):
    d = _load(args)
    sparse, rec = sparsify(d, args.alpha, args.seed)
    ann_path, ver_path = save_dataset(sparse, args.out)
    before, after = sparsity_stats(d), sparsity_stats(sparse)

    def pack(st):
        return None if st is None else {"boxes_per_image": st[0], "distinct_categories_per_image": st[1]}

    outputs = {
        "annotations": ann_path,
        "verifications": ver_path,
        "deletions": save_deletions(rec, args.out),
        "stats": write_json(Path(args.out) / "stats.json", {"input": pack(before), "output": pack(after)}),
    }
    return outputs, [args.dataset, args.verifications]


def _load_proposals(path, d: Dataset) -> list[ProposalSet]:
    raw = read_json(path)
    try:
        entries = raw["proposals"]
        sets = [ProposalSet.from_array(int(e["image_id"]), e["boxes"]) for e in entries]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{path}: malformed proposals file ({e!r})") from None
    for p in sets:
        if p.image_id not in d.image_index:
            raise DatasetError(f"{path}: proposals for unknown image_id {p.image_id}")
    return sets


def cmd_assign(args):
    d = _load(args)
    inputs = [args.dataset, args.verifications, args.proposals]
    opts = AssignOptions(tau=args.tau, fg_iou=args.fg_iou, gt_iou=args.gt_iou, roi_iou=args.roi_iou,
                         oracle_iou=args.oracle_iou, w_min=args.w_min)
    needs = {"part-aware": ["part_map"], "pseudo": ["detections", "thresholds"],
             "oracle-ignore": ["deletions"], "oracle-positive": ["deletions"]}
    for name in needs.get(args.mode, []):
        if getattr(args, name) is None:
            raise CliError(f"--mode {args.mode} requires --{name.replace('_', '-')}")
    if args.part_map:
        opts.part_map = load_part_map(args.part_map, d)
        inputs.append(args.part_map)
    if args.detections:
        opts.detections = load_detections(args.detections, d)
        inputs.append(args.detections)
    if args.thresholds:
        opts.thresholds = load_thresholds(args.thresholds)
        inputs.append(args.thresholds)
    if args.deletions:
        opts.deletions = load_deletions(args.deletions)
        inputs.append(args.deletions)
    props = _load_proposals(args.proposals, d)

    def one(p):
        return assign(args.mode, p, d, opts).to_json(p)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(one, props))
    else:
        rows = [one(p) for p in props]
    path = write_json(Path(args.out) / "assignments.json", {"mode": args.mode, "assignments": rows})
    return {"assignments": path}, inputs


def _restrict(args, d: Dataset, dets):
    if args.withheld_fraction is None:
        return d, dets
    _, held = withheld_split(d, args.withheld_fraction, args.seed)
    keep = set(held)
    return d.subset(held), DetectionSet(tuple(x for x in dets if x.image_id in keep))


def cmd_calibrate(args):
    d = _load(args)
    dets = load_detections(args.detections, d)
    d, dets = _restrict(args, d, dets)
    table = calibrate(match_detections(dets, d, args.iou), args.min_precision, d.categories.ids)
    path = save_thresholds(table, Path(args.out) / "thresholds.json")
    return {"thresholds": path}, [args.dataset, args.verifications, args.detections]


def cmd_eval(args):
    d = _load(args)
    dets = load_detections(args.detections, d)
    ious = config.COCO_IOU_THRESHOLDS if args.metric == "mmap" else (0.5,)
    cats = [d.categories.resolve(int(c) if c.isdigit() else c) for c in args.categories] if args.categories else None
    aps = category_aps(dets, d, ious, cats)
    value = sum(aps.values()) / len(aps) if aps else None
    outputs = {"eval": write_json(Path(args.out) / "eval.json", {
        "metric": args.metric,
        "value": value,
        "per_category": {str(c): v for c, v in aps.items()},
    })}
    if args.sweep:
        rows = threshold_sweep(dets, d, args.sweep, cats, ious)
        outputs["sweep"] = write_sweep(Path(args.out) / "sweep.tsv", rows)
    return outputs, [args.dataset, args.verifications, args.detections]


def cmd_simulate(args):
    cfg = SceneConfig.from_json(read_json(args.config)) if args.config else SceneConfig()
    cfg = replace(cfg, seed=args.seed)
    report = run_experiment(cfg, args.regimes, args.seeds, args.jobs)
    out = Path(args.out)
    return {
        "report": write_json(out / "report.json", report),
        "report_tsv": write_text_atomic(out / "report.tsv", report_tsv(report)),
    }, [args.config]


def cmd_eval_loss(args):
    raw = read_json(args.assignments)
    logits = {int(e["image_id"]): e["logits"] for e in read_json(args.logits)["logits"]}
    results, total = [], 0.0
    for entry in raw["assignments"]:
        m, _ = AssignmentMatrix.from_json(entry)
        if m.image_id not in logits:
            raise CliError(f"{args.logits}: no logits for image {m.image_id}")
        arr = np.asarray(logits[m.image_id], dtype=np.float64)
        if arr.size != m.labels.size:
            raise CliError(f"{args.logits}: logits for image {m.image_id} do not match shape {m.shape}")
        s = ScoreMatrix(arr.reshape(m.shape))
        res = classification_loss(s, m)
        total += res.total
        results.append({"image_id": m.image_id, **res.to_json()})
    path = write_json(Path(args.out) / "loss.json", {"total": total, "images": results})
    return {"loss": path}, [args.assignments, args.logits]


# --- parser ------------------------------------------------------------------


def _add_dataset(p):
    p.add_argument("--dataset", "--in", dest="dataset", required=True, help="COCO annotation JSON")
    p.add_argument("--verifications", default=None, help="verification sidecar JSON")


def _add_out(p):
    p.add_argument("--out", required=True, help="output directory")


def _add_jobs(p):
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker threads; outputs do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    seed = _default_seed()
    parser = argparse.ArgumentParser(prog="sparseanno", description="Sampling toolkit for sparsely annotated detection datasets.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"sparseanno {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("stats", help="part/subject inclusion and co-occurrence report", formatter_class=fmt)
    _add_dataset(p)
    p.add_argument("--part-map", default=None, help="curated part map JSON; derived from statistics if omitted")
    p.add_argument("--tau", type=half_open_unit, default=config.TAU, help="aIoU inclusion threshold")
    p.add_argument("--min-included", type=unit, default=config.MIN_INCLUDED,
                   help="derivation: keep pairs with included above this")
    p.add_argument("--max-co-occur", type=unit, default=config.MAX_CO_OCCUR,
                   help="derivation: keep pairs with co-occur below this")
    _add_jobs(p)
    _add_out(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sparsify", help="delete annotations per (category, image) with probability alpha",
                       formatter_class=fmt)
    _add_dataset(p)
    p.add_argument("--alpha", type=unit, required=True, help="deletion probability")
    p.add_argument("--seed", type=_non_negative_int, default=seed, help=f"random seed (env {SEED_ENV})")
    _add_out(p)
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("assign", help="tri-state label assignment for proposals", formatter_class=fmt)
    _add_dataset(p)
    p.add_argument("--proposals", required=True, help="proposals JSON (corner-form boxes)")
    p.add_argument("--mode", choices=MODES, default="baseline", help="assignment regime")
    p.add_argument("--tau", type=half_open_unit, default=config.TAU, help="part-aware aIoU threshold")
    p.add_argument("--fg-iou", type=open_unit, default=config.FG_IOU, help="positive IoU threshold")
    p.add_argument("--gt-iou", type=unit, default=config.GT_IOU, help="pseudo-label GT overlap rejection IoU")
    p.add_argument("--roi-iou", type=unit, default=config.ROI_IOU, help="pseudo-label proposal ignore IoU")
    p.add_argument("--oracle-iou", type=unit, default=config.ORACLE_IOU, help="oracle-ignore IoU")
    p.add_argument("--w-min", type=unit, default=config.SOFT_W_MIN, help="soft weighting floor")
    p.add_argument("--part-map", default=None, help="part map JSON (part-aware)")
    p.add_argument("--detections", default=None, help="pretrained detections JSON (pseudo)")
    p.add_argument("--thresholds", default=None, help="threshold table JSON (pseudo)")
    p.add_argument("--deletions", default=None, help="deletion record JSON (oracle modes)")
    _add_jobs(p)
    _add_out(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("calibrate", help="per-category score thresholds from a minimum precision",
                       formatter_class=fmt)
    _add_dataset(p)
    p.add_argument("--detections", required=True, help="detections JSON")
    p.add_argument("--min-precision", type=half_open_unit, default=config.MIN_PRECISION,
                   help="minimum tolerable precision")
    p.add_argument("--iou", type=open_unit, default=config.CALIBRATION_IOU, help="TP matching IoU")
    p.add_argument("--withheld-fraction", type=unit, default=None,
                   help="calibrate on this hashed fraction of images only")
    p.add_argument("--seed", type=_non_negative_int, default=seed, help=f"split seed (env {SEED_ENV})")
    _add_out(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="detection mAP and score-threshold sweeps", formatter_class=fmt)
    _add_dataset(p)
    p.add_argument("--detections", required=True, help="detections JSON")
    p.add_argument("--metric", choices=("mmap", "map50"), default="mmap", help="IoU 0.50:0.95 or 0.50")
    p.add_argument("--sweep", type=_float_list, default=None, help="comma-separated ascending score thresholds")
    p.add_argument("--categories", nargs="+", default=None, help="restrict to these category ids or names")
    _add_out(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="toy synthetic-scene experiment", formatter_class=fmt)
    p.add_argument("--config", default=None, help="scene config JSON; built-in defaults if omitted")
    p.add_argument("--regimes", type=_regime_list, default=["baseline", "part-aware", "pseudo"],
                   help="comma-separated regimes")
    p.add_argument("--seeds", type=_positive_int, default=20, help="number of consecutive seeds")
    p.add_argument("--seed", type=_non_negative_int, default=seed, help=f"first seed (env {SEED_ENV})")
    _add_jobs(p)
    _add_out(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval-loss", help="classification loss of logits under an assignment file",
                       formatter_class=fmt)
    p.add_argument("--assignments", required=True, help="assignments JSON from 'assign'")
    p.add_argument("--logits", required=True, help='JSON {"logits": [{"image_id", "logits"}]}')
    _add_out(p)
    p.set_defaults(func=cmd_eval_loss)

    p = sub.add_parser("replay", help="re-run a subcommand from its manifest", formatter_class=fmt)
    p.add_argument("manifest", help="manifest.json written by a previous run")
    p.add_argument("--out", default=None, help="write outputs here instead of the recorded directory")
    p.set_defaults(func=None)
    return parser


HANDLERS = {
    "stats": cmd_stats, "sparsify": cmd_sparsify, "assign": cmd_assign, "calibrate": cmd_calibrate,
    "eval": cmd_eval, "simulate": cmd_simulate, "eval-loss": cmd_eval_loss,
}


def _params(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def _run(args) -> None:
    outputs, inputs = args.func(args)
    params = _params(args)
    manifest = {
        "subcommand": args.subcommand,
        "parameters": params,
        "seed": params.get("seed"),
        "tool_version": __version__,
        "inputs": {str(p): file_digest(p) for p in inputs if p is not None},
        "outputs": {name: {"path": str(path), "digest": file_digest(path)} for name, path in sorted(outputs.items())},
    }
    write_json(Path(args.out) / MANIFEST_FILE, manifest)


def _replay(args) -> None:
    manifest = read_json(args.manifest)
    for path, digest in manifest["inputs"].items():
        if file_digest(path) != digest:
            raise IntegrityError(f"input {path} changed since the manifest was written")
    params = dict(manifest["parameters"])
    if args.out is not None:
        params["out"] = args.out
    ns = argparse.Namespace(**params, func=HANDLERS[manifest["subcommand"]])
    _run(ns)


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
    except CliError as e:
        print(f"sparseanno: error: {e}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.subcommand == "replay":
            _replay(args)
        else:
            _run(args)
    except CliError as e:
        print(f"sparseanno: error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"sparseanno: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
