"""Detection matching, AP/mmAP, per-category score-threshold calibration."""

from __future__ import annotations

import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import config, rng
from .dataset import Dataset, DetectionSet
from .geometry import as_array, pairwise_iou
from .jsonio import decode_threshold, encode_threshold, read_json, write_json, write_text_atomic


@dataclass(frozen=True)
class MatchRecord:
    image_id: int
    score: float
    tp: bool
    gt_id: int | None
    order: int  # position in the input DetectionSet


@dataclass(frozen=True)
class MatchResult:
    iou_thresh: float
    records: Mapping[int, tuple[MatchRecord, ...]]
    n_gt: Mapping[int, int]

    @property
    def category_ids(self) -> list[int]:
        return sorted(set(self.records) | set(self.n_gt))


def match_detections(dets: DetectionSet, d: Dataset, iou_thresh: float = config.CALIBRATION_IOU) -> MatchResult:
    """Greedy matching per (image, category) in descending score order.

    Ties on score keep input order; each detection takes the unmatched GT of
    highest IoU (lowest annotation id on ties) provided ``IoU >= iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    gt: dict[tuple[int, int], list] = defaultdict(list)
    for a in d.annotations:
        gt[(a.image_id, a.category_id)].append(a)
    n_gt: dict[int, int] = defaultdict(int)
    for (_, c), anns in gt.items():
        n_gt[c] += len(anns)
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    det_list = list(dets)
    for k, det in enumerate(det_list):
        groups[(det.image_id, det.category_id)].append(k)

    records: dict[int, list[MatchRecord]] = defaultdict(list)
    for key, idxs in groups.items():
        idxs = sorted(idxs, key=lambda k: (-det_list[k].score, k))
        anns = sorted(gt.get(key, []), key=lambda a: a.annotation_id)
        if anns:
            ious = pairwise_iou(as_array([det_list[k].box for k in idxs]), as_array([a.box for a in anns]))
        taken = np.zeros(len(anns), dtype=bool)
        for row, k in enumerate(idxs):
            gt_id = None
            if anns:
                cand = np.where(taken, -1.0, ious[row])
                j = int(np.argmax(cand))  # first maximum = lowest annotation id
                if cand[j] >= iou_thresh:
                    taken[j] = True
                    gt_id = anns[j].annotation_id
            records[key[1]].append(MatchRecord(key[0], det_list[k].score, gt_id is not None, gt_id, k))
    ordered = {c: tuple(sorted(v, key=lambda r: r.order)) for c, v in sorted(records.items())}
    return MatchResult(iou_thresh, ordered, dict(n_gt))


def _curve(recs: Sequence[MatchRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct score thresholds (descending) with cumulative TP / FP counts at each."""
    if not recs:
        z = np.zeros(0)
        return z, z, z
    scores = np.array([r.score for r in recs])
    tps = np.array([r.tp for r in recs], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(1.0 - tps)
    # keep the last index of each run of equal scores
    last = np.append(scores[1:] != scores[:-1], True)
    return scores[last], ctp[last], cfp[last]


def precision_at(mr: MatchResult, category: int, t: float) -> float | None:
    recs = [r for r in mr.records.get(category, ()) if r.score >= t]
    if not recs:
        return None
    return sum(r.tp for r in recs) / len(recs)


def average_precision(mr: MatchResult, category: int) -> float | None:
    """Area under the envelope-interpolated precision/recall curve.

    PR points are taken at every distinct score; the precision used for
    recall ``r`` is the best precision at any recall ``>= r``.
    """
    n = mr.n_gt.get(category, 0)
    if n == 0:
        return None
    _, ctp, cfp = _curve(mr.records.get(category, ()))
    if not len(ctp):
        return 0.0
    recall = ctp / n
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    widths = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(widths * envelope))


def category_aps(
    dets: DetectionSet,
    d: Dataset,
    iou_thresholds: Sequence[float] = config.COCO_IOU_THRESHOLDS,
    categories: Iterable[int] | None = None,
) -> dict[int, float]:
    """Per category with ground truth, AP averaged over the IoU thresholds."""
    wanted = None if categories is None else set(categories)
    per_cat: dict[int, list[float]] = defaultdict(list)
    for t in iou_thresholds:
        mr = match_detections(dets, d, t)
        for c, n in mr.n_gt.items():
            if n and (wanted is None or c in wanted):
                per_cat[c].append(average_precision(mr, c))
    return {c: float(np.mean(v)) for c, v in sorted(per_cat.items())}


def mmap(
    dets: DetectionSet,
    d: Dataset,
    iou_thresholds: Sequence[float] = config.COCO_IOU_THRESHOLDS,
    categories: Iterable[int] | None = None,
) -> float | None:
    """Mean AP over categories with ground truth and over the IoU thresholds.

    ``None`` when no requested category has any ground truth.
    """
    aps = category_aps(dets, d, iou_thresholds, categories)
    return float(np.mean(list(aps.values()))) if aps else None


def threshold_sweep(
    dets: DetectionSet,
    d: Dataset,
    thresholds: Sequence[float],
    categories: Iterable[int] | None = None,
    iou_thresholds: Sequence[float] = config.COCO_IOU_THRESHOLDS,
) -> list[tuple[float, float | None]]:
    """mAP after dropping detections scored below each threshold."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    cats = None if categories is None else list(categories)
    return [(t, mmap(dets.filter(t), d, iou_thresholds, cats)) for t in thresholds]


def sweep_tsv(rows: Sequence[tuple[float, float | None]]) -> str:
    lines = ["threshold\tmAP"]
    lines += [f"{t!r}\t{'NA' if v is None else repr(v)}" for t, v in rows]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ThresholdTable:
    thresholds: Mapping[int, float]
    min_precision: float

    def __post_init__(self):
        for c, t in self.thresholds.items():
            if not (math.isinf(t) and t > 0) and not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold for category {c} must lie in [0, 1] or be +inf, got {t}")

    def __getitem__(self, category: int) -> float:
        return self.thresholds.get(category, math.inf)

    def to_json(self) -> dict:
        return {
            "min_precision": self.min_precision,
            "thresholds": {str(c): encode_threshold(t) for c, t in sorted(self.thresholds.items())},
        }

    @classmethod
    def from_json(cls, raw: dict) -> "ThresholdTable":
        return cls({int(c): decode_threshold(v) for c, v in raw["thresholds"].items()},
                   float(raw["min_precision"]))


def load_thresholds(path: str | os.PathLike) -> ThresholdTable:
    return ThresholdTable.from_json(read_json(path))


def save_thresholds(table: ThresholdTable, path: str | os.PathLike):
    return write_json(path, table.to_json())


def calibrate(
    mr: MatchResult, min_precision: float = config.MIN_PRECISION, categories: Iterable[int] | None = None
) -> ThresholdTable:
    """Per category, the smallest observed score whose precision reaches ``min_precision``.

    Categories with no qualifying score get ``+inf``.  ``categories`` adds
    entries for categories that have no detections at all.
    """
    if not 0.0 < min_precision <= 1.0:
        raise ValueError(f"min_precision must lie in (0, 1], got {min_precision}")
    cats = set(mr.records) | set(categories or ())
    out = {}
    for c in sorted(cats):
        scores, ctp, cfp = _curve(mr.records.get(c, ()))
        ok = ctp / (ctp + cfp) >= min_precision if len(scores) else np.zeros(0, dtype=bool)
        # scores are descending, so the last qualifying entry is the minimum
        out[c] = float(scores[np.flatnonzero(ok)[-1]]) if ok.any() else math.inf
    return ThresholdTable(out, float(min_precision))


def withheld_split(
    d: Dataset, fraction: float = config.WITHHELD_FRACTION, seed: int = 0
) -> tuple[list[int], list[int]]:
    """Deterministic ``(train, withheld)`` split of image ids, keyed by ``(seed, image_id)``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    train, held = [], []
    for image_id in d.image_ids:
        (held if rng.uniform(seed, 0, image_id) < fraction else train).append(image_id)
    return train, held


def write_sweep(path: str | os.PathLike, rows):
    return write_text_atomic(path, sweep_tsv(rows))
