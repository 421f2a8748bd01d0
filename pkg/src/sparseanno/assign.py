"""Tri-state label assignment for RoI proposals.

Labels are ``+1`` (positive), ``-1`` (negative) and ``0`` (ignored).  Every
regime starts from :func:`base_assign`; the ignore rules only ever turn
``-1`` into ``0``, so positives are never ignored.  Regimes compose in a
fixed order: base, oracle positive, ignores, soft weights.

"Verified" categories of an image are the union of its positive and
negative sets.  A negatively verified category stays ``-1`` under every
ignore rule because its absence was confirmed by a human.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from . import config
from .dataset import Dataset, Detection, DetectionSet, IntegrityError
from .geometry import Box, as_array, pairwise_aiou, pairwise_iou
from .partstats import PartSubjectMap
from .sparsify import DeletionRecord

MODES = ("baseline", "part-aware", "pseudo", "oracle-ignore", "oracle-positive", "soft")


class Reason(enum.IntEnum):
    MATCHED = 1
    BACKGROUND = 2
    IGNORED_PART = 3
    IGNORED_PSEUDO = 4
    IGNORED_ORACLE = 5
    VERIFIED_NEGATIVE = 6
    ORACLE_POSITIVE = 7

    @property
    def code(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_code(cls, code: str) -> "Reason":
        return cls[code.upper().replace("-", "_")]


@dataclass(frozen=True)
class ProposalSet:
    image_id: int
    proposals: tuple[Box, ...] = ()

    @classmethod
    def from_array(cls, image_id: int, boxes) -> "ProposalSet":
        arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return cls(image_id, tuple(Box(*map(float, row)) for row in arr))

    @cached_property
    def array(self) -> np.ndarray:
        return as_array(self.proposals)

    def __len__(self):
        return len(self.proposals)


@dataclass(frozen=True, eq=False)
class AssignmentMatrix:
    image_id: int
    category_ids: tuple[int, ...]
    labels: np.ndarray
    weights: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        shape = (self.labels.shape[0], len(self.category_ids))
        for name in ("labels", "weights", "provenance"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if not np.isin(self.labels, (-1, 0, 1)).all():
            raise ValueError("labels must lie in {-1, 0, 1}")
        if not (np.isfinite(self.weights).all() and (self.weights >= 0).all()):
            raise ValueError("weights must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @cached_property
    def column(self) -> dict[int, int]:
        return {c: k for k, c in enumerate(self.category_ids)}

    def copy(self) -> "AssignmentMatrix":
        return replace(self, labels=self.labels.copy(), weights=self.weights.copy(),
                       provenance=self.provenance.copy())

    def ignored(self) -> list[set[int]]:
        """Per proposal, the category ids whose label is 0."""
        cats = np.asarray(self.category_ids)
        return [set(cats[row == 0].tolist()) for row in self.labels]

    def __eq__(self, other):
        if not isinstance(other, AssignmentMatrix):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.category_ids == other.category_ids
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.provenance, other.provenance)
        )

    def to_json(self, proposals: ProposalSet) -> dict:
        return {
            "image_id": self.image_id,
            "category_ids": list(self.category_ids),
            "proposals": [b.to_list() for b in proposals.proposals],
            "labels": self.labels.astype(int).tolist(),
            "weights": self.weights.tolist(),
            "provenance": [[Reason(int(v)).code for v in row] for row in self.provenance],
        }

    @classmethod
    def from_json(cls, raw: dict) -> tuple["AssignmentMatrix", ProposalSet]:
        cats = tuple(int(c) for c in raw["category_ids"])
        n, c = len(raw["proposals"]), len(cats)
        labels = np.asarray(raw["labels"], dtype=np.int8).reshape(n, c)
        weights = np.asarray(raw["weights"], dtype=np.float64).reshape(n, c)
        prov = np.asarray([[Reason.from_code(v) for v in row] for row in raw["provenance"]],
                          dtype=np.int8).reshape(n, c)
        image_id = int(raw["image_id"])
        return cls(image_id, cats, labels, weights, prov), ProposalSet.from_array(image_id, raw["proposals"])


def _check_aligned(m: AssignmentMatrix, p: ProposalSet) -> None:
    if m.image_id != p.image_id or m.shape[0] != len(p):
        raise ValueError(
            f"assignment for image {m.image_id} ({m.shape[0]} rows) does not match "
            f"proposals for image {p.image_id} ({len(p)} boxes)"
        )


def _gt(d: Dataset, image_id: int) -> tuple[np.ndarray, list[int]]:
    anns = d.annotations_for(image_id)
    return as_array([a.box for a in anns]), [a.category_id for a in anns]


def base_assign(p: ProposalSet, d: Dataset, fg_iou: float = config.FG_IOU) -> AssignmentMatrix:
    """Baseline labels: ``+1`` where the proposal overlaps a GT of the category by ``>= fg_iou``."""
    if p.image_id not in d.image_index:
        raise IntegrityError(f"unknown image {p.image_id}")
    if not 0.0 < fg_iou < 1.0:
        raise ValueError(f"fg_iou must lie in (0, 1), got {fg_iou}")
    cats = tuple(d.categories.ids)
    col = {c: k for k, c in enumerate(cats)}
    n = len(p)
    labels = np.full((n, len(cats)), -1, dtype=np.int8)
    prov = np.full((n, len(cats)), int(Reason.BACKGROUND), dtype=np.int8)
    gt_boxes, gt_labels = _gt(d, p.image_id)
    if n and gt_labels:
        ious = pairwise_iou(p.array, gt_boxes)
        for c in set(gt_labels):
            cols = [j for j, l in enumerate(gt_labels) if l == c]
            hit = ious[:, cols].max(axis=1) >= fg_iou
            labels[hit, col[c]] = 1
            prov[hit, col[c]] = int(Reason.MATCHED)
    for c in d.verifications[p.image_id].negative:
        labels[:, col[c]] = -1
        prov[:, col[c]] = int(Reason.VERIFIED_NEGATIVE)
    return AssignmentMatrix(p.image_id, cats, labels, np.ones((n, len(cats))), prov)


def _apply_ignore(m: AssignmentMatrix, mask: np.ndarray, reason: Reason) -> AssignmentMatrix:
    out = m.copy()
    flip = mask & (out.labels == -1)
    out.labels[flip] = 0
    out.provenance[flip] = int(reason)
    return out


def _sets_to_mask(m: AssignmentMatrix, sets: Sequence[set[int]]) -> np.ndarray:
    mask = np.zeros(m.shape, dtype=bool)
    for i, cats in enumerate(sets):
        for c in cats:
            mask[i, m.column[c]] = True
    return mask


def part_aware_ignore_sets(
    p: ProposalSet, d: Dataset, pmap: PartSubjectMap, tau: float = config.TAU
) -> list[set[int]]:
    """Per proposal, the unverified part categories of every subject GT that contains it."""
    sets: list[set[int]] = [set() for _ in range(len(p))]
    gt_boxes, gt_labels = _gt(d, p.image_id)
    subj = [j for j, l in enumerate(gt_labels) if l in pmap]
    if not subj or not len(p):
        return sets
    verified = d.verified(p.image_id)
    inside = pairwise_aiou(p.array, gt_boxes[subj]) > tau
    for col, j in enumerate(subj):
        parts = {q for q in pmap[gt_labels[j]] if q not in verified}
        if not parts:
            continue
        for i in np.flatnonzero(inside[:, col]):
            sets[i] |= parts
    return sets


def part_aware_ignore(
    m: AssignmentMatrix,
    p: ProposalSet,
    d: Dataset,
    pmap: PartSubjectMap,
    tau: float = config.TAU,
) -> AssignmentMatrix:
    _check_aligned(m, p)
    sets = part_aware_ignore_sets(p, d, pmap, tau)
    return _apply_ignore(m, _sets_to_mask(m, sets), Reason.IGNORED_PART)


def _threshold_map(thresholds) -> Mapping[int, float]:
    return getattr(thresholds, "thresholds", thresholds)


def pseudo_labels(
    image_id: int,
    d: Dataset,
    dets: DetectionSet,
    thresholds,
    gt_iou: float = config.GT_IOU,
) -> list[Detection]:
    """Detections on the image that survive the score, verified-label and GT-overlap filters.

    Categories absent from ``thresholds`` behave as an infinite threshold.
    """
    table = _threshold_map(thresholds)
    verified = d.verified(image_id)
    cand = [
        det for det in dets.for_image(image_id)
        if det.score >= table.get(det.category_id, math.inf) and det.category_id not in verified
    ]
    gt_boxes, _ = _gt(d, image_id)
    if not cand or not len(gt_boxes):
        return cand
    overlap = pairwise_iou(as_array([det.box for det in cand]), gt_boxes)
    return [det for det, row in zip(cand, overlap) if not (row > gt_iou).any()]


def pseudo_ignore_sets(
    p: ProposalSet,
    d: Dataset,
    dets: DetectionSet,
    thresholds,
    gt_iou: float = config.GT_IOU,
    roi_iou: float = config.ROI_IOU,
) -> list[set[int]]:
    sets: list[set[int]] = [set() for _ in range(len(p))]
    kept = pseudo_labels(p.image_id, d, dets, thresholds, gt_iou)
    if not kept or not len(p):
        return sets
    hit = pairwise_iou(p.array, as_array([det.box for det in kept])) > roi_iou
    for i, k in zip(*np.nonzero(hit)):
        sets[i].add(kept[k].category_id)
    return sets


def pseudo_ignore(
    m: AssignmentMatrix,
    p: ProposalSet,
    d: Dataset,
    dets: DetectionSet,
    thresholds,
    gt_iou: float = config.GT_IOU,
    roi_iou: float = config.ROI_IOU,
) -> AssignmentMatrix:
    _check_aligned(m, p)
    sets = pseudo_ignore_sets(p, d, dets, thresholds, gt_iou, roi_iou)
    return _apply_ignore(m, _sets_to_mask(m, sets), Reason.IGNORED_PSEUDO)


def _deleted_overlap(m: AssignmentMatrix, p: ProposalSet, rec: DeletionRecord):
    _check_aligned(m, p)
    deleted = rec.annotations_for(p.image_id)
    for a in deleted:
        if a.category_id not in m.column:
            raise IntegrityError(
                f"deletion record holds category {a.category_id} unknown to the assignment of image {p.image_id}"
            )
    if not deleted or not len(p):
        return None, deleted
    return pairwise_iou(p.array, as_array([a.box for a in deleted])), deleted


def oracle_ignore(
    m: AssignmentMatrix, p: ProposalSet, rec: DeletionRecord, iou_thresh: float = config.ORACLE_IOU
) -> AssignmentMatrix:
    """Ignore proposals overlapping a deleted GT of the same category by more than ``iou_thresh``."""
    ious, deleted = _deleted_overlap(m, p, rec)
    if ious is None:
        return m.copy()
    mask = np.zeros(m.shape, dtype=bool)
    for k, a in enumerate(deleted):
        mask[:, m.column[a.category_id]] |= ious[:, k] > iou_thresh
    return _apply_ignore(m, mask, Reason.IGNORED_ORACLE)


def oracle_positive(
    m: AssignmentMatrix, p: ProposalSet, rec: DeletionRecord, fg_iou: float = config.FG_IOU
) -> AssignmentMatrix:
    """Mark proposals matching a deleted GT (``IoU >= fg_iou``) as positive; no oversampling."""
    ious, deleted = _deleted_overlap(m, p, rec)
    out = m.copy()
    if ious is None:
        return out
    for k, a in enumerate(deleted):
        hit = ious[:, k] >= fg_iou
        col = m.column[a.category_id]
        out.labels[hit, col] = 1
        out.provenance[hit, col] = int(Reason.ORACLE_POSITIVE)
    return out


@dataclass(frozen=True)
class SoftWeightParams:
    """Linear ramp from ``w_min`` at zero overlap to 1 at ``fg_iou``."""

    w_min: float = config.SOFT_W_MIN
    fg_iou: float = config.FG_IOU

    def __post_init__(self):
        if not 0.0 <= self.w_min <= 1.0:
            raise ValueError(f"w_min must lie in [0, 1], got {self.w_min}")
        if not 0.0 < self.fg_iou <= 1.0:
            raise ValueError(f"fg_iou must lie in (0, 1], got {self.fg_iou}")

    def __call__(self, overlap):
        o = np.asarray(overlap, dtype=np.float64)
        w = self.w_min + (1.0 - self.w_min) * (o / self.fg_iou)
        return np.clip(w, self.w_min, 1.0)


def soft_weights(
    m: AssignmentMatrix, p: ProposalSet, d: Dataset, params: SoftWeightParams = SoftWeightParams()
) -> AssignmentMatrix:
    """Down-weight negatives by their best overlap with any annotated box on the image."""
    _check_aligned(m, p)
    out = m.copy()
    gt_boxes, _ = _gt(d, p.image_id)
    if len(gt_boxes) and len(p):
        best = pairwise_iou(p.array, gt_boxes).max(axis=1)
    else:
        best = np.zeros(len(p))
    w = params(best)
    neg = out.labels == -1
    out.weights[neg] = np.broadcast_to(w[:, None], out.shape)[neg]
    return out


@dataclass
class AssignOptions:
    tau: float = config.TAU
    fg_iou: float = config.FG_IOU
    gt_iou: float = config.GT_IOU
    roi_iou: float = config.ROI_IOU
    oracle_iou: float = config.ORACLE_IOU
    w_min: float = config.SOFT_W_MIN
    part_map: PartSubjectMap | None = None
    detections: DetectionSet | None = None
    thresholds: Mapping[int, float] | None = None
    deletions: DeletionRecord | None = None


def assign(mode: str, p: ProposalSet, d: Dataset, opts: AssignOptions | None = None) -> AssignmentMatrix:
    """Run one named regime end to end."""
    opts = opts or AssignOptions()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    m = base_assign(p, d, opts.fg_iou)
    if mode == "baseline":
        return m
    if mode == "part-aware":
        if opts.part_map is None:
            raise ValueError("part-aware mode needs a part map")
        return part_aware_ignore(m, p, d, opts.part_map, opts.tau)
    if mode == "pseudo":
        if opts.detections is None or opts.thresholds is None:
            raise ValueError("pseudo mode needs detections and thresholds")
        return pseudo_ignore(m, p, d, opts.detections, opts.thresholds, opts.gt_iou, opts.roi_iou)
    if mode in ("oracle-ignore", "oracle-positive"):
        if opts.deletions is None:
            raise ValueError(f"{mode} mode needs a deletion record")
        if mode == "oracle-ignore":
            return oracle_ignore(m, p, opts.deletions, opts.oracle_iou)
        return oracle_positive(m, p, opts.deletions, opts.fg_iou)
    return soft_weights(m, p, d, SoftWeightParams(opts.w_min, opts.fg_iou))
