"""Independent reference implementations used by the tests.

These are deliberately slow and literal: exact rational geometry, direct
transcriptions of the two sampling algorithms, and brute-force metrics.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from sparseanno.dataset import Annotation, Category, Dataset, ImageRecord, VerificationRecord
from sparseanno.geometry import Box, aiou, iou


def frac_box(b: Box):
    return tuple(Fraction(v) for v in (b.x_min, b.y_min, b.x_max, b.y_max))


def frac_area(b: Box) -> Fraction:
    x1, y1, x2, y2 = frac_box(b)
    return (x2 - x1) * (y2 - y1)


def frac_inter(b1: Box, b2: Box) -> Fraction:
    a = frac_box(b1)
    b = frac_box(b2)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    return iw * ih


def frac_iou(b1: Box, b2: Box) -> Fraction:
    inter = frac_inter(b1, b2)
    union = frac_area(b1) + frac_area(b2) - inter
    return inter / union if union > 0 else Fraction(0)


def frac_aiou(b1: Box, b2: Box) -> Fraction:
    a = frac_area(b1)
    return frac_inter(b1, b2) / a if a > 0 else Fraction(0)


def literal_part_aware(proposals, gt_boxes, gt_labels, verified, part_map, tau):
    """Algorithm 1, loop for loop."""
    ignore = [[] for _ in proposals]
    for i in range(len(proposals)):
        for j in range(len(gt_boxes)):
            if aiou(proposals[i], gt_boxes[j]) > tau and gt_labels[j] in part_map:
                for p in part_map[gt_labels[j]]:
                    if p not in verified:
                        ignore[i].append(p)
    return [set(s) for s in ignore]


def literal_pseudo(proposals, gt_boxes, verified, det_boxes, det_labels, det_scores, thresholds,
                   gt_iou=0.8, roi_iou=0.5):
    """Algorithm 2, loop for loop (proposal index used in the second loop)."""
    keep = list(range(len(det_boxes)))
    for k in range(len(det_boxes)):
        if det_scores[k] < thresholds.get(det_labels[k], math.inf) or det_labels[k] in verified:
            keep.remove(k)
            continue
        for j in range(len(gt_boxes)):
            if iou(gt_boxes[j], det_boxes[k]) > gt_iou:
                keep.remove(k)
                break
    ignore = [[] for _ in proposals]
    for i in range(len(proposals)):
        for k in keep:
            if iou(proposals[i], det_boxes[k]) > roi_iou:
                ignore[i].append(det_labels[k])
    return [set(s) for s in ignore]


def brute_included(d: Dataset, part: int, subject: int, tau: float):
    images_p = {a.image_id for a in d.annotations if a.category_id == part}
    images_s = {a.image_id for a in d.annotations if a.category_id == subject}
    shared = images_p & images_s
    parts = [a for a in d.annotations if a.category_id == part and a.image_id in shared]
    if not parts:
        return None
    hits = 0
    for bp in parts:
        for bs in d.annotations:
            if bs.category_id == subject and bs.image_id == bp.image_id and aiou(bp.box, bs.box) > tau:
                hits += 1
                break
    return hits / len(parts)


def brute_co_occur(d: Dataset, part: int, subject: int):
    images_s = set()
    both = set()
    for a in d.annotations:
        if a.category_id == subject:
            images_s.add(a.image_id)
    for img in images_s:
        for a in d.annotations:
            if a.image_id == img and a.category_id == part:
                both.add(img)
    return len(both) / len(images_s) if images_s else None


def brute_ap(records, n_gt):
    """AP from PR points at every distinct score threshold, envelope taken by explicit max."""
    if n_gt == 0:
        return None
    points = []
    for t in sorted({s for s, _ in records}, reverse=True):
        sel = [tp for s, tp in records if s >= t]
        tp = sum(sel)
        points.append((Fraction(tp, n_gt), Fraction(tp, len(sel))))
    ap = Fraction(0)
    prev = Fraction(0)
    for r in sorted({r for r, _ in points}):
        env = max(p for rr, p in points if rr >= r)
        ap += (r - prev) * env
        prev = r
    return float(ap)


def brute_min_threshold(records, min_precision):
    best = math.inf
    for t in {s for s, _ in records}:
        sel = [tp for s, tp in records if s >= t]
        if sum(sel) / len(sel) >= min_precision:
            best = min(best, t)
    return best


def random_box(rng: np.random.Generator, lo=0.0, hi=100.0, grid=0.25, min_size=0.0) -> Box:
    x = np.sort(rng.uniform(lo, hi, 2))
    y = np.sort(rng.uniform(lo, hi, 2))
    if grid:
        x = np.round(x / grid) * grid
        y = np.round(y / grid) * grid
    x[1] = max(x[1], x[0] + min_size)
    y[1] = max(y[1], y[0] + min_size)
    return Box(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


def box_inside(rng: np.random.Generator, outer: Box, slack=0.1, grid=0.25) -> Box:
    """A box mostly inside ``outer`` (may poke out by ``slack`` of its size)."""
    w, h = outer.width, outer.height
    xs = np.sort(rng.uniform(outer.x_min - slack * w, outer.x_max + slack * w, 2))
    ys = np.sort(rng.uniform(outer.y_min - slack * h, outer.y_max + slack * h, 2))
    xs = np.round(xs / grid) * grid
    ys = np.round(ys / grid) * grid
    return Box(float(xs[0]), float(ys[0]), float(max(xs[1], xs[0] + grid)), float(max(ys[1], ys[0] + grid)))


def single_image_dataset(n_categories, gt, positive, negative, size=200) -> Dataset:
    cats = [Category(c, f"c{c}") for c in range(1, n_categories + 1)]
    anns = [Annotation(k + 1, 1, c, b) for k, (c, b) in enumerate(gt)]
    ver = {1: VerificationRecord(1, frozenset(positive), frozenset(negative))}
    return Dataset.build(cats, [ImageRecord(1, size, size)], anns, ver)


def random_instance(rng: np.random.Generator, max_props=20, max_gt=10, max_cats=8):
    """A single-image dataset with proposals, a random part map and verification."""
    n_cat = int(rng.integers(2, max_cats + 1))
    m = int(rng.integers(0, max_gt + 1))
    gt = [(int(rng.integers(1, n_cat + 1)), random_box(rng, min_size=1.0)) for _ in range(m)]
    labels = {c for c, _ in gt}
    others = [c for c in range(1, n_cat + 1) if c not in labels]
    positive = set(labels) | {c for c in others if rng.random() < 0.25}
    negative = {c for c in others if c not in positive and rng.random() < 0.25}
    d = single_image_dataset(n_cat, gt, positive, negative)
    part_map = {}
    for s in range(1, n_cat + 1):
        if rng.random() < 0.5:
            parts = [c for c in range(1, n_cat + 1) if c != s and rng.random() < 0.4]
            if parts:
                part_map[s] = tuple(parts)
    n = int(rng.integers(0, max_props + 1))
    props = []
    for _ in range(n):
        if gt and rng.random() < 0.6:
            props.append(box_inside(rng, gt[int(rng.integers(len(gt)))][1]))
        else:
            props.append(random_box(rng, min_size=0.5))
    return d, props, part_map
