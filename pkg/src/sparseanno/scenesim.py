"""Synthetic nested part/subject scenes and a toy linear scorer.

Scenes place subject boxes with parts laid out at fixed relative positions
inside them.  The complete dataset annotates everything; the sparse dataset
drops every part category that was not verified on an image.  Proposals are
jittered copies of all complete boxes plus an equal number of random
background boxes, so unannotated parts receive proposals just like
annotated ones, mirroring a class-agnostic RPN.

The scorer is a per-category logistic model over hand-made proposal
features trained by gradient descent on :func:`classification_loss`.  It is
only meant to show the direction of the effect each regime has on the
training signal.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import config, rng
from .assign import (
    AssignmentMatrix,
    AssignOptions,
    ProposalSet,
    assign,
    base_assign,
)
from .dataset import (
    Annotation,
    Category,
    Dataset,
    Detection,
    DetectionSet,
    ImageRecord,
    VerificationRecord,
)
from .evaluator import calibrate, match_detections, withheld_split
from .geometry import Box, as_array, pairwise_aiou, pairwise_iou
from .loss import ScoreMatrix, classification_loss, sigmoid
from .partstats import PartSubjectMap
from .sparsify import DeletionRecord

REGIMES = ("baseline", "part-aware", "pseudo", "oracle-ignore", "oracle-positive", "soft", "complete")

# third Philox counter word; sparsify and the withheld split leave it at 0
_STREAM_SCENE = 1
_STREAM_SPLIT = 2
_STREAM_INIT = 3


class ScorerDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class PartSpec:
    name: str
    rel_box: tuple[float, float, float, float]


@dataclass(frozen=True)
class SubjectSpec:
    name: str
    parts: tuple[PartSpec, ...]


def default_subjects() -> tuple[SubjectSpec, ...]:
    return (
        SubjectSpec("person", (
            PartSpec("face", (0.35, 0.05, 0.65, 0.25)),
            PartSpec("hand", (0.05, 0.45, 0.25, 0.6)),
            PartSpec("footwear", (0.3, 0.85, 0.7, 0.98)),
        )),
        SubjectSpec("car", (
            PartSpec("tire", (0.08, 0.6, 0.32, 0.95)),
            PartSpec("license plate", (0.4, 0.7, 0.6, 0.85)),
        )),
    )


@dataclass(frozen=True)
class SceneConfig:
    n_images: int = 200
    image_size: tuple[int, int] = (256, 256)
    subjects: tuple[SubjectSpec, ...] = field(default_factory=default_subjects)
    subjects_per_image: tuple[int, int] = (1, 2)
    subject_scale: tuple[float, float] = (0.3, 0.6)
    part_verify_prob: float = 0.5
    jitter: float = 0.1
    proposals_per_gt: int = 2
    background_scale: tuple[float, float] = (0.05, 0.4)
    feature_noise: float = 0.1
    heldout_fraction: float = 0.5
    learning_rate: float = 1.0
    iterations: int = 300
    fg_iou: float = config.FG_IOU
    tau: float = config.TAU
    min_precision: float = config.MIN_PRECISION
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 0:
            raise ValueError("n_images must be non-negative")
        if min(self.image_size) <= 0:
            raise ValueError("image_size must be positive")
        lo, hi = self.subjects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("subjects_per_image must be an increasing non-negative range")
        for name in ("part_verify_prob", "feature_noise", "heldout_fraction", "jitter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for lo_, hi_ in (self.subject_scale, self.background_scale):
            if not 0.0 < lo_ <= hi_ <= 1.0:
                raise ValueError("scale ranges must satisfy 0 < lo <= hi <= 1")
        names = [s.name for s in self.subjects] + [p.name for s in self.subjects for p in s.parts]
        if len(set(s.name for s in self.subjects)) != len(self.subjects):
            raise ValueError("duplicate subject names")
        if set(s.name for s in self.subjects) & set(p.name for s in self.subjects for p in s.parts):
            raise ValueError("a category cannot be both a subject and a part")
        if not names:
            raise ValueError("at least one subject is required")
        for s in self.subjects:
            for p in s.parts:
                x1, y1, x2, y2 = p.rel_box
                if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
                    raise ValueError(f"part {p.name!r} of {s.name!r}: rel_box must lie within [0, 1]^2")

    @classmethod
    def from_json(cls, raw: dict) -> "SceneConfig":
        raw = dict(raw)
        if "subjects" in raw:
            raw["subjects"] = tuple(
                SubjectSpec(s["name"], tuple(PartSpec(p["name"], tuple(p["rel_box"])) for p in s["parts"]))
                for s in raw["subjects"]
            )
        for key in ("image_size", "subjects_per_image", "subject_scale", "background_scale"):
            if key in raw:
                raw[key] = tuple(raw[key])
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> dict:
        return asdict(self)

    def category_names(self) -> list[str]:
        names = []
        for s in self.subjects:
            names.append(s.name)
            names += [p.name for p in s.parts if p.name not in names]
        return names


@dataclass(frozen=True, eq=False)
class Scenes:
    sparse: Dataset
    proposals: tuple[ProposalSet, ...]
    complete: Dataset
    part_map: PartSubjectMap


def _jitter(box: Box, amount: float, g: np.random.Generator, width: int, height: int) -> Box:
    w, h = box.width, box.height
    d = g.uniform(-amount, amount, size=4) * np.array([w, h, w, h])
    x1, y1, x2, y2 = np.array(box.to_list()) + d
    x1, x2 = np.clip([x1, x2], 0.0, width)
    y1, y2 = np.clip([y1, y2], 0.0, height)
    return Box(float(min(x1, x2)), float(min(y1, y2)), float(max(x1, x2)), float(max(y1, y2)))


def _random_box(g: np.random.Generator, scale: tuple[float, float], width: int, height: int) -> Box:
    w = g.uniform(*scale) * width
    h = g.uniform(*scale) * height
    x = g.uniform(0.0, width - w)
    y = g.uniform(0.0, height - h)
    return Box(float(x), float(y), float(x + w), float(y + h))


def generate_scenes(cfg: SceneConfig) -> Scenes:
    names = cfg.category_names()
    cat_id = {n: k + 1 for k, n in enumerate(names)}
    categories = [Category(cat_id[n], n) for n in names]
    pmap = PartSubjectMap({
        cat_id[s.name]: tuple(cat_id[p.name] for p in s.parts) for s in cfg.subjects if s.parts
    })
    W, H = cfg.image_size
    images, complete, sparse, proposals = [], [], [], []
    verifications = {}
    ann_id = 1
    for idx in range(cfg.n_images):
        image_id = idx + 1
        g = rng.generator(cfg.seed, image_id, 0, _STREAM_SCENE)
        images.append(ImageRecord(image_id, W, H, f"scene_{image_id:05d}.png"))
        n_subj = int(g.integers(cfg.subjects_per_image[0], cfg.subjects_per_image[1] + 1))
        objs: list[tuple[int, Box, bool]] = []  # (category, box, is_part)
        for _ in range(n_subj):
            spec = cfg.subjects[int(g.integers(len(cfg.subjects)))]
            sbox = _random_box(g, cfg.subject_scale, W, H)
            objs.append((cat_id[spec.name], sbox, False))
            for part in spec.parts:
                rx1, ry1, rx2, ry2 = part.rel_box
                objs.append((cat_id[part.name], Box(
                    sbox.x_min + rx1 * sbox.width, sbox.y_min + ry1 * sbox.height,
                    sbox.x_min + rx2 * sbox.width, sbox.y_min + ry2 * sbox.height,
                ), True))
        present_parts = sorted({c for c, _, is_part in objs if is_part})
        verified_parts = {c for c in present_parts if g.random() < cfg.part_verify_prob}
        positive = set()
        for c, box, is_part in objs:
            a = Annotation(ann_id, image_id, c, box)
            ann_id += 1
            complete.append(a)
            if not is_part or c in verified_parts:
                sparse.append(a)
                positive.add(c)
        verifications[image_id] = VerificationRecord(image_id, frozenset(positive))
        boxes = [_jitter(b, cfg.jitter, g, W, H) for _, b, _ in objs for _ in range(cfg.proposals_per_gt)]
        boxes += [_random_box(g, cfg.background_scale, W, H) for _ in range(len(boxes))]
        proposals.append(ProposalSet(image_id, tuple(boxes)))

    full_ver = {}
    for image_id in verifications:
        cats = frozenset(a.category_id for a in complete if a.image_id == image_id)
        full_ver[image_id] = VerificationRecord(image_id, cats)
    return Scenes(
        sparse=Dataset.build(categories, images, sparse, verifications),
        proposals=tuple(proposals),
        complete=Dataset.build(categories, images, complete, full_ver),
        part_map=pmap,
    )


def _true_positive_mask(m: AssignmentMatrix, complete: Dataset, p: ProposalSet, fg_iou: float) -> np.ndarray:
    """Entries whose proposal overlaps a complete GT of the category by ``>= fg_iou``."""
    mask = np.zeros(m.shape, dtype=bool)
    anns = complete.annotations_for(p.image_id)
    if not anns or not len(p):
        return mask
    ious = pairwise_iou(p.array, as_array([a.box for a in anns]))
    for j, a in enumerate(anns):
        mask[:, m.column[a.category_id]] |= ious[:, j] >= fg_iou
    return mask


def false_negative_counts(
    m: AssignmentMatrix, complete: Dataset, p: ProposalSet, fg_iou: float = config.FG_IOU, mask=None
) -> tuple[int, int]:
    """``(negatives that are truly positive, truly positive entries)``, within ``mask`` if given."""
    if m.image_id != p.image_id or m.shape[0] != len(p):
        raise ValueError("assignment and proposals are not aligned")
    if p.image_id not in complete.image_index:
        raise ValueError(f"image {p.image_id} missing from the complete dataset")
    truth = _true_positive_mask(m, complete, p, fg_iou)
    if mask is not None:
        truth &= mask
    return int(np.count_nonzero(truth & (m.labels == -1))), int(np.count_nonzero(truth))


def false_negative_rate(
    m: AssignmentMatrix, complete: Dataset, p: ProposalSet, fg_iou: float = config.FG_IOU, mask=None
) -> float:
    """Share of truly positive (proposal, category) entries that are labeled ``-1``.

    The denominator does not depend on the assignment, so turning ``-1``
    into ``0`` can only lower the rate.  0 when there are no true positives.
    """
    fn, total = false_negative_counts(m, complete, p, fg_iou, mask)
    return fn / total if total else 0.0


def guarded_mask(m: AssignmentMatrix, p: ProposalSet, d: Dataset, pmap: PartSubjectMap,
                 tau: float = config.TAU) -> np.ndarray:
    """Entries ``(i, c)`` where ``c`` is a mapped part of a subject GT containing proposal ``i``."""
    mask = np.zeros(m.shape, dtype=bool)
    anns = [a for a in d.annotations_for(p.image_id) if a.category_id in pmap]
    if not anns or not len(p):
        return mask
    inside = pairwise_aiou(p.array, as_array([a.box for a in anns])) > tau
    for j, a in enumerate(anns):
        for c in pmap[a.category_id]:
            mask[:, m.column[c]] |= inside[:, j]
    return mask


def deletion_record(sparse: Dataset, complete: Dataset) -> DeletionRecord:
    """The annotations present in ``complete`` but missing from ``sparse``."""
    kept = {a.annotation_id for a in sparse.annotations}
    gone = tuple(a for a in complete.annotations if a.annotation_id not in kept)
    pairs = tuple(sorted({(a.image_id, a.category_id) for a in gone}))
    return DeletionRecord(pairs, gone, 0.0, 0)


def proposal_features(p: ProposalSet, complete: Dataset, category_ids: Sequence[int], cfg: SceneConfig,
                      noise_seed: int) -> np.ndarray:
    """Bias, center offsets, log-area, and one noisy "evidence" indicator per category.

    The indicator for category ``c`` is 1 when the proposal matches a
    complete GT of ``c`` (IoU >= fg_iou), flipped with probability
    ``feature_noise``.
    """
    W, H = cfg.image_size
    n = len(p)
    arr = p.array
    feats = np.zeros((n, 4 + len(category_ids)))
    if n == 0:
        return feats
    cx = (arr[:, 0] + arr[:, 2]) / (2 * W) - 0.5
    cy = (arr[:, 1] + arr[:, 3]) / (2 * H) - 0.5
    a = np.maximum((arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1]), 1e-6) / (W * H)
    feats[:, 0] = 1.0
    feats[:, 1] = cx
    feats[:, 2] = cy
    feats[:, 3] = np.log(a) / 5.0
    col = {c: k for k, c in enumerate(category_ids)}
    anns = complete.annotations_for(p.image_id)
    if anns:
        ious = pairwise_iou(arr, as_array([x.box for x in anns]))
        for j, x in enumerate(anns):
            feats[:, 4 + col[x.category_id]] = np.maximum(feats[:, 4 + col[x.category_id]], ious[:, j] >= cfg.fg_iou)
    g = rng.generator(noise_seed, p.image_id, 1, _STREAM_SCENE)
    flip = g.random((n, len(category_ids))) < cfg.feature_noise
    feats[:, 4:] = np.where(flip, 1.0 - feats[:, 4:], feats[:, 4:])
    return feats


@dataclass(frozen=True, eq=False)
class ToyScorer:
    category_ids: tuple[int, ...]
    weights: np.ndarray  # (C, F)
    initial: np.ndarray
    learning_rate: float
    iterations: int
    losses: tuple[float, ...] = ()

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T

    def predict(self, features: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(features))


def train_toy_scorer(
    features: Sequence[np.ndarray],
    assignments: Sequence[AssignmentMatrix],
    cfg: SceneConfig,
    seed: int | None = None,
) -> ToyScorer:
    """Full-batch gradient descent on the mean weighted sigmoid cross entropy."""
    if len(features) != len(assignments):
        raise ValueError("features and assignments are not aligned")
    cats = assignments[0].category_ids if assignments else ()
    x = np.concatenate(features) if features else np.zeros((0, 4))
    labels = np.concatenate([m.labels for m in assignments]) if assignments else np.zeros((0, 0), np.int8)
    weights = np.concatenate([m.weights for m in assignments]) if assignments else np.zeros((0, 0))
    if x.shape[0] != labels.shape[0]:
        raise ValueError("feature rows do not match assignment rows")
    g = rng.generator(cfg.seed if seed is None else seed, 0, 0, _STREAM_INIT)
    w0 = g.normal(0.0, 0.01, size=(len(cats), x.shape[1]))
    w = w0.copy()
    norm = max(x.shape[0], 1)
    losses = []
    for _ in range(cfg.iterations):
        res = classification_loss(ScoreMatrix(x @ w.T), (labels, weights))
        if not math.isfinite(res.total):
            raise ScorerDivergence(f"non-finite loss after {len(losses)} iterations")
        losses.append(res.total / norm)
        w = w - cfg.learning_rate * (res.gradient.T @ x) / norm
        if not np.isfinite(w).all():
            raise ScorerDivergence(f"non-finite weights after {len(losses)} iterations")
    return ToyScorer(tuple(cats), w, w0, cfg.learning_rate, cfg.iterations, tuple(losses))


def nms(dets: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-category non-maximum suppression."""
    out = []
    by_cat: dict[int, list[Detection]] = {}
    for det in dets:
        by_cat.setdefault(det.category_id, []).append(det)
    for c in sorted(by_cat):
        cand = sorted(by_cat[c], key=lambda x: -x.score)
        boxes = as_array([x.box for x in cand])
        alive = np.ones(len(cand), dtype=bool)
        ious = pairwise_iou(boxes, boxes)
        for k in range(len(cand)):
            if not alive[k]:
                continue
            out.append(cand[k])
            alive &= ~(ious[k] > iou_thresh)
    return out


def detect(scorer: ToyScorer, props: Sequence[ProposalSet], feats: Sequence[np.ndarray],
           min_score: float = 0.05) -> DetectionSet:
    out = []
    for p, f in zip(props, feats):
        probs = scorer.predict(f)
        dets = [
            Detection(p.image_id, c, p.proposals[i], float(probs[i, k]))
            for k, c in enumerate(scorer.category_ids)
            for i in np.flatnonzero(probs[:, k] >= min_score)
        ]
        out.extend(nms(dets))
    return DetectionSet(tuple(out))


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def run_seed(cfg: SceneConfig, regimes: Sequence[str] = ("baseline", "part-aware", "pseudo")) -> dict:
    """Train one scorer per regime on a generated scene set and score held-out proposals."""
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}; expected one of {REGIMES}")
    scenes = generate_scenes(cfg)
    sparse, complete = scenes.sparse, scenes.complete
    cats = tuple(sparse.categories.ids)
    train_ids, held_ids = withheld_split(sparse, cfg.heldout_fraction, cfg.seed + _STREAM_SPLIT)
    by_id = {p.image_id: p for p in scenes.proposals}
    train_p = [by_id[i] for i in train_ids]
    held_p = [by_id[i] for i in held_ids]
    feats = {p.image_id: proposal_features(p, complete, cats, cfg, cfg.seed) for p in scenes.proposals}
    train_f = [feats[p.image_id] for p in train_p]
    held_f = [feats[p.image_id] for p in held_p]
    parts = {c for ps in scenes.part_map.entries.values() for c in ps}

    opts = AssignOptions(tau=cfg.tau, fg_iou=cfg.fg_iou, part_map=scenes.part_map,
                         deletions=deletion_record(sparse, complete))
    if "pseudo" in regimes:
        opts.detections, opts.thresholds = _pseudo_inputs(cfg, sparse, train_p, train_f)

    report = {"seed": cfg.seed, "n_train_images": len(train_ids), "n_heldout_images": len(held_ids),
              "regimes": {}}
    for regime in regimes:
        if regime == "complete":
            ms = [base_assign(p, complete, cfg.fg_iou) for p in train_p]
        else:
            ms = [assign(regime, p, sparse, opts) for p in train_p]
        fn = den = gfn = gden = 0
        for m, p in zip(ms, train_p):
            a, b = false_negative_counts(m, complete, p, cfg.fg_iou)
            guard = guarded_mask(m, p, sparse, scenes.part_map, cfg.tau)
            ga, gb = false_negative_counts(m, complete, p, cfg.fg_iou, guard)
            fn, den, gfn, gden = fn + a, den + b, gfn + ga, gden + gb
        scorer = train_toy_scorer(train_f, ms, cfg)
        report["regimes"][regime] = {
            "false_negative_rate": fn / den if den else 0.0,
            "guarded_false_negative_rate": gfn / gden if gden else 0.0,
            "final_loss": scorer.losses[-1] if scorer.losses else None,
            **_heldout_scores(scorer, held_p, held_f, sparse, complete, parts, cfg.fg_iou),
        }
    return report


def _pseudo_inputs(cfg, sparse, train_p, train_f):
    """Detections from a baseline model plus thresholds calibrated on a withheld 20% split."""
    cats = tuple(sparse.categories.ids)
    first = train_toy_scorer(train_f, [base_assign(p, sparse, cfg.fg_iou) for p in train_p], cfg)
    dets = detect(first, train_p, train_f)
    train_sub = sparse.subset(p.image_id for p in train_p)
    fit_ids, calib_ids = withheld_split(train_sub, config.WITHHELD_FRACTION, cfg.seed + _STREAM_SPLIT + 1)
    fit_ids, calib_ids = set(fit_ids), set(calib_ids)
    fit = [(p, f) for p, f in zip(train_p, train_f) if p.image_id in fit_ids]
    calib = [(p, f) for p, f in zip(train_p, train_f) if p.image_id in calib_ids]
    second = train_toy_scorer([f for _, f in fit], [base_assign(p, sparse, cfg.fg_iou) for p, _ in fit], cfg)
    calib_dets = detect(second, [p for p, _ in calib], [f for _, f in calib])
    mr = match_detections(calib_dets, sparse.subset(calib_ids), config.CALIBRATION_IOU)
    return dets, calibrate(mr, cfg.min_precision, cats)


def _heldout_scores(scorer, held_p, held_f, sparse, complete, parts, fg_iou) -> dict:
    unannotated, annotated, background = [], [], []
    for p, f in zip(held_p, held_f):
        if not len(p):
            continue
        probs = scorer.predict(f)
        m = base_assign(p, complete, fg_iou)
        truth = _true_positive_mask(m, complete, p, fg_iou)
        is_bg = ~truth.any(axis=1)
        background.extend(probs[is_bg].ravel().tolist())
        have = {a.category_id for a in sparse.annotations_for(p.image_id)}
        for c in parts:
            k = m.column[c]
            vals = probs[truth[:, k], k].tolist()
            (annotated if c in have else unannotated).extend(vals)
    return {
        "unannotated_part_score": _mean(unannotated),
        "part_score": _mean(unannotated + annotated),
        "background_score": _mean(background),
        "n_unannotated_part_entries": len(unannotated),
    }


def run_experiment(cfg: SceneConfig, regimes: Sequence[str], seeds: int | Sequence[int], jobs: int = 1) -> dict:
    """Repeat :func:`run_seed` over seeds; outputs do not depend on ``jobs``."""
    seed_list = list(range(cfg.seed, cfg.seed + seeds)) if isinstance(seeds, int) else list(seeds)
    cfgs = [replace(cfg, seed=s) for s in seed_list]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(lambda c: run_seed(c, regimes), cfgs))
    else:
        runs = [run_seed(c, regimes) for c in cfgs]
    summary = {}
    for r in regimes:
        summary[r] = {
            key: _mean([run["regimes"][r][key] for run in runs if run["regimes"][r][key] is not None])
            for key in ("false_negative_rate", "guarded_false_negative_rate", "unannotated_part_score",
                        "part_score", "background_score")
        }
    comparisons = {}
    if "baseline" in regimes:
        for r in regimes:
            if r == "baseline":
                continue
            wins = sum(
                1 for run in runs
                if run["regimes"][r]["unannotated_part_score"] is not None
                and run["regimes"]["baseline"]["unannotated_part_score"] is not None
                and run["regimes"][r]["unannotated_part_score"] > run["regimes"]["baseline"]["unannotated_part_score"]
            )
            comparisons[r] = {"seeds_above_baseline": wins, "n_seeds": len(runs)}
    return {"config": cfg.to_json(), "seeds": seed_list, "runs": runs, "summary": summary,
            "comparisons": comparisons}


METRIC_COLUMNS = ("false_negative_rate", "guarded_false_negative_rate", "unannotated_part_score",
                  "part_score", "background_score", "final_loss")


def report_tsv(report: dict) -> str:
    lines = ["seed\tregime\t" + "\t".join(METRIC_COLUMNS)]
    for run in report["runs"]:
        for regime, metrics in run["regimes"].items():
            vals = ["NA" if metrics[k] is None else repr(metrics[k]) for k in METRIC_COLUMNS]
            lines.append(f"{run['seed']}\t{regime}\t" + "\t".join(vals))
    return "\n".join(lines) + "\n"
