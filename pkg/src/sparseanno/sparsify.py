"""Sparse-COCO construction by per-(category, image) random deletion."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

from . import rng
from .dataset import (
    Annotation,
    Dataset,
    IntegrityError,
    ParseError,
    _parse_bbox,
    annotation_to_coco,
)
from .jsonio import read_json, write_json

DELETIONS_FILE = "deletions.json"


@dataclass(frozen=True)
class DeletionRecord:
    deleted: tuple[tuple[int, int], ...]
    deleted_annotations: tuple[Annotation, ...]
    alpha: float
    seed: int

    def __post_init__(self):
        pairs = set(self.deleted)
        for a in self.deleted_annotations:
            if (a.image_id, a.category_id) not in pairs:
                raise IntegrityError(
                    f"deleted annotation {a.annotation_id} has no (image, category) entry in the record"
                )

    @classmethod
    def empty(cls) -> "DeletionRecord":
        return cls((), (), 0.0, 0)

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return [a for a in self.deleted_annotations if a.image_id == image_id]

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "seed": self.seed,
            "deleted": [{"image_id": i, "category_id": c} for i, c in self.deleted],
            "deleted_annotations": [annotation_to_coco(a) for a in self.deleted_annotations],
        }

    @classmethod
    def from_json(cls, raw: dict, source: str = "<memory>") -> "DeletionRecord":
        try:
            deleted = tuple((int(e["image_id"]), int(e["category_id"])) for e in raw["deleted"])
            anns = tuple(
                Annotation(int(a["id"]), int(a["image_id"]), int(a["category_id"]),
                           _parse_bbox(a["bbox"], f"{source} annotation {a['id']}"))
                for a in raw["deleted_annotations"]
            )
            return cls(deleted, anns, float(raw["alpha"]), int(raw["seed"]))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, IntegrityError | ParseError):
                raise
            raise ParseError(f"{source}: malformed deletion record ({e!r})") from None


def load_deletions(path: str | os.PathLike) -> DeletionRecord:
    return DeletionRecord.from_json(read_json(path), source=str(path))


def save_deletions(rec: DeletionRecord, out_dir: str | os.PathLike) -> Path:
    return write_json(Path(out_dir) / DELETIONS_FILE, rec.to_json())


def selected(seed: int, category_id: int, image_id: int, alpha: float) -> bool:
    """Bernoulli(alpha) draw for one (category, image) pair."""
    return rng.uniform(seed, category_id, image_id) < alpha


def sparsify(d: Dataset, alpha: float, seed: int) -> tuple[Dataset, DeletionRecord]:
    """Delete every annotation of category ``c`` on each image selected with probability ``alpha``.

    Deleted categories leave the image's positive set; they are not added to
    the negative set, since they are present but unverified.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    drop = set()
    for c, image_ids in sorted(d.images_with_category.items()):
        for image_id in sorted(image_ids):
            if selected(seed, c, image_id, alpha):
                drop.add((image_id, c))
    kept = tuple(a for a in d.annotations if (a.image_id, a.category_id) not in drop)
    removed = tuple(a for a in d.annotations if (a.image_id, a.category_id) in drop)
    ver = dict(d.verifications)
    for image_id, c in drop:
        rec = ver[image_id]
        ver[image_id] = replace(rec, positive=rec.positive - {c})
    out = d.with_annotations(kept, ver)
    return out, DeletionRecord(tuple(sorted(drop)), removed, float(alpha), int(seed))


def sparsity_stats(d: Dataset) -> tuple[float, float] | None:
    """Mean boxes per image and mean distinct categories per image.

    Images without annotations count in the denominator; ``None`` for a
    dataset without images.
    """
    n = len(d.images)
    if n == 0:
        return None
    distinct = {(a.image_id, a.category_id) for a in d.annotations}
    return len(d.annotations) / n, len(distinct) / n
