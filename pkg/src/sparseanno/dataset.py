"""In-memory data model and COCO-compatible persistence.

Annotations are read from COCO object-detection JSON (``bbox`` as
``[x, y, w, h]``) and converted to corner-form :class:`Box` on ingestion.
Per-image verification lives in a sidecar file::

    {"verifications": [{"image_id": 1, "positive": [3], "negative": [7]}]}

Images missing from the sidecar (or every image, when no sidecar is given)
default to ``positive = annotated categories`` and ``negative = {}``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .geometry import Box
from .jsonio import read_json, write_json

logger = logging.getLogger(__name__)

ANNOTATIONS_FILE = "annotations.json"
VERIFICATIONS_FILE = "verifications.json"


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    """Malformed input file."""


class IntegrityError(DatasetError):
    """Dangling ids or contradictory verification."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class CategoryTable:
    entries: tuple[Category, ...] = ()

    def __post_init__(self):
        ids = [c.id for c in self.entries]
        names = [c.name for c in self.entries]
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"duplicate category ids in {sorted(ids)}")
        if len(set(names)) != len(names):
            raise IntegrityError("duplicate category names")
        bad = [i for i in ids if i <= 0]
        if bad:
            raise IntegrityError(f"category ids must be positive, got {bad}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, category_id) -> bool:
        return category_id in self.by_id

    @cached_property
    def by_id(self) -> dict[int, Category]:
        return {c.id: c for c in self.entries}

    @cached_property
    def by_name(self) -> dict[str, Category]:
        return {c.name: c for c in self.entries}

    @property
    def ids(self) -> list[int]:
        return sorted(self.by_id)

    def resolve(self, ref: int | str) -> int:
        """Category id for an id or a name."""
        if isinstance(ref, bool):
            raise IntegrityError(f"bad category reference {ref!r}")
        if isinstance(ref, int):
            if ref not in self.by_id:
                raise IntegrityError(f"unknown category id {ref}")
            return ref
        if ref in self.by_name:
            return self.by_name[ref].id
        raise IntegrityError(f"unknown category {ref!r}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True)
class Annotation:
    annotation_id: int
    image_id: int
    category_id: int
    box: Box


@dataclass(frozen=True)
class VerificationRecord:
    image_id: int
    positive: frozenset[int] = frozenset()
    negative: frozenset[int] = frozenset()

    def __post_init__(self):
        both = self.positive & self.negative
        if both:
            raise IntegrityError(
                f"image {self.image_id}: categories {sorted(both)} are both positive and negative"
            )

    @property
    def verified(self) -> frozenset[int]:
        return self.positive | self.negative


@dataclass(frozen=True)
class Dataset:
    categories: CategoryTable
    images: tuple[ImageRecord, ...]
    annotations: tuple[Annotation, ...]
    verifications: Mapping[int, VerificationRecord] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        categories: Iterable[Category] | CategoryTable,
        images: Iterable[ImageRecord],
        annotations: Iterable[Annotation],
        verifications: Mapping[int, VerificationRecord] | None = None,
    ) -> "Dataset":
        """Construct, fill default verifications and validate."""
        if not isinstance(categories, CategoryTable):
            categories = CategoryTable(tuple(categories))
        images = tuple(images)
        annotations = tuple(annotations)
        ver = dict(verifications or {})
        annotated = defaultdict(set)
        for a in annotations:
            annotated[a.image_id].add(a.category_id)
        for img in images:
            if img.image_id not in ver:
                ver[img.image_id] = VerificationRecord(img.image_id, frozenset(annotated[img.image_id]))
        ds = cls(categories, images, annotations, dict(sorted(ver.items())))
        ds.validate()
        return ds

    def validate(self) -> None:
        image_ids = [img.image_id for img in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise IntegrityError("duplicate image ids")
        known = set(image_ids)
        for img in self.images:
            if img.width <= 0 or img.height <= 0:
                raise IntegrityError(f"image {img.image_id}: non-positive size {img.width}x{img.height}")
        ann_ids = set()
        for a in self.annotations:
            if a.annotation_id in ann_ids:
                raise IntegrityError(f"duplicate annotation id {a.annotation_id}")
            ann_ids.add(a.annotation_id)
            if a.image_id not in known:
                raise IntegrityError(f"annotation {a.annotation_id}: unknown image_id {a.image_id}")
            if a.category_id not in self.categories:
                raise IntegrityError(f"annotation {a.annotation_id}: unknown category_id {a.category_id}")
        if set(self.verifications) != known:
            extra = sorted(set(self.verifications) - known)
            if extra:
                raise IntegrityError(f"verification for unknown image_id {extra[0]}")
            raise IntegrityError(f"missing verification for image_id {sorted(known - set(self.verifications))[0]}")
        for image_id, rec in self.verifications.items():
            if rec.image_id != image_id:
                raise IntegrityError(f"verification keyed {image_id} holds record for {rec.image_id}")
            for c in rec.positive | rec.negative:
                if c not in self.categories:
                    raise IntegrityError(f"verification of image {image_id}: unknown category_id {c}")
        for a in self.annotations:
            rec = self.verifications[a.image_id]
            if a.category_id in rec.negative:
                raise IntegrityError(
                    f"annotation {a.annotation_id}: category {a.category_id} is negatively verified "
                    f"on image {a.image_id}"
                )
            if a.category_id not in rec.positive:
                raise IntegrityError(
                    f"annotation {a.annotation_id}: category {a.category_id} is not positively verified "
                    f"on image {a.image_id}"
                )

    @cached_property
    def image_index(self) -> dict[int, ImageRecord]:
        return {img.image_id: img for img in self.images}

    @cached_property
    def _by_image(self) -> dict[int, tuple[Annotation, ...]]:
        out = defaultdict(list)
        for a in self.annotations:
            out[a.image_id].append(a)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def images_with_category(self) -> dict[int, frozenset[int]]:
        """``category_id -> image ids holding at least one annotation of it``."""
        out = defaultdict(set)
        for a in self.annotations:
            out[a.category_id].add(a.image_id)
        return {c: frozenset(v) for c, v in out.items()}

    @property
    def image_ids(self) -> list[int]:
        return [img.image_id for img in self.images]

    def annotations_for(self, image_id: int) -> tuple[Annotation, ...]:
        return self._by_image.get(image_id, ())

    def verified(self, image_id: int) -> frozenset[int]:
        return self.verifications[image_id].verified

    def subset(self, image_ids: Iterable[int]) -> "Dataset":
        keep = set(image_ids)
        return Dataset(
            self.categories,
            tuple(img for img in self.images if img.image_id in keep),
            tuple(a for a in self.annotations if a.image_id in keep),
            {k: v for k, v in self.verifications.items() if k in keep},
        )

    def with_annotations(
        self, annotations: Iterable[Annotation], verifications: Mapping[int, VerificationRecord]
    ) -> "Dataset":
        ds = replace(self, annotations=tuple(annotations), verifications=dict(verifications))
        ds.validate()
        return ds


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise IntegrityError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    detections: tuple[Detection, ...] = ()

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    @cached_property
    def _by_image(self) -> dict[int, tuple[Detection, ...]]:
        out = defaultdict(list)
        for det in self.detections:
            out[det.image_id].append(det)
        return {k: tuple(v) for k, v in out.items()}

    def for_image(self, image_id: int) -> tuple[Detection, ...]:
        return self._by_image.get(image_id, ())

    def filter(self, min_score: float) -> "DetectionSet":
        return DetectionSet(tuple(d for d in self.detections if d.score >= min_score))


def _parse_bbox(raw, where: str) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ParseError(f"{where}: bbox must be [x, y, w, h], got {raw!r}")
    try:
        x, y, w, h = (float(v) for v in raw)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: non-numeric bbox {raw!r}") from None
    if w < 0 or h < 0:
        raise ParseError(f"{where}: negative bbox extent {raw!r}")
    try:
        return Box.from_xywh(x, y, w, h)
    except ValueError as e:
        raise ParseError(f"{where}: {e}") from None


def _load_json(path) -> object:
    try:
        return read_json(path)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed JSON ({e})") from None


def _required(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise ParseError(f"{where}: missing key {key!r}") from None


def dataset_from_coco(coco: dict, verifications: dict | None = None, source: str = "<memory>") -> Dataset:
    if not isinstance(coco, dict):
        raise ParseError(f"{source}: top level must be an object")
    try:
        cats = [Category(int(_required(c, "id", f"{source} category")), str(_required(c, "name", f"{source} category")))
                for c in _required(coco, "categories", source)]
        images = [
            ImageRecord(
                int(_required(im, "id", f"{source} image")),
                int(_required(im, "width", f"{source} image {im.get('id')}")),
                int(_required(im, "height", f"{source} image {im.get('id')}")),
                str(im.get("file_name", "")),
            )
            for im in _required(coco, "images", source)
        ]
    except (TypeError, ValueError, AttributeError) as e:
        if isinstance(e, DatasetError):
            raise
        raise ParseError(f"{source}: bad image/category record ({e})") from None
    sizes = {im.image_id: im for im in images}
    anns = []
    for raw in _required(coco, "annotations", source):
        where = f"{source} annotation {raw.get('id') if isinstance(raw, dict) else raw!r}"
        try:
            ann_id = int(_required(raw, "id", where))
            image_id = int(_required(raw, "image_id", where))
            cat_id = int(_required(raw, "category_id", where))
        except (TypeError, ValueError):
            raise ParseError(f"{where}: non-integer id") from None
        box = _parse_bbox(_required(raw, "bbox", where), where)
        img = sizes.get(image_id)
        if img is None:
            raise IntegrityError(f"{where}: unknown image_id {image_id}")
        clipped = box.clip(img.width, img.height)
        if clipped != box:
            logger.warning("%s: box %s clipped to image bounds %dx%d", where, box.to_list(), img.width, img.height)
        anns.append(Annotation(ann_id, image_id, cat_id, clipped))

    records = {}
    if verifications is not None:
        entries = _required(verifications, "verifications", f"{source} verifications")
        for raw in entries:
            where = f"verification {raw.get('image_id') if isinstance(raw, dict) else raw!r}"
            try:
                image_id = int(_required(raw, "image_id", where))
                pos = frozenset(int(c) for c in raw.get("positive", []))
                neg = frozenset(int(c) for c in raw.get("negative", []))
            except (TypeError, ValueError, AttributeError):
                raise ParseError(f"{where}: bad verification record") from None
            if image_id not in sizes:
                raise IntegrityError(f"{where}: unknown image_id {image_id}")
            if image_id in records:
                raise IntegrityError(f"{where}: duplicate verification record")
            records[image_id] = VerificationRecord(image_id, pos, neg)
    return Dataset.build(cats, images, anns, records)


def load_dataset(annotation_path: str | os.PathLike, verification_path: str | os.PathLike | None = None) -> Dataset:
    coco = _load_json(annotation_path)
    ver = _load_json(verification_path) if verification_path is not None else None
    return dataset_from_coco(coco, ver, source=str(annotation_path))


def annotation_to_coco(a: Annotation) -> dict:
    return {
        "id": a.annotation_id,
        "image_id": a.image_id,
        "category_id": a.category_id,
        "bbox": a.box.to_xywh(),
        "area": a.box.width * a.box.height,
        "iscrowd": 0,
    }


def dataset_to_coco(d: Dataset) -> dict:
    return {
        "images": [
            {"id": im.image_id, "width": im.width, "height": im.height, "file_name": im.file_name}
            for im in d.images
        ],
        "annotations": [annotation_to_coco(a) for a in d.annotations],
        "categories": [{"id": c.id, "name": c.name} for c in d.categories],
    }


def verifications_to_json(d: Dataset) -> dict:
    return {
        "verifications": [
            {"image_id": r.image_id, "positive": sorted(r.positive), "negative": sorted(r.negative)}
            for r in d.verifications.values()
        ]
    }


def save_dataset(d: Dataset, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``annotations.json`` and ``verifications.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    return (
        write_json(out_dir / ANNOTATIONS_FILE, dataset_to_coco(d)),
        write_json(out_dir / VERIFICATIONS_FILE, verifications_to_json(d)),
    )


def detections_from_json(raw, d: Dataset, source: str = "<memory>") -> DetectionSet:
    if not isinstance(raw, list):
        raise ParseError(f"{source}: detections must be a JSON list")
    out = []
    for k, rec in enumerate(raw):
        where = f"{source} detection #{k}"
        try:
            image_id = int(_required(rec, "image_id", where))
            cat_id = int(_required(rec, "category_id", where))
            score = float(_required(rec, "score", where))
        except (TypeError, ValueError):
            raise ParseError(f"{where}: bad field types") from None
        if image_id not in d.image_index:
            raise IntegrityError(f"{where}: unknown image_id {image_id}")
        if cat_id not in d.categories:
            raise IntegrityError(f"{where}: unknown category_id {cat_id}")
        box = _parse_bbox(_required(rec, "bbox", where), where)
        try:
            out.append(Detection(image_id, cat_id, box, score))
        except IntegrityError as e:
            raise IntegrityError(f"{where}: {e}") from None
    return DetectionSet(tuple(out))


def load_detections(path: str | os.PathLike, d: Dataset) -> DetectionSet:
    return detections_from_json(_load_json(path), d, source=str(path))


def detections_to_json(dets: DetectionSet | Sequence[Detection]) -> list[dict]:
    return [
        {"image_id": x.image_id, "category_id": x.category_id, "bbox": x.box.to_xywh(), "score": x.score}
        for x in dets
    ]
