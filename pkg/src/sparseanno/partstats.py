"""Part/subject inclusion and co-occurrence statistics, and the part map.

Undefined ratios (empty domains) are reported as ``None`` rather than 0 so
that they can never veto or admit a pair by accident.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import config
from .dataset import Dataset, IntegrityError
from .geometry import as_array, pairwise_aiou
from .jsonio import read_json, write_text_atomic


@dataclass(frozen=True)
class PartSubjectMap:
    """``subject category id -> ordered part category ids``."""

    entries: Mapping[int, tuple[int, ...]]

    def __post_init__(self):
        for subject, parts in self.entries.items():
            if not parts:
                raise IntegrityError(f"subject {subject} has an empty part list")
            if subject in parts:
                raise IntegrityError(f"category {subject} is listed as its own part")
            if len(set(parts)) != len(parts):
                raise IntegrityError(f"subject {subject} lists a part twice")

    def __contains__(self, subject: int) -> bool:
        return subject in self.entries

    def __getitem__(self, subject: int) -> tuple[int, ...]:
        return self.entries[subject]

    def __len__(self):
        return len(self.entries)

    def pairs(self) -> list[tuple[int, int]]:
        """``(subject, part)`` pairs ordered by subject id, then part id."""
        return sorted((s, p) for s, parts in self.entries.items() for p in parts)

    def check(self, d: Dataset) -> None:
        for s, p in self.pairs():
            for c in (s, p):
                if c not in d.categories:
                    raise IntegrityError(f"part map references unknown category {c}")

    def to_json(self) -> dict:
        return {"part_map": [{"subject": s, "parts": list(ps)} for s, ps in sorted(self.entries.items())]}


def load_part_map(path: str | os.PathLike, d: Dataset) -> PartSubjectMap:
    """Read a part-map file whose entries name categories by id or name."""
    raw = read_json(path)
    try:
        items = raw["part_map"]
    except (KeyError, TypeError):
        raise IntegrityError(f"{path}: missing key 'part_map'") from None
    entries: dict[int, list[int]] = {}
    for item in items:
        subject = d.categories.resolve(item["subject"])
        parts = entries.setdefault(subject, [])
        for ref in item["parts"]:
            p = d.categories.resolve(ref)
            if p not in parts:
                parts.append(p)
    pmap = PartSubjectMap({s: tuple(ps) for s, ps in entries.items()})
    pmap.check(d)
    return pmap


@dataclass(frozen=True)
class PairStats:
    subject: int
    part: int
    included: float | None
    co_occur: float | None
    n_part_boxes: int
    n_subject_images: int


def _check_pair(d: Dataset, part: int, subject: int) -> None:
    for c in (part, subject):
        if c not in d.categories:
            raise IntegrityError(f"unknown category id {c}")
    if part == subject:
        raise ValueError("part and subject must differ")


def _inclusion_counts(d: Dataset, part: int, subject: int, tau: float) -> tuple[int, int]:
    shared = d.images_with_category.get(part, frozenset()) & d.images_with_category.get(subject, frozenset())
    included = total = 0
    for image_id in sorted(shared):
        anns = d.annotations_for(image_id)
        pb = as_array([a.box for a in anns if a.category_id == part])
        sb = as_array([a.box for a in anns if a.category_id == subject])
        total += len(pb)
        included += int(np.count_nonzero((pairwise_aiou(pb, sb) > tau).any(axis=1)))
    return included, total


def included_ratio(d: Dataset, part: int, subject: int, tau: float = config.TAU) -> float | None:
    """Share of part boxes lying inside some subject box (``aiou > tau``).

    Only images annotated with both categories are considered.  ``None``
    when there are no such part boxes.
    """
    _check_pair(d, part, subject)
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    included, total = _inclusion_counts(d, part, subject, tau)
    return included / total if total else None


def co_occur_ratio(d: Dataset, part: int, subject: int) -> float | None:
    _check_pair(d, part, subject)
    subj = d.images_with_category.get(subject, frozenset())
    if not subj:
        return None
    both = subj & d.images_with_category.get(part, frozenset())
    return len(both) / len(subj)


def pair_stats(d: Dataset, subject: int, part: int, tau: float = config.TAU) -> PairStats:
    _check_pair(d, part, subject)
    included, total = _inclusion_counts(d, part, subject, tau)
    return PairStats(
        subject=subject,
        part=part,
        included=included / total if total else None,
        co_occur=co_occur_ratio(d, part, subject),
        n_part_boxes=total,
        n_subject_images=len(d.images_with_category.get(subject, ())),
    )


def stats_report(
    d: Dataset,
    pmap: PartSubjectMap | Iterable[tuple[int, int]],
    tau: float = config.TAU,
    jobs: int = 1,
) -> list[PairStats]:
    """One :class:`PairStats` per ``(subject, part)`` pair, ordered by ids.

    ``pmap`` may also be a plain iterable of ``(subject, part)`` pairs, which
    is how every ordered category pair is scored before deriving a map.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    pairs = pmap.pairs() if isinstance(pmap, PartSubjectMap) else sorted(set(pmap))
    if jobs > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda sp: pair_stats(d, sp[0], sp[1], tau), pairs))
    return [pair_stats(d, s, p, tau) for s, p in pairs]


def all_pairs(d: Dataset) -> list[tuple[int, int]]:
    """Every ordered pair of distinct categories that co-occur at least once."""
    present = d.images_with_category
    out = []
    for s, s_imgs in present.items():
        for p, p_imgs in present.items():
            if s != p and s_imgs & p_imgs:
                out.append((s, p))
    return sorted(out)


def derive_part_map(
    stats: Sequence[PairStats],
    min_included: float = config.MIN_INCLUDED,
    max_co_occur: float = config.MAX_CO_OCCUR,
) -> PartSubjectMap:
    entries: dict[int, list[int]] = {}
    for st in sorted(stats, key=lambda s: (s.subject, s.part)):
        if st.included is None or st.co_occur is None:
            continue
        if st.included > min_included and st.co_occur < max_co_occur:
            entries.setdefault(st.subject, []).append(st.part)
    return PartSubjectMap({s: tuple(ps) for s, ps in entries.items()})


TSV_COLUMNS = ("subject", "part", "included", "co_occur", "n_part_boxes", "n_subject_images")


def _fmt(v: float | None) -> str:
    return "NA" if v is None else repr(float(v))


def report_tsv(stats: Sequence[PairStats], d: Dataset | None = None) -> str:
    """Tab-separated report; category names are used when ``d`` is given."""

    def name(c: int) -> str:
        return d.categories.by_id[c].name if d is not None else str(c)

    lines = ["\t".join(TSV_COLUMNS)]
    for st in stats:
        lines.append("\t".join([
            name(st.subject), name(st.part), _fmt(st.included), _fmt(st.co_occur),
            str(st.n_part_boxes), str(st.n_subject_images),
        ]))
    return "\n".join(lines) + "\n"


def write_report(path: str | os.PathLike, stats: Sequence[PairStats], d: Dataset | None = None):
    return write_text_atomic(path, report_tsv(stats, d))
