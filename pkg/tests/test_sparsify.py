from collections import Counter

import numpy as np
import pytest

from sparseanno.dataset import Annotation, Category, Dataset, ImageRecord, dataset_to_coco, verifications_to_json
from sparseanno.geometry import Box
from sparseanno.jsonio import canonical_dumps
from sparseanno.sparsify import DeletionRecord, load_deletions, save_deletions, sparsify, sparsity_stats


def synthetic(n_images=30, n_cats=4, seed=0):
    rng = np.random.default_rng(seed)
    anns, k = [], 0
    for img in range(1, n_images + 1):
        for c in range(1, n_cats + 1):
            for _ in range(int(rng.integers(0, 3))):
                k += 1
                x, y = rng.uniform(0, 50, 2)
                anns.append(Annotation(k, img, c, Box(float(x), float(y), float(x) + 10, float(y) + 10)))
    return Dataset.build([Category(c, f"c{c}") for c in range(1, n_cats + 1)],
                         [ImageRecord(i, 100, 100) for i in range(1, n_images + 1)], anns)


def serial(d):
    return canonical_dumps(dataset_to_coco(d)) + canonical_dumps(verifications_to_json(d))


def test_alpha_zero_identity():
    d = synthetic()
    out, rec = sparsify(d, 0.0, 1)
    assert serial(out) == serial(d)
    assert rec.deleted == () and rec.deleted_annotations == ()


def test_alpha_one_deletes_everything():
    d = synthetic()
    out, rec = sparsify(d, 1.0, 1)
    assert out.annotations == ()
    assert set(rec.deleted) == {(a.image_id, a.category_id) for a in d.annotations}
    for img, v in out.verifications.items():
        assert v.positive == frozenset()
        assert v.negative == d.verifications[img].negative


def test_invalid_alpha():
    with pytest.raises(ValueError):
        sparsify(synthetic(), 1.5, 0)
    with pytest.raises(ValueError):
        sparsify(synthetic(), -0.1, 0)


def test_determinism_and_conservation():
    d = synthetic()
    a, ra = sparsify(d, 0.4, 42)
    b, rb = sparsify(d, 0.4, 42)
    assert serial(a) == serial(b) and ra == rb
    assert Counter(a.annotations) + Counter(ra.deleted_annotations) == Counter(d.annotations)
    c, _ = sparsify(d, 0.4, 43)
    assert serial(c) != serial(a)


def test_exhaustiveness_preserved():
    d = synthetic()
    out, rec = sparsify(d, 0.5, 3)
    for img in out.image_ids:
        for c in out.verifications[img].positive:
            before = [a for a in d.annotations_for(img) if a.category_id == c]
            after = [a for a in out.annotations_for(img) if a.category_id == c]
            assert before == after
    for img, c in rec.deleted:
        assert c not in out.verifications[img].positive
        assert c not in out.verifications[img].negative


def test_half_deletion_rate():
    d = synthetic(200, 1)
    present = d.images_with_category[1]
    fractions = []
    for seed in range(200):
        _, rec = sparsify(d, 0.5, seed)
        fractions.append(len(rec.deleted) / len(present))
    assert 0.45 <= np.mean(fractions) <= 0.55


def test_expected_remaining_monotone_in_alpha():
    d = synthetic(40, 3)
    means = []
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        means.append(np.mean([len(sparsify(d, alpha, s)[0].annotations) for s in range(200)]))
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_sparsity_stats_examples():
    b = Box(0, 0, 1, 1)
    d = Dataset.build([Category(1, "a"), Category(2, "b")], [ImageRecord(1, 10, 10), ImageRecord(2, 10, 10)],
                      [Annotation(1, 1, 1, b), Annotation(2, 1, 1, b), Annotation(3, 1, 2, b), Annotation(4, 2, 1, b)])
    assert sparsity_stats(d) == (2.0, 1.5)
    empty = Dataset.build([Category(1, "a")], [ImageRecord(1, 10, 10)], [])
    assert sparsity_stats(empty) == (0.0, 0.0)
    assert sparsity_stats(Dataset.build([Category(1, "a")], [], [])) is None


def test_record_round_trip(tmp_path):
    _, rec = sparsify(synthetic(), 0.5, 9)
    save_deletions(rec, tmp_path)
    assert load_deletions(tmp_path / "deletions.json") == rec
    assert DeletionRecord.empty().deleted == ()
