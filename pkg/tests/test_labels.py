import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsseg.labels import (
    AnnotatedSubset,
    AnnotatedVolume,
    ClassSet,
    InvalidAnnotationError,
    merge_probs,
    merge_targets,
    one_hot,
    slice_views,
)


def test_merge_identity_when_fully_annotated():
    out = merge_probs([0.5, 0.3, 0.2], (1, 2), ClassSet(2))
    np.testing.assert_array_equal(out, [0.5, 0.3, 0.2])


def test_merge_pools_unannotated_into_background():
    out = merge_probs([0.1, 0.2, 0.3, 0.4], (1,), ClassSet(3))
    np.testing.assert_allclose(out, [0.8, 0.2], atol=1e-15)


def test_merge_empty_subset_is_single_channel():
    out = merge_probs([0.1, 0.2, 0.3, 0.4], (), ClassSet(3))
    assert out.shape == (1,)
    np.testing.assert_allclose(out, [1.0])


def test_merge_rejects_ids_outside_universe():
    with pytest.raises(InvalidAnnotationError):
        merge_probs([0.25] * 4, (1, 4), ClassSet(3))


@pytest.mark.parametrize("label, phi, n, expected", [
    (1, (1,), 3, [0, 1]),
    (0, (1,), 3, [1, 0]),
    (2, (1, 2), 2, [0, 0, 1]),
])
def test_merge_targets(label, phi, n, expected):
    y = one_hot(np.array(label), n + 1)
    np.testing.assert_array_equal(merge_targets(y, phi, ClassSet(n)), expected)


def _oracle_merge(p, phi, n):
    """Brute-force merge with exact rationals."""
    out = [sum((p[j] for j in range(n + 1) if j == 0 or j not in phi), Fraction(0))]
    out += [p[c] for c in sorted(phi)]
    return out


def test_merge_matches_enumeration_over_all_subsets():
    rng = np.random.default_rng(3)
    for n in range(1, 6):
        classes = ClassSet(n)
        for r in range(n + 1):
            for phi in itertools.combinations(range(1, n + 1), r):
                for _ in range(3):
                    # dyadic probabilities make every float sum exact
                    cuts = np.sort(rng.choice(np.arange(1, 64), size=n, replace=False))
                    w = np.diff(np.concatenate([[0], cuts, [64]]))
                    p = [Fraction(int(x), 64) for x in w]
                    got = merge_probs(np.array([float(x) for x in p]), phi, classes)
                    assert [Fraction(x) for x in got] == _oracle_merge(p, phi, n)
                    for y in range(n + 1):
                        if y and y not in phi:
                            continue
                        t = merge_targets(np.array(y), phi, classes)
                        exp = [1 if y == 0 else 0] + [int(c == y) for c in sorted(phi)]
                        assert t.tolist() == exp


probs = st.integers(2, 6).flatmap(lambda c: st.lists(
    st.floats(0.01, 1.0), min_size=c, max_size=c))


@settings(max_examples=200, deadline=None)
@given(probs, st.data())
def test_merge_preserves_mass_and_composes(raw, data):
    p = np.array(raw) / np.sum(raw)
    n = len(p) - 1
    classes = ClassSet(n)
    b = data.draw(st.sets(st.integers(1, n)))
    a = data.draw(st.sets(st.sampled_from(sorted(b)))) if b else set()
    mb = merge_probs(p, b, classes)
    assert abs(mb.sum() - 1.0) <= 1e-12
    # collapse the channels of b \ a inside the b-merged space
    b_sorted = sorted(b)
    keep = [0] + [1 + b_sorted.index(c) for c in sorted(a)]
    drop = [1 + b_sorted.index(c) for c in b_sorted if c not in a]
    re = np.concatenate([[mb[0] + mb[drop].sum()], mb[keep[1:]]])
    np.testing.assert_allclose(re, merge_probs(p, a, classes), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.data())
def test_merge_targets_always_one_hot(n, data):
    phi = data.draw(st.sets(st.integers(1, n)))
    y = data.draw(st.sampled_from([0] + sorted(phi)))
    t = merge_targets(np.array(y), phi, ClassSet(n))
    assert t.sum() == 1 and set(t.tolist()) <= {0, 1}


def _vol(labels, annotation, n=3):
    labels = np.asarray(labels, dtype=np.int32)
    return AnnotatedVolume(np.zeros(labels.shape, np.float32), labels, annotation, ClassSet(n))


def test_partial_volume_has_one_view():
    v = _vol(np.zeros((4, 4)), AnnotatedSubset((1, 3)))
    views = list(slice_views(v))
    assert len(views) == 1 and views[0].subset.members == (1, 3)


def test_sparse_volume_yields_view_per_slice():
    lab = np.zeros((10, 5), dtype=np.int32)
    lab[2, 1] = 1
    lab[7, 3] = 2
    ann = [AnnotatedSubset((1,), 0, 2), AnnotatedSubset((2,), 0, 7)]
    views = list(slice_views(_vol(lab, ann)))
    assert len(views) == 10
    assert sum(v.subset.is_empty for v in views) == 8
    assert views[2].subset.members == (1,) and views[7].subset.members == (2,)


def test_volume_rejects_labels_outside_subset():
    lab = np.zeros((3, 3), dtype=np.int32)
    lab[0, 0] = 2
    with pytest.raises(InvalidAnnotationError, match="outside the annotated subset"):
        _vol(lab, AnnotatedSubset((1,)))


def test_volume_rejects_labels_on_unannotated_slice():
    lab = np.zeros((3, 3), dtype=np.int32)
    lab[1, 0] = 1
    with pytest.raises(InvalidAnnotationError):
        _vol(lab, [AnnotatedSubset((1,), 0, 0)])


def test_volume_rejects_mixed_axes_and_duplicates():
    lab = np.zeros((3, 3), dtype=np.int32)
    with pytest.raises(InvalidAnnotationError, match="mixed"):
        _vol(lab, [AnnotatedSubset((1,), 0, 0), AnnotatedSubset((1,), 1, 0)])
    with pytest.raises(InvalidAnnotationError, match="twice"):
        _vol(lab, [AnnotatedSubset((1,), 0, 0), AnnotatedSubset((2,), 0, 0)])


def test_volume_rejects_out_of_range_label():
    lab = np.full((2, 2), 7, dtype=np.int32)
    with pytest.raises(InvalidAnnotationError, match="4 voxels"):
        _vol(lab, AnnotatedSubset((1, 2, 3)))
