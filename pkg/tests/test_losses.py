import math

import numpy as np
import pytest

from wsseg.gradcheck import central_diff, rel_err
from wsseg.labels import AnnotatedSubset, AnnotatedVolume, ClassSet
from wsseg.losses import (
    LossConfig,
    ShapeMismatchError,
    batch_total_loss,
    dice,
    dice_terms,
    entropy_reg,
    focal_ce,
    softmax,
    total_loss,
)


def _col(*probs):
    """Channels-first field from per-pixel probability rows."""
    return np.array(probs, dtype=np.float64).T


# softmax --------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(4)), [0.25] * 4)
    np.testing.assert_array_equal(softmax(np.array([1000.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3])


# focal ----------------------------------------------------------------------

def _focal_oracle(rows, labels, phi, gamma=2.0):
    total = 0.0
    for p, y in zip(rows, labels):
        merged0 = sum(p[j] for j in range(len(p)) if j == 0 or j not in phi)
        q = merged0 if y == 0 else p[y]
        total += -((1 - q) ** gamma) * math.log(q)
    return total / len(rows)


def test_focal_perfect_prediction_is_zero():
    r = focal_ce(_col([0.0, 1.0]), np.array([1]), (1,))
    assert r.value == 0.0


def test_focal_half_confidence():
    r = focal_ce(_col([0.5, 0.5]), np.array([1]), (1,))
    assert r.value == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert r.value == pytest.approx(0.173287, abs=1e-6)


def test_focal_two_pixel_merge_example():
    rows = [(0.1, 0.6, 0.2, 0.1), (0.7, 0.1, 0.1, 0.1)]
    labels = [1, 0]
    r = focal_ce(_col(*rows), np.array(labels), (1,), classes=ClassSet(3))
    assert r.value == pytest.approx(_focal_oracle(rows, labels, {1}), abs=1e-12)
    assert r.value == pytest.approx(0.5 * (0.16 * -math.log(0.6) + 0.01 * -math.log(0.9)),
                                    abs=1e-12)
    z = np.log(_col(*rows))
    f = lambda zz: focal_ce(softmax(zz), np.array(labels), (1,)).value  # noqa: E731
    assert rel_err(focal_ce(softmax(z), np.array(labels), (1,)).grad_logits,
                   central_diff(f, z)) < 1e-4


def test_focal_clamp_keeps_gradient_finite():
    z = np.array([[60.0], [-60.0]])
    r = focal_ce(softmax(z), np.array([1]), (1,))
    assert np.isfinite(r.value) and r.value == pytest.approx(-math.log(1e-12), rel=1e-9)
    np.testing.assert_array_equal(r.grad_logits, 0.0)


def test_empty_subset_gives_zero_focal_and_dice():
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=(4, 3, 3)))
    y = np.zeros((3, 3), dtype=int)
    for fn in (focal_ce, dice):
        r = fn(p, y, ())
        assert r.value == 0.0
        np.testing.assert_array_equal(r.grad_logits, 0.0)


def test_focal_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchError):
        focal_ce(np.full((3, 2, 2), 1 / 3), np.zeros((2, 3), int), (1,))


# dice -----------------------------------------------------------------------

def _dice_oracle(rows, labels, phi, eps=1.0):
    chans = [0] + sorted(phi)
    ratios = []
    for c in chans:
        tp = fp = fn = 0.0
        for p, y in zip(rows, labels):
            if c == 0:
                pc = sum(p[j] for j in range(len(p)) if j == 0 or j not in phi)
            else:
                pc = p[c]
            yc = 1.0 if y == c else 0.0
            tp += pc * yc
            fp += pc * (1 - yc)
            fn += (1 - pc) * yc
        ratios.append((2 * tp + eps) / (2 * tp + fp + fn + eps))
    return 1 - sum(ratios) / len(ratios)


def test_dice_uniform_2x2_example():
    p = np.full((3, 2, 2), 1 / 3)
    y = np.array([[1, 0], [0, 0]])
    r = dice(p, y, (1,))
    rows = [(1 / 3,) * 3] * 4
    assert r.value == pytest.approx(_dice_oracle(rows, [1, 0, 0, 0], {1}), abs=1e-12)
    # channel ratios 0.75 and 0.5
    assert r.value == pytest.approx(0.375, abs=1e-12)
    z = np.zeros((3, 2, 2))
    f = lambda zz: dice(softmax(zz), y, (1,)).value  # noqa: E731
    assert rel_err(dice(softmax(z), y, (1,)).grad_logits, central_diff(f, z)) < 1e-4


def test_dice_perfect_prediction_is_zero():
    y = np.array([[1, 0], [2, 0]])
    p = np.moveaxis(np.eye(3)[y], -1, 0)
    assert dice(p, y, (1, 2)).value == pytest.approx(0.0, abs=1e-15)
    assert dice(np.stack([np.ones((2, 2)), np.zeros((2, 2))]), np.zeros((2, 2), int),
                (1,)).value == pytest.approx(0.0, abs=1e-15)


def test_dice_terms_mass_invariants():
    rng = np.random.default_rng(4)
    p = softmax(rng.normal(size=(5, 6, 4)))
    y = rng.choice([0, 2, 4], size=(6, 4))
    t = dice_terms(p, y, (2, 4))
    assert t.channels == (0, 2, 4)
    merged_mass = [p[[0, 1, 3]].sum(), p[2].sum(), p[4].sum()]
    target_mass = [(y == 0).sum(), (y == 2).sum(), (y == 4).sum()]
    np.testing.assert_allclose(t.tp + t.fp, merged_mass, atol=1e-6)
    np.testing.assert_allclose(t.tp + t.fn, target_mass, atol=1e-6)


# entropy --------------------------------------------------------------------

@pytest.mark.parametrize("p, expected", [
    ([1.0, 0.0, 0.0, 0.0], 0.0),
    ([0.25] * 4, math.log(4)),
    ([0.5, 0.5, 0.0, 0.0], math.log(2)),
])
def test_entropy_examples(p, expected):
    assert entropy_reg(np.array(p)[:, None]).value == pytest.approx(expected, abs=1e-12)


def test_entropy_bounds():
    rng = np.random.default_rng(1)
    for c in range(2, 7):
        p = softmax(rng.normal(scale=4, size=(c, 50)))
        v = entropy_reg(p).value
        assert 0.0 <= v <= math.log(c) + 1e-12


# reductions and symmetry ----------------------------------------------------

def test_reduces_to_standard_ce_and_soft_dice():
    rng = np.random.default_rng(7)
    cfg = LossConfig(focal_exponent=0.0)
    for _ in range(50):
        n = int(rng.integers(1, 5))
        z = rng.normal(scale=2, size=(n + 1, 3, 4))
        y = rng.integers(0, n + 1, size=(3, 4))
        p = softmax(z)
        full = tuple(range(1, n + 1))
        onehot = np.moveaxis(np.eye(n + 1)[y], -1, 0)
        ce = -np.mean(np.log((p * onehot).sum(axis=0)))
        assert abs(focal_ce(p, y, full, cfg).value - ce) < 1e-9
        inter = (p * onehot).sum(axis=(1, 2))
        sd = 1 - np.mean((2 * inter + 1) / (p.sum(axis=(1, 2)) + onehot.sum(axis=(1, 2)) + 1))
        assert abs(dice(p, y, full, cfg).value - sd) < 1e-9


def test_permutation_equivariance():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = 4
        z = rng.normal(scale=2, size=(n + 1, 5, 3))
        phi = (1, 3)
        y = rng.choice([0, 1, 3], size=(5, 3))
        perm = np.concatenate([[0], 1 + rng.permutation(n)])  # old id -> new id
        z2 = np.empty_like(z)
        z2[perm] = z
        y2 = perm[y]
        phi2 = tuple(sorted(int(perm[c]) for c in phi))
        p, p2 = softmax(z), softmax(z2)
        for fn in (focal_ce, dice):
            assert abs(fn(p, y, phi).value - fn(p2, y2, phi2).value) < 1e-12
        assert abs(entropy_reg(p).value - entropy_reg(p2).value) < 1e-12


def test_positive_when_a_voxel_is_misassigned():
    y = np.array([[1, 0]])
    p = np.moveaxis(np.eye(3)[np.array([[2, 0]])], -1, 0) * (1 - 1e-6) + 1e-6 / 3
    # class 2 is outside {1}, so predicting it on a class-1 voxel is wrong
    assert focal_ce(p, y, (1,)).value > 0
    assert dice(p, y, (1,)).value > 0


# total loss -----------------------------------------------------------------

def _vol(labels, annotation, n=3):
    labels = np.asarray(labels, dtype=np.int32)
    return AnnotatedVolume(np.zeros(labels.shape, np.float32), labels, annotation, ClassSet(n))


def test_total_fully_annotated_view_is_plain_sum():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 4, 4))
    y = rng.integers(0, 4, size=(4, 4))
    v = _vol(y, AnnotatedSubset((1, 2, 3)))
    p = softmax(z)
    expected = focal_ce(p, y, (1, 2, 3)).value + dice(p, y, (1, 2, 3)).value + \
        entropy_reg(p).value
    assert total_loss(z, v).value == pytest.approx(expected, abs=1e-12)


def test_total_unannotated_view_is_three_times_entropy():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 5, 5))
    v = _vol(np.zeros((5, 5)), AnnotatedSubset(()))
    assert total_loss(z, v).value == 3 * entropy_reg(softmax(z)).value


def test_total_partial_volume_matches_slice_wise_focal_and_entropy():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(4, 6, 5))
    y = rng.choice([0, 2], size=(6, 5))
    partial = total_loss(z, _vol(y, AnnotatedSubset((2,))))
    sliced = total_loss(z, _vol(y, tuple(AnnotatedSubset((2,), 0, i) for i in range(6))))
    for k in ("focal", "reg"):
        assert partial.components[k] == pytest.approx(sliced.components[k], abs=1e-12)
    assert partial.components["views"] == 1 and sliced.components["views"] == 6


def _sparse_case():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(4, 5, 4))
    y = np.zeros((5, 4), np.int32)
    y[1] = rng.choice([0, 1], size=4)
    y[3] = rng.choice([0, 2], size=4)
    v = _vol(y, (AnnotatedSubset((1,), 0, 1), AnnotatedSubset((2,), 0, 3)))
    p = softmax(z)
    sup = {i: focal_ce(p[:, i], y[i], phi).value + dice(p[:, i], y[i], phi).value
           for i, phi in ((1, (1,)), (3, (2,)))}
    ent = [entropy_reg(p[:, i]).value for i in range(5)]
    return z, v, sup, ent


def test_total_sparse_volume_view_scope_lambda():
    z, v, sup, ent = _sparse_case()
    lam = [3, 1, 3, 1, 3]
    expected = np.mean(list(sup.values())) + np.mean([a * e for a, e in zip(lam, ent)])
    assert total_loss(z, v, LossConfig(lambda_scope="view")).value == \
        pytest.approx(expected, abs=1e-12)


def test_total_sparse_volume_view_mean_reduction():
    z, v, sup, ent = _sparse_case()
    per = [sup[i] + ent[i] if i in sup else 3 * ent[i] for i in range(5)]
    res = total_loss(z, v, LossConfig(reduction="views", lambda_scope="view"))
    assert res.value == pytest.approx(np.mean(per), abs=1e-12)


def test_reductions_agree_without_unannotated_views():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(4, 3, 4))
    y = rng.choice([0, 1], size=(3, 4))
    v = _vol(y, tuple(AnnotatedSubset((1,), 0, i) for i in range(3)))
    a = total_loss(z, v).value
    b = total_loss(z, v, LossConfig(reduction="views")).value
    assert a == pytest.approx(b, abs=1e-12)


def test_default_patch_scope_lambda():
    z, v, sup, ent = _sparse_case()
    res = total_loss(z, v)
    # the patch holds annotations, so every view gets lambda 1
    expected = np.mean(list(sup.values())) + np.mean(ent)
    assert res.value == pytest.approx(expected, abs=1e-12)
    empty = _vol(np.zeros((5, 4)), (AnnotatedSubset((), 0, 0),))
    assert total_loss(z, empty).value == \
        pytest.approx(3 * np.mean(ent), abs=1e-12)


def test_naive_mode_treats_zero_as_background():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(4, 4, 4))
    y = rng.choice([0, 1], size=(4, 4))
    v = _vol(y, AnnotatedSubset((1,)))
    naive = total_loss(z, v, LossConfig(mode="naive")).value
    full = total_loss(z, _vol(y, AnnotatedSubset((1, 2, 3)))).value
    assert naive == pytest.approx(full, abs=1e-12)


def test_total_rejects_wrong_logit_shape():
    with pytest.raises(ShapeMismatchError):
        total_loss(np.zeros((3, 4, 4)), _vol(np.zeros((4, 4)), AnnotatedSubset((1,))))


def test_batch_matches_per_volume():
    rng = np.random.default_rng(10)
    vols = [
        _vol(rng.choice([0, 1], size=(4, 5)), AnnotatedSubset((1,))),
        _vol(np.zeros((4, 5)), AnnotatedSubset(())),
        _vol(np.zeros((4, 5)), (AnnotatedSubset((2,), 1, 3),)),
        _vol(np.zeros((4, 5)), (AnnotatedSubset((3,), 0, 0), AnnotatedSubset((), 0, 2))),
    ]
    z = rng.normal(size=(4, 4, 4, 5))
    for cfg in (LossConfig(), LossConfig(reduction="views")):
        values, grad, _ = batch_total_loss(z, vols, cfg)
        for b, v in enumerate(vols):
            ref = total_loss(z[b], v, cfg)
            assert values[b] == pytest.approx(ref.value, abs=1e-12)
            np.testing.assert_allclose(grad[b], ref.grad_logits / len(vols), atol=1e-14)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)
    LossConfig(epsilon=0, unsafe=True)
    with pytest.raises(ValueError):
        LossConfig(focal_exponent=-1)
    with pytest.raises(ValueError):
        LossConfig(lambda_unannotated=-0.5)
    with pytest.raises(ValueError):
        LossConfig(reduction="sum")
