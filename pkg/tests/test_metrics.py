import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from wsseg.metrics import (
    EvalReport,
    EvaluationError,
    PairScore,
    aggregate_per_dataset,
    aggregate_per_structure,
    aggregate_per_subject,
    dsc,
    score_image,
)


def test_dsc_hand_example():
    pred = np.array([[1, 1, 0], [0, 0, 0]])
    true = np.array([[1, 0, 0], [1, 0, 0]])
    assert dsc(pred, true, 1) == pytest.approx(0.5)


def test_dsc_empty_pair():
    z = np.zeros((3, 3), int)
    assert dsc(z, z, 2) is None
    assert dsc(z, z, 2, score_empty=True) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(EvaluationError):
        dsc(np.zeros(3), np.zeros(4), 1)


masks = hnp.arrays(np.int8, (5, 6), elements={"min_value": 0, "max_value": 2})


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_dsc_symmetric_and_bounded(a, b):
    x, y = dsc(a, b, 1), dsc(b, a, 1)
    assert x == y
    if x is not None:
        assert 0.0 <= x <= 1.0
    if (a == 1).any():
        assert dsc(a, a, 1) == 1.0


def _scores():
    return [PairScore("a0", "a", 1, 1.0), PairScore("a0", "a", 2, 0.5),
            PairScore("a1", "a", 1, 0.5),
            PairScore("b0", "b", 1, 0.0), PairScore("b0", "b", 2, 1.0)]


def test_per_subject():
    s = aggregate_per_subject(_scores())
    np.testing.assert_allclose([s.mean, s.n], [(0.75 + 0.5 + 0.5) / 3, 3])
    np.testing.assert_allclose(s.sd, np.std([0.75, 0.5, 0.5]))


def test_per_structure():
    per, grand = aggregate_per_structure(_scores())
    assert per[1].mean == pytest.approx(0.5) and per[2].mean == pytest.approx(0.75)
    assert grand == pytest.approx(0.625)


def test_per_dataset():
    d = aggregate_per_dataset(_scores())
    assert d["a"].mean == pytest.approx(0.625) and d["b"].n == 1
    with pytest.raises(EvaluationError, match="zz"):
        aggregate_per_dataset(_scores(), ["a", "zz"])


def test_empty_set_raises():
    for f in (aggregate_per_subject, aggregate_per_structure, aggregate_per_dataset):
        with pytest.raises(EvaluationError):
            f([])


def test_score_image_skips_absent_and_rejects_unknown():
    true = np.array([[0, 1], [1, 3]])
    out = score_image(true, true, "x_ct_0", "x")
    assert [(s.class_id, s.value) for s in out] == [(1, 1.0), (3, 1.0)]
    assert score_image(true, true, "x", "x", classes=[2]) == []
    with pytest.raises(EvaluationError):
        score_image(true, true, "x", "x", classes=[4], n_structures=3)


def test_perfect_report_is_one_everywhere():
    rep = EvalReport(score_image(np.array([1, 2, 0]), np.array([1, 2, 0]), "i", "d"))
    assert rep.mean_structure_dsc == 1.0
    assert rep.per_subject.mean == 1.0
    assert "structure\taverage\t100.0" in rep.to_text()
    assert json.loads(rep.to_json())["structure_average"] == 1.0
