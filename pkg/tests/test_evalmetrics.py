import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_config, tiny_spec
from g2d.datagen import Split, generate
from g2d.diffcore import softmax
from g2d.errors import ContractError, DimensionError
from g2d.evalmetrics import (EvalReport, accuracy, accuracy_from_logits, cosine_rows, evaluate, feature_alignment,
                             mape, modality_gap_from_features, r_squared, student_features)
from g2d.trainer import build_teacher_cache, train_student_g2d, train_teachers

vec = arrays(np.float64, (5, 3), elements=st.floats(-10, 10))


def test_accuracy_examples():
    y = np.array([0, 1, 2, 3] * 3)
    assert accuracy_from_logits(np.eye(4)[y], y) == 1.0
    assert accuracy_from_logits(np.tile([1.0, 0, 0, 0], (12, 1)), y) == 0.25


def test_accuracy_hand_counted_fixture():
    logits = np.array([[2, 1], [0, 3], [1, 1], [5, 0], [0, 1], [3, 2], [1, 4], [2, 2], [0, 0], [9, 1]], dtype=float)
    y = np.array([0, 1, 1, 1, 1, 0, 0, 0, 1, 0])
    # ties at rows 2, 7, 8 resolve to class 0; correct rows: 0, 1, 4, 5, 7, 9
    assert accuracy_from_logits(logits, y) == 0.6


def test_accuracy_empty_split():
    with pytest.raises(ContractError):
        accuracy_from_logits(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_mape_r2_examples():
    y = np.array([0.2, 0.4, 0.5, 0.8, 0.6])
    assert mape(y, y) == 0.0 and r_squared(y, y) == 1.0
    assert r_squared(np.full(5, y.mean()), y) == pytest.approx(0.0, abs=1e-15)
    pred = np.array([0.25, 0.4, 0.45, 0.7, 0.6])
    # |dev|/y: 0.25, 0, 0.1, 0.125, 0
    assert mape(pred, y) == pytest.approx(100 * 0.475 / 5)
    # SS_res = 0.0025 + 0.0025 + 0.01 = 0.015; mean 0.5, SS_tot = 0.09+0.01+0+0.09+0.01 = 0.2
    assert r_squared(pred, y) == pytest.approx(1 - 0.015 / 0.2)


def test_mape_r2_errors():
    with pytest.raises(ContractError):
        mape([1.0, 2.0], [0.0, 1.0])
    with pytest.raises(ContractError):
        r_squared([1.0, 2.0], [3.0, 3.0])


@given(vec, vec)
def test_r2_at_most_one_and_mape_nonnegative(a, b):
    y = np.abs(b) + 0.1
    y[0] += 1.0
    assert r_squared(a, y) <= 1.0
    assert mape(a, y) >= 0.0


def test_cosine_examples(rng):
    f = rng.normal(size=(4, 3))
    np.testing.assert_allclose(cosine_rows(f, f), 1.0)
    np.testing.assert_allclose(cosine_rows(f, -f), -1.0)
    z = np.zeros((1, 3))
    assert cosine_rows(z, f[:1])[0] == 0.0
    with pytest.raises(DimensionError):
        cosine_rows(f, f[:, :2])


@given(vec, vec, st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_range_and_scale_invariance(a, b, s, t):
    c = cosine_rows(a, b)
    assert ((c >= -1) & (c <= 1)).all()
    np.testing.assert_allclose(cosine_rows(s * a, t * b), c, atol=1e-9)


def test_modality_gap_examples(rng):
    e = np.abs(rng.normal(size=(5, 3)))
    assert modality_gap_from_features([e, e]) == pytest.approx(0.0)
    assert modality_gap_from_features([np.tile([1.0, 0, 0], (3, 1)), np.tile([0, 1.0, 0], (3, 1))]) == pytest.approx(
        math.sqrt(2))
    with pytest.raises(ContractError):
        modality_gap_from_features([np.zeros((2, 3)), e])
    with pytest.raises(ContractError):
        modality_gap_from_features([e])


@given(st.integers(0, 10_000))
def test_modality_gap_orthogonal_invariance(seed):
    rng = np.random.default_rng(seed)
    feats = [rng.normal(size=(6, 4)) + rng.normal(size=4) for _ in range(3)]
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert modality_gap_from_features([f @ q for f in feats]) == pytest.approx(modality_gap_from_features(feats))


# -- student-level ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    ds = generate(tiny_spec())
    cfg = tiny_config()
    cache = build_teacher_cache(train_teachers(ds, cfg), ds)
    return ds, cache, train_student_g2d(ds, cache, cfg).student


def test_late_multi_accuracy_is_mean_of_heads(trained):
    ds, _, student = trained
    heads = student.predict(ds.test.xs).head_logits
    mean_heads = sum(h.data for h in heads) / len(heads)
    assert accuracy(student, ds.test) == accuracy_from_logits(mean_heads, ds.test.y)


def test_alignment_with_own_features_is_one(trained):
    ds, _, student = trained
    fs = student_features(student, ds.test)[0]
    nonzero = np.linalg.norm(fs, axis=1) > 0
    expected = nonzero.mean()
    assert feature_alignment(student, fs, ds.test, 0) == pytest.approx(expected)


def test_report_fields_and_json(trained):
    ds, cache, student = trained
    rep = evaluate(student, ds, "test", cache)
    assert 0 <= rep.multi["accuracy"] <= 1
    assert set(rep.per_modality) == set(rep.alignment) == set(rep.teacher) == {"a", "v"}
    for name in ("a", "v"):
        logits = cache.logits["test"][ds.spec.names.index(name)]
        rho = softmax(logits)[np.arange(len(ds.test)), ds.test.y].mean()
        assert rep.teacher[name]["rho"] == pytest.approx(rho)
        assert rep.confidence_ratio[name] > 0
    back = json.loads(rep.to_json())
    assert back["multi"] == rep.multi and back["task"] == "classify"
    assert evaluate(student, ds, "test").alignment == {}


def test_regression_report():
    ds = generate(tiny_spec(num_classes=None))
    cfg = tiny_config()
    cache = build_teacher_cache(train_teachers(ds, cfg), ds)
    rep = evaluate(train_student_g2d(ds, cache, cfg).student, ds, "test", cache)
    assert rep.multi["mape"] >= 0 and rep.multi["r2"] <= 1
    assert set(rep.teacher["a"]) == {"mape", "r2"}
    assert rep.confidence_ratio == {}


def test_accuracy_on_empty_split(trained):
    _, _, student = trained
    empty = Split([np.zeros((0, 5)), np.zeros((0, 4))], np.zeros(0, dtype=np.int64))
    with pytest.raises(ContractError):
        accuracy(student, empty)


def test_report_dataclass_defaults():
    assert EvalReport("classify").modality_gap is None
