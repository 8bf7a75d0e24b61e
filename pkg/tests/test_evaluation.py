import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmic.aggregation import fuse
from gmic.diffcore import Tensor
from gmic.evaluation import (VARIANTS, UndefinedMetricError, breast_level, continuous_prf, evaluate_model,
                             predict_views, roc_auc, strip_timestamp, upsample_nearest, write_metrics,
                             write_predictions)

from oracles import auc_pairwise


# ---------------------------------------------------------------- breast level

def test_breast_level_examples():
    assert breast_level(0.2, 0.4) == pytest.approx(0.3)
    a = np.array([0.1, 0.7])
    np.testing.assert_array_equal(breast_level(a, a), a)
    np.testing.assert_array_equal(breast_level([0.2, 0.9], [0.5, 0.1]), breast_level([0.5, 0.1], [0.2, 0.9]))


# ---------------------------------------------------------------- AUC

def test_auc_examples():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 2])


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_auc_matches_pairwise_oracle(data):
    n = data.draw(st.integers(2, 200))
    seed = data.draw(st.integers(0, 10 ** 6))
    rng = np.random.default_rng(seed)
    levels = data.draw(st.integers(2, 30))
    scores = rng.integers(0, levels, n) / levels  # coarse grid forces ties
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    assert roc_auc(scores, labels) == auc_pairwise(scores.tolist(), labels.tolist())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(40)
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    assert roc_auc(s, y) == roc_auc(np.exp(3 * s) - 7, y)


# ---------------------------------------------------------------- continuous P/R/F1

def test_prf_worked_example():
    r = continuous_prf([[0.8, 0.2], [0.0, 0.5]], [[1, 0], [0, 0]])
    assert r.precision == pytest.approx(0.8 / 1.5)
    assert r.recall == pytest.approx(0.8)
    assert r.f1 == pytest.approx(0.64)


def test_prf_perfect_and_uniform():
    m = np.zeros((4, 4), bool)
    m[:2] = True
    r = continuous_prf(m.astype(float), m)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)
    r = continuous_prf(np.full((4, 4), 0.5), m)
    assert (r.precision, r.recall, r.f1) == pytest.approx((0.5, 0.5, 0.5))


def test_prf_all_zero_map():
    m = np.eye(3, dtype=bool)
    r = continuous_prf(np.zeros((3, 3)), m)
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        continuous_prf(np.zeros((3, 3)), np.zeros((3, 3), bool))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_prf_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 30, 2)
    A = rng.random((h, w))
    M = rng.random((h, w)) < 0.3
    M[0, 0] = True
    inside = sum(A[i, j] for i in range(h) for j in range(w) if M[i, j])
    P = inside / sum(A[i, j] for i in range(h) for j in range(w))
    R = inside / sum(1 for i in range(h) for j in range(w) if M[i, j])
    r = continuous_prf(A, M)
    assert abs(r.precision - P) < 1e-9 and abs(r.recall - R) < 1e-9
    assert abs(r.f1 - 2 * P * R / (P + R)) < 1e-9
    assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1


def test_recall_one_iff_map_is_one_on_mask():
    m = np.zeros((5, 5), bool)
    m[1:3, 1:4] = True
    A = np.where(m, 1.0, 0.3)
    assert continuous_prf(A, m).recall == 1.0
    A[1, 1] = 0.999
    assert continuous_prf(A, m).recall < 1.0


# ---------------------------------------------------------------- upsampling

def test_upsample_examples():
    np.testing.assert_array_equal(upsample_nearest([[0.4]], (3, 5)), np.full((3, 5), 0.4))
    a = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(upsample_nearest(a, (4, 4)), np.kron(a, np.ones((2, 2), int)))


def test_upsample_3x3_to_5x5_index_oracle():
    a = np.arange(9).reshape(3, 3)
    out = upsample_nearest(a, (5, 5))
    for i in range(5):
        for j in range(5):
            assert out[i, j] == a[(i * 3) // 5, (j * 3) // 5]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), H=st.integers(1, 40), W=st.integers(1, 40))
def test_upsample_preserves_value_set(seed, H, W):
    rng = np.random.default_rng(seed)
    a = rng.random(tuple(rng.integers(1, 8, 2)))
    out = upsample_nearest(a, (H, W))
    assert out.shape == (H, W)
    assert set(np.unique(out)) <= set(np.unique(a))


# ---------------------------------------------------------------- harness

@pytest.fixture(scope="module")
def toy_eval(toy_cfg, toy_ds, toy_model):
    model, store = toy_model
    return evaluate_model(model, store, toy_ds, "train", VARIANTS, seed=0)


def test_gmic_is_fuse_of_paths(toy_eval):
    for b, row in zip(toy_eval.breasts, toy_eval.scores["gmic"]):
        np.testing.assert_allclose(row, fuse(b.y_loc, b.y_mil))
        np.testing.assert_allclose(b.y, row)
    np.testing.assert_allclose(toy_eval.scores["loc-random"],
                               fuse(toy_eval.scores["loc"], toy_eval.scores["random"]))


def test_unknown_variant(toy_cfg, toy_ds, toy_model):
    model, store = toy_model
    with pytest.raises(ValueError):
        evaluate_model(model, store, toy_ds, "test", ["nope"])


def test_noattn_equals_mil_on_identical_patches(toy_model, toy_cfg):
    model, store = toy_model
    rng = np.random.default_rng(0)
    patch = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
    h = model.encoder(store, Tensor(patch), training=False)
    from gmic import diffcore as dc
    bag = dc.reshape(dc.concat([h] * 3, axis=0), (1, 3, toy_cfg.mil.L))
    a = model.mil(store, bag).y_mil.data
    b = model.mil(store, bag, uniform=True).y_mil.data
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_localization_uses_per_image_f1_mean(toy_eval):
    loc = toy_eval.metrics()["localization"]
    for name, scores in toy_eval.localization.items():
        if scores:
            assert loc[name]["f1"] == pytest.approx(np.mean([s.f1 for s in scores]))
            assert loc[name]["count"] == len(scores)


def test_metrics_deterministic_and_written(toy_cfg, toy_ds, toy_model, tmp_path):
    model, store = toy_model
    r1 = evaluate_model(model, store, toy_ds, "train", VARIANTS, seed=0)
    r2 = evaluate_model(model, store, toy_ds, "train", VARIANTS, seed=0)
    d1 = write_metrics(tmp_path / "a.json", r1)
    d2 = write_metrics(tmp_path / "b.json", r2)
    assert strip_timestamp(d1) == strip_timestamp(d2)
    doc = json.loads((tmp_path / "a.json").read_text())
    assert set(doc["auc"]) == set(VARIANTS)
    assert set(doc["localization"]) == {"benign", "malignant"}
    write_predictions(tmp_path / "p.csv", r1)
    with open(tmp_path / "p.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["breastId", "class", "y_loc", "y_mil", "y", "label"]
    assert len(rows) == 2 * len(r1.breasts)
    for row in rows:
        assert 0 <= float(row["y"]) <= 1


def test_ensemble_of_one_equals_single(toy_model, toy_ds):
    model, store = toy_model
    a = evaluate_model(model, store, toy_ds, "test", ["gmic"], localization=False)
    b = evaluate_model(model, [store], toy_ds, "test", ["gmic"], localization=False)
    np.testing.assert_array_equal(a.scores["gmic"], b.scores["gmic"])


def test_predict_views_returns_requested_kinds(toy_model):
    model, store = toy_model
    x = np.random.default_rng(0).standard_normal((2, 1, 64, 64)).astype(np.float32)
    out = predict_views(model, store, x, {"loc", "mil", "noattn", "random"}, np.random.default_rng(1))
    for k in ("saliency", "loc", "mil", "noattn", "random", "alpha"):
        assert k in out
    assert out["loc"].shape == (2, 2)
    assert np.all((out["mil"] >= 0) & (out["mil"] <= 1))
