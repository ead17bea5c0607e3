import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asdbench.backbones import CANONICAL_ORDER
from asdbench.dataset import SplitSpec, split, synth_dataset
from asdbench.stacking import (
    LeakageError, LevelZeroOutputs, MetaLearner, SingularFit, fit_logistic, fit_meta, predict_stacked, sigmoid,
)


def gradient_descent(x, y, lam, steps=200_000, lr=None):
    """Plain full-batch gradient descent on the same penalised log-loss (intercept unpenalised)."""
    n, d = x.shape
    w, b = np.zeros(d), 0.0
    lr = lr or 1.0 / (0.25 * np.linalg.norm(x, 2) ** 2 + 0.25 * n + lam)
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(x @ w + b)))
        gw, gb = x.T @ (p - y) + lam * w, np.sum(p - y)
        w, b = w - lr * gw, b - lr * gb
        if math.hypot(np.linalg.norm(gw), gb) < 1e-10:
            break
    return w, b


def informative(n=120, seed=0, strong=2):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.uniform(0, 1, (n, 6))
    x[:, strong] = np.clip(0.5 + 0.35 * (2 * y - 1) + 0.1 * rng.standard_normal(n), 0, 1)
    return x, y


def outputs(x, ids=None, order=CANONICAL_ORDER):
    ids = ids or tuple(f"s{i}" for i in range(len(x)))
    return LevelZeroOutputs(x, ids, order)


def test_newton_matches_gradient_descent_oracle():
    x, y = informative()
    w, b, _, gnorm = fit_logistic(x, y, 1.0)
    w_ref, b_ref = gradient_descent(x, y, 1.0)
    assert gnorm < 1e-8
    assert np.allclose(w, w_ref, atol=1e-6) and abs(b - b_ref) < 1e-6
    assert int(np.argmax(np.abs(w))) == 2


def test_label_copy_column_dominates():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 100)
    x = np.clip(0.5 + 0.05 * rng.standard_normal((100, 6)), 0, 1)
    x[:, 0] = y
    w, _, _, _ = fit_logistic(x, y, 1.0)
    w_ref, _ = gradient_descent(x, y, 1.0)
    assert int(np.argmax(np.abs(w))) == int(np.argmax(np.abs(w_ref))) == 0


def test_constant_inputs_balanced_labels_give_zero_model():
    m = fit_meta(outputs(np.full((20, 6), 0.5)), np.arange(20) % 2)
    assert np.max(np.abs(m.coefficients)) < 1e-3 and abs(m.intercept) < 1e-3


def test_zero_model_predicts_one_half():
    m = MetaLearner(np.zeros(6), 0.0)
    assert np.all(m.predict_proba(np.random.default_rng(0).uniform(0, 1, (9, 6))) == 0.5)


def test_no_signal_gives_small_coefficients():
    rng = np.random.default_rng(5)
    x, y = rng.uniform(0, 1, (400, 6)), rng.integers(0, 2, 400)
    m = fit_meta(outputs(x), y)
    assert np.max(np.abs(m.coefficients)) < 0.6
    # unpenalised intercept: the fitted probabilities average to the base rate
    assert abs(m.predict_proba(x).mean() - y.mean()) < 1e-9


def test_fit_is_deterministic():
    x, y = informative(seed=3)
    a, b = fit_meta(outputs(x), y), fit_meta(outputs(x), y)
    assert np.array_equal(a.coefficients, b.coefficients) and a.intercept == b.intercept


def test_sigmoid_values_and_stability():
    assert sigmoid(np.array([0.9]))[0] == pytest.approx(0.7109495026250039, abs=1e-15)
    assert sigmoid(np.array([0.0]))[0] == 0.5
    s = sigmoid(np.array([-800.0, 800.0]))
    assert s[0] == 0.0 and s[1] == 1.0 and np.isfinite(s).all()


def test_single_column_worked_example():
    m = MetaLearner(np.array([1.0, 0, 0, 0, 0, 0]), 0.0)
    proba, labels = predict_stacked(m, outputs(np.array([[0.9, 0, 0, 0, 0, 0]])))
    assert proba[0] == pytest.approx(0.7109495, abs=1e-7) and labels[0] == 1


@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.integers(0, 5), st.floats(0.01, 0.5))
def test_monotone_in_a_positive_weight_input(row, j, bump):
    m = MetaLearner(np.array([0.5, -1.0, 2.0, 0.1, 1.5, 0.7]), -0.3)
    x = np.array([row])
    x2 = x.copy()
    x2[0, j] = min(1.0, x2[0, j] + bump)
    p, p2 = m.predict_proba(x)[0], m.predict_proba(x2)[0]
    assert (p2 >= p) if m.coefficients[j] > 0 else (p2 <= p)


@given(st.permutations(list(range(6))))
def test_column_permutation_invariance(perm):
    x, y = informative(60, seed=9)
    base = fit_meta(outputs(x), y)
    order = tuple(CANONICAL_ORDER[i] for i in perm)
    shuffled = outputs(x[:, perm], order=order)
    refit = fit_meta(shuffled, y)
    p_ref, _ = predict_stacked(base, outputs(x))
    p_new, _ = predict_stacked(refit, shuffled)
    assert np.allclose(p_ref, p_new, atol=1e-8)
    # a model fitted in canonical order scores permuted inputs identically
    assert np.allclose(predict_stacked(base, shuffled)[0], p_ref, atol=1e-12)


def test_leakage_guard():
    manifest = synth_dataset(20, seed=0)
    a = split(manifest, SplitSpec.stacking(0))
    val_y = manifest.labels(a.val_ids)
    rng = np.random.default_rng(0)
    fit_meta(outputs(rng.uniform(0, 1, (len(a.val_ids), 6)), a.val_ids), val_y, assignment=a)
    leaked = a.val_ids[:-1] + a.test_ids[:1]
    with pytest.raises(LeakageError):
        fit_meta(outputs(rng.uniform(0, 1, (len(leaked), 6)), leaked), manifest.labels(leaked), assignment=a)
    from_train = a.train_ids[: len(a.val_ids)]
    with pytest.raises(LeakageError):
        fit_meta(outputs(rng.uniform(0, 1, (len(from_train), 6)), from_train), manifest.labels(from_train),
                 assignment=a)


def test_single_class_validation_rejected():
    with pytest.raises(SingularFit):
        fit_meta(outputs(np.full((5, 6), 0.5)), np.ones(5))


def test_level0_outputs_validate_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        outputs(np.full((2, 6), 1.5))
    x, _ = informative(7)
    o = outputs(x)
    o.save(tmp_path / "l0.csv")
    back = LevelZeroOutputs.load(tmp_path / "l0.csv")
    assert back.sample_ids == o.sample_ids and np.array_equal(back.matrix, o.matrix)


def test_meta_round_trip():
    x, y = informative(40)
    m = fit_meta(outputs(x), y)
    again = MetaLearner.from_dict(m.to_dict())
    assert np.array_equal(again.predict_proba(x), m.predict_proba(x))
