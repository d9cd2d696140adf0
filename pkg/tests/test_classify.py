import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exemplar import classify as cl
from exemplar.errors import DegenerateLabels


def dual_cd(x, y, C, sweeps=2000):
    """Dual coordinate descent for 0.5|w|^2 + C sum hinge (bias as a constant feature)."""
    xa = np.hstack([x, np.ones((len(x), 1))])
    alpha = np.zeros(len(x))
    w = np.zeros(xa.shape[1])
    q = (xa * xa).sum(axis=1)
    for _ in range(sweeps):
        for i in range(len(x)):
            g = y[i] * (xa[i] @ w) - 1
            new = min(max(alpha[i] - g / q[i], 0.0), C)
            w += (new - alpha[i]) * y[i] * xa[i]
            alpha[i] = new
    return w[:-1], w[-1]


def blobs(n=40, gap=4.0, seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(0, 1, (n, 2)), rng.normal(gap, 1, (n, 2))])
    return x, np.repeat([0, 1], n)


def test_separable_blobs():
    x, y = blobs(gap=8.0)
    model = cl.train_ova(x, y, rng=np.random.default_rng(0))
    assert cl.accuracy(model, x, y) == (1.0, 1.0)


def test_matches_dual_solver_objective():
    x, labels = blobs(n=20, gap=2.5, seed=1)
    model = cl.train_ova(x, labels, C=1.0, epochs=400, rng=np.random.default_rng(0))
    xs = (x - model.mean) / model.scale
    y = np.where(labels == 1, 1.0, -1.0)
    w_ref, b_ref = dual_cd(xs, y, 1.0)
    best = cl.hinge_objective(w_ref, b_ref, xs, y, 1.0)
    ours = cl.hinge_objective(model.weights[1], model.biases[1], xs, y, 1.0)
    assert ours <= best * 1.01


def test_shuffled_labels_are_at_chance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1000, 20))
    y = np.tile(np.arange(10), 100)
    model = cl.train_ova(x[:500], rng.permutation(y[:500]), epochs=20, rng=rng)
    acc, _ = cl.accuracy(model, x[500:], y[500:])
    sigma = math.sqrt(0.1 * 0.9 / 500)
    assert abs(acc - 0.1) <= 3 * sigma


def test_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        cl.train_ova(np.zeros((5, 2)), np.zeros(5, int))
    with pytest.raises(DegenerateLabels):
        cl.train_ova(np.zeros((5, 2)), np.array([0, 0, 2, 2, 2]))


def test_accuracy_metrics():
    labels = np.array([0] * 10 + [1] * 30)
    assert cl.accuracy(labels, labels, labels) == (1.0, 1.0)
    pred = np.zeros(40, int)
    assert cl.accuracy(pred, None, labels) == (0.25, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_accuracy_matches_counting(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 25)
    pred = rng.integers(0, 4, 25)
    hits = sum(int(p == t) for p, t in zip(pred, labels))
    per = []
    for c in sorted(set(labels.tolist())):
        idx = [k for k in range(25) if labels[k] == c]
        per.append(sum(int(pred[k] == c) for k in idx) / len(idx))
    overall, per_class = cl.accuracy(pred, None, labels)
    assert math.isclose(overall, hits / 25) and math.isclose(per_class, sum(per) / len(per))


def test_scale_invariance_and_determinism():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(90, 5)) + np.repeat(rng.normal(0, 2, (3, 5)), 30, axis=0)
    y = np.repeat(np.arange(3), 30)
    a = cl.train_ova(x, y, rng=np.random.default_rng(9))
    b = cl.train_ova(x * 37.0, y, rng=np.random.default_rng(9))
    c = cl.train_ova(x, y, rng=np.random.default_rng(9))
    assert np.array_equal(a.predict(x), b.predict(x * 37.0))
    assert np.array_equal(a.weights, c.weights)


def test_ties_go_to_lowest_index():
    model = cl.LinearOVA(np.zeros((4, 2)), np.array([0.0, 1.0, 1.0, 0.5]), 1.0, np.zeros(2), np.ones(2))
    assert np.all(model.predict(np.random.default_rng(0).normal(size=(6, 2))) == 1)


def test_save_load_and_csv(tmp_path):
    x, y = blobs()
    model = cl.train_ova(x, y)
    model.save(tmp_path / "m.ova")
    back = cl.LinearOVA.load(tmp_path / "m.ova")
    assert np.allclose(back.weights, model.weights, rtol=1e-6)
    assert np.array_equal(back.predict(x), model.predict(x))
    cl.write_eval_csv(tmp_path / "e.csv", [("test", 0.5, 0.4)])
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "split,overall_acc,per_class_acc"
