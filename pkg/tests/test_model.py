import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from her2cws.model import (
    ClassifierParams,
    ce_loss,
    forward,
    log_softmax,
    param_grads,
    partial_loss,
    pseudo_label,
    sgd_step,
    softmax,
)
from oracles import central_diff

H = 1e-5



def random_admissible(rng):
    size = rng.integers(1, 5)
    return set(rng.choice(4, size=size, replace=False).tolist())


def fixed_target_loss(z, target):
    return float(-(target * log_softmax(z)).sum())




def test_forward_uniform_tie_breaks_low():
    p = ClassifierParams.zeros(3)
    logits, probs, cls = forward(p, np.array([[1.0, -2.0, 3.0]]))
    assert np.allclose(probs, 0.25) and cls[0] == 0


def test_forward_dominant_logit():
    p = ClassifierParams(np.zeros((4, 2)), [0, 0, 0, 10])
    _, probs, cls = forward(p, np.ones((1, 2)))
    # e^10 / (e^10 + 3) = 0.999864...; a 0.9999 bound does not hold at logit 10
    assert cls[0] == 3 and probs[0, 3] == pytest.approx(np.exp(10) / (np.exp(10) + 3), abs=1e-15)
    assert probs[0, 3] > 0.9998


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(ClassifierParams.zeros(3), np.ones((2, 4)))


def test_probs_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d = int(rng.integers(1, 10))
        p = ClassifierParams(rng.normal(0, 3, (4, d)), rng.normal(0, 3, 4))
        _, probs, _ = forward(p, rng.normal(0, 3, d))
        assert abs(probs.sum() - 1) <= 1e-9 and np.all((probs >= 0) & (probs <= 1))


def test_pseudo_label_examples():
    assert np.allclose(pseudo_label([0.5, 0.3, 0.1, 0.1], {0, 1}), [0.6, 0.4, 0, 0])
    p = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.allclose(pseudo_label(p, {0, 1, 2, 3}), p)
    assert np.allclose(pseudo_label([0.25] * 4, {2}), [0, 0, 1, 0])


def test_pseudo_label_empty_set():
    with pytest.raises(ValueError):
        pseudo_label([0.25] * 4, set())
    with pytest.raises(ValueError):
        partial_loss(np.zeros(4), set())


def test_partial_loss_examples():
    z = np.log([0.5, 0.3, 0.1, 0.1])
    _, g = partial_loss(z, {0, 1})
    assert np.allclose(g, [-0.1, -0.1, 0.1, 0.1])
    z = np.array([0.3, -1.0, 2.0, 0.1])
    loss, g = partial_loss(z, {0, 1, 2, 3})
    p = softmax(z)
    assert loss == pytest.approx(-(p * np.log(p)).sum())
    assert np.allclose(g, 0.0, atol=1e-15)


def test_ce_examples():
    loss, _ = ce_loss(np.array([50.0, 0, 0, 0]), 0)
    assert loss < 1e-12
    for t in range(4):
        loss, _ = ce_loss(np.zeros(4), t)
        assert loss == pytest.approx(np.log(4))
    with pytest.raises(ValueError):
        ce_loss(np.zeros(4), 4)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1234)
    for _ in range(100):
        z = rng.normal(0, 2, 4)
        G = random_admissible(rng)
        _, g = partial_loss(z, G)
        # the pseudo-label is a fixed target for the gradient
        target = pseudo_label(softmax(z), G)
        assert np.max(np.abs(g - central_diff(lambda x: fixed_target_loss(x, target), z))) < 1e-6
        t = int(rng.integers(4))
        _, g = ce_loss(z, t)
        assert np.max(np.abs(g - central_diff(lambda x: float(ce_loss(x, t)[0]), z))) < 1e-6


def test_param_grads_chain_rule():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 4, 6)
    p = ClassifierParams(rng.normal(size=(4, 3)), rng.normal(size=4))

    def total(W, b):
        return float(ce_loss(x @ W.T + b, y)[0].sum())

    gw, gb = param_grads(x, ce_loss(forward(p, x)[0], y)[1])
    num = np.zeros_like(p.weights)
    for i in range(4):
        for j in range(3):
            e = np.zeros_like(p.weights)
            e[i, j] = H
            num[i, j] = (total(p.weights + e, p.bias) - total(p.weights - e, p.bias)) / (2 * H)
    assert np.allclose(gw, num, atol=1e-6)
    numb = np.array([(total(p.weights, p.bias + H * e) - total(p.weights, p.bias - H * e)) / (2 * H) for e in np.eye(4)])
    assert np.allclose(gb, numb, atol=1e-6)


def test_pseudo_label_properties():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        p = softmax(rng.normal(0, 2, 4))
        G = random_admissible(rng)
        y = pseudo_label(p, G)
        outside = [k for k in range(4) if k not in G]
        assert np.all(y[outside] == 0)
        assert abs(y.sum() - 1) <= 1e-9
        assert np.all(y[list(G)] >= p[list(G)])
        _, g = partial_loss(np.log(p), G)
        inside = g[list(G)]
        assert inside.max() - inside.min() < 1e-12
        assert np.all(g[outside] >= 0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    assert np.max(np.abs(softmax(z) - softmax(z + c))) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-20, 20)), st.sets(st.integers(0, 3), min_size=1))
def test_gradient_neutrality(z, G):
    p = softmax(z)
    _, g = partial_loss(z, G)
    outside = sum(p[k] for k in range(4) if k not in G)
    for j in G:
        assert g[j] == pytest.approx(-outside / len(G), abs=1e-12)


def test_batched_losses_match_rows():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(5, 4))
    mask = np.array([[True, False, True, True]] * 5)
    loss, g = partial_loss(Z, mask)
    for i in range(5):
        li, gi = partial_loss(Z[i], {0, 2, 3})
        assert loss[i] == pytest.approx(li) and np.allclose(g[i], gi)


def test_sgd_zero_gradient_fixed_point():
    p = ClassifierParams(np.ones((4, 2)), np.ones(4))
    sgd_step(p, (np.zeros((4, 2)), np.zeros(4)))
    assert np.all(p.weights == 1) and np.all(p.bias == 1)


def test_sgd_reduces_quadratic():
    # surrogate f(w) = 0.5 * ||W - 3||^2 on a 4x1 weight
    p = ClassifierParams(np.zeros((4, 1)), np.zeros(4), learning_rate=0.1)
    f = lambda W: 0.5 * float(((W - 3) ** 2).sum())
    before = f(p.weights)
    sgd_step(p, (p.weights - 3, np.zeros(4)))
    assert f(p.weights) < before


def test_sgd_nesterov_formula():
    p = ClassifierParams(np.zeros((4, 1)), np.zeros(4), learning_rate=0.5, momentum=0.9)
    g = np.ones((4, 1))
    sgd_step(p, (g, np.zeros(4)))
    # buf = 1; step = 0.5 * (1 + 0.9 * 1)
    assert np.allclose(p.weights, -0.95)
    sgd_step(p, (g, np.zeros(4)))
    # buf = 1.9; step = 0.5 * (1 + 1.71)
    assert np.allclose(p.weights, -0.95 - 1.355)


def test_sgd_deterministic():
    rng = np.random.default_rng(0)
    g = (rng.normal(size=(4, 3)), rng.normal(size=4))
    a = ClassifierParams.random(3, seed=1)
    b = ClassifierParams.random(3, seed=1)
    sgd_step(a, g)
    sgd_step(b, g)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_sgd_rejects_bad_gradients():
    p = ClassifierParams.zeros(2)
    with pytest.raises(FloatingPointError):
        sgd_step(p, (np.full((4, 2), np.nan), np.zeros(4)))
    with pytest.raises(ValueError):
        sgd_step(p, (np.zeros((4, 3)), np.zeros(4)))


def test_params_validation():
    with pytest.raises(ValueError):
        ClassifierParams(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        ClassifierParams(np.full((4, 2), np.inf), np.zeros(4))


def test_checkpoint_roundtrip():
    p = ClassifierParams.random(5, seed=2)
    sgd_step(p, (np.ones((4, 5)), np.ones(4)))
    d = json.loads(json.dumps(p.to_dict()))
    assert len(d["weights"]) == 20
    assert d["weights"][:5] == p.weights[0].tolist()  # row-major
    q = ClassifierParams.from_dict(d)
    for a in ("weights", "bias", "weights_buf", "bias_buf"):
        assert np.array_equal(getattr(p, a), getattr(q, a))
    assert (q.learning_rate, q.momentum) == (p.learning_rate, p.momentum)
