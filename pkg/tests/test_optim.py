import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vdl.optim import AdamState, adam_step


def reference_adam(p, grads, lr, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_single_step_hand_trace():
    st_ = AdamState(lr=0.1)
    p = {"p": np.array([1.0])}
    adam_step(st_, p, {"p": np.array([1.0])})
    assert st_.t == 1
    assert st_.m["p"][0] == pytest.approx(0.1)
    assert st_.v["p"][0] == pytest.approx(0.001)
    assert p["p"][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_zero_gradient_keeps_params():
    p = {"w": np.array([[1.0, -2.0]])}
    adam_step(AdamState(lr=0.5), p, {"w": np.zeros((1, 2))})
    assert np.array_equal(p["w"], [[1.0, -2.0]])


def test_converges_on_scalar_quadratic():
    st_ = AdamState(lr=0.05)
    p = {"p": np.array([1.0])}
    for _ in range(500):
        adam_step(st_, p, {"p": p["p"].copy()})
    assert abs(p["p"][0]) < 1e-3


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0, 0.5), st.floats(-3, 3))
def test_matches_reference(grads, wd, p0):
    st_ = AdamState(lr=0.01, weight_decay={"p": wd})
    p = {"p": np.array([p0])}
    for g in grads:
        adam_step(st_, p, {"p": np.array([g])})
    assert p["p"][0] == pytest.approx(reference_adam(p0, grads, 0.01, wd), rel=1e-12, abs=1e-12)
    assert (st_.v["p"] >= 0).all()


def test_weight_decay_only_on_flagged():
    def run(wd):
        st_ = AdamState(lr=0.1, weight_decay={"b": wd})
        p = {"W": np.ones((2, 2)), "b": np.ones(2)}
        for _ in range(3):
            adam_step(st_, p, {"W": np.full((2, 2), 0.3), "b": np.zeros(2)})
        return p
    a, b = run(0.0), run(0.5)
    assert np.array_equal(a["W"], b["W"])
    assert np.array_equal(a["b"], np.ones(2))
    assert (b["b"] < 1).all()


def test_step_bounded_by_lr():
    st_ = AdamState(lr=0.01)
    p = {"p": np.zeros(3)}
    for _ in range(50):
        before = p["p"].copy()
        adam_step(st_, p, {"p": np.array([1.0, -4.0, 1e-3])})
        assert np.all(np.abs(p["p"] - before) <= 0.01 * (1 + 1e-6))


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step(AdamState(lr=0.1), {"p": np.zeros(2)}, {"p": np.zeros(3)})
    with pytest.raises(ValueError):
        adam_step(AdamState(lr=0.1), {"p": np.zeros(2)}, {"q": np.zeros(2)})
