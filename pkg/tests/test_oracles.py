"""Sanity checks on the reference implementations themselves, against hand-worked values and scipy."""

import math

import numpy as np
import pytest
from scipy.signal import correlate2d

from oracles import (
    compare,
    oracle_attention,
    oracle_contingency,
    oracle_conv2d,
    oracle_finite_diff,
    oracle_integrate,
    oracle_predrnn_step,
    oracle_softmax_row,
    oracle_split,
    oracle_ssim,
)


def test_compare_reports_first_mismatch():
    res = compare([[0, 0], [0, 1]], np.zeros((2, 2)), 0.5)
    assert not res and res.first_bad_index == (1, 1) and res.max_abs_diff == 1.0
    assert compare([1.0], [1.0 + 1e-9], 1e-6)
    with pytest.raises(AssertionError):
        compare(np.zeros(2), np.zeros(3), 1.0)


def test_softmax_row_hand_values():
    assert oracle_softmax_row([0.0, math.log(3.0)], [True, True]) == pytest.approx([0.25, 0.75])
    assert oracle_softmax_row([5.0, 100.0], [True, False]) == [1.0, 0.0]


def test_attention_hand_example():
    q = np.array([[[1.0, 0.0]]])
    k = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    v = np.array([[[10.0], [20.0]]])
    out, w = oracle_attention(q, k, v)
    a = math.exp(1 / math.sqrt(2))
    expected = a / (a + 1)
    assert w[0, 0, 0] == pytest.approx(expected)
    assert out[0, 0, 0] == pytest.approx(10 * expected + 20 * (1 - expected))
    out, w = oracle_attention(q, k, v, mask=np.array([[False, True]]))
    assert out[0, 0, 0] == pytest.approx(20.0) and w[0, 0, 0] == 0.0


def test_size_cap():
    with pytest.raises(ValueError, match="cap"):
        oracle_attention(np.zeros((1, 65, 1)), np.zeros((1, 2, 1)), np.zeros((1, 2, 1)))


def test_split_integrate_hand_values():
    p = np.ones((1, 1, 1, 2))
    q = np.array([[[[0.25, 1.0]], [[0.75, 0.0]]]])
    stack = oracle_split(p, q)
    assert stack[0, :, 0, 0].tolist() == [[0.25, 1.0], [0.75, 0.0]]
    assert oracle_integrate(stack, q)[0, 0, 0].tolist() == [0.25**2 + 0.75**2, 1.0]


def test_contingency_hand_count():
    pred = np.array([[255, 0], [255, 0]])
    truth = np.array([[255, 255], [0, 0]])
    assert oracle_contingency(pred, truth, 20) == (1, 1, 1, 1)


def test_conv2d_matches_scipy(rng):
    x = rng.normal(size=(1, 2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = oracle_conv2d(x, w, b)
    for o in range(3):
        ref = sum(correlate2d(x[0, c], w[o, c], mode="same") for c in range(2)) + b[o]
        np.testing.assert_allclose(out[0, o], ref, atol=1e-12)


def test_ssim_identical_is_one(rng):
    x = rng.integers(0, 256, size=(12, 12)).astype(float)
    assert oracle_ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_predrnn_zero_weights():
    hid = 2
    names = ["W_xi", "W_xg", "W_xf", "W_xi'", "W_xg'", "W_xf'", "W_xo"]
    w = {n: np.zeros((hid, 1, 3, 3)) for n in names}
    w.update({n: np.zeros((hid, hid, 3, 3)) for n in ["W_hi", "W_hg", "W_hf", "W_ho", "W_mi", "W_mg", "W_mf", "W_co", "W_mo"]})
    w.update({n: np.zeros(hid) for n in ["b_i", "b_g", "b_f", "b_i'", "b_g'", "b_f'", "b_o"]})
    w["W_1x1"] = np.zeros((hid, 2 * hid, 1, 1))
    c = np.full((1, hid, 4, 4), 2.0)
    m = np.full((1, hid, 4, 4), -4.0)
    h, c_new, m_new = oracle_predrnn_step(np.ones((1, 1, 4, 4)), np.ones((1, hid, 4, 4)), c, m, w)
    assert np.all(h == 0) and np.allclose(c_new, 1.0) and np.allclose(m_new, -2.0)


def test_finite_diff():
    assert oracle_finite_diff(lambda x: x**3, 2.0) == pytest.approx(12.0, rel=1e-8)
    g = oracle_finite_diff(lambda x: float(np.sum(x**2)), np.array([1.0, -3.0]))
    np.testing.assert_allclose(g, [2.0, -6.0], rtol=1e-8)
