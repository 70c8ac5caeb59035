import json
import math

import numpy as np
import pytest

from resitta import oracle


def test_two_pass_stats_example():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1)
    m, v = oracle.two_pass_stats(x)
    assert m[0] == 2.5 and v[0] == 1.25


def test_ema_closed_form_example():
    assert oracle.ema_closed_form(0.0, [1.0, 1.0], 0.5) == pytest.approx(0.75)
    np.testing.assert_array_equal(oracle.ema_closed_form([3.0], [], 0.1), [3.0])


def test_gaussian_divergences():
    assert oracle.gaussian_w2_sq(0, 1, 0, 1) == 0
    assert oracle.gaussian_w2_sq(1, 2, 0, 1) == pytest.approx(2.0)
    assert oracle.gaussian_kl(0, 1, 0, 1) == 0
    assert oracle.gaussian_kl(1, 1, 0, 1) == pytest.approx(0.5)
    # half symmetric KL is symmetric in its two arguments
    a = oracle.gaussian_sym_js(0.3, 1.4, -0.2, 0.7)
    assert a == pytest.approx(oracle.gaussian_sym_js(-0.2, 0.7, 0.3, 1.4))


def test_finite_diff_on_quadratic():
    g = oracle.finite_diff_grad(lambda t: float(np.sum(t**2)), np.array([1.0, -2.0]), h=1e-5)
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)
    with pytest.raises(FloatingPointError):
        oracle.finite_diff_grad(lambda t: math.nan, np.zeros(1))


def test_compare_and_report_json():
    rep = oracle.compare("x", [1.0, 2.0], [1.0, 2.0 + 1e-9], atol=1e-8)
    assert rep.passed and rep.n_checked == 2
    assert not oracle.compare("x", [1.0], [2.0], atol=0.5).passed
    d = json.loads(rep.to_json())
    assert set(d) == {"name", "max_abs_err", "max_rel_err", "n_checked", "pass", "tolerance"}


def test_histograms_and_entropy():
    hist = oracle.slot_histograms([0, 0, 1, 1, 1, 2], [2, 4], 3)
    np.testing.assert_array_equal(hist, [[2, 0, 0], [0, 3, 1]])
    assert oracle.normalized_entropy([5, 5]) == pytest.approx(1.0)
    assert oracle.normalized_entropy([7, 0, 0]) == 0.0
    assert oracle.normalized_entropy([]) == 0.0


def test_replay_bank_simple():
    adds = [([0.9, 0.1], 0), ([0.2, 0.8], 1), ([0.5, 0.5], 2)]
    out = oracle.replay_bank(adds, 2, 100, 100, 2, True, True, True, [])
    assert sorted(r["id"] for r in out) == [0, 1]
