import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmvlab.metrics import (
    RateSpec,
    TestFunction,
    brute_force_w2,
    entropy_gaussian,
    estimate_semigroup,
    fit_power_law,
    harnack_gap,
    jackknife_stderr,
    loglog_slope,
    rate_Rdq,
    rho,
    w2_exact,
    w2_modified,
    w2_sinkhorn,
    w2_squared_1d,
    w2_squared_many,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_w2_identical_clouds_give_zero_and_identity():
    a = np.array([[0.0, 1.0], [2.0, -1.0], [3.0, 3.0]])
    dist, plan = w2_exact(a, a)
    assert dist == 0.0
    assert list(plan.assignment) == [0, 1, 2]


def test_w2_sorted_matching_1d():
    dist, plan = w2_exact([0.0, 2.0], [1.0, 3.0])
    assert dist == pytest.approx(1.0, abs=1e-15)
    assert list(plan.assignment) == [0, 1]


def test_w2_rejects_unequal_sizes():
    with pytest.raises(ValueError):
        w2_exact(np.zeros((3, 1)), np.zeros((4, 1)))


def test_w2_against_brute_force_small_clouds():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n, d = rng.integers(1, 7), rng.integers(1, 4)
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        assert w2_exact(a, b)[0] == pytest.approx(brute_force_w2(a, b), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.data())
def test_w2_1d_equals_sorted_cost(x, data):
    y = data.draw(arrays(np.float64, x.shape, elements=finite))
    expected = math.sqrt(np.mean((np.sort(x) - np.sort(y)) ** 2))
    assert w2_exact(x, y)[0] == pytest.approx(expected, abs=1e-12)
    assert w2_squared_1d(x, y) == pytest.approx(expected**2, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 2), elements=finite), arrays(np.float64, (5, 2), elements=finite))
def test_w2_is_symmetric_and_below_identity_pairing(a, b):
    d_ab = w2_exact(a, b)[0]
    assert d_ab == pytest.approx(w2_exact(b, a)[0], abs=1e-9)
    assert d_ab <= math.sqrt(np.mean(((a - b) ** 2).sum(axis=1))) + 1e-9


def test_w2_translation_moves_by_shift():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(8, 3))
    shift = np.array([0.3, -1.0, 2.0])
    assert w2_exact(a, a + shift)[0] == pytest.approx(np.linalg.norm(shift), abs=1e-12)


def test_w2_squared_many_matches_pairwise():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 2))
    many = w2_squared_many(a, b)
    for i in range(3):
        assert many[i] == pytest.approx(w2_exact(a[i], b[i])[0] ** 2, abs=1e-12)


def test_w2_modified_reduces_to_w2_at_unit_time():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    assert w2_modified(a, b, 1.0, 1) == pytest.approx(w2_exact(a, b)[0], abs=1e-12)


def test_w2_modified_ignores_time_when_first_block_agrees():
    a = np.array([[1.0, 0.0], [2.0, 1.0]])
    b = a + np.array([0.0, 0.7])
    assert w2_modified(a, b, 0.1, 1) == pytest.approx(w2_modified(a, b, 5.0, 1), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite), st.floats(0.01, 10))
def test_kinetic_distance_comparison(x, y, t):
    assert rho(x, y, t, 1) <= max(1.0, 1.0 / t) * np.linalg.norm(x - y) * (1 + 1e-12) + 1e-12


def test_sinkhorn_default_close_to_exact():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(30, 2)), rng.normal(size=(30, 2)) + 1.0
    res = w2_sinkhorn(a, b)
    assert res.epsilon == pytest.approx(1e-2 * np.median(((a[:, None] - b[None]) ** 2).sum(-1)))
    assert res.iterations <= 500
    assert res.distance == pytest.approx(w2_exact(a, b)[0], rel=0.01)


def test_sinkhorn_converged_plan_costs_at_least_the_optimum():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    res = w2_sinkhorn(a, b, epsilon=2.0)
    assert res.converged
    assert res.distance >= w2_exact(a, b)[0]


def test_entropy_gaussian_closed_forms():
    assert entropy_gaussian([0.0], [[1.0]], [0.0], [[1.0]]) == 0.0
    assert entropy_gaussian([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(0.5, abs=1e-14)
    assert entropy_gaussian([0.0], [[1.0]], [0.0], [[2.0]]) == pytest.approx(0.5 * (1 - math.log(2)), abs=1e-14)


def test_entropy_gaussian_rejects_non_spd():
    with pytest.raises(ValueError):
        entropy_gaussian([0.0, 0.0], np.eye(2), [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


def test_rate_examples():
    assert rate_Rdq(64, RateSpec(3, 3.0)) == pytest.approx(0.375, abs=1e-15)
    assert rate_Rdq(1, RateSpec(3, 3.0)) == pytest.approx(2.0)
    assert rate_Rdq(1, RateSpec(4, 3.0)) == pytest.approx(math.log(2) + 1)
    with pytest.raises(ValueError):
        RateSpec(3, 4.0)
    with pytest.raises(ValueError):
        RateSpec(2, 2.0)


def test_fit_power_law_examples():
    ns = [8, 16, 32, 64, 128, 256, 512]
    exact = fit_power_law(ns, [3.0 * n**-0.5 for n in ns])
    assert exact.exponent == pytest.approx(-0.5, abs=1e-12)
    assert exact.r2 == pytest.approx(1.0)
    two_term = fit_power_law(ns, [n**-0.5 + 1.0 / n for n in ns])
    assert -0.62 < two_term.exponent < -0.50
    assert fit_power_law(ns, [2.0] * len(ns)).exponent == 0.0


def test_fit_power_law_needs_four_positive_points():
    with pytest.raises(ValueError):
        fit_power_law([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_power_law([1, 2, 3, 4], [1, 0, 3, 4])


def test_loglog_slope_two_points():
    assert loglog_slope([1, 4], [1, 1 / 16]) == pytest.approx(-2.0)


def test_constant_test_function_has_zero_gap():
    f = TestFunction(kind="constant", value=3.0)
    clouds = np.random.default_rng(0).normal(size=(20, 50, 1))
    assert estimate_semigroup(f, clouds, "mean_of_log_f").value == pytest.approx(math.log(3.0))
    assert harnack_gap(f, clouds, clouds).value == pytest.approx(0.0, abs=1e-15)


def test_harnack_gap_nonpositive_for_equal_initials():
    f = TestFunction(eps=0.01, center=(0.0,), width=0.3)
    clouds = np.random.default_rng(1).normal(size=(200, 64, 1))
    gap = harnack_gap(f, clouds, clouds)
    assert gap.value <= 3 * gap.stderr


def test_bump_gaussian_mean_matches_monte_carlo():
    f = TestFunction(eps=0.1, center=(0.5,), width=0.7)
    x = np.random.default_rng(5).normal(1.0, 0.8, size=(400_000, 1))
    assert f(x).mean() == pytest.approx(f.gaussian_mean([1.0], 0.64), abs=3e-3)


def test_jackknife_plain_and_grouped():
    v = np.arange(10.0)
    assert jackknife_stderr(v) == pytest.approx(v.std(ddof=1) / math.sqrt(10))
    assert jackknife_stderr(v, groups=np.arange(10)) == pytest.approx(v.std(ddof=1) / math.sqrt(10))
    assert math.isnan(jackknife_stderr([1.0]))


def test_brute_force_small_case():
    a, b = np.array([[0.0], [1.0], [5.0]]), np.array([[5.0], [0.0], [1.0]])
    assert brute_force_w2(a, b) == 0.0
    perms = [np.mean((a[:, 0] - b[list(p), 0]) ** 2) for p in itertools.permutations(range(3))]
    assert brute_force_w2(a, b) ** 2 == pytest.approx(min(perms))
