import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmvlab.model import (
    HamiltonianModel,
    SampleSpec,
    ScenarioError,
    Variant,
    applicable_conditions,
    build_scenario,
    check_condition,
    kalman_rank,
    load_scenario,
)

PRESETS = [
    {"preset": "ou"},
    {"preset": "ou", "variant": "CASE2"},
    {"preset": "ou", "params": {"a": 0.0, "s": 2.0}},
    {"preset": "cos-perturbed"},
    {"preset": "cos-perturbed", "params": {"s_tilde_x": 0.4, "eps": -0.3, "kappa_mu": 1.2}},
    {"preset": "cos-perturbed", "variant": "CASE2"},
    {"preset": "kinetic"},
    {"preset": "kinetic", "params": {"s_tilde1": 0.4, "kappa": -0.2}},
    {"preset": "kinetic", "params": {"A": [[0.0, 1.0], [0.0, 0.0]], "M": [[0.0], [1.0]], "s": 0.5}},
]


def test_ou_constant_is_lipschitz_constant_of_drift():
    model = build_scenario({"preset": "ou", "params": {"a": 1.0, "s": 1.0, "s_tilde": 0.5, "d": 1}})
    assert model.K == 1.0
    assert model.K_tilde == 0.0
    assert model.lam == 1.0
    assert model.variant is Variant.CASE1


def test_ou_drift_and_coefficients():
    model = build_scenario({"preset": "ou", "params": {"a": 2.0, "s": 0.5, "s_tilde": 0.3}})
    x = np.array([[1.0], [3.0]])
    assert np.allclose(model.drift(0.0, x, np.array([1.5])), -2.0 * (x - 1.5))
    assert np.allclose(model.sigma(0.0, x[0]), 0.5 * np.eye(1))
    assert np.allclose(model.sigma_tilde_diag(0.0, x, np.array([7.0])), 0.3)


def test_case2_common_coefficient_depends_on_measure_only():
    model = build_scenario({"preset": "ou", "variant": "CASE2", "params": {"s_tilde0": 0.5, "s_tilde1": 0.3}})
    mean = np.array([0.4])
    a = model.sigma_tilde_diag(0.0, np.array([[-2.0]]), mean)
    b = model.sigma_tilde_diag(0.0, np.array([[5.0]]), mean)
    assert np.allclose(a, b)
    assert np.allclose(a, 0.5 + 0.3 * np.tanh(0.4))


def test_zero_diffusion_is_rejected():
    with pytest.raises(ScenarioError, match="ellipticity"):
        build_scenario({"preset": "ou", "params": {"a": 1.0, "s": 0.0}})


def test_unknown_preset_and_parameter():
    with pytest.raises(ScenarioError):
        build_scenario({"preset": "heston"})
    with pytest.raises(ScenarioError):
        build_scenario({"preset": "ou", "params": {"volatility": 1.0}})


def test_declared_lambda_outside_unit_interval():
    with pytest.raises(ScenarioError):
        build_scenario({"preset": "ou", "declared": {"lambda": 1.5}})


def test_kinetic_scalar_is_controllable_in_one_step():
    model = build_scenario({"preset": "kinetic", "params": {"A": [[0.0]], "M": [[1.0]], "s": 1.0}})
    assert isinstance(model, HamiltonianModel)
    assert model.l == 1
    assert (model.m, model.d, model.dim_x) == (1, 1, 2)


def test_kinetic_rejects_uncontrollable_pair():
    with pytest.raises(ScenarioError, match="Kalman"):
        build_scenario({"preset": "kinetic", "params": {"A": [[0.0]], "M": [[0.0]]}})


def test_load_scenario_round_trip(tmp_path):
    model = build_scenario({"preset": "cos-perturbed", "params": {"eps": 0.2}})
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(model.to_config()))
    again = load_scenario(path)
    assert again.K == model.K
    assert again.params == model.params


@pytest.mark.parametrize("config", PRESETS, ids=lambda c: f"{c['preset']}-{c.get('variant', 'default')}")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_presets_satisfy_their_conditions(config, seed):
    model = build_scenario(config)
    for which in applicable_conditions(model):
        report = check_condition(model, which, SampleSpec(count=10_000, seed=seed))
        assert not report.violated, report.to_dict()
        assert report.pointwise_ratio <= 1 + 1e-9


def test_true_constant_not_violated_for_b():
    model = build_scenario({"preset": "ou", "variant": "CASE2"})
    report = check_condition(model, "B", SampleSpec(count=1000))
    assert not report.violated
    assert report.worst_ratio <= 1.0 + 1e-9


def test_halved_constant_is_violated_by_factor_two():
    true = build_scenario({"preset": "ou", "variant": "CASE2"})
    model = build_scenario({"preset": "ou", "variant": "CASE2", "declared": {"K": true.K / 2}})
    report = check_condition(model, "B", SampleSpec(count=1000))
    assert report.violated
    assert report.worst_ratio == pytest.approx(2.0, rel=0.02)
    assert report.witness


def test_coincident_samples_give_zero_ratio():
    model = build_scenario({"preset": "ou", "variant": "CASE2"})
    report = check_condition(model, "B", SampleSpec(count=500, strategies=("coincident",)))
    assert report.worst_ratio == 0.0


def test_report_is_json_serialisable():
    report = check_condition(build_scenario({"preset": "ou"}), "A", SampleSpec(count=200))
    json.dumps(report.to_dict())


def test_kalman_examples():
    assert kalman_rank(np.zeros((2, 2)), np.eye(2)) == 1
    assert kalman_rank([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]]) == 2
    assert kalman_rank([[0.0]], [[0.0]]) is None
    assert kalman_rank(np.zeros((2, 2)), np.zeros((2, 1))) is None


def _random_pair(seed, m, d):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, m))
    A[rng.random((m, m)) < 0.5] = 0.0
    M = rng.normal(size=(m, d))
    M[:, rng.random(d) < 0.3] = 0.0
    return A, M, rng


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4), st.integers(1, 3))
def test_kalman_invariant_under_input_change_of_basis(seed, m, d):
    A, M, rng = _random_pair(seed, m, d)
    T = rng.normal(size=(d, d)) + 3 * np.eye(d)
    assert kalman_rank(A, M) == kalman_rank(A, M @ T)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4), st.integers(1, 3))
def test_kalman_agrees_with_full_block_rank(seed, m, d):
    A, M, _ = _random_pair(seed, m, d)
    blocks = np.hstack([np.linalg.matrix_power(A, j) @ M for j in range(m)])
    full = np.linalg.matrix_rank(blocks) == m
    l = kalman_rank(A, M)
    assert (l is not None) == full
    if l is not None:
        prefix = np.hstack([np.linalg.matrix_power(A, j) @ M for j in range(l)])
        assert np.linalg.matrix_rank(prefix) == m
        if l > 1:
            shorter = np.hstack([np.linalg.matrix_power(A, j) @ M for j in range(l - 1)])
            assert np.linalg.matrix_rank(shorter) < m
