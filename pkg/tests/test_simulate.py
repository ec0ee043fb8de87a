import numpy as np
import pytest
from scipy import stats

from cmvlab.metrics import w2_squared_many
from cmvlab.model import build_scenario
from cmvlab.paths import TimeGrid, sample_common, sample_noise_bundle
from cmvlab.simulate import (
    EmpiricalMeasure,
    InitialLaw,
    advance,
    cloud_noise,
    em_step,
    evolve_clouds,
    export_trajectories_csv,
    initial_uniforms,
    simulate_hamiltonian,
    simulate_interacting,
    simulate_limit_cloud,
    trajectory_rows,
)

OU = {"preset": "ou", "params": {"a": 1.0, "s": 1.0, "s_tilde": 0.5}}


def test_em_step_trivial_cases():
    x = np.array([1.0, -2.0])
    zero = np.zeros((2, 2))
    assert np.array_equal(em_step(x, 0.0, 0.1, np.zeros(2), zero, zero, np.ones(2), np.ones(2)), x)
    assert em_step(np.array([0.0]), 0.0, 0.5, np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 1)), [0.0], [0.0])[0] == 0.5
    with pytest.raises(ValueError):
        em_step(x, 0.0, 0.0, x, zero, zero, x, x)


def test_em_strong_order_one_for_additive_noise():
    model = build_scenario({"preset": "ou", "params": {"a": 1.0, "s": 1.0, "s_tilde": 0.0}})
    T, fine_n, paths = 1.0, 2**12, 2000
    rng = np.random.default_rng(0)
    dW = rng.standard_normal((fine_n, paths, 1)) * np.sqrt(T / fine_n)
    zero = np.zeros(1)

    def run(n):
        step = fine_n // n
        x = np.full((paths, 1), 1.0)
        inc = dW.reshape(n, step, paths, 1).sum(axis=1)
        for k in range(n):
            x = advance(model, k * T / n, T / n, x, zero, inc[k], 0.0)
        return x

    ref = run(fine_n)
    ns = [16, 32, 64, 128, 256]
    errs = [np.sqrt(np.mean((run(n) - ref) ** 2)) for n in ns]
    slope = np.polyfit(np.log(T / np.array(ns)), np.log(errs), 1)[0]
    assert abs(slope - 1.0) < 0.2


def test_cloud_mean_follows_common_noise():
    grid = TimeGrid.uniform(1.0, 100)
    model = build_scenario(OU)
    M = 2048
    cloud = simulate_limit_cloud(model, grid, M, seed=3)
    B_T = sample_common(grid, 1, 3, 0).sum()
    assert abs(cloud.means[-1, 0] - 0.5 * B_T) < 4 * 1.0 / np.sqrt(M)


def test_cloud_variance_matches_closed_form():
    grid = TimeGrid.uniform(1.0, 400)
    model = build_scenario(OU)
    M = 8192
    cloud = simulate_limit_cloud(model, grid, M, seed=1, record=[400])
    v = cloud.states[-1, :, 0].var(ddof=1)
    exact = (1 - np.exp(-2.0)) / 2.0
    assert abs(v - exact) < 4 * exact * np.sqrt(2 / M) + 0.01 * exact


def test_cloud_tracks_common_path_at_every_knot():
    grid = TimeGrid.uniform(1.0, 50)
    model = build_scenario(OU)
    M, good = 256, 0
    for r in range(200):
        cloud = simulate_limit_cloud(model, grid, M, seed=0, replica_id=r, record=[])
        B = np.concatenate([[0.0], np.cumsum(sample_common(grid, 1, 0, r)[:, 0])])
        bound = 5 * np.sqrt(grid.knots) / np.sqrt(M)
        good += np.all(np.abs(cloud.means[:, 0] - 0.5 * B) <= bound + 1e-15)
    assert good >= 0.95 * 200


def test_distribution_free_cloud_decouples():
    model = build_scenario({"preset": "cos-perturbed", "params": {"kappa_mu": 0.0, "s_tilde": 0.0}})
    grid = TimeGrid.uniform(1.0, 40)
    noise = cloud_noise(0, 0, grid, 64, 1)[None]
    common = sample_common(grid, 1, 0, 0)[None]
    init = np.linspace(-1, 1, 64).reshape(1, 1, 64, 1)
    full = evolve_clouds(model, grid, init, common, noise)
    half = evolve_clouds(model, grid, init[:, :, :32], common, noise[:, :, :32])
    assert np.array_equal(full.states[0, 0, :, :32], half.states[0, 0])


def test_cloud_stability_constant_is_uniform_over_gap_sizes():
    model = build_scenario({"preset": "cos-perturbed", "params": {"s_tilde_x": 0.3}})
    grid = TimeGrid.uniform(1.0, 50)
    R, M = 40, 256
    common = np.stack([sample_common(grid, 1, 2, r) for r in range(R)])
    noise = np.stack([cloud_noise(2, r, grid, M, 1) for r in range(R)])
    u = np.stack([initial_uniforms(2, r, 0, M, 1) for r in range(R)])
    record = list(range(0, 51, 5))
    consts = []
    for delta in (0.1, 0.2, 0.4):
        mu, nu = InitialLaw("gaussian", (0.0,), 1.0), InitialLaw("gaussian", (delta,), 1.0)
        batch = evolve_clouds(model, grid, np.stack([mu.quantile(u), nu.quantile(u)], axis=1), common, noise, record)
        w2sq = w2_squared_many(batch.states[:, 0], batch.states[:, 1]).mean(axis=0)
        consts.append(w2sq.max() / delta**2)
    consts = np.array(consts)
    assert np.all(np.abs(consts / consts.mean() - 1) < 0.2)


def test_single_particle_sees_itself():
    model = build_scenario({"preset": "ou", "params": {"a": 3.0, "s": 1.0, "s_tilde": 0.5}})
    grid = TimeGrid.uniform(1.0, 20)
    bundle = sample_noise_bundle(grid, 1, 1, 1, seed=0, replica_id=0)
    traj = simulate_interacting(model, bundle, [[0.2]])
    expected = 0.2 + np.cumsum(bundle.private[0, :, 0]) + 0.5 * np.cumsum(bundle.common[:, 0])
    assert np.allclose(traj.states[1:, 0, 0], expected, atol=1e-12)


def test_interacting_system_is_exchangeable():
    model = build_scenario({"preset": "cos-perturbed"})
    grid = TimeGrid.uniform(1.0, 20)
    bundle = sample_noise_bundle(grid, 1, 1, 5, seed=1, replica_id=0)
    init = np.arange(5.0).reshape(5, 1)
    perm = np.array([3, 0, 4, 1, 2])
    base = simulate_interacting(model, bundle, init)
    shuffled = type(bundle)(grid, bundle.common, bundle.private[perm], bundle.seed, bundle.replica_id)
    again = simulate_interacting(model, shuffled, init[perm])
    assert np.allclose(again.states, base.states[:, perm], atol=1e-12)


def test_ou_empirical_mean_recursion():
    model = build_scenario({"preset": "ou", "params": {"a": 2.0, "s": 0.8, "s_tilde": 0.3}})
    grid = TimeGrid.uniform(1.0, 30)
    bundle = sample_noise_bundle(grid, 1, 1, 12, seed=2, replica_id=1)
    init = np.random.default_rng(0).normal(size=(12, 1))
    traj = simulate_interacting(model, bundle, init)
    mean = init.mean()
    for k in range(grid.n_steps):
        mean = mean + 0.8 * bundle.private[:, k, 0].mean() + 0.3 * bundle.common[k, 0]
        assert traj.states[k + 1, :, 0].mean() == pytest.approx(mean, abs=1e-12)


def test_interacting_matches_independent_paths_without_interaction():
    model = build_scenario({"preset": "cos-perturbed", "params": {"kappa_mu": 0.0, "s_tilde": 0.0}})
    grid = TimeGrid.uniform(1.0, 50)
    bundle = sample_noise_bundle(grid, 1, 1, 2000, seed=5, replica_id=0)
    system = simulate_interacting(model, bundle, np.zeros((2000, 1)))
    cloud = simulate_limit_cloud(model, grid, 2000, seed=6, record=[50])
    assert stats.ks_2samp(system.states[-1, :, 0], cloud.states[-1, :, 0]).pvalue > 0.001


def _free_kinetic(**extra):
    params = {"A": [[0.0]], "M": [[1.0]], "friction": 0.0, "kappa": 0.0, "s_tilde0": 0.0, "s_tilde1": 0.0}
    return build_scenario({"preset": "kinetic", "params": {**params, **extra}})


def test_hamiltonian_free_transport():
    model = _free_kinetic()
    grid = TimeGrid.uniform(2.0, 64)
    bundle = sample_noise_bundle(grid, 1, 1, 3, seed=0, replica_id=0)
    quiet = type(bundle)(grid, np.zeros_like(bundle.common), np.zeros_like(bundle.private), 0, 0)
    v = np.array([0.5, -1.0, 2.0])
    init = np.stack([np.zeros(3), v], axis=1)
    traj = simulate_hamiltonian(model, quiet, "interacting", init)
    assert np.allclose(traj.states[-1, :, 0], 2.0 * v, atol=1e-12)
    assert np.allclose(traj.states[-1, :, 1], v)


def test_hamiltonian_integrated_brownian_variance():
    model = _free_kinetic(s=0.7)
    T, n, M = 1.0, 400, 20000
    grid = TimeGrid.uniform(T, n)
    common = sample_common(grid, 1, 0, 0)
    cloud = simulate_hamiltonian(model, common, "limit_cloud", grid=grid, M=M, seed=0, record=[n])
    v = cloud.states[-1, :, 0].var(ddof=1)
    exact = 0.49 * T**3 / 3
    assert abs(v - exact) < 4 * exact * np.sqrt(2 / M) + 0.01 * exact


def test_hamiltonian_mode_errors():
    model = _free_kinetic()
    with pytest.raises(ValueError):
        simulate_hamiltonian(model, np.zeros((4, 1)), "other")
    with pytest.raises(TypeError):
        simulate_hamiltonian(build_scenario(OU), np.zeros((4, 1)), "limit_cloud")


def test_initial_laws():
    u = np.array([[0.1], [0.5], [0.9]])
    assert np.all(InitialLaw("point", (2.0,)).quantile(u) == 2.0)
    g = InitialLaw("gaussian", (1.0,), 4.0).quantile(u)[:, 0]
    assert g[1] == pytest.approx(1.0)
    assert g[2] - 1.0 == pytest.approx(2.0 * stats.norm.ppf(0.9))
    tp = InitialLaw("two_point", (0.0,), other=(3.0,), weight=0.3)
    assert list(tp.quantile(u)[:, 0]) == [0.0, 3.0, 3.0]
    assert tp.mean()[0] == pytest.approx(2.1)
    assert InitialLaw.from_dict(tp.to_dict()) == tp
    with pytest.raises(ValueError):
        InitialLaw("cauchy")


def test_empirical_measure():
    mu = EmpiricalMeasure(np.array([[0.0], [2.0]]))
    assert mu.n == 2
    assert np.allclose(mu.weights, 0.5)
    assert np.allclose(mu.mean, [1.0])


def test_export_csv(tmp_path):
    model = build_scenario(OU)
    grid = TimeGrid.uniform(1.0, 4)
    traj = simulate_interacting(model, sample_noise_bundle(grid, 1, 1, 2, 0, 0), np.zeros((2, 1)))
    path = tmp_path / "paths.csv"
    export_trajectories_csv(path, trajectory_rows(traj))
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "replica,particle,knot,t,x0"
    assert len(lines) == 1 + 5 * 2
