import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cmvlab.paths import (
    StreamKind,
    TimeGrid,
    accumulate_common_integral,
    dump_bundle,
    load_bundle,
    sample_common,
    sample_noise_bundle,
    sample_private,
    stream,
)


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 0.2]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))


def test_uniform_grid():
    g = TimeGrid.uniform(2.0, 4)
    assert np.allclose(g.knots, [0, 0.5, 1, 1.5, 2])
    assert g.n_steps == 4
    assert g.index_of(1.5) == 3
    with pytest.raises(ValueError):
        g.index_of(1.2)


def test_geometric_grid_clusters_before_end():
    g = TimeGrid.geometric(1.0, 10, levels=5)
    assert g.t_end == 1.0
    assert np.all(g.steps > 0)
    assert g.steps[-1] == pytest.approx(0.1 * 0.5**5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.integers(1, 50))
def test_refine_keeps_knots(T, n):
    g = TimeGrid.uniform(T, n)
    fine = g.refine()
    assert fine.n_steps == 2 * n
    assert np.array_equal(fine.knots[::2], g.knots)


def test_same_keys_reproduce_bundle():
    g = TimeGrid.uniform(1.0, 20)
    a = sample_noise_bundle(g, 2, 1, 5, seed=3, replica_id=7)
    b = sample_noise_bundle(g, 2, 1, 5, seed=3, replica_id=7)
    assert np.array_equal(a.common, b.common)
    assert np.array_equal(a.private, b.private)


def test_common_path_does_not_depend_on_particle_count():
    g = TimeGrid.uniform(1.0, 20)
    small = sample_noise_bundle(g, 1, 1, 8, seed=0, replica_id=2)
    large = sample_noise_bundle(g, 1, 1, 16, seed=0, replica_id=2)
    assert np.array_equal(small.common, large.common)
    assert np.array_equal(small.private, large.private[:8])


def test_streams_differ_by_kind_and_index():
    draws = {
        (kind, idx): stream(1, 0, kind, idx).standard_normal(4).tobytes()
        for kind in StreamKind
        for idx in range(3)
    }
    assert len(set(draws.values())) == len(draws)


def test_common_increment_mean_within_clt_bound():
    g = TimeGrid.uniform(1.0, 1)
    draws = np.array([sample_common(g, 2, 0, r)[0] for r in range(100_000)])
    h = g.steps[0]
    assert np.all(np.abs(draws.mean(axis=0)) < 4 * np.sqrt(h / 100_000))
    assert draws.var(axis=0) == pytest.approx([h, h], rel=0.02)


def test_common_and_private_uncorrelated():
    g = TimeGrid.uniform(1.0, 2)
    pairs = np.array([(sample_common(g, 1, 5, r)[1, 0], sample_private(g, 1, 5, r, 0)[0, 0]) for r in range(100_000)])
    assert abs(np.corrcoef(pairs.T)[0, 1]) < 0.02


def test_refined_increments_sum_to_coarse_in_distribution():
    g = TimeGrid.uniform(1.0, 4)
    fine = g.refine()
    coarse = np.array([sample_common(g, 1, 11, r)[1, 0] for r in range(10_000)])
    paired = np.array([sample_common(fine, 1, 12, r)[2:4, 0].sum() for r in range(10_000)])
    assert stats.ks_2samp(coarse, paired).pvalue > 0.001


def test_zero_coefficient_gives_zero_integral():
    g = TimeGrid.uniform(1.0, 10)
    db = sample_common(g, 2, 0, 0)
    eta = accumulate_common_integral(np.zeros((10, 3, 2)), db, g)
    assert np.all(eta.values == 0.0)


def test_identity_coefficient_telescopes_to_path():
    g = TimeGrid.uniform(1.0, 10)
    bundle = sample_noise_bundle(g, 1, 2, 0, seed=4, replica_id=0)
    eta = accumulate_common_integral(np.broadcast_to(np.eye(2), (10, 2, 2)), bundle.common, g)
    assert np.array_equal(eta.values, bundle.common_path())


def test_constant_coefficient_ito_isometry():
    g = TimeGrid.uniform(2.0, 8)
    c = 0.7
    db = np.stack([sample_common(g, 1, 9, r) for r in range(10_000)])
    eta = accumulate_common_integral(np.full((10_000, 8, 1, 1), c), db, g)
    term = eta.terminal[:, 0]
    var = term.var(ddof=1)
    se = var * np.sqrt(2 / (term.size - 1))
    assert abs(var - c * c * 2.0) < 3 * se


def test_misaligned_integral_inputs():
    with pytest.raises(ValueError):
        accumulate_common_integral(np.zeros((5, 1, 1)), np.zeros((4, 1)))


def test_dump_and_load_round_trip(tmp_path):
    g = TimeGrid.geometric(1.0, 6, levels=3)
    bundle = sample_noise_bundle(g, 2, 1, 3, seed=8, replica_id=5)
    path = tmp_path / "bundle.bin"
    dump_bundle(bundle, path)
    again = load_bundle(path)
    assert np.array_equal(again.grid.knots, g.knots)
    assert np.array_equal(again.common, bundle.common)
    assert np.array_equal(again.private, bundle.private)
    assert (again.seed, again.replica_id) == (8, 5)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a bundle")
    with pytest.raises(ValueError):
        load_bundle(path)
