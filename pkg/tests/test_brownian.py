import numpy as np
import pytest
from scipy import stats

from sdentropy.brownian import coarse_increments, coarsen, gaussian_pair_stream, make_lattice
from sdentropy.errors import ConfigurationError
from sdentropy.integrators import SchemeKind, simulate_coupled
from sdentropy.models import GbmParams, gbm_model, tamed_gl_model, GlParams


def test_lattice_is_deterministic():
    a = make_lattice(7, 1, 1.0, 0.5, 1)
    b = make_lattice(7, 1, 1.0, 0.5, 1)
    assert a.increments.shape == (1, 2, 1)
    assert np.array_equal(a.increments, b.increments)


def test_path_stream_independent_of_path_count():
    one = make_lattice(7, 1, 1.0, 0.5, 1).increments
    two = make_lattice(7, 2, 1.0, 0.5, 1).increments
    assert np.array_equal(one[0], two[0])


def test_path_regenerates_in_isolation():
    lat = make_lattice(11, 50, 1.0, 2**-6, 2)
    full = lat.block(0, 50)
    assert np.array_equal(lat.path_increments(37), full[37])
    assert np.array_equal(lat.block(30, 40), full[30:40])


def test_materialized_equals_regenerated():
    lat = make_lattice(5, 20, 1.0, 2**-5, 2)
    lazy = lat.block(0, 20)
    assert np.array_equal(make_lattice(5, 20, 1.0, 2**-5, 2, materialize=True).increments, lazy)


def test_workers_do_not_change_increments():
    lat = make_lattice(9, 64, 1.0, 2**-5, 1)
    assert np.array_equal(lat.block(0, 64, workers=1), lat.block(0, 64, workers=4))


@pytest.mark.parametrize("t_end,h", [(1.0, 0.3), (1.0, 0.0), (-1.0, 0.5)])
def test_bad_step_configuration(t_end, h):
    with pytest.raises(ConfigurationError):
        make_lattice(1, 1, t_end, h, 1)


def test_zero_paths_rejected():
    with pytest.raises(ConfigurationError):
        make_lattice(1, 0, 1.0, 0.5, 1)


def test_increment_variance_chi_square_band():
    # 1e5 paths x 4096 steps, accumulated block by block
    lat = make_lattice(3, 100_000, 1.0, 2**-12, 1)
    n, s2 = 0, 0.0
    for start in range(0, lat.n_paths, 5000):
        blk = lat.block(start, start + 5000)
        n += blk.size
        s2 += float(np.sum(blk * blk))
    var = s2 / n
    h = 2**-12
    se = h * np.sqrt(2.0 / n)
    assert abs(var - h) <= 3 * se


def test_increment_variance_ratio_over_a_million():
    lat = make_lattice(17, 1000, 1.0, 2**-10, 1)
    inc = lat.increments
    assert inc.size >= 10**6
    assert 0.98 <= inc.var() / lat.h_fine <= 1.02


def test_coarsen_identity_factor():
    lat = make_lattice(1, 3, 1.0, 0.25, 2)
    views = list(coarsen(lat, 1))
    assert len(views) == 3 * 4
    for v in views:
        assert v.h_eff == 0.25
        assert np.array_equal(v.dW, lat.increments[v.path_index, v.step])


def test_coarsen_sums_hand_example():
    fine = np.array([[0.1], [-0.2], [0.3], [0.4]])
    coarse = coarse_increments(fine, 2)
    assert np.allclose(coarse[:, 0], [-0.1, 0.7], atol=1e-15)


def test_coarsen_rejects_non_divisor():
    lat = make_lattice(1, 1, 1.0, 0.25, 1)
    with pytest.raises(ConfigurationError):
        list(coarsen(lat, 3))


def test_coupling_invariance_of_endpoint():
    lat = make_lattice(21, 40, 1.0, 2**-12, 2)
    fine = lat.block(0, 40)
    w = fine.sum(axis=1)
    for f in (1, 2, 8, 64, 4096):
        wc = coarse_increments(fine, f).sum(axis=1)
        assert np.all(np.abs(wc - w) <= 1e-12 * np.maximum(1.0, np.abs(w)))


def test_stream_repeatable_and_separated():
    a = gaussian_pair_stream(42, 0).standard_normal(100)
    b = gaussian_pair_stream(42, 0).standard_normal(100)
    c = gaussian_pair_stream(42, 1).standard_normal(100)
    assert np.array_equal(a, b)
    assert np.any(a != c)


def test_stream_is_standard_normal():
    z = gaussian_pair_stream(2024, 5).standard_normal(100_000)
    assert stats.kstest(z, "norm").pvalue > 0.01
    assert abs(z.mean()) <= 3 / np.sqrt(z.size)


def test_ensemble_bit_identical_across_workers():
    model = tamed_gl_model(GlParams())
    lat = make_lattice(13, 300, 1.0, 2**-8, 2)
    runs = [(SchemeKind.EULER_MARUYAMA, 8), (SchemeKind.MILSTEIN, 1)]
    one = simulate_coupled(model, runs, lat, [1.0, 1.0], block_size=64, workers=1)
    many = simulate_coupled(model, runs, lat, [1.0, 1.0], block_size=64, workers=3)
    for a, b in zip(one, many):
        assert np.array_equal(a.terminals, b.terminals)


def test_block_size_does_not_change_results():
    model = gbm_model(GbmParams())
    lat = make_lattice(13, 100, 1.0, 2**-6, 1)
    a = simulate_coupled(model, [(SchemeKind.EULER_MARUYAMA, 2)], lat, [1.0], block_size=7)[0]
    b = simulate_coupled(model, [(SchemeKind.EULER_MARUYAMA, 2)], lat, [1.0], block_size=100)[0]
    assert np.array_equal(a.terminals, b.terminals)
