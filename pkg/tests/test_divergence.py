import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from sdentropy.density import DensityEstimate, Grid, log_grid, uniform_grid_1d
from sdentropy.divergence import (
    fit_convergence_rate,
    pinsker_margin,
    relative_entropies,
    relative_entropy,
    total_variation,
    wasserstein1_1d,
)
from sdentropy.errors import ConfigurationError, DomainError


def _est(grid, values):
    return DensityEstimate(grid, np.asarray(values, dtype=float), 1.0, 1)


@pytest.fixture(scope="module")
def gaussian_pair():
    g = uniform_grid_1d(-8.0, 9.0, 2000)
    x = g.axes[0]
    return _est(g, stats.norm.pdf(x)), _est(g, stats.norm.pdf(x, loc=1.0))


def test_identical_densities_give_zero(gaussian_pair):
    p, _ = gaussian_pair
    kl = relative_entropies(p, p)
    assert kl["KL_raw"].value == 0.0 and kl["KL_normalized"].value == 0.0
    assert total_variation(p, p).value == 0.0
    assert abs(pinsker_margin(p, p)) <= 1e-9


def test_gaussian_kl_tv_and_margin(gaussian_pair):
    p, q = gaussian_pair
    kl = relative_entropy(p, q, 1e-10).value
    tv = total_variation(p, q).value
    assert kl == pytest.approx(0.5, abs=1e-3)
    assert tv == pytest.approx(2 * stats.norm.cdf(0.5) - 1, abs=1e-3)
    assert tv == pytest.approx(0.3829, abs=1e-3)
    assert pinsker_margin(p, q) == pytest.approx(1.0 - 0.3829, abs=2e-3)


def test_epsilon_recorded(gaussian_pair):
    p, q = gaussian_pair
    assert relative_entropy(p, q, 1e-10).epsilon == 1e-10
    with pytest.raises(DomainError):
        relative_entropy(p, q, 0.0)


def test_grid_mismatch(gaussian_pair):
    p, _ = gaussian_pair
    other = _est(uniform_grid_1d(-8.0, 9.0, 1999), np.ones(1999))
    with pytest.raises(ConfigurationError):
        relative_entropy(p, other)
    with pytest.raises(ConfigurationError):
        total_variation(p, other)


def test_raw_variant_uses_unnormalized_values():
    g = uniform_grid_1d(0, 1, 11)
    p, q = _est(g, np.full(11, 2.0)), _est(g, np.ones(11))
    assert relative_entropy(p, q, normalized=False).value == pytest.approx(2 * math.log(2))
    assert relative_entropy(p, q).value == pytest.approx(0.0, abs=1e-14)


def test_disjoint_support_tv_is_one():
    g = uniform_grid_1d(0, 1, 101)
    x = g.axes[0]
    assert total_variation(_est(g, (x < 0.4) * 1.0), _est(g, (x > 0.6) * 1.0)).value == pytest.approx(1.0, abs=1e-12)


def test_permutation_invariance(gaussian_pair):
    p, q = gaussian_pair
    perm = np.random.default_rng(0).permutation(p.grid.size)
    g2 = Grid("Perm1D", (p.grid.axes[0][perm],), p.grid.weights[perm])
    p2, q2 = _est(g2, p.values[perm]), _est(g2, q.values[perm])
    assert relative_entropy(p2, q2).value == pytest.approx(relative_entropy(p, q).value, rel=1e-12)
    assert total_variation(p2, q2).value == pytest.approx(total_variation(p, q).value, rel=1e-12)


_GRID = log_grid(1e-3, 10.0, 200)
_BASE = stats.lognorm(s=0.5).pdf(_GRID.axes[0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-0.9, 3.0), min_size=8, max_size=8),
       st.lists(st.floats(-0.9, 3.0), min_size=8, max_size=8))
def test_gibbs_and_pinsker_properties(bumps_p, bumps_q):
    x = np.log(_GRID.axes[0])
    def make(bumps):
        centers = np.linspace(-3, 2, 8)
        factor = 1 + sum(b * np.exp(-((x - c) / 0.4) ** 2) for b, c in zip(bumps, centers))
        return _est(_GRID, _BASE * factor)
    p, q = make(bumps_p), make(bumps_q)
    assert relative_entropy(p, q).value >= -1e-9
    assert pinsker_margin(p, q) >= -1e-6


def _w1_oracle(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == b.size:
        return min(np.mean(np.abs(a - b[list(pi)])) for pi in itertools.permutations(range(b.size)))
    # optimal transport LP between uniform empirical measures
    na, nb = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    rows = [np.kron(np.eye(na)[i], np.ones(nb)) for i in range(na)]
    cols = [np.kron(np.ones(na), np.eye(nb)[j]) for j in range(nb)]
    res = optimize.linprog(cost, A_eq=np.array(rows + cols),
                           b_eq=np.r_[np.full(na, 1 / na), np.full(nb, 1 / nb)], bounds=(0, None), method="highs")
    return res.fun


def test_w1_examples():
    assert wasserstein1_1d([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]).value == 0.0
    assert wasserstein1_1d([0.0], [1.0]).value == 1.0
    assert wasserstein1_1d([0.0, 0.0], [0.0, 1.0]).value == 0.5
    with pytest.raises(DomainError):
        wasserstein1_1d([], [1.0])


def test_w1_exhaustive_matching_oracle():
    rng = np.random.default_rng(10)
    for n in range(1, 7):
        for _ in range(5):
            a = np.round(rng.normal(size=n), 2)
            b = np.round(rng.normal(size=n), 2)
            assert abs(wasserstein1_1d(a, b).value - _w1_oracle(a, b)) <= 1e-12


def test_w1_unequal_sizes_against_transport_lp():
    rng = np.random.default_rng(11)
    for na, nb in [(2, 3), (3, 5), (4, 6), (1, 6)]:
        a, b = rng.normal(size=na), rng.normal(size=nb)
        assert wasserstein1_1d(a, b).value == pytest.approx(_w1_oracle(a, b), abs=1e-9)
        assert wasserstein1_1d(a, b).value == pytest.approx(stats.wasserstein_distance(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(*[st.lists(st.floats(-100, 100), min_size=1, max_size=12) for _ in range(3)])
def test_w1_triangle_inequality(a, b, c):
    ab = wasserstein1_1d(a, b).value
    bc = wasserstein1_1d(b, c).value
    ac = wasserstein1_1d(a, c).value
    assert ac <= ab + bc + 1e-12
    assert ab >= 0


HS = [2.0**-k for k in range(3, 8)]


def test_fit_exact_power_laws():
    slope, _, res = fit_convergence_rate([(h, h * h) for h in HS])
    assert slope == pytest.approx(2.0, abs=1e-12) and res <= 1e-12
    slope, icpt, _ = fit_convergence_rate([(h, 3 * h) for h in HS])
    assert slope == pytest.approx(1.0, abs=1e-12)
    assert icpt == pytest.approx(math.log(3), abs=1e-12)


def test_fit_with_alternating_noise():
    slope, _, _ = fit_convergence_rate([(h, h * h * (1 + 0.05 * (-1) ** i)) for i, h in enumerate(HS)])
    assert 1.9 <= slope <= 2.1


def test_fit_errors():
    with pytest.raises(ConfigurationError):
        fit_convergence_rate([(0.5, 1.0), (0.25, 0.5)])
    with pytest.raises(ConfigurationError):
        fit_convergence_rate([(0.25, 1.0), (0.5, 0.5), (0.125, 0.1)])
    with pytest.raises(DomainError):
        fit_convergence_rate([(0.5, 1.0), (0.25, 0.0), (0.125, 0.1)])
