import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qflow.data import (
    BlockGaussianSpec,
    GmmSpec,
    block_gaussian_covariance,
    gmm_2d_pair,
    make_rng,
    minibatch,
    sample_block_gaussian,
    sample_checkerboard,
    sample_gmm,
    sample_two_moon,
)


def test_rng_streams_are_distinct_and_reproducible():
    a = make_rng(3, 0).random(4)
    assert np.array_equal(a, make_rng(3, 0).random(4))
    assert not np.array_equal(a, make_rng(3, 1).random(4))
    assert not np.array_equal(a, make_rng(4, 0).random(4))


def test_minibatch_without_and_with_replacement():
    data = np.arange(10)[:, None]
    b = minibatch(make_rng(0), data, 10)
    assert sorted(b[:, 0]) == list(range(10))
    assert len(minibatch(make_rng(0), data, 25)) == 25


def test_single_component_mean_clt():
    spec = GmmSpec([[1.0, -2.0]], [0.25], [1.0])
    x = sample_gmm(spec, 100_000, seed=0)
    assert np.all(np.abs(x.mean(0) - [1.0, -2.0]) < 4 * 0.5 / np.sqrt(len(x)))


def test_degenerate_weights_pick_one_component():
    spec = GmmSpec([[0.0], [100.0], [-100.0]], [1.0, 1.0, 1.0], [1.0, 0.0, 0.0])
    assert np.all(np.abs(sample_gmm(spec, 1000, seed=1)) < 10)


def test_gmm_seed_determinism():
    p, _ = gmm_2d_pair()
    assert np.array_equal(sample_gmm(p, 50, 7), sample_gmm(p, 50, 7))
    assert not np.array_equal(sample_gmm(p, 50, 7), sample_gmm(p, 50, 8))


@pytest.mark.parametrize("which", [0, 1])
def test_gmm_moments_match_mixture(which):
    spec = gmm_2d_pair()[which]
    x = sample_gmm(spec, 100_000, seed=2)
    cov = spec.covariance()
    se = np.sqrt(np.diag(cov) / len(x))
    assert np.all(np.abs(x.mean(0) - spec.mean()) < 4 * se)
    assert np.allclose(np.cov(x, rowvar=False), cov, atol=0.05)


def test_gmm_spec_validation():
    with pytest.raises(ValueError):
        GmmSpec([[0.0, 0.0]], [1.0], [0.5])
    with pytest.raises(ValueError):
        GmmSpec([[0.0, 0.0]], [-1.0], [1.0])
    with pytest.raises(ValueError):
        GmmSpec([[0.0, 0.0]], [np.eye(3)], [1.0])
    full = GmmSpec([[0.0, 0.0]], [np.array([[2.0, 0.5], [0.5, 1.0]])], [1.0])
    assert full.dim == 2


def test_two_moon_noiseless_points_on_arcs():
    x = sample_two_moon(2000, 0.0, seed=0)
    upper = np.hypot(x[:, 0] + 0.5, x[:, 1] + 0.25)
    lower = np.hypot(x[:, 0] - 0.5, x[:, 1] - 0.25)
    on_upper = np.isclose(upper, 1.0, atol=1e-12) & (x[:, 1] >= -0.25 - 1e-12)
    on_lower = np.isclose(lower, 1.0, atol=1e-12) & (x[:, 1] <= 0.25 + 1e-12)
    assert np.all(on_upper | on_lower)
    assert 0.4 < on_upper.mean() < 0.6


def test_checkerboard_parity_and_support():
    x = sample_checkerboard(5000, seed=0)
    assert np.all(np.abs(x) <= 2)
    assert np.all((np.floor(x[:, 0]) + np.floor(x[:, 1])) % 2 == 0)
    cells = {tuple(c) for c in np.floor(x).astype(int)}
    assert len(cells) == 8


def test_shape_samplers_seeded():
    assert np.array_equal(sample_two_moon(30, 0.1, 5), sample_two_moon(30, 0.1, 5))
    assert np.array_equal(sample_checkerboard(30, 5), sample_checkerboard(30, 5))
    assert not np.array_equal(sample_checkerboard(30, 5), sample_checkerboard(30, 5, stream=1))


def test_block_gaussian_independent_at_rho_zero():
    n = 100_000
    x = sample_block_gaussian(BlockGaussianSpec(4, 0.0), n, seed=0)
    c = np.corrcoef(x, rowvar=False)
    assert np.all(np.abs(c - np.eye(4)) < 4 / np.sqrt(n))


def test_block_gaussian_within_block_correlation():
    x = sample_block_gaussian(BlockGaussianSpec(16, 0.8), 100_000, seed=1)
    for i in range(0, 16, 2):
        r = np.corrcoef(x[:, i], x[:, i + 1])[0, 1]
        assert 0.78 <= r <= 0.82
    assert np.allclose(np.cov(x, rowvar=False), block_gaussian_covariance(BlockGaussianSpec(16, 0.8)), atol=0.03)


def test_block_gaussian_two_dim_is_bivariate():
    cov = block_gaussian_covariance(BlockGaussianSpec(2, 0.5))
    assert np.array_equal(cov, [[1.0, 0.5], [0.5, 1.0]])


def test_block_gaussian_spec_validation():
    with pytest.raises(ValueError):
        BlockGaussianSpec(3, 0.5)
    with pytest.raises(ValueError):
        BlockGaussianSpec(4, 1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8]), st.integers(1, 50))
def test_samplers_dimension_consistent(seed, d, n):
    assert sample_block_gaussian(BlockGaussianSpec(d, 0.3), n, seed).shape == (n, d)
    assert sample_two_moon(n, 0.05, seed).shape == (n, 2)
    assert sample_checkerboard(n, seed).shape == (n, 2)
