"""Power-iteration PCA against a cyclic-Jacobi eigensolver oracle."""

import numpy as np
import pytest

from gama.errors import ConfigError
from gama.pca import centroid_separation, pca_export_csv, pca_top2
from oracles import jacobi_eigh_oracle

RNG = np.random.default_rng(31)


def correlated_cloud(n=120, k=12, rng=RNG):
    base = rng.standard_normal((n, 3))
    mix = rng.standard_normal((3, k))
    return base @ mix + 0.05 * rng.standard_normal((n, k))


def test_top_two_eigenvalues_match_jacobi():
    x = correlated_cloud()
    _, comps, vals = pca_top2(x)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    want_vals, want_vecs = jacobi_eigh_oracle(cov)
    assert vals[0] == pytest.approx(want_vals[0], rel=1e-8)
    assert vals[1] == pytest.approx(want_vals[1], rel=1e-6)
    # eigenvectors match up to sign
    for i in range(2):
        assert abs(float(comps[i] @ want_vecs[:, i])) == pytest.approx(1.0, abs=1e-5)


def test_components_orthonormal_and_ordered():
    _, comps, vals = pca_top2(correlated_cloud(rng=np.random.default_rng(5)))
    assert comps.shape == (2, 12)
    assert float(comps[0] @ comps[0]) == pytest.approx(1.0, abs=1e-10)
    assert float(comps[1] @ comps[1]) == pytest.approx(1.0, abs=1e-10)
    assert float(comps[0] @ comps[1]) == pytest.approx(0.0, abs=1e-8)
    assert vals[0] >= vals[1] >= 0.0


def test_coords_are_centered_projections():
    x = correlated_cloud(rng=np.random.default_rng(9))
    coords, comps, _ = pca_top2(x)
    centered = x - x.mean(axis=0)
    np.testing.assert_allclose(coords, centered @ comps.T, atol=1e-12)
    np.testing.assert_allclose(coords.mean(axis=0), 0.0, atol=1e-9)


def test_projection_variance_matches_eigenvalues():
    coords, _, vals = pca_top2(correlated_cloud(rng=np.random.default_rng(2)))
    got = coords.var(axis=0, ddof=1)
    np.testing.assert_allclose(got, vals, rtol=1e-7)


def test_deterministic_over_repeat_calls():
    x = correlated_cloud(rng=np.random.default_rng(13))
    a, _, _ = pca_top2(x)
    b, _, _ = pca_top2(x)
    np.testing.assert_array_equal(a, b)


def test_rejects_degenerate_inputs():
    with pytest.raises(ConfigError):
        pca_top2(np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        pca_top2(np.ones((10, 4)))  # identical rows, no spread


def test_rank_one_cloud_gets_near_zero_second_eigenvalue():
    rank1 = np.outer(np.arange(8.0), np.ones(4))
    _, _, vals = pca_top2(rank1)
    assert vals[0] > 1.0
    assert vals[1] == pytest.approx(0.0, abs=1e-9)


def test_centroid_separation_plain_distance():
    coords = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [12.0, 0.0]])
    groups = np.array(["a", "a", "b", "b"])
    assert centroid_separation(coords, groups) == pytest.approx(10.0)
    with pytest.raises(ConfigError):
        centroid_separation(coords, np.array(["a"] * 4))


def test_export_csv_shape():
    coords = np.array([[1.25, -0.5], [0.0, 3.0]])
    text = pca_export_csv(coords, ["clean", "perturbed"])
    lines = text.strip().splitlines()
    assert lines[0] == "x,y,group"
    assert lines[1] == "1.250000,-0.500000,clean"
    assert len(lines) == 3
