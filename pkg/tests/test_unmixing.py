import numpy as np
import pytest

from conftest import oracle_nnls_pg, simplex_volume_original
from dvic.errors import DegenerateSimplexError, ParameterError
from dvic.graph import PointCloud
from dvic.unmixing import (
    abundances_and_purity,
    avmax,
    estimate_noise,
    hysime,
    nnls,
)


def _mixture(rng, m, d, n, noise=0.0):
    U = rng.random((m, d))
    A = rng.dirichlet(np.ones(m), size=n)
    X = A @ U
    if noise:
        X = X + noise * rng.standard_normal(X.shape)
    return U, A, X


def test_noise_estimate_noiseless_mixture_is_tiny():
    rng = np.random.default_rng(0)
    _, _, X = _mixture(rng, 3, 10, 500)
    noise = estimate_noise(PointCloud(X))
    assert noise.ridge_used
    assert np.linalg.norm(noise.xi) <= 1e-6 * np.linalg.norm(X)


def test_noise_estimate_recovers_iid_variance():
    rng = np.random.default_rng(1)
    sigma = 0.05
    U = 5.0 * rng.random((3, 60))
    A = rng.dirichlet(np.ones(3), size=10000)
    X = A @ U + sigma * rng.standard_normal((10000, 60))
    noise = estimate_noise(PointCloud(X))
    ratio = np.diag(noise.Rn) / sigma**2
    assert ratio.min() >= 0.8 and ratio.max() <= 1.2


def test_noise_estimate_zero_cloud():
    noise = estimate_noise(PointCloud(np.zeros((10, 4))))
    assert np.abs(noise.xi).max() == 0.0
    assert np.abs(noise.Rn).max() == 0.0


def test_noise_correlation_is_symmetric_psd():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((200, 8))
    noise = estimate_noise(PointCloud(X))
    assert np.array_equal(noise.Rn, noise.Rn.T)
    assert np.linalg.eigvalsh(noise.Rn).min() >= -1e-10


def test_hysime_exact_recovery_high_snr():
    rng = np.random.default_rng(3)
    U = rng.random((3, 20))
    A = rng.dirichlet(np.ones(3), size=2000)
    S = A @ U
    sigma = np.sqrt(np.mean(S**2) / 10**4.0)  # 40 dB
    X = S + sigma * rng.standard_normal(S.shape)
    cloud = PointCloud(X)
    assert hysime(cloud, estimate_noise(cloud)) == 3


@pytest.mark.parametrize("m_true", [2, 4, 6])
def test_hysime_sweep_30db(m_true):
    rng = np.random.default_rng(100 + m_true)
    U = rng.random((m_true, 30))
    A = rng.dirichlet(np.ones(m_true), size=5000)
    S = A @ U
    sigma = np.sqrt(np.mean(S**2) / 10**3.0)  # 30 dB
    X = S + sigma * rng.standard_normal(S.shape)
    cloud = PointCloud(X)
    assert hysime(cloud, estimate_noise(cloud)) == m_true


def test_hysime_rank_one_returns_one():
    rng = np.random.default_rng(4)
    X = np.outer(rng.random(100) + 0.5, rng.random(12))
    cloud = PointCloud(X)
    assert hysime(cloud, estimate_noise(cloud)) == 1


def test_hysime_deterministic():
    rng = np.random.default_rng(5)
    X = rng.random((300, 15))
    cloud = PointCloud(X)
    noise = estimate_noise(cloud)
    assert hysime(cloud, noise) == hysime(cloud, noise)


def test_avmax_recovers_simplex_vertices():
    rng = np.random.default_rng(6)
    V = rng.random((3, 8))
    mix = rng.dirichlet(np.ones(3), size=200)
    X = np.vstack([V, mix @ V])
    res = avmax(PointCloud(X), 3, 10, 0)
    assert sorted(res.endmember_indices) == [0, 1, 2]
    assert np.allclose(np.sort(res.U, axis=0), np.sort(V, axis=0))


def test_avmax_m2_maximal_separation_pair():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(80, 5))
    res = avmax(PointCloud(X), 2, 5, 0)
    # brute-force pair scan on the first principal axis
    Xc = X - X.mean(0)
    u, s, _ = np.linalg.svd(Xc, full_matrices=False)
    y = u[:, 0] * s[0]
    i, j = int(np.argmin(y)), int(np.argmax(y))
    assert set(int(v) for v in res.endmember_indices) == {i, j}


def test_avmax_replicate_selection_rule():
    rng = np.random.default_rng(8)
    V = rng.random((4, 6))
    mix = rng.dirichlet(np.ones(4), size=150)
    X = np.vstack([V, mix @ V])
    res = avmax(PointCloud(X), 4, 5, 3)
    assert res.replicate_volumes.shape == (5,)
    best = res.replicate_volumes.max()
    chosen = simplex_volume_original(X, res.endmember_indices)
    # data is exactly rank-3 so the PCA-space volume equals the original one
    assert abs(chosen - best) <= 1e-8 * max(best, 1e-30)


def test_avmax_volume_dominates_random_subsets():
    rng = np.random.default_rng(9)
    V = rng.random((3, 4))
    mix = rng.dirichlet(np.ones(3) * 0.7, size=60)
    X = np.vstack([V[:1], mix @ V])  # only one vertex present
    cloud = PointCloud(X)
    res = avmax(cloud, 3, 10, 0)
    best = simplex_volume_original(X, res.endmember_indices)
    for _ in range(1000):
        idx = rng.choice(X.shape[0], 3, replace=False)
        assert simplex_volume_original(X, idx) <= best + 1e-12


def test_avmax_degenerate_simplex_error():
    line = np.linspace(0, 1, 50)[:, None] * np.array([[1.0, 2.0, 3.0]])
    with pytest.raises(DegenerateSimplexError):
        avmax(PointCloud(line), 3, 5, 0)


def test_avmax_parameter_errors():
    cloud = PointCloud(np.random.default_rng(0).random((10, 3)))
    with pytest.raises(ParameterError):
        avmax(cloud, 1, 5, 0)
    with pytest.raises(ParameterError):
        avmax(cloud, 3, 0, 0)


def test_nnls_exact_interpolation():
    U = np.array([[1.0, 0.0], [0.0, 1.0]])
    a = nnls(U, np.array([0.5, 0.5]))
    assert np.allclose(a, [0.5, 0.5], atol=1e-12)


def test_nnls_unit_vector():
    U = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(nnls(U, np.array([1.0, 0.0])), [1.0, 0.0], atol=1e-12)


def test_nnls_anticorrelated_clamps_to_zero():
    U = np.array([[1.0, 0.0], [0.0, 1.0]])
    a = nnls(U, np.array([2.0, -1.0]))
    assert np.allclose(a, [2.0, 0.0], atol=1e-12)
    # coarse grid oracle over a >= 0
    grid = np.linspace(0, 3, 61)
    best = min(
        ((2 - g1) ** 2 + (-1 - g2) ** 2, (g1, g2)) for g1 in grid for g2 in grid
    )[1]
    assert np.allclose(best, [2.0, 0.0])


def _kkt_residuals(U, x, a):
    g = 2.0 * U @ (U.T @ a - x)
    viol_support = np.abs(g[a > 0]).max() if np.any(a > 0) else 0.0
    viol_zero = max(0.0, -(g[a == 0].min())) if np.any(a == 0) else 0.0
    return viol_support, viol_zero


def test_nnls_kkt_and_pg_oracle_random_instances():
    rng = np.random.default_rng(10)
    for _ in range(50):
        m = int(rng.integers(1, 7))
        d = int(rng.integers(m, 13))
        U = rng.standard_normal((m, d))
        x = rng.standard_normal(d)
        a = nnls(U, x)
        assert a.min() >= 0
        vs, vz = _kkt_residuals(U, x, a)
        assert vs <= 1e-8 and vz <= 1e-8
        obj = np.sum((x - U.T @ a) ** 2)
        a_pg = oracle_nnls_pg(U, x)
        obj_pg = np.sum((x - U.T @ a_pg) ** 2)
        assert obj <= obj_pg + 1e-8


def test_abundances_pixel_equal_to_endmember_is_pure():
    rng = np.random.default_rng(11)
    U = rng.random((3, 6)) + np.eye(3, 6) * 2
    mix = rng.dirichlet(np.ones(3), size=40)
    X = np.vstack([U[1:2], mix @ U])
    res = abundances_and_purity(PointCloud(X), U)
    assert abs(res.eta[0] - 1.0) <= 1e-9


def test_abundances_barycenter_of_regular_simplex():
    m = 4
    U = np.eye(m)  # regular simplex with linearly independent vertices
    X = np.vstack([np.full((1, m), 1.0 / m), np.eye(m)])
    res = abundances_and_purity(PointCloud(X), U)
    assert abs(res.eta[0] - 1.0 / m) <= 1e-9


def test_abundances_triangle_center_low_purity(triangle0):
    cloud, truth = triangle0
    res = abundances_and_purity(cloud, truth.endmembers)
    assert res.solver == "sum-to-one"
    near = np.linalg.norm(cloud.data, axis=1) <= 0.05
    assert near.any()
    assert res.eta[near].max() <= 0.45
    # barycentric oracle: the ground-truth abundances
    assert np.abs(res.eta - truth.abundances.max(axis=1)).max() <= 1e-9


def test_abundances_zero_row_fallback():
    U = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    X = np.array([[0.0, 0.0, 5.0], [1.0, 0.0, 0.0]])
    res = abundances_and_purity(PointCloud(X), U, sum_to_one="never")
    assert res.uniform_rows[0] and not res.uniform_rows[1]
    assert np.allclose(res.A[0], [0.5, 0.5])


def test_abundances_invariants_random():
    rng = np.random.default_rng(12)
    U = rng.random((4, 9))
    X = rng.random((100, 9))
    res = abundances_and_purity(PointCloud(X), U)
    assert res.A.min() >= 0
    assert np.abs(res.A.sum(axis=1) - 1).max() <= 1e-9
    assert res.eta.min() >= 1 / 4 - 1e-12 and res.eta.max() <= 1 + 1e-12


def test_abundance_rows_match_per_pixel_nnls():
    rng = np.random.default_rng(13)
    U = rng.random((3, 7))
    X = rng.random((25, 7))
    res = abundances_and_purity(PointCloud(X), U, sum_to_one="never")
    for i in range(25):
        a = nnls(U, X[i])
        s = a.sum()
        want = a / s if s > 0 else np.full(3, 1 / 3)
        assert np.abs(res.A[i] - want).max() <= 1e-9
