import numpy as np
import pytest

from conftest import oracle_dist_to_better, oracle_propagate, random_cloud
from dvic.clustering import (
    Clustering,
    ModeScore,
    dist_to_better,
    dvic,
    kmeans,
    lund,
    propagate_labels,
    select_modes,
    spectral_clustering,
    zeta,
)
from dvic.errors import ParameterError
from dvic.graph import (
    PointCloud,
    build_knn_graph,
    diffusion_embedding,
    kde,
    spectral_decompose,
)
from dvic.unmixing import abundances_and_purity


def test_zeta_arithmetic():
    p = np.array([1.0, 0.5])
    eta = np.array([1.0, 1.0])
    z = zeta(p, eta)
    assert z[0] == 1.0
    assert abs(z[1] - 2 / 3) <= 1e-15


def test_zeta_bounds_and_max_location():
    rng = np.random.default_rng(0)
    p = rng.random(50) + 0.01
    eta = rng.random(50) * 0.7 + 0.3
    z = zeta(p, eta)
    assert np.all(z > 0) and np.all(z <= 1.0)
    both = (p == p.max()) & (eta == eta.max())
    if both.any():
        assert np.allclose(z[both], 1.0)


def test_zeta_requires_positive_inputs():
    with pytest.raises(ParameterError):
        zeta(np.array([0.0, 1.0]), np.array([1.0, 1.0]))


def test_zeta_triangle_argmax_outside_center(triangle0, triangle_table):
    cloud, truth = triangle0
    d = kde(cloud, 100, 0.1, table=triangle_table)
    eta = truth.abundances.max(axis=1)  # barycentric purity oracle
    z = zeta(d.p, eta)
    argmax_pt = cloud.data[int(np.argmax(z))]
    assert np.linalg.norm(argmax_pt) > 0.1


def _graph_dec(cloud, N, ell):
    g = build_knn_graph(cloud, N)
    return g, spectral_decompose(g, ell)


def test_dist_to_better_two_points():
    cloud = PointCloud(np.array([[0.0], [2.0]]))
    _, dec = _graph_dec(cloud, 1, 2)
    rho = dist_to_better(np.array([3.0, 1.0]), dec, 1.0)
    emb = diffusion_embedding(dec, 1.0)
    d01 = np.linalg.norm(emb[0] - emb[1])
    assert np.allclose(rho, [d01, d01])


def test_dist_to_better_path_graph_oracle():
    cloud = PointCloud(np.arange(10.0)[:, None])
    _, dec = _graph_dec(cloud, 1, 10)
    values = np.arange(10.0)[::-1].copy()
    for t in (0.0, 1.0, 4.0):
        rho = dist_to_better(values, dec, t)
        want = oracle_dist_to_better(values, diffusion_embedding(dec, t))
        assert np.abs(rho - want).max() <= 1e-12


def test_dist_to_better_random_oracle():
    rng = np.random.default_rng(1)
    cloud = random_cloud(2, 80, 3)
    _, dec = _graph_dec(cloud, 6, 12)
    values = rng.random(80)
    for t in (0.0, 2.0, 7.5):
        rho = dist_to_better(values, dec, t)
        want = oracle_dist_to_better(values, diffusion_embedding(dec, t))
        assert np.abs(rho - want).max() <= 1e-10


def test_dist_to_better_all_equal_values():
    cloud = random_cloud(3, 40, 2)
    _, dec = _graph_dec(cloud, 5, 8)
    values = np.ones(40)
    rho = dist_to_better(values, dec, 2.0)
    emb = diffusion_embedding(dec, 2.0)
    d0 = np.linalg.norm(emb - emb[0], axis=1)
    assert abs(rho[0] - d0.max()) <= 1e-12
    for i in (7, 23):
        d = np.linalg.norm(emb - emb[i], axis=1)
        d[i] = np.inf
        assert abs(rho[i] - d.min()) <= 1e-12


def test_select_modes_basic_and_ties():
    modes = select_modes(np.array([0.9, 0.1, 0.8]), 2)
    assert list(modes) == [0, 2]
    # ties break to the lowest index
    modes = select_modes(np.array([0.5, 0.9, 0.9, 0.2]), 2)
    assert list(modes) == [1, 2]
    with pytest.raises(ParameterError):
        select_modes(np.array([1.0, 2.0]), 0)


def test_select_modes_mode_score_type():
    v = np.array([1.0, 2.0, 3.0])
    d = np.array([3.0, 1.0, 1.0])
    score = ModeScore(value_fn=v, dist_fn=d, product=v * d)
    assert list(select_modes(score, 1)) == [0]


def test_mode_score_validates():
    with pytest.raises(ParameterError):
        ModeScore(np.array([1.0]), np.array([np.inf]), np.array([np.inf]))


def test_propagate_all_points_are_modes():
    cloud = random_cloud(4, 12, 2)
    _, dec = _graph_dec(cloud, 3, 6)
    values = np.random.default_rng(0).random(12)
    modes = np.arange(12)
    res = propagate_labels(values, modes, dec, 1.0)
    assert np.array_equal(res.labels, np.arange(1, 13))


def test_propagate_two_blobs_oracle(two_blobs60):
    _, dec = _graph_dec(two_blobs60, 6, 10)
    rng = np.random.default_rng(5)
    values = rng.random(60)
    top2 = np.argsort(-values)[:2]
    modes = np.array(sorted(int(v) for v in top2))
    for t in (2.0, 10.0):
        res = propagate_labels(values, modes, dec, t)
        want = oracle_propagate(values, modes, diffusion_embedding(dec, t))
        assert np.array_equal(res.labels, want)


def test_propagate_two_blobs_clean_split(two_blobs60):
    res = lund(two_blobs60, 6, 0.5, 10.0, 2)
    assert len(set(res.labels[:30])) == 1
    assert len(set(res.labels[30:])) == 1
    assert res.labels[0] != res.labels[59]


def test_propagate_equal_values_with_later_mode():
    # all values equal: the first point is not a mode, so its parent must be
    # an equal-valued mode appearing later in the scan order
    cloud = random_cloud(6, 20, 2)
    _, dec = _graph_dec(cloud, 4, 6)
    values = np.ones(20)
    modes = np.array([5, 13])
    res = propagate_labels(values, modes, dec, 3.0)
    want = oracle_propagate(values, modes, diffusion_embedding(dec, 3.0))
    assert np.array_equal(res.labels, want)


def test_lund_single_blob_k1():
    cloud = random_cloud(7, 50, 2)
    res = lund(cloud, 8, 1.0, 2.0, 1)
    assert np.all(res.labels == 1)


def test_lund_deterministic_and_scores_consistent(two_blobs60):
    r1 = lund(two_blobs60, 6, 0.5, 10.0, 2)
    r2 = lund(two_blobs60, 6, 0.5, 10.0, 2)
    assert np.array_equal(r1.labels, r2.labels)
    assert np.array_equal(r1.scores["product"], r2.scores["product"])
    assert np.allclose(
        r1.scores["product"], r1.scores["p"] * r1.scores["rho_t"]
    )


def test_lund_mode_product_dominance(two_blobs60):
    res = lund(two_blobs60, 6, 0.5, 10.0, 2)
    product = res.scores["product"]
    non_modes = np.setdiff1d(np.arange(60), res.modes)
    assert product[res.modes].min() >= product[non_modes].max()


def test_lund_ordering_invariance_cube(two_blobs60):
    # rho_t and the propagation depend on the density only through its order;
    # on a well-separated fixture the mode products are robust enough that the
    # full pipeline is invariant under v -> v^3 as well
    base = lund(two_blobs60, 6, 0.5, 10.0, 2)
    d = kde(two_blobs60, 6, 0.5)
    g = build_knn_graph(two_blobs60, 6)
    dec = spectral_decompose(g, 10)
    cubed = d.p**3
    rho_base = dist_to_better(d.p, dec, 10.0)
    rho_cubed = dist_to_better(cubed, dec, 10.0)
    assert np.array_equal(rho_base, rho_cubed)
    res_cubed = propagate_labels(cubed, base.modes, dec, 10.0)
    assert np.array_equal(base.labels, res_cubed.labels)


def test_dvic_pure_data_matches_lund_ordering():
    # three tight blobs of near-identical spectra, none near the zero
    # spectrum: every pixel is (nearly) pure, so zeta is a monotone transform
    # of the density and D-VIC's modes/labels agree with LUND's here
    rng = np.random.default_rng(8)
    V = np.array([[1.0, 1.0], [5.0, 1.0], [1.0, 5.0]])
    X = np.vstack([v + 0.05 * rng.standard_normal((25, 2)) for v in V])
    cloud = PointCloud(X)
    res_l = lund(cloud, 6, 0.3, 8.0, 3)
    res_d = dvic(cloud, 6, 0.3, 8.0, 3, replicates=20, seed=0, m=3)
    eta = res_d.scores["eta"]
    assert eta.min() >= 0.95  # essentially pure pixels
    from dvic.evaluation import align_and_score

    assert align_and_score(res_d.labels, res_l.labels).oa == 1.0


def test_dvic_records_diagnostics(triangle0):
    cloud, _ = triangle0
    sub = PointCloud(cloud.data[::10].copy(), labels=cloud.labels[::10].copy())
    res = dvic(sub, 20, 0.1, 8.0, 3, replicates=10, seed=1, m=3)
    assert res.params["m"] == 3
    assert set(res.scores) >= {"p", "eta", "zeta", "d_t", "product"}
    assert np.allclose(res.scores["product"], res.scores["zeta"] * res.scores["d_t"])


def test_dvic_determinism_same_seed(triangle0):
    cloud, _ = triangle0
    sub = PointCloud(cloud.data[::25].copy())
    a = dvic(sub, 10, 0.1, 4.0, 3, replicates=5, seed=9, m=3)
    b = dvic(sub, 10, 0.1, 4.0, 3, replicates=5, seed=9, m=3)
    assert np.array_equal(a.labels, b.labels)
    for k in a.scores:
        assert np.array_equal(a.scores[k], b.scores[k])


def test_kmeans_two_separated_blobs(two_blobs60):
    res = kmeans(two_blobs60, 2, replicates=5, seed=0)
    from dvic.evaluation import align_and_score

    truth = np.r_[np.ones(30, dtype=int), np.full(30, 2, dtype=int)]
    assert align_and_score(res.labels, truth).oa == 1.0


def test_kmeans_k1_single_label(two_blobs60):
    res = kmeans(two_blobs60, 1, replicates=2, seed=0)
    assert np.all(res.labels == 1)


def test_kmeans_deterministic(two_blobs60):
    a = kmeans(two_blobs60, 3, replicates=4, seed=5)
    b = kmeans(two_blobs60, 3, replicates=4, seed=5)
    assert np.array_equal(a.labels, b.labels)


def test_spectral_clustering_two_blobs(two_blobs60):
    g = build_knn_graph(two_blobs60, 10)
    res = spectral_clustering(g, 2, replicates=5, seed=0)
    truth = np.r_[np.ones(30, dtype=int), np.full(30, 2, dtype=int)]
    from dvic.evaluation import align_and_score

    assert align_and_score(res.labels, truth).oa == 1.0


def test_clustering_invariants_enforced():
    with pytest.raises(ParameterError):
        Clustering(
            labels=np.array([1, 2, 3]),
            modes=np.array([0, 1]),
            K=2,
            scores={},
            params={},
        )
    with pytest.raises(ParameterError):
        Clustering(
            labels=np.array([1, 1, 2]),
            modes=np.array([0, 1]),  # labels[modes[1]] != 2
            K=2,
            scores={},
            params={},
        )


def test_clustering_mode_labels_consistent(two_blobs60):
    res = lund(two_blobs60, 6, 0.5, 10.0, 2)
    assert np.array_equal(res.labels[res.modes], [1, 2])
