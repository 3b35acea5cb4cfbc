import numpy as np
import pytest

from dvic.datasets import synth_moons, synth_triangle
from dvic.graph import PointCloud, build_knn_graph, knn_table


@pytest.fixture(scope="session")
def triangle0():
    return synth_triangle(0)


@pytest.fixture(scope="session")
def triangle_table(triangle0):
    cloud, _ = triangle0
    return knn_table(cloud, 1000)


@pytest.fixture(scope="session")
def moons0():
    return synth_moons(1000, 0.1, 0)


@pytest.fixture(scope="session")
def two_blobs60():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(0, 0.3, (30, 2)), rng.normal(5, 0.3, (30, 2))])
    return PointCloud(X)


def random_cloud(seed, n, d):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.normal(size=(n, d)))


def random_graph(seed, n, d, N):
    cloud = random_cloud(seed, n, d)
    return cloud, build_knn_graph(cloud, N)


# ---------------------------------------------------------------------------
# independent oracles (no shared code with the implementation paths they check)

def oracle_knn_graph(data, N):
    """Union KNN adjacency by full stable sort of the distance matrix."""
    n = data.shape[0]
    d2 = ((data[:, None, :] - data[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    W = np.zeros((n, n))
    for i in range(n):
        order = np.argsort(d2[i], kind="stable")[:N]
        W[i, order] = 1.0
    return np.maximum(W, W.T)


def oracle_diffusion_distance_matrix(P, pi, t):
    """Dense P^t weighted-l2 pairwise distances."""
    n = P.shape[0]
    Pt = np.linalg.matrix_power(P, int(t))
    D = np.zeros((n, n))
    for i in range(n):
        diff = Pt[i] - Pt
        D[i] = np.sqrt(((diff**2) / pi).sum(axis=1))
    return D


def oracle_kde(data, n_kde, sigma0):
    """Direct double-loop KDE with plain exponentials."""
    n = data.shape[0]
    d2 = ((data[:, None, :] - data[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    unnorm = np.zeros(n)
    for i in range(n):
        nn = np.argsort(d2[i], kind="stable")[:n_kde]
        unnorm[i] = np.exp(-d2[i, nn] / sigma0**2).sum()
    return unnorm / unnorm.sum(), unnorm


def oracle_dist_to_better(values, emb):
    """Brute-force scan for the distance to the nearest higher-valued point."""
    n = values.size
    out = np.zeros(n)
    top = np.lexsort((np.arange(n), -values))[0]
    for i in range(n):
        d = np.linalg.norm(emb - emb[i], axis=1)
        if i == top:
            out[i] = d.max()
        else:
            cand = (values >= values[i]) & (np.arange(n) != i)
            out[i] = d[cand].min()
    return out


def oracle_propagate(values, modes, emb):
    """Sequential label propagation straight from the algorithm statement."""
    n = values.size
    labels = np.zeros(n, dtype=np.int64)
    labels[np.asarray(modes)] = np.arange(1, len(modes) + 1)
    order = np.lexsort((np.arange(n), -values))
    for x in order:
        if labels[x] > 0:
            continue
        d = np.linalg.norm(emb - emb[x], axis=1)
        cand = (values >= values[x]) & (labels > 0) & (np.arange(n) != x)
        assert cand.any(), "propagation found no labeled candidate"
        dc = np.where(cand, d, np.inf)
        best = dc.min()
        labels[x] = labels[np.flatnonzero(dc == best)[0]]
    return labels


def oracle_nnls_pg(U, x, tol=1e-10, max_iter=200_000):
    """Projected-gradient NNLS run to a tight gradient-mapping tolerance."""
    A = U.T
    H = 2.0 * (A.T @ A)
    L = np.linalg.eigvalsh(H).max()
    if L <= 0:
        return np.zeros(U.shape[0])
    g0 = -2.0 * (A.T @ x)
    a = np.zeros(U.shape[0])
    for _ in range(max_iter):
        grad = H @ a + g0
        a_new = np.maximum(a - grad / L, 0.0)
        if np.linalg.norm(a_new - a) <= tol * (1.0 + np.linalg.norm(a)):
            a = a_new
            break
        a = a_new
    return a


def simplex_volume_original(data, idx):
    """Gram-determinant simplex volume in the original coordinates."""
    from math import factorial

    V = data[np.asarray(idx)]
    M = V[1:] - V[0]
    G = M @ M.T
    det = np.linalg.det(G)
    return np.sqrt(max(det, 0.0)) / factorial(len(idx) - 1)
