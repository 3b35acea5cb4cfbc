"""Mode-based clustering in diffusion space: LUND, D-VIC, and baselines.

Both mode-based clusterers score every point by the product of a value
function (density for LUND, the density/purity harmonic mean zeta for D-VIC)
and the diffusion distance to the nearest point of higher value.  The K
top-scoring points become cluster modes; remaining points inherit, in order
of decreasing value, the label of their diffusion-nearest already-labeled
point of higher-or-equal value.  K-Means and spectral clustering are included
as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import _kernels
from .errors import ParameterError
from .graph import (
    DensityField,
    MarkovGraph,
    NeighborTable,
    PointCloud,
    SpectralDecomposition,
    build_knn_graph,
    kde,
    spectral_decompose,
)
from .unmixing import UnmixingResult, abundances_and_purity, avmax, estimate_noise, hysime

__all__ = [
    "ModeScore",
    "Clustering",
    "zeta",
    "dist_to_better",
    "select_modes",
    "propagate_labels",
    "lund",
    "dvic",
    "kmeans",
    "spectral_clustering",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ModeScore:
    """Value function, distance-to-better, and their product for every point."""

    value_fn: np.ndarray
    dist_fn: np.ndarray
    product: np.ndarray

    def __post_init__(self):
        for arr in (self.value_fn, self.dist_fn, self.product):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ParameterError("mode scores must be finite and nonnegative")


@dataclass(frozen=True)
class Clustering:
    """Label vector in {1..K} with the modes and diagnostics that produced it."""

    labels: np.ndarray   # (n,) int in 1..K
    modes: np.ndarray    # (K,) point indices, labels[modes[k]] == k + 1
    K: int
    scores: dict
    params: dict

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        modes = np.asarray(self.modes, dtype=np.int64).copy()
        if labels.min() < 1 or labels.max() > self.K:
            raise ParameterError("labels must lie in {1..K}")
        if modes.size != self.K or np.unique(modes).size != self.K:
            raise ParameterError("modes must be K distinct indices")
        if not np.array_equal(labels[modes], np.arange(1, self.K + 1)):
            raise ParameterError("labels[modes[k]] must equal k+1")
        for key, arr in self.scores.items():
            if isinstance(arr, np.ndarray) and not np.all(np.isfinite(arr)):
                raise ParameterError(f"score {key!r} contains non-finite values")
        labels.flags.writeable = False
        modes.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "modes", modes)


def zeta(p, eta: np.ndarray) -> np.ndarray:
    """Harmonic mean of max-normalized density and purity.

    zeta = 2 p~ eta~ / (p~ + eta~) with p~ = p / max(p) and
    eta~ = eta / max(eta); lies in (0, 1] and equals 1 exactly where both
    normalized scores do.
    """
    pv = p.p if isinstance(p, DensityField) else np.asarray(p, dtype=np.float64)
    ev = np.asarray(eta, dtype=np.float64)
    if pv.min() <= 0 or ev.min() <= 0:
        raise ParameterError("zeta needs strictly positive density and purity")
    pbar = pv / pv.max()
    ebar = ev / ev.max()
    return 2.0 * pbar * ebar / (pbar + ebar)


def _scan_value_order(values: np.ndarray, dec: SpectralDecomposition, ts, modes=None):
    """Nearest higher-valued candidate for every point, at each diffusion time.

    Returns (rho, parent, parent_d2), each (T, n) in original index order:

    * rho: for the top-ranked point (global value maximizer, ties to the
      lowest index) the maximum diffusion distance to any point; otherwise the
      minimum over {y != x : values[y] >= values[x]}.
    * parent: original index of the candidate used by label propagation, i.e.
      the argmin over points earlier in the (value desc, index asc) order,
      corrected for equal-valued modes later in the order when ``modes`` is
      given.  -1 for the top-ranked point when no equal-valued mode exists.
    Ties in distance break toward the smaller original index.
    """
    n = values.size
    ts_arr = np.asarray(ts, dtype=np.float64)
    order = np.lexsort((np.arange(n), -values))
    orig = order.astype(np.int64)
    emb = np.ascontiguousarray(dec.eigenvectors[order])
    lam2 = dec.eigenvalues**2
    weights = lam2[None, :] ** ts_arr[:, None]
    n_active = np.maximum((weights > 0).sum(axis=1), 1).astype(np.int64)
    d2, jpos = _kernels.prefix_min_scan(emb, weights, n_active, orig)

    T = ts_arr.size
    vs = values[order]
    # runs of exactly equal values: candidates for rho include every other
    # member of the run; propagation additionally sees later modes in the run
    run_starts = np.flatnonzero(np.r_[True, vs[1:] != vs[:-1]])
    run_ends = np.r_[run_starts[1:], n]
    mode_set = set(int(v) for v in modes) if modes is not None else set()

    rho_d2 = d2.copy()
    parent_pos = jpos.copy()
    parent_d2 = d2.copy()
    for a, b in zip(run_starts, run_ends):
        if b - a < 2:
            continue
        sub = emb[a:b]
        diffs = sub[:, None, :] - sub[None, :, :]
        sq = diffs**2
        for t in range(T):
            dd = sq[:, :, : n_active[t]] @ weights[t, : n_active[t]]
            np.fill_diagonal(dd, np.inf)
            rho_d2[t, a:b] = np.minimum(rho_d2[t, a:b], dd.min(axis=1))
            for q in range(a, b):
                for r in range(q + 1, b):
                    if int(orig[r]) not in mode_set:
                        continue
                    dist = dd[q - a, r - a]
                    cur = parent_d2[t, q]
                    cur_pos = parent_pos[t, q]
                    if dist < cur or (
                        dist == cur and (cur_pos < 0 or orig[r] < orig[cur_pos])
                    ):
                        parent_d2[t, q] = dist
                        parent_pos[t, q] = r

    # top-ranked point: distance function is the max over the whole cloud
    i0 = int(orig[0])
    diff0 = dec.eigenvectors - dec.eigenvectors[i0]
    m0 = (diff0**2) @ weights.T  # (n, T)
    rho_d2[:, 0] = m0.max(axis=0)

    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    rho = np.sqrt(rho_d2)[:, inv]
    parent = np.where(parent_pos >= 0, orig[np.maximum(parent_pos, 0)], -1)[:, inv]
    pd2 = parent_d2[:, inv]
    return rho, parent, pd2


def dist_to_better(values: np.ndarray, dec: SpectralDecomposition, t: float) -> np.ndarray:
    """Diffusion distance from each point to its nearest higher-valued point.

    The unique global maximizer of ``values`` (ties to the lowest index) gets
    the maximum distance to any point instead.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ParameterError("values must be finite")
    rho, _, _ = _scan_value_order(values, dec, [float(t)])
    return rho[0]


def select_modes(score, K: int) -> np.ndarray:
    """Indices of the K largest products, ties to the lowest index, sorted by
    decreasing product."""
    product = score.product if isinstance(score, ModeScore) else np.asarray(score)
    n = product.size
    if K <= 0 or K > n:
        raise ParameterError(f"need 1 <= K <= n, got K={K}, n={n}")
    return np.lexsort((np.arange(n), -product))[:K].astype(np.int64)


def _labels_from_parents(values: np.ndarray, modes: np.ndarray, parent: np.ndarray) -> np.ndarray:
    n = values.size
    labels = np.zeros(n, dtype=np.int64)
    labels[modes] = np.arange(1, modes.size + 1)
    order = np.lexsort((np.arange(n), -values))
    for x in order:
        if labels[x] > 0:
            continue
        par = parent[x]
        if par < 0 or labels[par] == 0:
            raise RuntimeError(
                "internal: unlabeled point has no labeled higher-valued candidate"
            )
        labels[x] = labels[par]
    return labels


def propagate_labels(
    values: np.ndarray, modes: np.ndarray, dec: SpectralDecomposition, t: float
) -> Clustering:
    """Propagate mode labels in order of non-increasing value.

    Each unlabeled point takes the label of its diffusion-nearest
    already-labeled point of higher-or-equal value; the visit order guarantees
    such a point exists.
    """
    values = np.asarray(values, dtype=np.float64)
    modes = np.asarray(modes, dtype=np.int64)
    if np.unique(modes).size != modes.size:
        raise ParameterError("modes must be distinct")
    _, parent, _ = _scan_value_order(values, dec, [float(t)], modes=modes)
    labels = _labels_from_parents(values, modes, parent[0])
    return Clustering(
        labels=labels,
        modes=modes,
        K=modes.size,
        scores={"value_fn": values.copy()},
        params={"t": float(t)},
    )


def _mode_cluster_multi(values: np.ndarray, dec: SpectralDecomposition, ts, K: int):
    """Shared LUND/D-VIC core: modes and labels for every diffusion time.

    One value-ordered scan serves all times; per time, modes are the K
    largest value*distance products and labels follow from the scan's parent
    pointers (re-corrected for equal-valued modes).
    """
    rho, parent, _ = _scan_value_order(values, dec, ts)
    out = []
    need_fix = _has_value_ties(values)
    for k_t, t in enumerate(ts):
        dist_fn = rho[k_t]
        product = values * dist_fn
        modes = select_modes(product, K)
        par = parent[k_t]
        if need_fix:
            _, par_fixed, _ = _scan_value_order(values, dec, [t], modes=modes)
            par = par_fixed[0]
        labels = _labels_from_parents(values, modes, par)
        out.append((labels, modes, dist_fn, product))
    return out


def _has_value_ties(values: np.ndarray) -> bool:
    vs = np.sort(values)
    return bool(np.any(vs[1:] == vs[:-1]))


def lund(
    cloud: PointCloud,
    N: int,
    sigma0: float,
    t: float,
    K: int,
    ell: int = 10,
    n_kde: int | None = None,
    table: NeighborTable | None = None,
    graph: MarkovGraph | None = None,
    dec: SpectralDecomposition | None = None,
    density: DensityField | None = None,
) -> Clustering:
    """Learning by Unsupervised Nonlinear Diffusion.

    Modes maximize p(x) * rho_t(x), the KDE density times the diffusion
    distance to the nearest higher-density point; labels propagate in order
    of non-increasing density.  Deterministic given its inputs.  Precomputed
    pieces (neighbor table, graph, decomposition, density) may be passed to
    share work across parameter sweeps.
    """
    if graph is None:
        graph = build_knn_graph(cloud, N, table)
    if dec is None:
        dec = spectral_decompose(graph, min(ell, cloud.n))
    if density is None:
        density = kde(cloud, n_kde if n_kde is not None else N, sigma0, table)
    labels, modes, dist_fn, product = _mode_cluster_multi(density.p, dec, [float(t)], K)[0]
    return Clustering(
        labels=labels,
        modes=modes,
        K=K,
        scores={"p": density.p.copy(), "rho_t": dist_fn, "product": product},
        params={
            "algorithm": "lund",
            "N": int(N),
            "sigma0": float(sigma0),
            "t": float(t),
            "K": int(K),
            "ell": int(dec.ell),
            "n_kde": int(density.n_kde),
        },
    )


def dvic(
    cloud: PointCloud,
    N: int,
    sigma0: float,
    t: float,
    K: int,
    ell: int = 10,
    replicates: int = 100,
    seed: int = 0,
    m: int | None = None,
    n_kde: int | None = None,
    table: NeighborTable | None = None,
    graph: MarkovGraph | None = None,
    dec: SpectralDecomposition | None = None,
    density: DensityField | None = None,
    unmixing: UnmixingResult | None = None,
) -> Clustering:
    """Diffusion and Volume maximization-based Image Clustering.

    Runs the unmixing stack (noise estimate, HySime endmember count, AVMAX
    endmembers, NNLS abundances), scores each pixel by zeta (harmonic mean of
    normalized density and purity), and clusters like LUND but with zeta in
    place of the density.  ``m`` overrides the HySime estimate when the
    endmember count is known a priori.
    """
    if unmixing is None or unmixing.eta is None:
        noise = estimate_noise(cloud)
        m_used = hysime(cloud, noise) if m is None else int(m)
        um = avmax(cloud, m_used, replicates, seed)
        unmixing = abundances_and_purity(cloud, um.U, base=um)
    if graph is None:
        graph = build_knn_graph(cloud, N, table)
    if dec is None:
        dec = spectral_decompose(graph, min(ell, cloud.n))
    if density is None:
        density = kde(cloud, n_kde if n_kde is not None else N, sigma0, table)
    z = zeta(density.p, unmixing.eta)
    labels, modes, dist_fn, product = _mode_cluster_multi(z, dec, [float(t)], K)[0]
    return Clustering(
        labels=labels,
        modes=modes,
        K=K,
        scores={
            "p": density.p.copy(),
            "eta": unmixing.eta.copy(),
            "zeta": z,
            "d_t": dist_fn,
            "product": product,
        },
        params={
            "algorithm": "dvic",
            "N": int(N),
            "sigma0": float(sigma0),
            "t": float(t),
            "K": int(K),
            "ell": int(dec.ell),
            "n_kde": int(density.n_kde),
            "m": int(unmixing.m),
            "replicates": int(replicates),
            "seed": int(seed),
        },
    )


def _kmeans_once(X: np.ndarray, K: int, rng: np.random.Generator):
    """k-means++ seeding followed by Lloyd iteration with empty-cluster repair."""
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2min = cdist(X, centers[:1], "sqeuclidean").ravel()
    for k in range(1, K):
        total = d2min.sum()
        if total <= 0:
            centers[k] = X[int(rng.integers(n))]
        else:
            centers[k] = X[int(rng.choice(n, p=d2min / total))]
        d2min = np.minimum(d2min, cdist(X, centers[k : k + 1], "sqeuclidean").ravel())
    lab = np.zeros(n, dtype=np.int64)
    for _ in range(300):
        d2 = cdist(X, centers, "sqeuclidean")
        lab = np.argmin(d2, axis=1)
        for k in range(K):
            if not np.any(lab == k):
                assigned = d2[np.arange(n), lab]
                far = int(np.argmax(assigned))
                centers[k] = X[far]
                d2[:, k] = cdist(X, centers[k : k + 1], "sqeuclidean").ravel()
                lab = np.argmin(d2, axis=1)
        new_centers = np.stack([X[lab == k].mean(axis=0) for k in range(K)])
        shift = np.linalg.norm(new_centers - centers) / max(
            np.linalg.norm(centers), np.finfo(float).tiny
        )
        centers = new_centers
        if shift <= 1e-8:
            break
    d2 = cdist(X, centers, "sqeuclidean")
    lab = np.argmin(d2, axis=1)
    objective = float(d2[np.arange(n), lab].sum())
    return lab, centers, d2, objective


def _kmeans_matrix(X: np.ndarray, K: int, replicates: int, seed: int):
    if K < 1 or K > X.shape[0]:
        raise ParameterError(f"need 1 <= K <= n, got K={K}")
    if replicates < 1:
        raise ParameterError("need replicates >= 1")
    best = None
    for r in range(replicates):
        rng = np.random.Generator(np.random.Philox((seed ^ r) & _MASK64))
        lab, centers, d2, obj = _kmeans_once(X, K, rng)
        if best is None or obj < best[3]:
            best = (lab, centers, d2, obj)
    lab, centers, d2, obj = best
    modes = np.empty(K, dtype=np.int64)
    for k in range(K):
        members = np.flatnonzero(lab == k)
        modes[k] = members[np.argmin(d2[members, k])]
    return lab + 1, modes, obj


def kmeans(cloud: PointCloud, K: int, replicates: int = 100, seed: int = 0) -> Clustering:
    """K-Means with k-means++ starts; best objective over seeded replicates."""
    labels, modes, obj = _kmeans_matrix(cloud.data, K, replicates, seed)
    return Clustering(
        labels=labels,
        modes=modes,
        K=K,
        scores={"objective": float(obj)},
        params={"algorithm": "kmeans", "K": int(K), "replicates": int(replicates), "seed": int(seed)},
    )


def spectral_clustering(
    graph: MarkovGraph, K: int, replicates: int = 10, seed: int = 0
) -> Clustering:
    """K-Means on the row-normalized first K eigenvectors of P."""
    dec = spectral_decompose(graph, min(K, graph.n))
    V = dec.eigenvectors.copy()
    norms = np.linalg.norm(V, axis=1)
    nz = norms > 0
    V[nz] /= norms[nz, None]
    labels, modes, obj = _kmeans_matrix(V, K, replicates, seed)
    return Clustering(
        labels=labels,
        modes=modes,
        K=K,
        scores={"objective": float(obj)},
        params={
            "algorithm": "spectral",
            "K": int(K),
            "N": int(graph.N),
            "replicates": int(replicates),
            "seed": int(seed),
        },
    )
