"""KNN graphs, Markov diffusion geometry, and kernel density estimation.

Pixels are nodes of a symmetrized unit-weight KNN graph.  The row-stochastic
transition matrix P = D^-1 W drives a diffusion process whose eigenvectors,
normalized against the stationary distribution pi, give diffusion distances
and low-dimensional diffusion embeddings.  A truncated KNN kernel density
estimate supplies the density scores used by the mode-based clusterers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import ConvergenceError, ParameterError

__all__ = [
    "PointCloud",
    "NeighborTable",
    "MarkovGraph",
    "SpectralDecomposition",
    "DensityField",
    "knn_table",
    "build_knn_graph",
    "spectral_decompose",
    "diffusion_distance",
    "diffusion_embedding",
    "kde",
]

_DENSE_N = 500     # dense eigensolver at or below this many nodes
_KNN_BLOCK = 1024  # rows per blocked distance computation


@dataclass(frozen=True)
class PointCloud:
    """Point cloud of pixel spectra with optional image shape and labels.

    data : (n, D) float64 array, one spectrum per row.
    shape : optional (rows, cols) with rows * cols == n.
    labels : optional (n,) integer array, 0 = unlabeled.
    """

    data: np.ndarray
    shape: tuple | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.ndim != 2:
            raise ParameterError("data must be a 2-d array of spectra")
        n, d = data.shape
        if n < 2 or d < 1:
            raise ParameterError(f"need n >= 2 and D >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("data contains non-finite entries")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.shape is not None:
            rows, cols = (int(v) for v in self.shape)
            if rows * cols != n:
                raise ParameterError(f"shape ({rows}, {cols}) inconsistent with n={n}")
            object.__setattr__(self, "shape", (rows, cols))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).copy()
            if labels.shape != (n,):
                raise ParameterError("labels must be a length-n vector")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def n_bands(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NeighborTable:
    """Nearest neighbors of every point, self excluded, sorted by (distance, index).

    Computed once with a large k and sliced for any smaller neighbor count, so
    graphs, KDEs, and scale grids share one distance pass.
    """

    indices: np.ndarray    # (n, k) int64
    distances: np.ndarray  # (n, k) float64, Euclidean

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class MarkovGraph:
    """Symmetrized unit-weight KNN graph and its Markov transition matrix."""

    W: sp.csr_matrix          # (n, n) 0/1 symmetric, zero diagonal
    degree: np.ndarray        # (n,) row sums of W
    P: sp.csr_matrix          # (n, n) row-stochastic D^-1 W
    pi: np.ndarray            # (n,) stationary distribution, degree / sum(degree)
    N: int                    # neighbor count used
    connected: bool
    component_labels: np.ndarray  # (n,) component id per node
    n_components: int

    @property
    def n(self) -> int:
        return self.pi.shape[0]


@dataclass(frozen=True)
class SpectralDecomposition:
    """Leading eigenpairs of P, pi-orthonormal right eigenvectors.

    eigenvalues are sorted by decreasing magnitude with lambda_1 = 1; the
    eigenvectors satisfy sum_i pi_i psi_k(i) psi_l(i) = delta_kl, which makes
    the P^t form and the spectral form of the diffusion distance coincide.
    """

    eigenvalues: np.ndarray   # (ell,)
    eigenvectors: np.ndarray  # (n, ell)
    pi: np.ndarray            # (n,)
    ell: int

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[0]


@dataclass(frozen=True)
class DensityField:
    """KNN kernel density estimate normalized to sum to one."""

    p: np.ndarray     # (n,) strictly positive, sums to 1
    sigma0: float     # KDE scale, same units as the spectral l2 distance
    n_kde: int        # neighbor count used


def knn_table(cloud: PointCloud, k: int) -> NeighborTable:
    """Exact brute-force k-nearest neighbors (self excluded).

    Distances are l2 on raw rows of ``cloud.data``; ties are broken by the
    lower point index.  Blocked so memory stays at O(block * n).
    """
    n = cloud.n
    if not 1 <= k < n:
        raise ParameterError(f"need 1 <= k < n, got k={k}, n={n}")
    data = cloud.data
    indices = np.empty((n, k), dtype=np.int64)
    distances = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, _KNN_BLOCK):
        stop = min(start + _KNN_BLOCK, n)
        d2 = cdist(data[start:stop], data, "sqeuclidean")
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        indices[start:stop] = order
        distances[start:stop] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborTable(indices=indices, distances=distances)


def build_knn_graph(cloud: PointCloud, N: int, table: NeighborTable | None = None) -> MarkovGraph:
    """Build the symmetrized union KNN graph and its diffusion operators.

    W_ij = 1 iff x_i is among the N nearest neighbors of x_j or vice versa
    (unit weights, no self loops).  Returns the graph together with
    P = D^-1 W and the stationary distribution pi = degree / sum(degree).
    """
    n = cloud.n
    if not 1 <= N < n:
        raise ParameterError(f"need 1 <= N < n, got N={N}, n={n}")
    if table is None or table.k < N:
        table = knn_table(cloud, N)
    idx = table.indices[:, :N]
    rows = np.repeat(np.arange(n, dtype=np.int64), N)
    A = sp.csr_matrix(
        (np.ones(n * N), (rows, idx.ravel())), shape=(n, n), dtype=np.float64
    )
    W = A.maximum(A.T).tocsr()
    degree = np.asarray(W.sum(axis=1)).ravel()
    P = sp.csr_matrix(W.multiply(1.0 / degree[:, None]))
    pi = degree / degree.sum()
    n_comp, comp = connected_components(W, directed=False)
    comp = comp.astype(np.int64)
    return MarkovGraph(
        W=W,
        degree=degree,
        P=P,
        pi=pi,
        N=N,
        connected=n_comp == 1,
        component_labels=comp,
        n_components=int(n_comp),
    )


def _component_eigs(Wc: sp.csr_matrix, dc: np.ndarray, k: int, tol: float):
    """Eigenpairs of the component transition matrix via its symmetric conjugate.

    S = D^-1/2 W D^-1/2 shares its spectrum with P and is symmetric, so the
    spectrum is real and the solver is a Lanczos iteration (dense fallback on
    small components).  Returns (eigenvalues, orthonormal eigenvectors of S).
    """
    nc = Wc.shape[0]
    inv_half = 1.0 / np.sqrt(dc)
    if nc <= _DENSE_N or k >= nc - 1:
        S = Wc.toarray() * inv_half[:, None] * inv_half[None, :]
        vals, vecs = np.linalg.eigh(S)
        return vals, vecs
    S = sp.csr_matrix(Wc.multiply(inv_half[:, None]).multiply(inv_half[None, :]))
    v0 = np.full(nc, 1.0 / np.sqrt(nc))
    try:
        vals, vecs = eigsh(S, k=k, which="LM", v0=v0, tol=tol, maxiter=10 * k + 100)
    except ArpackNoConvergence as exc:
        raise ConvergenceError(
            f"eigensolver did not converge on a {nc}-node component "
            f"(k={k}, maxiter={10 * k + 100})",
            residuals=getattr(exc, "eigenvalues", None),
        ) from exc
    return vals, vecs


def spectral_decompose(graph: MarkovGraph, ell: int, tol: float = 1e-10) -> SpectralDecomposition:
    """Leading-ell eigenpairs of P by decreasing magnitude, pi-orthonormalized.

    Disconnected graphs are decomposed per connected component (each component
    contributes its own unit eigenvalue) and the pooled spectrum is truncated
    to the ell largest magnitudes.  The unit eigenpair of every component is
    set exactly: lambda = 1 and psi constant on the component.  Sign
    convention: first entry of magnitude above 1e-12 of the column maximum is
    positive.
    """
    n = graph.n
    if not 1 <= ell <= n:
        raise ParameterError(f"need 1 <= ell <= n, got ell={ell}, n={n}")
    total_degree = graph.degree.sum()
    lam_parts, comp_ids, within, vec_parts, idx_parts = [], [], [], [], []
    for cid in range(graph.n_components):
        idx = np.flatnonzero(graph.component_labels == cid)
        nc = idx.size
        kc = min(ell, nc)
        Wc = graph.W[idx][:, idx]
        dc = graph.degree[idx]
        vals, vecs = _component_eigs(Wc, dc, kc, tol)
        order = np.lexsort((np.arange(vals.size), -vals, -np.abs(vals)))[:kc]
        vals = vals[order]
        vecs = vecs[:, order]
        psis = (np.sqrt(total_degree) / np.sqrt(dc))[:, None] * vecs
        # the unit eigenpair is exact: lambda = 1, psi constant on the component
        top = int(np.argmax(vals))
        vals = vals.copy()
        vals[top] = 1.0
        psis[:, top] = np.sqrt(total_degree / dc.sum())
        lam_parts.append(vals)
        comp_ids.append(np.full(kc, cid))
        within.append(np.arange(kc))
        vec_parts.append(psis)
        idx_parts.append(idx)
    lam_all = np.concatenate(lam_parts)
    comp_all = np.concatenate(comp_ids)
    within_all = np.concatenate(within)
    order = np.lexsort((within_all, comp_all, -lam_all, -np.abs(lam_all)))[:ell]
    eigenvalues = lam_all[order]
    eigenvectors = np.zeros((n, ell))
    for j, src in enumerate(order):
        cid = comp_all[src]
        col = within_all[src]
        eigenvectors[idx_parts[cid], j] = vec_parts[cid][:, col]
    _fix_signs(eigenvectors)
    _check_decomposition(graph, eigenvalues, eigenvectors)
    eigenvalues.flags.writeable = False
    eigenvectors.flags.writeable = False
    return SpectralDecomposition(
        eigenvalues=eigenvalues, eigenvectors=eigenvectors, pi=graph.pi.copy(), ell=ell
    )


def _fix_signs(vecs: np.ndarray) -> None:
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        mags = np.abs(col)
        nz = np.flatnonzero(mags > 1e-12 * mags.max())
        if nz.size and col[nz[0]] < 0:
            vecs[:, j] = -col


def _check_decomposition(graph: MarkovGraph, vals: np.ndarray, vecs: np.ndarray) -> None:
    resid = graph.P @ vecs - vecs * vals[None, :]
    norms = np.linalg.norm(vecs, axis=0)
    rel = np.linalg.norm(resid, axis=0) / norms
    if np.any(rel > 1e-8):
        raise ConvergenceError(
            f"eigenpair residuals exceed 1e-8 (max {rel.max():.3e})", residuals=rel
        )
    gram = vecs.T @ (graph.pi[:, None] * vecs)
    err = np.abs(gram - np.eye(vals.size)).max()
    if err > 1e-8:
        raise ConvergenceError(
            f"eigenvectors are not pi-orthonormal (max deviation {err:.3e})",
            residuals=gram,
        )


def diffusion_distance(dec: SpectralDecomposition, t: float, i: int, j: int) -> float:
    """Diffusion distance at time t between points i and j.

    Spectral form sqrt(sum_k lambda_k^{2t} (psi_k(i) - psi_k(j))^2); with the
    full basis (ell = n) this equals the pi-weighted l2 distance between the
    i-th and j-th rows of P^t.
    """
    if t < 0:
        raise ParameterError(f"diffusion time must be nonnegative, got {t}")
    n = dec.n
    if not (0 <= i < n and 0 <= j < n):
        raise ParameterError(f"indices ({i}, {j}) out of range for n={n}")
    if i == j:
        return 0.0
    w = (dec.eigenvalues**2) ** t
    diff = dec.eigenvectors[i] - dec.eigenvectors[j]
    return float(np.sqrt(np.sum(w * diff * diff)))


def diffusion_embedding(dec: SpectralDecomposition, t: float) -> np.ndarray:
    """Embedding whose row Euclidean distances equal diffusion distances at t.

    Column k is |lambda_k|^t psi_k; signs are irrelevant to pairwise
    distances.
    """
    if t < 0:
        raise ParameterError(f"diffusion time must be nonnegative, got {t}")
    return dec.eigenvectors * (np.abs(dec.eigenvalues) ** t)[None, :]


def kde(
    cloud: PointCloud,
    n_kde: int,
    sigma0: float,
    table: NeighborTable | None = None,
) -> DensityField:
    """Truncated-KNN Gaussian kernel density estimate.

    p(x) is proportional to sum over the n_kde nearest neighbors y of
    exp(-||x - y||^2 / sigma0^2) (the point itself excluded) and is
    normalized so the densities sum to one.  Accumulation is in log space so
    tiny sigma0 never underflows to zero.
    """
    n = cloud.n
    if sigma0 <= 0:
        raise ParameterError(f"sigma0 must be positive, got {sigma0}")
    if not 1 <= n_kde < n:
        raise ParameterError(f"need 1 <= n_kde < n, got n_kde={n_kde}, n={n}")
    if table is None or table.k < n_kde:
        table = knn_table(cloud, n_kde)
    d = table.distances[:, :n_kde]
    logp = logsumexp(-((d / sigma0) ** 2), axis=1)
    logp -= logsumexp(logp)
    p = np.exp(logp)
    p = np.maximum(p, np.finfo(np.float64).tiny)
    p /= p.sum()
    p.flags.writeable = False
    return DensityField(p=p, sigma0=float(sigma0), n_kde=int(n_kde))
