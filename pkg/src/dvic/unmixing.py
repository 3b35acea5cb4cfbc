"""Linear spectral unmixing: HySime, AVMAX, and nonnegative least squares.

The stack estimates how many endmembers a scene contains (HySime), extracts
endmember spectra as the pixels spanning the maximum-volume simplex in PCA
coordinates (AVMAX with restarts), solves per-pixel nonnegative least squares
for abundances, and reports pixel purity as the largest normalized abundance.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma

import numpy as np

from .errors import ConvergenceError, DegenerateSimplexError, ParameterError
from .graph import PointCloud

__all__ = [
    "NoiseEstimate",
    "UnmixingResult",
    "estimate_noise",
    "hysime",
    "avmax",
    "nnls",
    "abundances_and_purity",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseEstimate:
    """Per-pixel noise vectors and their correlation matrix.

    xi[i] is the residual of regressing pixel i's value in each band on the
    remaining bands; Rn = xi^T xi / n.
    """

    xi: np.ndarray          # (n, D)
    Rn: np.ndarray          # (D, D) symmetric PSD
    ridge_used: bool = False


@dataclass(frozen=True)
class UnmixingResult:
    """Endmembers, abundances, and purity for one unmixing run.

    After ``avmax`` only U (and the replicate bookkeeping) is set; the
    abundance stage fills A (rows nonnegative, summing to one) and the purity
    eta = rowwise max of A.
    """

    m: int
    U: np.ndarray                       # (m, D) endmember spectra
    A: np.ndarray | None = None         # (n, m) normalized abundances
    eta: np.ndarray | None = None       # (n,) purity, rowwise max of A
    replicate_volumes: np.ndarray | None = None
    seed: int | None = None
    endmember_indices: np.ndarray | None = None  # pixel indices chosen by AVMAX
    uniform_rows: np.ndarray | None = None       # rows that fell back to 1/m
    solver: str | None = None                    # abundance solver variant

    def __post_init__(self):
        if self.A is not None:
            a = self.A
            if a.min() < 0:
                raise ParameterError("abundances must be nonnegative")
            if np.abs(a.sum(axis=1) - 1.0).max() > 1e-9:
                raise ParameterError("abundance rows must sum to 1 within 1e-9")
        if self.eta is not None:
            if self.eta.min() < 1.0 / self.m - 1e-12 or self.eta.max() > 1.0 + 1e-12:
                raise ParameterError("purity must lie in [1/m, 1]")


def estimate_noise(cloud: PointCloud) -> NoiseEstimate:
    """Estimate additive noise by regressing each band on the remaining bands.

    Uses the shared-inverse update: with R = X^T X and Rinv = R^-1, the
    regression of band i on the others needs only a rank-one correction of
    Rinv.  Rank-deficient R falls back to a ridge (lambda = 1e-6 * trace(R))
    and flags it.
    """
    X = cloud.data
    n, D = X.shape
    if D == 1:
        # single band: nothing to regress on, the band is all signal
        xi = np.zeros_like(X)
        return NoiseEstimate(xi=xi, Rn=np.zeros((1, 1)))
    R = X.T @ X
    R = (R + R.T) / 2.0
    trace = float(np.trace(R))
    if trace == 0.0:
        return NoiseEstimate(xi=np.zeros_like(X), Rn=np.zeros((D, D)))
    evals = np.linalg.eigvalsh(R)
    ridge_used = bool(evals[0] <= 1e-12 * evals[-1]) or n <= D
    Rwork = R + (1e-6 * trace) * np.eye(D) if ridge_used else R
    Rinv = np.linalg.inv(Rwork)

    def solve_without_band(rhs, i):
        # inverse of Rwork with row/column i removed, via a rank-one update
        b = Rinv @ rhs - Rinv[:, i] * ((Rinv[i, :] @ rhs) / Rinv[i, i])
        b[i] = 0.0
        return b

    beta = np.empty((D, D))
    for i in range(D):
        rhs = R[:, i].copy()
        rhs[i] = 0.0
        beta[:, i] = solve_without_band(rhs, i)
    xi = X - X @ beta
    if ridge_used:
        # one refinement pass cancels the first-order ridge bias
        for i in range(D):
            rhs = X.T @ xi[:, i]
            rhs[i] = 0.0
            beta[:, i] += solve_without_band(rhs, i)
        xi = X - X @ beta
    Rn = xi.T @ xi / n
    Rn = (Rn + Rn.T) / 2.0
    return NoiseEstimate(xi=xi, Rn=Rn, ridge_used=ridge_used)


def hysime(cloud: PointCloud, noise: NoiseEstimate) -> int:
    """Signal-subspace dimension balancing projection error against noise power.

    For each eigenvector e of the signal correlation matrix, keeping e trades
    the projection error it removes (-e' Ry e) against the noise power it
    admits (+2 e' Rn e); the subspace size minimizing the summed objective is
    the number of directions with negative cost.  Deterministic, returns at
    least 1 and at most D.
    """
    X = cloud.data
    n, D = X.shape
    signal = X - noise.xi
    Ry = X.T @ X / n
    Rx = signal.T @ signal / n
    Rx = (Rx + Rx.T) / 2.0
    _, E = np.linalg.eigh(Rx)
    E = E[:, ::-1]
    delta = np.trace(Rx) / D / 1e10
    Rn = noise.Rn + delta * np.eye(D)
    py = np.einsum("ij,ij->j", E, Ry @ E)
    pn = np.einsum("ij,ij->j", E, Rn @ E)
    cost = -py + 2.0 * pn
    m = int(np.count_nonzero(cost < 0))
    return max(m, 1)


def _volume_coefficients(Yv: np.ndarray, pos: int):
    """Affine coefficients of the simplex volume in vertex ``pos``.

    The homogeneous determinant det([y_i, 1]) is affine in each vertex row, so
    det(y) = g . y + c; scanning all candidate pixels for the best swap is
    then a single matrix-vector product.
    """
    m = Yv.shape[0]
    r = m - 1
    H = np.ones((m, m))
    H[:, :r] = Yv
    H[pos, :r] = 0.0
    c = np.linalg.det(H)
    g = np.empty(r)
    for k in range(r):
        H[pos, :r] = 0.0
        H[pos, k] = 1.0
        g[k] = np.linalg.det(H) - c
    return g, c


def _avmax_replicate(Y: np.ndarray, m: int, rng: np.random.Generator):
    """One AVMAX restart: cyclic partial maximization of the simplex volume.

    Holding m-1 vertices fixed, every pixel is scanned for the one maximizing
    the absolute homogeneous determinant; swaps are accepted only on strict
    improvement, so the volume is non-decreasing step by step and the cycle
    terminates.  Capped at 100 full cycles.
    """
    n = Y.shape[0]
    verts = rng.choice(n, size=m, replace=False).astype(np.int64)
    for _ in range(100):
        H = np.ones((m, m))
        H[:, : m - 1] = Y[verts]
        if np.linalg.det(H) != 0.0:
            break
        verts = rng.choice(n, size=m, replace=False).astype(np.int64)
    for _cycle in range(100):
        improved = False
        for pos in range(m):
            g, c = _volume_coefficients(Y[verts], pos)
            vals = np.abs(Y @ g + c)
            j = int(np.argmax(vals))
            current = vals[verts[pos]]
            if j != verts[pos] and vals[j] > current:
                assert vals[j] >= current  # volume never decreases within a step
                verts[pos] = j
                improved = True
        if not improved:
            break
    H = np.ones((m, m))
    H[:, : m - 1] = Y[verts]
    _, logabsdet = np.linalg.slogdet(H)
    return verts, logabsdet


def avmax(cloud: PointCloud, m: int, replicates: int, seed: int) -> UnmixingResult:
    """Maximum-volume simplex endmember extraction over PCA-reduced pixels.

    The data is PCA-reduced to m-1 dimensions and candidate endmembers are
    restricted to observed pixels, so each partial maximization is exact.
    Replicate r seeds its counter-based RNG with ``seed ^ r``; the replicate
    with the largest simplex volume wins (ties to the lowest replicate
    index).  U is reported in the original coordinates.
    """
    if m < 2:
        raise ParameterError(f"need m >= 2, got m={m}")
    if replicates < 1:
        raise ParameterError(f"need replicates >= 1, got {replicates}")
    X = cloud.data
    n = X.shape[0]
    if m > n:
        raise ParameterError(f"need m <= n, got m={m}, n={n}")
    Xc = X - X.mean(axis=0)
    U_svd, s, _ = np.linalg.svd(Xc, full_matrices=False)
    rank = int(np.count_nonzero(s > 1e-10 * max(s[0], np.finfo(float).tiny)))
    if m - 1 > rank:
        raise DegenerateSimplexError(
            f"m={m} exceeds the affine dimension of the data ({rank}) + 1"
        )
    Y = U_svd[:, : m - 1] * s[: m - 1]
    best_log = -np.inf
    best_verts = None
    log_volumes = np.empty(replicates)
    for r in range(replicates):
        rng = np.random.Generator(np.random.Philox((seed ^ r) & _MASK64))
        verts, logabsdet = _avmax_replicate(Y, m, rng)
        log_volumes[r] = logabsdet
        if logabsdet > best_log:
            best_log = logabsdet
            best_verts = verts
    volumes = np.exp(log_volumes - lgamma(m))
    return UnmixingResult(
        m=m,
        U=cloud.data[best_verts].copy(),
        replicate_volumes=volumes,
        seed=seed,
        endmember_indices=best_verts,
    )


def _nnls_design(A: np.ndarray, b: np.ndarray, max_solves: int | None = None) -> np.ndarray:
    """Lawson-Hanson active-set NNLS: argmin ||b - A a||_2 with a >= 0."""
    m = A.shape[1]
    cap = max_solves if max_solves is not None else max(60, 12 * m)
    gtol = 1e-11 * max(1.0, float(np.abs(A.T @ b).max()))
    passive = np.zeros(m, dtype=bool)
    a = np.zeros(m)
    obj = float(b @ b)
    solves = 0
    while True:
        w = A.T @ (b - A @ a)
        free = ~passive
        if not free.any():
            break
        wmax = w[free].max()
        if wmax <= gtol:
            break
        j = int(np.flatnonzero(free)[np.argmax(w[free])])
        passive[j] = True
        while True:
            solves += 1
            if solves > cap:
                raise ConvergenceError(
                    f"NNLS iteration cap exceeded (m={m})",
                    residuals=float(np.linalg.norm(b - A @ a)),
                )
            z = np.zeros(m)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if z[passive].min() > 0:
                a = z
                break
            hit = passive & (z <= 0)
            denom = a - z  # >= 0 on hit since a >= 0 >= z there
            ratio = np.full(m, np.inf)
            pos = hit & (denom > 0)
            ratio[pos] = a[pos] / denom[pos]
            ratio[hit & (denom <= 0)] = 0.0
            alpha = float(ratio.min())
            a = a + alpha * (z - a)
            drop = hit & (
                a <= 10 * np.finfo(float).eps * max(1.0, float(np.abs(a).max()))
            )
            if not drop.any():
                # force out the coordinate that limited the step
                cand = np.flatnonzero(hit)
                drop = np.zeros(m, dtype=bool)
                drop[cand[np.argmin(a[cand])]] = True
            passive &= ~drop
            a[~passive] = 0.0
        new_obj = float(np.sum((b - A @ a) ** 2))
        if new_obj >= obj * (1.0 - 1e-13):
            # numerical floor reached; stop before cycling
            break
        obj = new_obj
    return a


def nnls(U: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Nonnegative least squares abundances of x against endmember rows of U.

    Solves argmin_a ||x - sum_j a_j u_j||_2 subject to a >= 0 with the
    Lawson-Hanson active-set method; at the solution the KKT conditions hold
    (gradient >= 0 on the zero set, ~0 on the support).
    """
    U = np.asarray(U, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if U.ndim != 2 or x.ndim != 1 or U.shape[1] != x.shape[0]:
        raise ParameterError(
            f"shape mismatch: U is {U.shape}, x has length {x.shape}"
        )
    return _nnls_design(U.T, x)


def abundances_and_purity(
    cloud: PointCloud,
    U: np.ndarray,
    base: UnmixingResult | None = None,
    sum_to_one: str = "auto",
) -> UnmixingResult:
    """Per-pixel NNLS abundances, row-normalized, and the purity eta.

    When the endmember matrix has full column rank the plain NNLS solution is
    unique and is normalized to sum to one afterwards.  With linearly
    dependent endmember columns (m exceeding the spectral dimension) the NNLS
    optimum is a whole family and the rowwise maximum would depend on the
    solver path, so a sum-to-one-weighted augmented system picks the
    barycentric representative instead (``sum_to_one``: "auto", "never",
    "always").  Rows orthogonal to every endmember direction fall back to the
    uniform 1/m and are flagged.
    """
    U = np.asarray(U, dtype=np.float64)
    m, D = U.shape
    X = cloud.data
    n = X.shape[0]
    design = U.T
    s = np.linalg.svd(design, compute_uv=False)
    deficient = s.size < m or s[-1] <= 1e-10 * max(s[0], np.finfo(float).tiny)
    if sum_to_one not in ("auto", "never", "always"):
        raise ParameterError(f"unknown sum_to_one mode {sum_to_one!r}")
    constrained = sum_to_one == "always" or (sum_to_one == "auto" and deficient)
    if constrained:
        gamma = 0.01 * max(1.0, float(s[0]))
        A_design = np.vstack([design, np.full((1, m), gamma)])
        B = np.vstack([X.T, np.full((1, n), gamma)])
    else:
        A_design = design
        B = X.T
    sol = np.linalg.lstsq(A_design, B, rcond=None)[0].T
    A_ab = sol.copy()
    bad = ~np.all(sol >= 0, axis=1) | ~np.all(np.isfinite(sol), axis=1)
    for i in np.flatnonzero(bad):
        A_ab[i] = _nnls_design(A_design, B[:, i])
    rowsum = A_ab.sum(axis=1)
    uniform = rowsum <= 0
    if uniform.any():
        A_ab[uniform] = 1.0 / m
        rowsum = A_ab.sum(axis=1)
    A_norm = A_ab / rowsum[:, None]
    eta = A_norm.max(axis=1)
    return UnmixingResult(
        m=m,
        U=U,
        A=A_norm,
        eta=eta,
        replicate_volumes=None if base is None else base.replicate_volumes,
        seed=None if base is None else base.seed,
        endmember_indices=None if base is None else base.endmember_indices,
        uniform_rows=uniform,
        solver="sum-to-one" if constrained else "plain",
    )
