"""Clustering evaluation and hyperparameter grid search.

Predicted labels are aligned to ground truth with an optimal one-to-one
assignment (Hungarian method) before overall accuracy and Cohen's kappa are
computed; unlabeled ground-truth pixels (label 0) are discarded.  The grid
search sweeps (N, sigma0, t) with seeded trials per node, reporting the
median OA per node, and shares one graph/decomposition per N, one KDE per
(N, sigma0), and one unmixing run per trial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import _kmeans_matrix, _mode_cluster_multi, zeta
from .errors import DisconnectedGraphError, ParameterError
from .graph import (
    PointCloud,
    SpectralDecomposition,
    build_knn_graph,
    kde,
    knn_table,
    spectral_decompose,
)
from .unmixing import abundances_and_purity, avmax, estimate_noise, hysime

__all__ = [
    "EvalReport",
    "GridSpec",
    "GridSearchResult",
    "align_and_score",
    "sigma_grid",
    "n_grid",
    "t_grid",
    "grid_search",
]


@dataclass(frozen=True)
class EvalReport:
    """Alignment-optimal accuracy metrics against ground truth."""

    oa: float
    kappa: float
    confusion: np.ndarray  # aligned square confusion matrix (assignment on the diagonal)
    alignment: dict        # predicted cluster -> ground-truth class
    n_eval: int


@dataclass(frozen=True)
class GridSpec:
    """Hyperparameter grids for one sweep.

    t_grid may be None, in which case each N derives its own exponential time
    grid from the decomposition's second eigenvalue.
    """

    N_grid: tuple
    sigma_grid: tuple
    t_grid: tuple | None
    trials: int
    seed: int

    def __post_init__(self):
        if len(self.N_grid) == 0 or len(self.sigma_grid) == 0:
            raise ParameterError("grids must be nonempty")
        if self.t_grid is not None and len(self.t_grid) == 0:
            raise ParameterError("t_grid must be nonempty or None")
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")
        object.__setattr__(self, "N_grid", tuple(int(v) for v in self.N_grid))
        object.__setattr__(self, "sigma_grid", tuple(float(v) for v in self.sigma_grid))
        if self.t_grid is not None:
            object.__setattr__(self, "t_grid", tuple(float(v) for v in self.t_grid))


@dataclass
class GridSearchResult:
    rows: list
    best: dict | None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "best": self.best, "meta": self.meta}


def align_and_score(pred: np.ndarray, truth: np.ndarray) -> EvalReport:
    """Overall accuracy and Cohen's kappa under the optimal label alignment.

    Ground-truth zeros are discarded.  OA is maximized over one-to-one
    cluster-to-class assignments; kappa = (OA - p_e) / (1 - p_e) with p_e the
    chance agreement computed from the aligned confusion marginals.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ParameterError(f"length mismatch: {pred.shape} vs {truth.shape}")
    mask = truth > 0
    n_eval = int(mask.sum())
    if n_eval == 0:
        raise ParameterError("all pixels are unlabeled")
    p = pred[mask]
    t = truth[mask]
    if p.min() < 1 or t.min() < 1:
        raise ParameterError("labels must be positive (0 reserved for unlabeled truth)")
    size = int(max(p.max(), t.max()))
    confusion = np.zeros((size, size), dtype=np.int64)
    np.add.at(confusion, (p - 1, t - 1), 1)
    row_ind, col_ind = linear_sum_assignment(-confusion)
    perm = np.empty(size, dtype=np.int64)
    perm[col_ind] = row_ind
    aligned = confusion[perm, :]
    matches = int(np.trace(aligned))
    oa = matches / n_eval
    rows = aligned.sum(axis=1)
    cols = aligned.sum(axis=0)
    pe = float(rows @ cols) / (n_eval * n_eval)
    if pe >= 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    alignment = {int(r) + 1: int(c) + 1 for r, c in zip(row_ind, col_ind)}
    return EvalReport(oa=float(oa), kappa=float(kappa), confusion=aligned,
                      alignment=alignment, n_eval=n_eval)


def n_grid(lo: int, hi: int, count: int) -> list:
    """Geometric sampling of [lo, hi] rounded to unique integers."""
    if not (1 <= lo <= hi) or count < 1:
        raise ParameterError("need 1 <= lo <= hi and count >= 1")
    vals = np.unique(np.round(np.geomspace(lo, hi, count)).astype(int))
    return [int(v) for v in vals]


def sigma_grid(cloud: PointCloud, n_samples: int = 20, table=None) -> list:
    """Evenly spaced quantiles of the pooled near-neighbor distance distribution.

    The pool holds each point's distances to its min(1000, n-1) nearest
    neighbors; quantile levels are i/(n_samples+1) for i = 1..n_samples.
    """
    if n_samples < 1:
        raise ParameterError("need n_samples >= 1")
    k = min(1000, cloud.n - 1)
    if table is None or table.k < k:
        table = knn_table(cloud, k)
    pool = table.distances[:, :k].ravel()
    levels = np.arange(1, n_samples + 1) / (n_samples + 1)
    vals = np.unique(np.quantile(pool, levels))
    vals = vals[vals > 0]
    if vals.size == 0:
        raise ParameterError("all pooled neighbor distances are zero")
    return [float(v) for v in vals]


def _t_grid_from(lambda2: float, min_pi: float) -> list:
    lam = abs(lambda2)
    if lam >= 1.0 - 1e-12:
        raise DisconnectedGraphError(
            "second eigenvalue has unit magnitude (disconnected graph); "
            "derive the time grid from the largest sub-unit component eigenvalue"
        )
    if lam <= 0.0:
        return [0.0, 1.0]
    x = 2e-5 / min_pi
    val = math.log(x) / math.log(lam)
    T = max(int(math.ceil(math.log2(val))), 0) if val > 1.0 else 0
    return [0.0] + [float(2**j) for j in range(T + 1)]


def t_grid(dec: SpectralDecomposition) -> list:
    """Exponential diffusion-time grid {0, 1, 2, 4, ..., 2^T}.

    T = ceil(log2(log_{lambda_2}(2e-5 / min pi))): past 2^T every pairwise
    diffusion distance is below 1e-5, so the sweep stops there.
    """
    if dec.eigenvalues.size < 2:
        raise ParameterError("need at least two eigenvalues for the time grid")
    return _t_grid_from(float(dec.eigenvalues[1]), float(dec.pi.min()))


def _t_grid_per_component(dec: SpectralDecomposition) -> list:
    """Time grid for disconnected graphs: largest |lambda| strictly below 1."""
    mags = np.abs(dec.eigenvalues)
    sub = mags[mags < 1.0 - 1e-12]
    if sub.size == 0:
        return [0.0, 1.0]
    return _t_grid_from(float(sub.max()), float(dec.pi.min()))


def _trial_seed(seed: int, trial: int) -> int:
    # keep replicate-level XOR splitting (seed ^ r) collision-free across trials
    return seed ^ (trial << 32)


def grid_search(
    algorithm: str,
    cloud: PointCloud,
    spec: GridSpec,
    params: dict | None = None,
    use_cache: bool = True,
) -> GridSearchResult:
    """Median-OA sweep over the hyperparameter grid for one algorithm.

    algorithm: "lund", "dvic", "kmeans", or "spectral".  ``params`` carries
    the non-grid parameters (K, ell, replicates, and the optional endmember
    override m for dvic).  Per node, ``spec.trials`` seeded trials are scored
    against ``cloud.labels`` and the median OA recorded; node failures are
    recorded without aborting the sweep.  Caching never changes results: a
    graph/decomposition is shared per N, a KDE per (N, sigma0), and the
    unmixing stack per trial; trials with bit-identical purity collapse to
    one downstream evaluation.
    """
    if algorithm not in ("lund", "dvic", "kmeans", "spectral"):
        raise ParameterError(f"unknown algorithm {algorithm!r}")
    if cloud.labels is None or not np.any(cloud.labels > 0):
        raise ParameterError("grid search needs ground-truth labels on the cloud")
    params = dict(params or {})
    truth = cloud.labels
    K = int(params.pop("K", truth.max()))
    ell = int(params.pop("ell", 10))
    replicates = int(params.pop("replicates", 100 if algorithm == "dvic" else 10))
    m_override = params.pop("m", None)
    if params:
        raise ParameterError(f"unknown grid-search params: {sorted(params)}")

    rows: list = []
    meta: dict = {
        "algorithm": algorithm,
        "K": K,
        "ell": ell,
        "trials": spec.trials,
        "seed": spec.seed,
        "replicates": replicates,
        "t_grid_by_N": {},
    }
    if m_override is not None:
        meta["m"] = int(m_override)

    def score(labels) -> float:
        return align_and_score(labels, truth).oa

    if algorithm == "kmeans":
        oas = []
        for trial in range(spec.trials):
            labels, _, _ = _kmeans_matrix(
                cloud.data, K, replicates, _trial_seed(spec.seed, trial)
            )
            oas.append(score(labels))
        rows.append(_row(algorithm, None, None, None, oas))
        return _finish(rows, meta)

    kmax = int(max(spec.N_grid))
    table = knn_table(cloud, min(kmax, cloud.n - 1))

    unmix_cache: dict = {}

    def trial_eta(trial: int):
        key = trial
        if key not in unmix_cache or not use_cache:
            seed_t = _trial_seed(spec.seed, trial)
            noise = estimate_noise(cloud)
            m_used = int(m_override) if m_override is not None else hysime(cloud, noise)
            um = avmax(cloud, m_used, replicates, seed_t)
            um = abundances_and_purity(cloud, um.U, base=um)
            result = (um.eta, m_used)
            if not use_cache:
                return result
            unmix_cache[key] = result
        return unmix_cache[key]

    for N in spec.N_grid:
        try:
            graph = build_knn_graph(cloud, N, table)
            dec = spectral_decompose(graph, min(ell, cloud.n))
        except Exception as exc:  # record the whole-N failure on every node
            for s0 in spec.sigma_grid:
                rows.append(_row(algorithm, N, s0, None, None, error=repr(exc)))
            continue
        if algorithm == "spectral":
            oas = []
            for trial in range(spec.trials):
                from .clustering import spectral_clustering

                sc = spectral_clustering(graph, K, replicates, _trial_seed(spec.seed, trial))
                oas.append(score(sc.labels))
            rows.append(_row(algorithm, N, None, None, oas))
            continue
        if spec.t_grid is not None:
            ts = list(spec.t_grid)
        else:
            try:
                ts = t_grid(dec)
            except DisconnectedGraphError:
                ts = _t_grid_per_component(dec)
        meta["t_grid_by_N"][str(N)] = ts
        for s0 in spec.sigma_grid:
            try:
                density = kde(cloud, N, s0, table)
            except Exception as exc:
                for t in ts:
                    rows.append(_row(algorithm, N, s0, t, None, error=repr(exc)))
                continue
            try:
                if algorithm == "lund":
                    results = _mode_cluster_multi(density.p, dec, ts, K)
                    for t, (labels, _, _, _) in zip(ts, results):
                        oa = score(labels)
                        rows.append(_row(algorithm, N, s0, t, [oa] * spec.trials))
                else:  # dvic
                    oas_by_t = [[None] * spec.trials for _ in ts]
                    groups: dict = {}
                    etas = {}
                    for trial in range(spec.trials):
                        eta, m_used = trial_eta(trial)
                        key = eta.tobytes() if use_cache else ("trial", trial)
                        groups.setdefault(key, []).append(trial)
                        etas[key] = eta
                    for key, trials_in_group in groups.items():
                        z = zeta(density.p, etas[key])
                        results = _mode_cluster_multi(z, dec, ts, K)
                        for it, (labels, _, _, _) in enumerate(results):
                            oa = score(labels)
                            for trial in trials_in_group:
                                oas_by_t[it][trial] = oa
                    for it, t in enumerate(ts):
                        rows.append(_row(algorithm, N, s0, t, oas_by_t[it]))
            except Exception as exc:
                for t in ts:
                    rows.append(_row(algorithm, N, s0, t, None, error=repr(exc)))
    return _finish(rows, meta)


def _row(algorithm, N, sigma0, t, oas, error=None) -> dict:
    row = {
        "algorithm": algorithm,
        "N": None if N is None else int(N),
        "sigma0": None if sigma0 is None else float(sigma0),
        "t": None if t is None else float(t),
        "error": error,
    }
    if oas is None:
        row["trial_oas"] = None
        row["median_oa"] = None
    else:
        row["trial_oas"] = [float(v) for v in oas]
        row["median_oa"] = float(np.median(oas))
    return row


def _finish(rows, meta) -> GridSearchResult:
    best = None
    for row in rows:
        if row["median_oa"] is None:
            continue
        if best is None or row["median_oa"] > best["median_oa"]:
            best = row
    return GridSearchResult(rows=rows, best=best, meta=meta)
