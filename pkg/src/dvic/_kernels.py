"""Numba kernels for value-ordered nearest-candidate scans.

The mode-detection distance (rho_t / d_t) and the label-propagation parent of
every point are both "nearest point among those of higher value" queries.
With rows sorted by descending value, both reduce to a prefix scan: for each
position i, the minimum weighted squared distance to any position j < i.  The
kernel evaluates all requested diffusion times in one pass over the pairs and
parallelizes over rows only, so results are bitwise independent of the thread
count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def prefix_min_scan(emb, weights, n_active, orig):
    """Per weight row, the nearest earlier position for every row of emb.

    emb : (n, L) eigenvector rows sorted by descending value.
    weights : (T, L) nonnegative spectral weights (lambda_k^2)^t, nonincreasing
        along k.
    n_active : (T,) number of leading nonzero weights per row (trailing exact
        zeros are skipped; this cannot change results).
    orig : (n,) original point index per position, used to break distance ties
        toward the smallest original index.

    Returns (d2, jpos): (T, n) minimum squared distances and argmin positions;
    position 0 gets (inf, -1).
    """
    n, L = emb.shape
    T = weights.shape[0]
    d2 = np.full((T, n), np.inf)
    jpos = np.full((T, n), -1, np.int64)
    # row i scans a prefix of length i; pairing row u with row n-u keeps the
    # per-iteration work constant so static prange chunking stays balanced
    for u in prange(1, n // 2 + 1):
        _scan_row(emb, weights, n_active, orig, u, d2, jpos)
        partner = n - u
        if partner != u and partner <= n - 1:
            _scan_row(emb, weights, n_active, orig, partner, d2, jpos)
    return d2, jpos


@njit(cache=True, inline="always")
def _scan_row(emb, weights, n_active, orig, i, d2, jpos):
    L = emb.shape[1]
    T = weights.shape[0]
    s = np.empty(L)
    bd = np.full(T, np.inf)
    bj = np.full(T, -1, np.int64)
    for j in range(i):
        for k in range(L):
            diff = emb[i, k] - emb[j, k]
            s[k] = diff * diff
        for t in range(T):
            # partial sums only grow, so bail out once the current best is
            # strictly exceeded; exact ties always run to completion
            acc = 0.0
            bdt = bd[t]
            for k in range(n_active[t]):
                acc += weights[t, k] * s[k]
                if acc > bdt:
                    break
            if acc < bdt or (acc == bdt and orig[j] < orig[bj[t]]):
                bd[t] = acc
                bj[t] = j
    for t in range(T):
        d2[t, i] = bd[t]
        jpos[t, i] = bj[t]
