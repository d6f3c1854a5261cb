"""Numba kernel for exact nearest-centroid search."""

import numpy as np
from numba import njit


@njit(cache=True)
def nearest(x, ct, out):
    """Write argmin_j |x_i - c_j|^2 into ``out``; ``ct`` is the d x k transposed codebook.

    Each distance is summed over dimensions in order, so results are exact
    differences independent of blocking, and strict ``<`` keeps the lowest
    index on ties.
    """
    n, d = x.shape
    k = ct.shape[1]
    dist = np.zeros(k)
    for i in range(n):
        for j in range(k):
            dist[j] = 0.0
        for t in range(d - 1):
            xi = x[i, t]
            row = ct[t]
            for j in range(k):
                diff = xi - row[j]
                dist[j] += diff * diff
        xi = x[i, d - 1]
        row = ct[d - 1]
        best = 0
        best_d = np.inf
        for j in range(k):
            diff = xi - row[j]
            s = dist[j] + diff * diff
            if s < best_d:
                best_d = s
                best = j
        out[i] = best


@njit(cache=True)
def kmeans_plus_plus(x, first, draws, chosen):
    """D^2 seeding: ``chosen[0] = first``; pick i >= 1 uses the uniform ``draws[i]``.

    Distances are exact differences, so rows already chosen score exactly
    zero and can never be picked twice while any positive mass remains.
    """
    n, d = x.shape
    closest = np.empty(n)
    for r in range(n):
        s = 0.0
        for t in range(d):
            diff = x[r, t] - x[first, t]
            s += diff * diff
        closest[r] = s
    chosen[0] = first
    for i in range(1, chosen.shape[0]):
        total = 0.0
        for r in range(n):
            total += closest[r]
        if total > 0.0:
            target = draws[i] * total
            acc = 0.0
            pick = n - 1
            for r in range(n):
                acc += closest[r]
                if acc > target:
                    pick = r
                    break
            while closest[pick] == 0.0:
                pick -= 1
        else:
            pick = min(int(draws[i] * n), n - 1)
        chosen[i] = pick
        for r in range(n):
            s = 0.0
            for t in range(d):
                diff = x[r, t] - x[pick, t]
                s += diff * diff
            if s < closest[r]:
                closest[r] = s
