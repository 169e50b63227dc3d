"""Pure-numpy shortest-augmenting-path solver for the square assignment problem.

This is the O(n^3) Kuhn-Munkres variant with row/column potentials. The
numba backend compiles the scalar-loop twin of this routine; the vectorized
updates here perform the same comparisons in the same element order (argmin
takes the first minimum, matching the scalar scan), so both backends return
identical assignments and bit-identical potentials.
"""

from __future__ import annotations

import numpy as np


def min_cost_square(cost):
    """Solve an n x n min-cost assignment; returns col -> row (0-based)."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # p[j]: 1-based row matched to column j (column 0 is the virtual root)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    cols = np.arange(n + 1)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            idx = cols[free]
            cur = cost[i0 - 1, idx - 1] - u[i0] - v[idx]
            better = cur < minv[idx]
            upd = idx[better]
            minv[upd] = cur[better]
            way[upd] = j0
            slack = minv[idx]
            k = int(np.argmin(slack))
            delta = slack[k]
            j1 = int(idx[k])
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1
    return p[1:] - 1
