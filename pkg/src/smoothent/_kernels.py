"""Compiled inner loops for Gaussian kernel sums.

:func:`log_kernel_sum` evaluates ``log sum_j exp(a_j - |p - c_j|^2 / (2 s^2))``
for every row ``p``.  Exponents and their row maxima come from a compiled
loop, the exponentials and row sums from numpy.  Every row is handled on its
own, so results do not depend on how callers split the points.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# elements of the (points x centers) scratch buffer
_BUF_ELEMS = 1 << 19

# exact flags only: keep inf semantics, allow contraction and vectorised max
_FLAGS = {"contract", "reassoc", "nsz"}

_EXP_FLOOR = -705.0


@njit(nogil=True, cache=True, fastmath=_FLAGS)
def _shifted_exponents(points, centers_t, log_w, inv2s2, skip, buf, row_max):
    n_pts, d = points.shape
    k = centers_t.shape[1]
    for p in range(n_pts):
        row = buf[p]
        for j in range(k):
            row[j] = 0.0
        for a in range(d):
            x = points[p, a]
            for j in range(k):
                diff = x - centers_t[a, j]
                row[j] += diff * diff
        for j in range(k):
            row[j] = log_w[j] - row[j] * inv2s2
        if skip[p] >= 0:
            row[skip[p]] = -np.inf
        m = -np.inf
        for j in range(k):
            m = max(m, row[j])
        row_max[p] = m
        # clamping keeps exp out of the subnormal range; the error is below 1e-307 per term
        for j in range(k):
            row[j] = max(row[j] - m, _EXP_FLOOR)


def log_kernel_sum(points, centers, log_w, inv2s2: float, skip=None) -> np.ndarray:
    """Row-wise log-sum-exp of Gaussian kernel exponents.

    ``skip[p] >= 0`` leaves center ``skip[p]`` out of row ``p``.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers_t = np.ascontiguousarray(np.asarray(centers, dtype=np.float64).T)
    log_w = np.ascontiguousarray(log_w, dtype=np.float64)
    n, k = points.shape[0], centers_t.shape[1]
    if skip is None:
        skip = np.full(n, -1, dtype=np.int64)
    else:
        skip = np.ascontiguousarray(skip, dtype=np.int64)
    out = np.empty(n)
    step = max(1, _BUF_ELEMS // max(k, 1))
    buf = np.empty((min(step, n), k))
    row_max = np.empty(min(step, n))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        b, m = buf[: hi - lo], row_max[: hi - lo]
        _shifted_exponents(points[lo:hi], centers_t, log_w, float(inv2s2), skip[lo:hi], b, m)
        np.exp(b, out=b)
        out[lo:hi] = m + np.log(np.sum(b, axis=1))
    return out
