"""Differential entropy of Gaussian mixtures and of smoothed empirical measures.

The main routine, :func:`mixture_entropy_mc`, estimates ``h(g)`` for a
mixture ``g = sum_i w_i N(mu_i, sigma^2 I)`` by drawing ``n_mc`` points
around every center and averaging ``-log g``.  Given the mixture the
estimate is unbiased; its mean squared error is certified by
:func:`mc_mse_bound`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .mixture import (
    CUTOFF,
    LOG_2PI,
    GaussianMixture,
    SampleMatrix,
    canonical_order,
    smooth_empirical,
)
from ._kernels import log_kernel_sum
from .rng import pmap, stream

# points x neighbours per evaluation block
_BLOCK_ELEMS = 1 << 20
# below this many modes the exhaustive path is always taken
_PRUNE_MIN_MODES = 64
# fall back to exhaustive evaluation when pruning keeps more than this fraction
_PRUNE_MAX_FILL = 0.25
# above this dimension kd-trees lose to brute force
KDTREE_MAX_DIM = 15


class MseBoundMode(str, enum.Enum):
    BOUNDED_SUPPORT = "bounded_support"
    BOUNDED_MOMENT = "bounded_moment"


@dataclass(frozen=True)
class McBudget:
    """Monte Carlo budget: ``n_mc`` draws per center plus the MSE-bound regime.

    ``support_or_moment_param`` is unused for bounded support (centers in
    ``[-1, 1]^d``) and is ``m = E|C|^2`` for the bounded-moment regime.
    """

    n_mc: int
    mse_bound_mode: MseBoundMode = MseBoundMode.BOUNDED_SUPPORT
    support_or_moment_param: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mse_bound_mode", MseBoundMode(self.mse_bound_mode))
        if int(self.n_mc) != self.n_mc or self.n_mc < 1:
            raise ValueError(f"n_mc must be a positive integer, got {self.n_mc}")
        object.__setattr__(self, "n_mc", int(self.n_mc))
        if self.support_or_moment_param < 0:
            raise ValueError("support_or_moment_param must be nonnegative")


@dataclass(frozen=True)
class EstimateReport:
    """An entropy (or mutual information) estimate in nats."""

    value: float
    std_error: float
    n: int
    n_mc: int
    seed: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"estimate is not finite: {self.value}")
        if not (math.isfinite(self.std_error) and self.std_error >= 0):
            raise ValueError(f"std_error must be finite and nonnegative: {self.std_error}")


def gaussian_entropy_analytic(d: int, sigma: float) -> float:
    """``(d/2) log(2 pi e sigma^2)``, the entropy of ``N(0, sigma^2 I_d)``."""
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return 0.5 * d * (LOG_2PI + 1.0 + 2.0 * math.log(sigma))


def mc_mse_bound(budget: McBudget, d: int, sigma: float, n: int) -> float:
    """Upper bound on the MSE of :func:`mixture_entropy_mc` for ``n`` centers.

    Bounded support: ``2d(2 + s^2) / s^2 / (n n_mc)``.
    Bounded moment ``m``:
    ``[9 d s^2 + 8(2 + s sqrt(d)) m + 3(11 s sqrt(d) + 1) sqrt(m)] / s^2 / (n n_mc)``.
    """
    if d < 1 or n < 1 or not sigma > 0:
        raise ValueError("d, n and sigma must be positive")
    s2 = sigma * sigma
    scale = 1.0 / (n * budget.n_mc)
    if budget.mse_bound_mode is MseBoundMode.BOUNDED_SUPPORT:
        return 2.0 * d * (2.0 + s2) / s2 * scale
    m = budget.support_or_moment_param
    sd = sigma * math.sqrt(d)
    num = 9.0 * d * s2 + 8.0 * (2.0 + sd) * m + 3.0 * (11.0 * sd + 1.0) * math.sqrt(m)
    return num / s2 * scale


# ---------------------------------------------------------------------------
# Monte Carlo integrator


def _mc_moments(mix: GaussianMixture, n_mc: int, seed: int, workers: int, prune: bool):
    """Per-center mean and centered second moment of ``log g(mu_i + Z)``.

    Rows are put in canonical order first so the result does not depend on
    how the mixture's modes are listed.
    """
    keep = mix.weights > 0
    centers = mix.centers[keep]
    w = mix.weights[keep]
    order = canonical_order(centers, w)
    centers = np.ascontiguousarray(centers[order])
    w = w[order]
    log_w = np.log(w)
    n, d = centers.shape
    sigma = mix.sigma
    inv2s2 = 0.5 / (sigma * sigma)
    norm = 0.5 * d * (LOG_2PI + 2.0 * math.log(sigma))

    tree = None
    # every reach is at least sigma sqrt(2 CUTOFF); a cloud narrower than that cannot be pruned
    diag = float(np.linalg.norm(np.ptp(centers, axis=0)))
    if prune and n >= _PRUNE_MIN_MODES and d <= KDTREE_MAX_DIM and diag > sigma * math.sqrt(2 * CUTOFF):
        tree = cKDTree(centers)
        slack = 2.0 * sigma * sigma * (CUTOFF + log_w.max() - log_w)

    # centers per random stream; depends only on n_mc so output is schedule-free
    per_chunk = max(1, min(64, _BLOCK_ELEMS // (4 * n_mc)))
    chunks = [(c, lo, min(n, lo + per_chunk)) for c, lo in enumerate(range(0, n, per_chunk))]

    def one_chunk(ch):
        c, lo, hi = ch
        z = sigma * stream(seed, "mc", c).standard_normal(((hi - lo) * n_mc, d))
        vals = np.empty((hi - lo, n_mc))
        full = list(range(hi - lo))
        if tree is not None:
            full = []
            for k, i in enumerate(range(lo, hi)):
                zi = z[k * n_mc:(k + 1) * n_mc]
                # a mode farther than reach from mu_i sits more than CUTOFF below
                # the self term at every draw
                r = math.sqrt(float(np.max(np.einsum("ij,ij->i", zi, zi))))
                reach = r + math.sqrt(r * r + slack[i])
                cand = tree.query_ball_point(centers[i], reach)
                if len(cand) > _PRUNE_MAX_FILL * n:
                    full.append(k)
                    continue
                idx = np.sort(np.asarray(cand, dtype=np.intp))
                vals[k] = log_kernel_sum(zi, centers[idx] - centers[i], log_w[idx], inv2s2)
        if full:
            # centers without useful pruning share one exhaustive pass
            sel = np.asarray(full)
            pts = np.repeat(centers[lo + sel], n_mc, axis=0) + z.reshape(hi - lo, n_mc, d)[sel].reshape(-1, d)
            vals[sel] = log_kernel_sum(pts, centers, log_w, inv2s2).reshape(sel.size, n_mc)
        vals -= norm
        mu = vals.mean(axis=1)
        dev = vals - mu[:, None]
        return mu, np.einsum("ij,ij->i", dev, dev)

    res = pmap(one_chunk, chunks, workers)
    means = np.concatenate([r[0] for r in res])
    m2 = np.concatenate([r[1] for r in res])
    return w, means, m2


def mixture_entropy_mc(
    mix: GaussianMixture,
    budget: McBudget,
    seed: int,
    workers: int = 1,
    prune: bool = True,
) -> EstimateReport:
    """Monte Carlo entropy of a Gaussian mixture, in nats.

    ``value = -sum_i w_i (1/n_mc) sum_j log g(mu_i + Z_ij)`` with fresh
    ``Z_ij ~ N(0, sigma^2 I)`` from a stream per (canonically ordered)
    center.  The standard error treats the ``n * n_mc`` log-density terms
    as one weighted sample.

    With ``prune`` the density at each draw skips modes whose kernel
    exponent is provably more than 40 below the draw's own center term; the
    result then differs from the exhaustive one by less than ``n e^-40``
    relative in every density value.
    """
    if mix.truncation is not None:
        raise ValueError("entropy of a truncated mixture is not available")
    n_mc = budget.n_mc
    w, means, m2 = _mc_moments(mix, n_mc, seed, workers, prune)
    overall = math.fsum(w * means)
    # pooled variance of all terms, each center weighted by w_i
    n_terms = means.size * n_mc
    s2 = math.fsum(w * (m2 / n_mc + (means - overall) ** 2))
    if n_terms > 1:
        s2 *= n_terms / (n_terms - 1)
    se = math.sqrt(s2 * math.fsum(w * w) / n_mc)
    return EstimateReport(-overall, se, int(mix.n_modes), n_mc, seed)


def plugin_entropy(
    samples: SampleMatrix,
    sigma: float,
    budget: McBudget,
    seed: int,
    workers: int = 1,
) -> EstimateReport:
    """The plug-in estimate ``h(P_n * N_sigma)`` of ``h(P * N_sigma)``."""
    rep = mixture_entropy_mc(smooth_empirical(samples, sigma), budget, seed, workers)
    return rep


# ---------------------------------------------------------------------------
# baselines


def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d + 1.0))


def nearest_neighbour_distances(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance from each row to its nearest other row, and that row's index."""
    n, d = rows.shape
    if d <= KDTREE_MAX_DIM:
        dist, idx = cKDTree(rows).query(rows, k=2)
        # with duplicates the self match need not come first
        self_first = idx[:, 0] == np.arange(n)
        nn = np.where(self_first, idx[:, 1], idx[:, 0])
        rho = np.where(self_first, dist[:, 1], dist[:, 0])
        return rho, nn
    rho = np.empty(n)
    nn = np.empty(n, dtype=np.intp)
    sq_norm = np.einsum("ij,ij->i", rows, rows)
    step = max(1, _BLOCK_ELEMS // n)
    for lo in range(0, n, step):
        blk = rows[lo:lo + step]
        sq = sq_norm[lo:lo + step, None] - 2.0 * blk @ rows.T + sq_norm[None, :]
        sq[np.arange(blk.shape[0]), np.arange(lo, lo + blk.shape[0])] = np.inf
        j = np.argmin(sq, axis=1)
        nn[lo:lo + step] = j
        rho[lo:lo + step] = np.sqrt(np.sum((blk - rows[j]) ** 2, axis=1))
    return rho, nn


def knn_kl_entropy(samples: SampleMatrix, seed: int = 0) -> EstimateReport:
    """Kozachenko-Leonenko 1-nearest-neighbour entropy estimate.

    ``psi(n) - psi(1) + log V_d + (d/n) sum_i log rho_i``.  Ships no error bar,
    so ``std_error`` is 0.
    """
    rows = samples.rows
    n, d = rows.shape
    if n < 2:
        raise ValueError("the nearest-neighbour estimator needs n >= 2")
    rho, nn = nearest_neighbour_distances(rows)
    dup = np.flatnonzero(rho == 0.0)
    if dup.size:
        pairs = sorted({tuple(sorted((int(i), int(nn[i])))) for i in dup[:10]})
        raise ValueError(f"duplicate sample rows at indices {pairs}; nearest-neighbour distance is zero")
    val = float(digamma(n) - digamma(1)) + log_unit_ball_volume(d) + d * float(np.mean(np.log(rho)))
    return EstimateReport(val, 0.0, n, 0, seed)


def kde_entropy(samples: SampleMatrix, bandwidth: float, seed: int = 0) -> EstimateReport:
    """Leave-one-out Gaussian-KDE resubstitution entropy.

    ``-(1/n) sum_i log f_{-i}(S_i)`` with ``f_{-i}`` the KDE of the other
    ``n - 1`` rows.  Rows are swept in order of their first coordinate and
    each block only sees rows within a window that provably carries every
    kernel term above ``e^-40`` times the block's largest.
    """
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    rows = samples.rows
    n, d = rows.shape
    if n < 2:
        raise ValueError("the KDE estimator needs n >= 2")
    order = np.argsort(rows[:, 0], kind="stable")
    x = rows[order]
    inv = 0.5 / (bandwidth * bandwidth)
    if d <= KDTREE_MAX_DIM:
        rho, _ = nearest_neighbour_distances(x)
        reach = np.sqrt(rho * rho + 2.0 * bandwidth * bandwidth * (CUTOFF + math.log(n)))
    else:
        reach = np.full(n, np.inf)
    first = x[:, 0]
    step = 512
    logf = np.empty(n)
    log_w = np.zeros(n)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        r = reach[lo:hi].max()
        a = int(np.searchsorted(first, first[lo] - r, side="left"))
        b = int(np.searchsorted(first, first[hi - 1] + r, side="right"))
        # leave each point itself out
        skip = np.arange(lo - a, hi - a)
        logf[lo:hi] = log_kernel_sum(x[lo:hi], x[a:b], log_w[a:b], inv, skip)
    logf -= math.log(n - 1) + 0.5 * d * (LOG_2PI + 2.0 * math.log(bandwidth))
    return EstimateReport(-float(np.mean(logf)), float(np.std(logf, ddof=1) / math.sqrt(n)), n, 0, seed)
