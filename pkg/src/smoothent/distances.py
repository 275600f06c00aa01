"""Statistical distances between Gaussian mixtures and convergence-rate fits.

Divergences between two mixtures ``q`` and ``r`` are estimated by importance
sampling (any dimension) or by adaptive quadrature (d = 1).  Wasserstein
distances are exact optimal-transport costs between equal-size point
clouds.  :func:`convergence_table` measures how fast the smoothed empirical
measure approaches the smoothed truth as ``n`` grows.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .bounds import NumericError
from .mixture import (
    DiscreteDistribution,
    GaussianMixture,
    SampleMatrix,
    log_density,
    sample,
    sample_discrete,
    smooth_discrete,
)
from .rng import derive_seed, pmap, stream

# cubic assignment solver guard
MAX_OT_POINTS = 4096
# adaptive quadrature budget
MAX_QUAD_EVALS = 1_000_000


class DistanceKind(str, enum.Enum):
    TV = "tv"
    KL = "kl"
    CHI2 = "chi2"
    W1 = "w1"
    W2SQ = "w2sq"


@dataclass(frozen=True)
class DistanceEstimate:
    """One distance estimate; ``heavy_tail`` flags an unreliable chi^2 average."""

    kind: DistanceKind
    value: float
    std_error: float
    n_points: int
    seed: int
    heavy_tail: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", DistanceKind(self.kind))


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through ``(log n, log value)`` points."""

    slope: float
    intercept: float
    r_squared: float
    points: tuple[tuple[float, float], ...] = field(default_factory=tuple)


def fit_loglog(ns, values) -> RateFit:
    """Fit ``log value = intercept + slope log n`` by ordinary least squares."""
    ns, values = np.asarray(ns, dtype=float), np.asarray(values, dtype=float)
    if np.any(ns <= 0) or np.any(values <= 0):
        raise ValueError("log-log fits need positive sizes and values")
    return fit_line(np.log(ns), np.log(values))


def fit_line(x, y) -> RateFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise ValueError(f"a rate fit needs at least 3 points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("rate-fit points must be finite (values must be positive)")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise ValueError("rate-fit abscissae must not all be equal")
    slope = float(np.sum((x - xm) * (y - ym))) / sxx
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    syy = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if syy == 0 else max(0.0, 1.0 - float(np.sum(resid ** 2)) / syy)
    return RateFit(slope, intercept, r2, tuple(zip(x.tolist(), y.tolist())))


# ---------------------------------------------------------------------------
# importance-sampled divergences


def _check_pair(q: GaussianMixture, r: GaussianMixture, n_points: int) -> None:
    if q.dim != r.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {r.dim}")
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")


def _mean_se(terms: np.ndarray) -> tuple[float, float]:
    return float(np.mean(terms)), float(np.std(terms, ddof=1) / math.sqrt(terms.size))


def tv_mc(q_mix: GaussianMixture, r_mix: GaussianMixture, n_points: int, seed: int) -> DistanceEstimate:
    """Total variation ``(1/2) int |q - r|`` with proposal ``f = (q + r)/2``.

    Each term is ``|q - r| / (q + r) = |tanh((log q - log r) / 2)|``, so it lies
    in ``[0, 1]`` and vanishes exactly where the densities agree.
    """
    _check_pair(q_mix, r_mix, n_points)
    n_q = int(np.sum(stream(seed, "tv", "coin").random(n_points) < 0.5))
    parts = []
    if n_q:
        parts.append(sample(q_mix, n_q, derive_seed(seed, "tv", "q")).rows)
    if n_points - n_q:
        parts.append(sample(r_mix, n_points - n_q, derive_seed(seed, "tv", "r")).rows)
    z = np.vstack(parts)
    terms = np.abs(np.tanh(0.5 * (log_density(q_mix, z) - log_density(r_mix, z))))
    val, se = _mean_se(terms)
    return DistanceEstimate(DistanceKind.TV, min(max(val, 0.0), 1.0), se, n_points, seed)


def kl_mc(q_mix: GaussianMixture, r_mix: GaussianMixture, n_points: int, seed: int) -> DistanceEstimate:
    """``D(q || r)`` as the mean of ``log q - log r`` over ``z ~ q``; not clamped."""
    _check_pair(q_mix, r_mix, n_points)
    z = sample(q_mix, n_points, derive_seed(seed, "kl")).rows
    val, se = _mean_se(log_density(q_mix, z) - log_density(r_mix, z))
    return DistanceEstimate(DistanceKind.KL, val, se, n_points, seed)


def heavy_tail(terms: np.ndarray, top: float = 0.01, share: float = 0.5) -> bool:
    """True when the largest ``top`` fraction of terms carry over ``share`` of the sum."""
    total = float(np.sum(terms))
    if total <= 0:
        return False
    k = max(1, int(math.ceil(top * terms.size)))
    return float(np.sum(np.partition(terms, terms.size - k)[-k:])) > share * total


def chi2_mc(r_mix: GaussianMixture, q_mix: GaussianMixture, n_points: int, seed: int) -> DistanceEstimate:
    """``chi^2(r || q)``: the mean of ``(r/q - 1)^2`` over ``z ~ q``.

    The average is flagged ``heavy_tail=True`` when a few draws dominate it,
    or when the likelihood ratios ``r/q`` (whose exact mean is 1) average
    below 1/2 or above 3/2: then the region that carries ``r`` was never
    sampled and no tail share can reveal it.
    """
    _check_pair(q_mix, r_mix, n_points)
    z = sample(q_mix, n_points, derive_seed(seed, "chi2")).rows
    log_ratio = log_density(r_mix, z) - log_density(q_mix, z)
    terms = np.expm1(log_ratio) ** 2
    val, se = _mean_se(terms)
    ratio_mean = float(np.mean(np.exp(np.minimum(log_ratio, 700.0))))
    flag = heavy_tail(terms) or not 0.5 <= ratio_mean <= 1.5
    return DistanceEstimate(DistanceKind.CHI2, val, se, n_points, seed, flag)


# ---------------------------------------------------------------------------
# one-dimensional quadrature


def _quad_range(points: np.ndarray, sigma: float) -> tuple[float, float]:
    lo, hi = float(points.min()), float(points.max())
    pad = 10.0 * sigma * max(1.0, hi - lo)
    return lo - pad, hi + pad


def piecewise_quad(f, lo: float, hi: float, breaks, tol: float = 1e-8) -> float:
    """Adaptive quadrature of ``f`` over ``[lo, hi]``, split at ``breaks``.

    Raises :class:`NumericError` (with the partial integral) on failure or
    once more than a million integrand evaluations have been spent.
    """
    knots = np.unique(np.clip(np.concatenate([[lo, hi], np.asarray(breaks, float)]), lo, hi))
    total = 0.0
    evals = 0
    for a, b in zip(knots[:-1], knots[1:]):
        val, err, info, *rest = integrate.quad(f, a, b, epsabs=tol * 1e-2, epsrel=tol, limit=500, full_output=True)
        evals += info["neval"]
        if rest and err > max(tol * abs(val), 1e-12):
            raise NumericError(f"quadrature did not converge on [{a}, {b}]: {rest[0]}", partial=total)
        if evals > MAX_QUAD_EVALS:
            raise NumericError("quadrature exceeded 1e6 integrand evaluations", partial=total + val)
        total += val
    return total


def _require_1d(*mixes: GaussianMixture) -> None:
    for m in mixes:
        if m.dim != 1:
            raise ValueError("quadrature routines need d = 1")


def _breaks(*mixes: GaussianMixture) -> np.ndarray:
    c = np.concatenate([m.centers[:, 0] for m in mixes])
    if c.size > 200:
        c = np.quantile(c, np.linspace(0, 1, 201))
    return c


def divergence_quadrature_1d(kind: DistanceKind | str, q_mix: GaussianMixture, r_mix: GaussianMixture) -> float:
    """TV, ``D(q || r)`` or ``chi^2(r || q)`` between one-dimensional mixtures.

    Integrands are formed from log densities: ``q |tanh((lq - lr)/2)| (q + r)/(2q)``
    style identities keep them nonnegative and free of cancellation.
    """
    kind = DistanceKind(kind)
    _require_1d(q_mix, r_mix)
    both = np.concatenate([q_mix.centers[:, 0], r_mix.centers[:, 0]])
    lo, hi = _quad_range(both, max(q_mix.sigma, r_mix.sigma))

    def logs(z):
        pt = np.array([[z]])
        return float(log_density(q_mix, pt)[0]), float(log_density(r_mix, pt)[0])

    if kind is DistanceKind.TV:
        def f(z):
            lq, lr = logs(z)
            m = max(lq, lr)
            return 0.5 * abs(math.exp(lq - m) - math.exp(lr - m)) * math.exp(m)
    elif kind is DistanceKind.KL:
        def f(z):
            lq, lr = logs(z)
            # q (log q/r) - q + r is pointwise nonnegative and integrates to KL
            t = lq - lr
            return math.exp(lr) * (t * math.exp(t) - math.expm1(t)) if t < 700 else math.exp(lq) * t
    elif kind is DistanceKind.CHI2:
        def f(z):
            lq, lr = logs(z)
            t = lr - lq
            if t < 1.0:
                return math.exp(lq) * math.expm1(t) ** 2
            # q (r/q - 1)^2 in log space; r/q can exceed the double range
            return math.exp(lq + 2.0 * (t + math.log1p(-math.exp(-t))))
    else:
        raise ValueError("quadrature is available for tv, kl and chi2")
    return piecewise_quad(f, lo, hi, _breaks(q_mix, r_mix))


def chi2_quadrature_1d(r_mix: GaussianMixture, q_mix: GaussianMixture) -> float:
    """``chi^2(r || q)`` for one-dimensional mixtures by adaptive quadrature."""
    return divergence_quadrature_1d(DistanceKind.CHI2, q_mix, r_mix)


# ---------------------------------------------------------------------------
# chi^2 mutual information


def _atom_log_kernels(p: DiscreteDistribution, sigma: float, z: np.ndarray) -> np.ndarray:
    """``log phi_sigma(z_m - s_i)`` as an (m, k) array."""
    d = p.dim
    sq = cdist(z, p.atoms, "sqeuclidean")
    return -0.5 * sq / (sigma * sigma) - 0.5 * d * math.log(2 * math.pi * sigma * sigma)


def _chi2_mi_terms(p: DiscreteDistribution, sigma: float, z: np.ndarray) -> np.ndarray:
    """``sum_i p_i (phi(z - s_i)/q(z) - 1)^2``; its q-average is I_chi2."""
    lk = _atom_log_kernels(p, sigma, z)
    keep = p.probs > 0
    lk, lp = lk[:, keep], np.log(p.probs[keep])
    lq = logsumexp(lk + lp[None, :], axis=1)
    return np.sum(p.probs[keep][None, :] * np.expm1(lk - lq[:, None]) ** 2, axis=1)


def chi2_mutual_information(
    p: DiscreteDistribution,
    sigma: float,
    method: str = "quadrature_1d",
    n_points: int = 100_000,
    seed: int = 0,
) -> DistanceEstimate:
    """``I_chi2(S; S + Z)`` for ``S ~ p``, ``Z ~ N(0, sigma^2 I)``.

    Computed as ``int E_p (phi(z - S) - q(z))^2 / q(z) dz``, which equals
    ``int E_p phi(z - S)^2 / q(z) dz - 1`` but has a nonnegative integrand.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if method == "quadrature_1d":
        if p.dim != 1:
            raise ValueError("quadrature_1d needs d = 1")
        lo, hi = _quad_range(p.atoms[:, 0], sigma)
        f = lambda z: float(_chi2_mi_terms(p, sigma, np.array([[z]]))[0]) * math.exp(
            float(log_density(smooth_discrete(p, sigma), np.array([[z]]))[0]))
        val = piecewise_quad(f, lo, hi, _breaks(smooth_discrete(p, sigma)))
        return DistanceEstimate(DistanceKind.CHI2, val, 0.0, 0, seed)
    if method == "mc":
        q = smooth_discrete(p, sigma)
        z = sample(q, n_points, derive_seed(seed, "chi2mi")).rows
        terms = _chi2_mi_terms(p, sigma, z)
        val, se = _mean_se(terms)
        return DistanceEstimate(DistanceKind.CHI2, val, se, n_points, seed, heavy_tail(terms))
    raise ValueError(f"unknown method {method!r}; use 'quadrature_1d' or 'mc'")


# ---------------------------------------------------------------------------
# Wasserstein distances between point clouds


def _ot(a: SampleMatrix, b: SampleMatrix, power: int, force: bool) -> tuple[float, int]:
    x, y = a.rows, b.rows
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"clouds must have equal size, got {x.shape[0]} and {y.shape[0]}")
    m = x.shape[0]
    if m > MAX_OT_POINTS and not force:
        raise ValueError(f"{m} points exceeds the {MAX_OT_POINTS}-point assignment guard; pass force=True")
    if x.shape[1] == 1:
        diff = np.abs(np.sort(x[:, 0]) - np.sort(y[:, 0]))
        return float(np.mean(diff ** power)), m
    cost = cdist(x, y, "euclidean" if power == 1 else "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.mean(cost[rows, cols])), m


def w1_empirical(a: SampleMatrix, b: SampleMatrix, force: bool = False) -> DistanceEstimate:
    """Exact W1 between two equal-size uniform point clouds (Euclidean cost)."""
    val, m = _ot(a, b, 1, force)
    return DistanceEstimate(DistanceKind.W1, val, 0.0, m, a.seed)


def w2sq_empirical(a: SampleMatrix, b: SampleMatrix, force: bool = False) -> DistanceEstimate:
    """Exact squared W2 between two equal-size uniform point clouds."""
    val, m = _ot(a, b, 2, force)
    return DistanceEstimate(DistanceKind.W2SQ, val, 0.0, m, a.seed)


# ---------------------------------------------------------------------------
# convergence experiments


@dataclass(frozen=True)
class RatePoint:
    n: int
    mean: float
    std_error: float
    reps: int


@dataclass(frozen=True)
class DistanceBudget:
    """Sizes for one distance evaluation.

    ``n_points`` is the importance-sampling size, ``ot_points`` the cloud size
    for Wasserstein distances, and ``method`` picks ``"mc"``, ``"quadrature"``
    (d = 1 only) or ``"auto"`` (quadrature whenever d = 1).
    """

    n_points: int = 20_000
    ot_points: int = 1024
    method: str = "auto"


def smoothed_truth(truth: DiscreteDistribution | GaussianMixture, sigma: float) -> GaussianMixture:
    """The law of ``S + Z`` for ``S ~ truth`` as a Gaussian mixture."""
    if isinstance(truth, DiscreteDistribution):
        return smooth_discrete(truth, sigma)
    if truth.truncation is not None:
        raise ValueError("a truncated mixture has no closed-form smoothed law")
    return GaussianMixture(truth.centers, truth.weights, math.hypot(truth.sigma, sigma))


def _draw_truth(truth, n: int, seed: int) -> np.ndarray:
    if isinstance(truth, DiscreteDistribution):
        return sample_discrete(truth, n, seed).rows
    return sample(truth, n, seed).rows


def stratified_counts(probs: np.ndarray, n: int, reps: int, seed: int) -> np.ndarray:
    """Multinomial(n, probs) counts for ``reps`` replicates, Latin-hypercube style.

    Counts are built from sequential conditional binomials; each binomial is
    drawn by inverse CDF from uniforms stratified over the replicates and
    independently permuted.  Every replicate is marginally an exact
    multinomial draw, and replicate averages vary far less than i.i.d. ones.
    """
    rng = stream(seed, "strata")
    k = probs.size
    counts = np.zeros((reps, k), dtype=np.int64)
    left = np.full(reps, n, dtype=np.int64)
    mass = 1.0
    for i in range(k - 1):
        u = (rng.permutation(reps) + rng.random(reps)) / reps
        pi = min(1.0, probs[i] / mass) if mass > 0 else 0.0
        c = stats.binom.ppf(u, left, pi).astype(np.int64)
        c = np.clip(c, 0, left)
        counts[:, i] = c
        left -= c
        mass -= probs[i]
    counts[:, -1] = left
    return counts


def _coupled_clouds(truth, emp: GaussianMixture, sigma: float, m: int, seed: int):
    """``m`` draws from the smoothed empirical and smoothed true laws, coupled.

    Both clouds share their Gaussian noise.  For a discrete truth the two
    centers are drawn from a maximal coupling of the empirical and true
    atom distributions; otherwise they are independent.
    """
    rng = stream(seed, "couple")
    d = emp.dim
    noise = sigma * rng.standard_normal((m, d))
    if isinstance(truth, DiscreteDistribution):
        p = truth.probs
        phat = _empirical_on_atoms(truth, emp)
        overlap = np.minimum(p, phat)
        tv = 1.0 - float(np.sum(overlap))
        same = rng.random(m) >= tv
        base = overlap / max(1.0 - tv, 1e-300)
        ix_same = _inverse_cdf(rng.random(m), base)
        if tv > 0:
            ix_p = _inverse_cdf(rng.random(m), np.maximum(p - overlap, 0) / tv)
            ix_h = _inverse_cdf(rng.random(m), np.maximum(phat - overlap, 0) / tv)
        else:
            ix_p = ix_h = ix_same
        xp = truth.atoms[np.where(same, ix_same, ix_p)]
        xh = truth.atoms[np.where(same, ix_same, ix_h)]
        return SampleMatrix(xh + noise, seed), SampleMatrix(xp + noise, seed)
    xh = emp.centers[_inverse_cdf(rng.random(m), emp.weights)]
    xp = _draw_truth(truth, m, derive_seed(seed, "truth"))
    return SampleMatrix(xh + noise, seed), SampleMatrix(xp + noise, seed)


def _inverse_cdf(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(w)
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), w.size - 1)


def _empirical_on_atoms(truth: DiscreteDistribution, emp: GaussianMixture) -> np.ndarray:
    """Empirical weights re-expressed on the truth's atom list."""
    index = {tuple(a): i for i, a in enumerate(truth.atoms.tolist())}
    out = np.zeros(truth.size)
    for c, w in zip(emp.centers.tolist(), emp.weights):
        out[index[tuple(c)]] += w
    return out


def _empirical_mixture(truth, n: int, sigma: float, seed: int, counts=None) -> GaussianMixture:
    if counts is not None:
        keep = counts > 0
        return GaussianMixture(truth.atoms[keep], counts[keep] / n, sigma)
    rows = _draw_truth(truth, n, seed)
    if isinstance(truth, DiscreteDistribution):
        # same measure as one mode per row, with duplicates pooled by atom
        uniq, cnt = np.unique(rows, axis=0, return_counts=True)
        return GaussianMixture(uniq, cnt / n, sigma)
    return GaussianMixture(rows, np.full(n, 1.0 / n), sigma)


def _one_distance(kind: DistanceKind, truth, emp, q_true, sigma, budget: DistanceBudget, seed: int) -> float:
    quad = budget.method == "quadrature" or (budget.method == "auto" and emp.dim == 1)
    if kind in (DistanceKind.W1, DistanceKind.W2SQ):
        a, b = _coupled_clouds(truth, emp, sigma, budget.ot_points, seed)
        fn = w1_empirical if kind is DistanceKind.W1 else w2sq_empirical
        return fn(a, b).value
    if quad:
        if kind is DistanceKind.KL:
            return divergence_quadrature_1d(kind, emp, q_true)
        return divergence_quadrature_1d(kind, q_true, emp)
    if kind is DistanceKind.TV:
        return tv_mc(emp, q_true, budget.n_points, seed).value
    if kind is DistanceKind.KL:
        return kl_mc(emp, q_true, budget.n_points, seed).value
    return chi2_mc(emp, q_true, budget.n_points, seed).value


def convergence_table(
    truth: DiscreteDistribution | GaussianMixture,
    sigma: float,
    kind: DistanceKind | str,
    n_grid,
    reps: int,
    budget: DistanceBudget = DistanceBudget(),
    seed: int = 0,
    workers: int = 1,
    stratified: bool = False,
) -> list[RatePoint]:
    """Mean distance between the smoothed empirical and smoothed true laws, per n.

    Replicate ``r`` at size ``n`` draws its sample from the stream
    ``(seed, n, r)``.  ``stratified`` (discrete truth only) replaces i.i.d.
    sample draws by :func:`stratified_counts`.
    """
    kind = DistanceKind(kind)
    n_grid = [int(n) for n in n_grid]
    if len(n_grid) < 1 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing")
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if stratified and not isinstance(truth, DiscreteDistribution):
        raise ValueError("stratified draws need a discrete truth")
    q_true = smoothed_truth(truth, sigma)
    table = []
    for n in n_grid:
        counts = stratified_counts(truth.probs, n, reps, derive_seed(seed, "n", n)) if stratified else None

        def rep(r, n=n, counts=counts):
            emp = _empirical_mixture(truth, n, sigma, derive_seed(seed, "sample", n, r),
                                     None if counts is None else counts[r])
            return _one_distance(kind, truth, emp, q_true, sigma, budget, derive_seed(seed, "est", n, r))

        vals = np.array(pmap(rep, range(reps), workers))
        table.append(RatePoint(n, float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(reps)), reps))
    return table


def convergence_experiment(
    truth: DiscreteDistribution | GaussianMixture,
    sigma: float,
    kind: DistanceKind | str,
    n_grid,
    reps: int,
    budget: DistanceBudget = DistanceBudget(),
    seed: int = 0,
    workers: int = 1,
    stratified: bool = False,
) -> RateFit:
    """Log-log slope of the mean distance against ``n`` (at least 3 sizes)."""
    if len(n_grid) < 3:
        raise ValueError("a rate fit needs at least 3 sample sizes")
    table = convergence_table(truth, sigma, kind, n_grid, reps, budget, seed, workers, stratified)
    return fit_loglog([t.n for t in table], [t.mean for t in table])
