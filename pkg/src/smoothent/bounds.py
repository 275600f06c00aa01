"""Closed-form constants, the plug-in bias lower bound and a divergent-chi^2 example.

The constant evaluators take a :class:`BoundQuery` and read only the fields
they need.  All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .mixture import DiscreteDistribution


class NumericError(RuntimeError):
    """A numerical routine failed; ``partial`` holds whatever was computed."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class BoundQuery:
    """Parameters for the bound evaluators; unset fields are ``None``."""

    d: int | None = None
    sigma: float | None = None
    k_subg: float | None = None
    diameter: float | None = None
    n: int | None = None
    eps: float | None = None
    moment_m: float | None = None

    def need(self, *names: str):
        vals = []
        for name in names:
            v = getattr(self, name)
            if v is None:
                raise ValueError(f"this bound needs '{name}'")
            if name in ("d", "n") and (int(v) != v or v < 1):
                raise ValueError(f"'{name}' must be a positive integer, got {v}")
            if name == "sigma" and not v > 0:
                raise ValueError(f"'sigma' must be positive, got {v}")
            if name in ("k_subg", "diameter", "moment_m") and v < 0:
                raise ValueError(f"'{name}' must be nonnegative, got {v}")
            vals.append(int(v) if name in ("d", "n") else float(v))
        return vals[0] if len(vals) == 1 else tuple(vals)


# ---------------------------------------------------------------------------
# rate constants


def _exp(x: float) -> float:
    """``exp(x)``, or ``inf`` past the double range (the constants get astronomically large)."""
    return math.exp(x) if x < 709.0 else math.inf


def w1_constant(q: BoundQuery) -> float:
    """``sigma sqrt(2d) (1/sqrt2 + K/sigma)^(d/2 + 1) e^(3d/16)``: W1 rate constant."""
    d, s, k = q.need("d", "sigma", "k_subg")
    return s * math.sqrt(2 * d) * (2 ** -0.5 + k / s) ** (d / 2 + 1) * _exp(3 * d / 16)


def tv_constant(q: BoundQuery) -> float:
    """``(1/sqrt2 + K/sigma)^(d/2) e^(3d/16)``: total-variation rate constant."""
    d, s, k = q.need("d", "sigma", "k_subg")
    return (2 ** -0.5 + k / s) ** (d / 2) * _exp(3 * d / 16)


def chi2_constant(q: BoundQuery) -> float:
    """Bound on the chi^2 mutual information for K-subgaussian P with K < sigma/2."""
    d, s, k = q.need("d", "sigma", "k_subg")
    if not k < s / 2:
        raise ValueError(f"needs K < sigma/2 = {s / 2}, got K = {k}")
    r = (k / s) ** 2
    return _exp(2 * d * r * (s * s - 2 * k * k) / (s * s - 4 * k * k))


def chi2_bounded_constant(q: BoundQuery) -> float:
    """``exp(D^2 / sigma^2)`` for P supported on a set of diameter D."""
    s, dia = q.need("sigma", "diameter")
    return _exp(dia * dia / (s * s))


def plugin_risk_constant_bounded(q: BoundQuery) -> float:
    """Plug-in absolute-risk constant for P supported in ``[-1, 1]^d``.

    ``2 sqrt((s^2 d (2 + d)(2 + s^2) + 8 d^2) / (4 s^4)) e^(2d / s^2)``;
    the risk is at most this over ``sqrt(n)``.
    """
    d, s = q.need("d", "sigma")
    s2 = s * s
    return 2.0 * math.sqrt((s2 * d * (2 + d) * (2 + s2) + 8 * d * d) / (4 * s2 * s2)) * _exp(2 * d / s2)


def plugin_risk_constant_subg(q: BoundQuery) -> float:
    """Plug-in absolute-risk constant for K-subgaussian P.

    The squared-risk bound is
    ``64 (2 d^2 K^4 + d (d + 2)(K + s/sqrt2)^4) / s^4 * ((1/sqrt2 + K/s) e^(3/8))^d``;
    this returns its square root so it is comparable to the bounded case.
    """
    d, s, k = q.need("d", "sigma", "k_subg")
    lead = 64.0 * (2 * d * d * k ** 4 + d * (d + 2) * (k + s / math.sqrt(2)) ** 4) / s ** 4
    return math.sqrt(lead) * _exp(0.5 * d * (math.log(2 ** -0.5 + k / s) + 0.375))


# ---------------------------------------------------------------------------
# bias lower bound


def binary_entropy(p: float) -> float:
    """``-p log p - (1 - p) log(1 - p)`` in nats, with ``0 log 0 = 0``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    out = 0.0
    if p > 0:
        out -= p * math.log(p)
    if p < 1:
        out -= (1 - p) * math.log1p(-p)
    return out


def q_function(x: float) -> float:
    """Standard normal upper tail ``P(N(0,1) > x)``."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def q_inverse(y: float) -> float:
    """Inverse of :func:`q_function` on ``(0, 1/2)``.

    Bracketed bisection to 1e-12, then two Newton steps.
    """
    if not 0.0 < y < 0.5:
        raise ValueError(f"q_inverse needs y in (0, 1/2), got {y}")
    lo, hi = 0.0, 40.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if q_function(mid) > y:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(2):
        dens = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if dens == 0.0:
            break
        x += (q_function(x) - y) / dens
    return x


def k_star_window(d: int, sigma: float) -> tuple[float, float]:
    """The admissible ``eps`` interval ``(1 - (1 - 2Q(1/(2 sigma)))^d, 1]``."""
    lo = -math.expm1(d * math.log1p(-2.0 * q_function(1.0 / (2.0 * sigma))))
    return lo, 1.0


def k_star(d: int, sigma: float, eps: float) -> int:
    """Grid resolution ``floor(1 / (sigma Q^-1((1 - (1 - eps)^(1/d)) / 2)))``."""
    if d < 1 or not sigma > 0:
        raise ValueError("d must be >= 1 and sigma positive")
    lo, hi = k_star_window(d, sigma)
    if not lo < eps <= hi:
        raise ValueError(f"eps = {eps} lies outside the admissible window ({lo:.6g}, {hi}]")
    if eps == 1.0:
        raise ValueError("k_star is unbounded at eps = 1")
    y = -0.5 * math.expm1(math.log1p(-eps) / d)
    return int(math.floor(1.0 / (sigma * q_inverse(y))))


def bias_lower_bound(d: int, sigma: float, eps: float, n: int) -> float:
    """``d (1 - eps) log k_star - log n - H_b(eps)``; negative values are vacuous."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = k_star(d, sigma, eps)
    return d * (1 - eps) * math.log(k) - math.log(n) - binary_entropy(eps)


# ---------------------------------------------------------------------------
# diverging chi^2 construction


@dataclass(frozen=True)
class CounterexampleSpec:
    """Atoms ``r_0 = 0, r_1 = 1, r_k = r_{k-1} / (1 - sqrt(2 eps))`` up to ``k_atoms``."""

    eps: float = 0.25
    k_atoms: int = 10
    sigma: float = 1.0

    def __post_init__(self):
        if self.k_atoms < 2:
            raise ValueError(f"k_atoms must be >= 2, got {self.k_atoms}")
        if not 0.0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 1/2), got {self.eps}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


# beyond this many atoms r_k^2 overflows double precision
_MAX_ATOMS = 250


def counterexample_atoms(eps: float, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Radii ``r_0..r_k_max`` and log-probabilities, with the full tail in ``p_0``.

    Log-probabilities stay finite far past the point where ``p_k`` itself
    underflows.
    """
    if k_max > _MAX_ATOMS:
        raise ValueError(f"at most {_MAX_ATOMS} atoms are representable")
    ratio = 1.0 / (1.0 - math.sqrt(2.0 * eps))
    r = np.empty(k_max + 1)
    r[0], r[1] = 0.0, 1.0
    for k in range(2, k_max + 1):
        r[k] = r[k - 1] * ratio
    log_c = math.log(2.0 * math.sqrt(eps / math.pi))
    log_p = log_c - eps * r * r
    # full tail, summed until the terms vanish
    tail = []
    rk, k = 1.0, 1
    while True:
        term = math.exp(log_c - eps * rk * rk)
        tail.append(term)
        if term == 0.0 or (k > 2 and term < 1e-300):
            break
        rk *= ratio
        k += 1
    p0 = 1.0 - math.fsum(tail)
    if p0 < 0:
        raise ValueError(f"eps = {eps} gives tail mass {1 - p0} > 1")
    log_p[0] = math.log(p0)
    return r, log_p


def build_counterexample(spec: CounterexampleSpec, renormalize: bool = False) -> DiscreteDistribution:
    """The truncated atom set ``r_0..r_K`` with the untruncated weights.

    ``p_0`` absorbs the full infinite tail, so the truncated weights miss
    only ``sum_{k > K} p_k``.  When that remainder exceeds 1e-12 the result
    is only a distribution after ``renormalize=True``.
    """
    r, log_p = counterexample_atoms(spec.eps, spec.k_atoms)
    p = np.exp(log_p)
    missing = 1.0 - math.fsum(p)
    if renormalize:
        p = p / math.fsum(p)
    elif abs(missing) > 1e-12:
        raise ValueError(f"truncation at {spec.k_atoms} atoms drops mass {missing:.3g}; pass renormalize=True")
    return DiscreteDistribution(r.reshape(-1, 1), p)


def divergence_diagnostic(spec: CounterexampleSpec, k_max: int) -> list[float]:
    """Cumulative window integrals of ``E phi_{s/sqrt2}(z - S) / E phi_s(z - S)``.

    Window ``k`` is ``[r_k - s/100, r_k + s/100]``.  The integrand is written
    in the offset ``u = z - r_k`` and in log space, so it stays accurate for
    atoms whose weights underflow.  Atoms up to ``k_max + 5`` are included.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    s = spec.sigma
    r, log_p = counterexample_atoms(spec.eps, k_max + 5)
    log_num_c = -math.log(s * math.sqrt(math.pi))
    log_den_c = -math.log(s * math.sqrt(2.0 * math.pi))
    half = s / 100.0
    sums: list[float] = []
    total = 0.0
    for k in range(1, k_max + 1):
        gap = r[k] - r
        # weights relative to atom k keep the own term exact when log p_k is huge
        rel = log_p - log_p[k]

        def ratio(u, gap=gap, rel=rel):
            t = gap + u
            t2 = t * t / (s * s)
            return math.exp((logsumexp(rel - t2) - logsumexp(rel - 0.5 * t2)) + (log_num_c - log_den_c))

        val, err, info = integrate.quad(ratio, -half, half, epsabs=1e-13, epsrel=1e-10, full_output=True)[:3]
        if not math.isfinite(val) or err > 1e-6 * max(abs(val), 1e-300):
            raise NumericError(f"window integral {k} did not converge", partial=sums)
        total += val
        sums.append(total)
    return sums
