"""Isotropic Gaussian mixtures, discrete distributions and sample matrices.

A :class:`GaussianMixture` with centers ``mu_i``, weights ``w_i`` and width
``sigma`` has density ``g(z) = sum_i w_i phi_sigma(z - mu_i)``.  It stands
for both a smoothed empirical measure (uniform weights on the sample rows)
and the exact smoothed law of a discrete distribution.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr

from . import _kernels
from .rng import BLOCK_ROWS, pmap, stream

LOG_2PI = math.log(2.0 * math.pi)

# exponents further than this below the row maximum are dropped by pruned paths
CUTOFF = 40.0


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_probs(p: np.ndarray, name: str) -> None:
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    total = math.fsum(p)
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"{name} must sum to 1 within 1e-12, got {total!r}")


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic Gaussians sharing one width.

    ``truncation``, when set to ``a``, restricts the law to the box
    ``[-a, a]^d``.  Truncated mixtures are sampling-only objects: their
    sampler honors the box but density evaluation refuses them.
    """

    centers: np.ndarray
    weights: np.ndarray
    sigma: float
    truncation: float | None = None

    def __post_init__(self):
        c = _frozen(self.centers, 2, "centers")
        w = _frozen(self.weights, 1, "weights")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sigma", float(self.sigma))
        if c.shape[0] < 1 or c.shape[1] < 1:
            raise ValueError("a mixture needs at least one mode and one dimension")
        if w.shape[0] != c.shape[0]:
            raise ValueError(f"{c.shape[0]} centers but {w.shape[0]} weights")
        if not np.all(np.isfinite(c)):
            raise ValueError("centers must be finite")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        _check_probs(w, "weights")
        if self.truncation is not None and not self.truncation > 0:
            raise ValueError("truncation half-width must be positive")

    @property
    def n_modes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite distribution: ``probs[i]`` mass on the row ``atoms[i]``."""

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        a = _frozen(self.atoms, 2, "atoms")
        p = _frozen(self.probs, 1, "probs")
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "probs", p)
        if a.shape[0] != p.shape[0]:
            raise ValueError(f"{a.shape[0]} atoms but {p.shape[0]} probabilities")
        if a.shape[0] < 1:
            raise ValueError("need at least one atom")
        if not np.all(np.isfinite(a)):
            raise ValueError("atoms must be finite")
        _check_probs(p, "probs")
        if np.unique(a, axis=0).shape[0] != a.shape[0]:
            raise ValueError("atoms must be pairwise distinct")

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]


@dataclass(frozen=True)
class SampleMatrix:
    """``n x d`` i.i.d. draws plus the seed that produced them."""

    rows: np.ndarray
    seed: int = 0

    def __post_init__(self):
        r = _frozen(self.rows, 2, "rows")
        object.__setattr__(self, "rows", r)
        if r.shape[0] < 1:
            raise ValueError("a sample matrix needs at least one row")
        if not np.all(np.isfinite(r)):
            raise ValueError("sample entries must be finite")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


# ---------------------------------------------------------------------------
# density evaluation


def log_kernel_sum(points: np.ndarray, centers: np.ndarray, log_w: np.ndarray, sigma: float) -> np.ndarray:
    """``log sum_j exp(log_w[j] - |p - c_j|^2 / (2 sigma^2))`` for each row ``p``.

    Exhaustive over ``centers``; squared distances are formed from explicit
    coordinate differences so far-away modes keep full relative accuracy.
    """
    return _kernels.log_kernel_sum(np.atleast_2d(points), centers, log_w, 0.5 / (sigma * sigma))


def _active(mix: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    keep = mix.weights > 0
    return mix.centers[keep], np.log(mix.weights[keep])


def log_density(mix: GaussianMixture, z) -> float | np.ndarray:
    """Log density of the mixture at ``z`` (one point of length d, or rows).

    Uses log-sum-exp over every mode, so the result is finite even when each
    individual term underflows: it then reduces to the log of the largest
    term.
    """
    if mix.truncation is not None:
        raise ValueError("density of a truncated mixture is not available")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    pts = z.reshape(1, -1) if single else z
    if pts.ndim != 2 or pts.shape[1] != mix.dim:
        raise ValueError(f"expected points of dimension {mix.dim}, got shape {z.shape}")
    centers, log_w = _active(mix)
    vals = log_kernel_sum(pts, centers, log_w, mix.sigma)
    vals -= 0.5 * mix.dim * (LOG_2PI + 2.0 * math.log(mix.sigma))
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# sampling


def _block_slices(n: int) -> list[tuple[int, int, int]]:
    return [(b, lo, min(n, lo + BLOCK_ROWS)) for b, lo in enumerate(range(0, n, BLOCK_ROWS))]


def _choose(rng: np.random.Generator, cdf: np.ndarray, size: int) -> np.ndarray:
    u = rng.random(size) * cdf[-1]
    # side="right" keeps zero-width (zero-weight) components unreachable
    return np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)


def _box_mass_log(centers: np.ndarray, sigma: float, a: float) -> np.ndarray:
    hi = (a - centers) / sigma
    lo = (-a - centers) / sigma
    return np.sum(log_ndtr_diff(lo, hi), axis=1)


def log_ndtr_diff(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """``log(Phi(hi) - Phi(lo))`` for ``hi > lo``, stable in both tails."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    out = np.empty(lo.shape)
    upper = lo > 0
    # in the upper tail use the mirrored lower-tail form
    a = np.where(upper, -hi, lo)
    b = np.where(upper, -lo, hi)
    lb = log_ndtr(b)
    la = log_ndtr(a)
    out[...] = lb + np.log1p(-np.exp(la - lb))
    return out


def sample(mix: GaussianMixture, n: int, seed: int, workers: int = 1) -> SampleMatrix:
    """Draw ``n`` rows: pick a component by weight, add ``N(0, sigma^2 I)``.

    With ``mix.truncation = a`` the draws follow the mixture restricted to
    ``[-a, a]^d``: components are reweighted by their in-box mass and each
    coordinate is drawn by rejection inside ``[-a, a]``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    w = mix.weights
    if mix.truncation is not None:
        lw = np.log(np.where(w > 0, w, 1.0)) + _box_mass_log(mix.centers, mix.sigma, mix.truncation)
        lw = np.where(w > 0, lw, -np.inf)
        w = np.exp(lw - lw.max())
    cdf = np.cumsum(w)
    d = mix.dim

    def block(args):
        b, lo, hi = args
        rng = stream(seed, "sample", b)
        comp = _choose(rng, cdf, hi - lo)
        noise = rng.standard_normal((hi - lo, d))
        if mix.truncation is not None:
            noise = _reject_box(rng, mix.centers[comp], noise, mix.sigma, mix.truncation)
        return mix.centers[comp] + mix.sigma * noise

    parts = pmap(block, _block_slices(n), workers)
    return SampleMatrix(np.vstack(parts), seed)


def _reject_box(rng, centers, noise, sigma, a, max_rounds: int = 10_000):
    noise = noise.copy()
    bad = np.abs(centers + sigma * noise) > a
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > max_rounds:
            raise RuntimeError("rejection sampling into the truncation box did not terminate")
        noise[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(centers + sigma * noise) > a
    return noise


def sample_discrete(p: DiscreteDistribution, n: int, seed: int, workers: int = 1) -> SampleMatrix:
    """Draw ``n`` i.i.d. atoms of ``p``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cdf = np.cumsum(p.probs)

    def block(args):
        b, lo, hi = args
        return p.atoms[_choose(stream(seed, "sample", b), cdf, hi - lo)]

    return SampleMatrix(np.vstack(pmap(block, _block_slices(n), workers)), seed)


# ---------------------------------------------------------------------------
# smoothing


def smooth_empirical(samples: SampleMatrix | np.ndarray, sigma: float) -> GaussianMixture:
    """The smoothed empirical measure: one width-``sigma`` mode per row, weight 1/n.

    Repeated rows stay separate modes.
    """
    rows = samples.rows if isinstance(samples, SampleMatrix) else np.atleast_2d(samples)
    n = rows.shape[0]
    return GaussianMixture(rows, np.full(n, 1.0 / n), sigma)


def smooth_discrete(p: DiscreteDistribution, sigma: float) -> GaussianMixture:
    """Exact law of ``S + Z`` for ``S ~ p`` and ``Z ~ N(0, sigma^2 I)``."""
    return GaussianMixture(p.atoms, p.probs, sigma)


def canonical_order(centers: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Row permutation sorting centers lexicographically (then by weight)."""
    keys = [centers[:, a] for a in range(centers.shape[1] - 1, -1, -1)]
    if weights is not None:
        keys.insert(0, weights)
    return np.lexsort(keys)


# ---------------------------------------------------------------------------
# text formats


def _fmt(x: float) -> str:
    return repr(float(x))


def mixture_to_text(obj: GaussianMixture | DiscreteDistribution) -> str:
    """``gmm d=<d> k=<k> sigma=<s>`` then one ``w c1 ... cd`` line per mode.

    A discrete distribution is written with ``sigma=0``.
    """
    if isinstance(obj, GaussianMixture):
        c, w, s = obj.centers, obj.weights, obj.sigma
    else:
        c, w, s = obj.atoms, obj.probs, 0.0
    lines = [f"gmm d={c.shape[1]} k={c.shape[0]} sigma={_fmt(s)}"]
    lines += [" ".join([_fmt(wi)] + [_fmt(x) for x in row]) for wi, row in zip(w, c)]
    return "\n".join(lines) + "\n"


def mixture_from_text(text: str) -> GaussianMixture | DiscreteDistribution:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError("empty mixture file")
    head = lines[0].split()
    if head[0] != "gmm":
        raise ValueError(f"expected a 'gmm' header line, got {lines[0]!r}")
    fields = dict(tok.split("=", 1) for tok in head[1:])
    try:
        d, k, s = int(fields["d"]), int(fields["k"]), float(fields["sigma"])
    except KeyError as exc:
        raise ValueError(f"mixture header is missing {exc.args[0]!r}") from None
    body = np.array([[float(x) for x in ln.split()] for ln in lines[1:]], dtype=np.float64)
    if body.shape != (k, d + 1):
        raise ValueError(f"header announces k={k}, d={d} but body has shape {body.shape}")
    if s == 0.0:
        return DiscreteDistribution(body[:, 1:], body[:, 0])
    return GaussianMixture(body[:, 1:], body[:, 0], s)


def save_mixture(obj, path: str | Path) -> None:
    Path(path).write_text(mixture_to_text(obj))


def load_mixture(path: str | Path):
    return mixture_from_text(Path(path).read_text())


def samples_to_csv(samples: SampleMatrix) -> str:
    buf = io.StringIO()
    buf.write(f"# seed={samples.seed}\n")
    for row in samples.rows:
        buf.write(",".join(_fmt(x) for x in row) + "\n")
    return buf.getvalue()


def samples_from_csv(text: str) -> SampleMatrix:
    seed = 0
    rows = []
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln:
            continue
        if ln.startswith("#"):
            tag = ln[1:].strip()
            if tag.startswith("seed="):
                seed = int(tag[5:])
            continue
        try:
            rows.append([float(x) for x in ln.split(",")])
        except ValueError:
            if rows:
                raise
            continue  # header row
    if not rows:
        raise ValueError("no sample rows found")
    return SampleMatrix(np.array(rows), seed)


def save_samples(samples: SampleMatrix, path: str | Path) -> None:
    Path(path).write_text(samples_to_csv(samples))


def load_samples(path: str | Path) -> SampleMatrix:
    return samples_from_csv(Path(path).read_text())
