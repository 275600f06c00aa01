"""Config-driven experiment families with seeded, thread-count-independent CSV output.

An experiment is an :class:`ExperimentSpec`: a family name, a flat map of
parameters, a seed and an output path.  :func:`run` writes one CSV whose
leading comment block echoes the spec (parseable back with
:func:`spec_from_csv`) and whose trailing comments carry rate fits.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import __version__
from .bounds import (
    BoundQuery,
    CounterexampleSpec,
    NumericError,
    bias_lower_bound,
    chi2_bounded_constant,
    chi2_constant,
    counterexample_atoms,
    divergence_diagnostic,
    k_star,
    plugin_risk_constant_bounded,
    plugin_risk_constant_subg,
    tv_constant,
    w1_constant,
)
from .codes import bpsk_modulate, channel_mi, rm_generate
from .distances import DistanceBudget, RateFit, convergence_table, fit_line, fit_loglog, piecewise_quad
from .dnn import load_network, sample_unconditional, spiral_dataset
from .entropy import (
    McBudget,
    MseBoundMode,
    gaussian_entropy_analytic,
    kde_entropy,
    knn_kl_entropy,
    mc_mse_bound,
    mixture_entropy_mc,
    plugin_entropy,
)
from .mixture import (
    DiscreteDistribution,
    GaussianMixture,
    SampleMatrix,
    load_mixture,
    log_ndtr_diff,
    sample,
    smooth_empirical,
)
from .rng import derive_seed, pmap, stream

MAX_CORNER_DIM = 20

# exit status of a run stopped by a numeric failure (2 is taken by usage errors)
EXIT_NUMERIC = 3


class SpecError(ValueError):
    """An experiment spec is missing a key or carries an invalid value."""


class Family(str, enum.Enum):
    CORNER_MIXTURE = "corner_mixture"
    MC_CONVERGENCE = "mc_convergence"
    DISTANCE_RATES = "distance_rates"
    DNN_SPIRAL = "dnn_spiral"
    RM_AWGN = "rm_awgn"
    COUNTEREXAMPLE = "counterexample"
    BOUNDS_TABLE = "bounds_table"


# ---------------------------------------------------------------------------
# the corner mixture


def build_corner_mixture(d: int, component_sigma: float = 0.02, truncated: bool = True) -> GaussianMixture:
    """Equal-weight Gaussians of width ``component_sigma`` at the ``2^d`` corners of ``[-1, 1]^d``.

    ``truncated`` restricts the law to ``[-1, 1]^d``; the sampler realizes it
    by rejection.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if d > MAX_CORNER_DIM:
        raise ValueError(f"d = {d} would need 2^{d} modes; at most d = {MAX_CORNER_DIM} is supported")
    corners = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    return GaussianMixture(corners, np.full(corners.shape[0], 1.0 / corners.shape[0]), component_sigma,
                           1.0 if truncated else None)


def _corner_log_density_1d(y: float, tau: float, sigma: float, truncated: bool) -> float:
    """Log density of one coordinate of corner-mixture + N(0, sigma^2)."""
    s = math.hypot(tau, sigma)
    terms = []
    for c in (-1.0, 1.0):
        lt = -0.5 * ((y - c) / s) ** 2 - math.log(s * math.sqrt(2.0 * math.pi))
        if truncated:
            # X ~ N(c, tau^2) restricted to [-1, 1]; X | X + Z = y is N(m, v^2) before restriction
            m = (sigma * sigma * c + tau * tau * y) / (s * s)
            v = tau * sigma / s
            lt += float(log_ndtr_diff((-1.0 - m) / v, (1.0 - m) / v)) - float(log_ndtr_diff((-1.0 - c) / tau, (1.0 - c) / tau))
        terms.append(lt)
    hi = max(terms)
    return hi + math.log(0.5 * sum(math.exp(t - hi) for t in terms))


def corner_entropy(d: int, sigma: float, component_sigma: float = 0.02, truncated: bool = True) -> float:
    """Exact ``h(P * N_sigma)`` for the corner mixture, by 1-d quadrature.

    The corner mixture (truncated or not) is a product of identical 1-d
    laws, so its smoothed entropy is ``d`` times a 1-d integral.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s = math.hypot(component_sigma, sigma)
    lo, hi = -1.0 - 12.0 * s, 1.0 + 12.0 * s

    def integrand(y):
        lq = _corner_log_density_1d(y, component_sigma, sigma, truncated)
        return -math.exp(lq) * lq

    h1 = piecewise_quad(integrand, lo, hi, [-1.0, 0.0, 1.0], tol=1e-11)
    return d * h1


# ---------------------------------------------------------------------------
# specs and config text


def parse_value(text: str):
    """``int``, ``float``, ``bool``, comma list of those, or a bare string."""
    text = text.strip()
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        if len(value) == 1:
            return format_value(value[0]) + ","
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment, ``[section]`` lines are ignored."""
    out = {}
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise SpecError(f"line {num}: expected key = value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if not key:
            raise SpecError(f"line {num}: empty key")
        if val.startswith("[") and val.endswith("]"):
            val = val[1:-1] + ("," if "," not in val else "")
        out[key] = parse_value(val)
    return out


_REQUIRED = {
    Family.CORNER_MIXTURE: ("d", "sigma", "n_grid"),
    Family.MC_CONVERGENCE: ("d", "sigma", "n_centers", "n_mc_grid"),
    Family.DISTANCE_RATES: ("sigma", "kind", "n_grid"),
    Family.DNN_SPIRAL: ("network", "n_grid", "layer"),
    Family.RM_AWGN: ("r", "m", "sigma_grid"),
    Family.COUNTEREXAMPLE: ("k_max",),
    Family.BOUNDS_TABLE: ("d", "sigma"),
}

_OPTIONAL = {
    Family.CORNER_MIXTURE: {"component_sigma": 0.02, "truncated": True, "reps": 20, "n_mc": 0,
                            "mc_total": 200_000, "estimators": ("plugin", "knn"), "kde_bandwidth": 0.0},
    Family.MC_CONVERGENCE: {"component_sigma": 0.02, "truncated": True, "reps": 20},
    Family.DISTANCE_RATES: {"atoms": None, "probs": None, "truth_file": None, "reps": 20, "stratified": False,
                            "n_points": 20_000, "ot_points": 1024, "method": "auto"},
    Family.DNN_SPIRAL: {"reps": 5, "n_mc": 0, "mc_total": 200_000, "estimators": ("plugin", "knn"),
                        "kde_bandwidth": 0.0, "noise_sigma": 0.0, "n_classes": 3, "spiral_noise": 0.2},
    Family.RM_AWGN: {"mode": "plugin", "n_codewords": 1000, "n_mc": 20, "exhaustive": False},
    Family.COUNTEREXAMPLE: {"eps": 0.25, "sigma": 1.0, "fit_from": 10},
    Family.BOUNDS_TABLE: {"k_subg": None, "diameter": None, "eps": None, "n": None},
}

# keys holding a list even when a single value is given
_LIST_KEYS = {"n_grid", "n_mc_grid", "sigma_grid", "estimators", "atoms", "probs", "reps"}


@dataclass(frozen=True)
class ExperimentSpec:
    family: Family
    parameters: dict = field(default_factory=dict)
    seed: int = 0
    output_path: str | None = None

    def __post_init__(self):
        try:
            fam = Family(self.family)
        except ValueError:
            raise SpecError(f"unknown family {self.family!r}; choose from {[f.value for f in Family]}") from None
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "parameters", dict(self.parameters))
        if int(self.seed) != self.seed or self.seed < 0:
            raise SpecError(f"seed must be a nonnegative integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))
        self.validate()

    def validate(self) -> None:
        required, optional = _REQUIRED[self.family], _OPTIONAL[self.family]
        for key in required:
            if key not in self.parameters:
                raise SpecError(f"family {self.family.value} needs key '{key}'")
        for key in self.parameters:
            if key not in required and key not in optional:
                raise SpecError(f"unknown key '{key}' for family {self.family.value}")
        for key in ("n_grid", "n_mc_grid"):
            if key in self.parameters:
                vals = self.ints(key)
                if any(v < 1 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
                    raise SpecError(f"'{key}' must be strictly increasing positive integers")
        for key in ("sigma", "component_sigma", "noise_sigma"):
            if key in self.parameters and self.parameters[key] is not None:
                v = self.get(key)
                if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0 or (key != "noise_sigma" and v == 0):
                    raise SpecError(f"'{key}' must be a positive number, got {v!r}")

    def get(self, key: str):
        if key in self.parameters:
            return self.parameters[key]
        return _OPTIONAL[self.family].get(key)

    def list(self, key: str) -> list:
        v = self.get(key)
        if v is None:
            return []
        return list(v) if isinstance(v, (tuple, list)) else [v]

    def ints(self, key: str) -> list[int]:
        out = []
        for v in self.list(key):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
                raise SpecError(f"'{key}' must hold integers, got {v!r}")
            out.append(int(v))
        return out

    def int(self, key: str) -> int:
        v = self.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
            raise SpecError(f"'{key}' must be an integer, got {v!r}")
        return int(v)

    def float(self, key: str) -> float:
        v = self.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SpecError(f"'{key}' must be a number, got {v!r}")
        return float(v)

    def with_overrides(self, overrides: dict) -> "ExperimentSpec":
        params = dict(self.parameters)
        seed, out = self.seed, self.output_path
        for k, v in overrides.items():
            if k == "seed":
                seed = v
            elif k == "output_path":
                out = str(v)
            elif k != "family":
                params[k] = v
        return ExperimentSpec(overrides.get("family", self.family), params, seed, out)


def spec_from_mapping(mapping: dict) -> ExperimentSpec:
    m = dict(mapping)
    if "family" not in m:
        raise SpecError("spec needs key 'family'")
    fam = m.pop("family")
    seed = m.pop("seed", 0)
    out = m.pop("output_path", None)
    return ExperimentSpec(fam, m, seed, None if out is None else str(out))


def load_spec(path: str | Path, overrides: dict | None = None) -> ExperimentSpec:
    mapping = parse_config(Path(path).read_text())
    mapping.update(overrides or {})
    return spec_from_mapping(mapping)


def spec_echo(spec: ExperimentSpec) -> list[str]:
    lines = [f"# smoothent {__version__}", f"# family = {spec.family.value}", f"# seed = {spec.seed}"]
    if spec.output_path is not None:
        lines.append(f"# output_path = {spec.output_path}")
    for key in sorted(spec.parameters):
        val = spec.parameters[key]
        if val is not None:
            lines.append(f"# {key} = {format_value(val)}")
    return lines


def spec_from_csv(text: str) -> ExperimentSpec:
    """Recover the spec from the comment block at the top of a CSV."""
    mapping = {}
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if body.startswith("smoothent ") or "=" not in body:
            continue
        key, val = (p.strip() for p in body.split("=", 1))
        mapping[key] = parse_value(val)
    return spec_from_mapping(mapping)


def read_rows(text: str) -> list[dict]:
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(body))


def fit_rate(source, x_col: str | None = None, y_col: str | None = None, where: dict | None = None) -> RateFit:
    """Least-squares slope of ``ln y_col`` against ``ln x_col`` over CSV rows.

    ``source`` is CSV text or a path; ``where`` keeps only rows whose columns
    equal the given strings.  By default ``x_col`` is ``n`` (or ``n_mc``) and
    ``y_col`` the first of ``mean_error``, ``mean``, ``rmse`` present.
    """
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
    rows = read_rows(text)
    if where:
        rows = [r for r in rows if all(r.get(k) == str(v) for k, v in where.items())]
    if not rows:
        raise ValueError("no data rows to fit")
    if x_col is None:
        x_col = next((c for c in ("n", "n_mc") if c in rows[0]), None)
    if y_col is None:
        y_col = next((c for c in ("mean_error", "mean", "rmse") if c in rows[0]), None)
    if x_col is None or y_col is None:
        raise ValueError(f"cannot pick rate columns from {list(rows[0])}")
    xs = [float(r[x_col]) for r in rows]
    ys = [float(r[y_col]) for r in rows]
    return fit_loglog(xs, ys)


# ---------------------------------------------------------------------------
# families; each yields rows and finally a list of trailing comment lines


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _n_mc(spec: ExperimentSpec, n: int) -> int:
    fixed = spec.int("n_mc")
    if fixed > 0:
        return fixed
    return max(10, math.ceil(spec.int("mc_total") / n))


def _reps_for(spec: ExperimentSpec, grid: list[int]) -> list[int]:
    reps = spec.ints("reps")
    if len(reps) == 1:
        reps = reps * len(grid)
    if len(reps) != len(grid) or any(r < 2 for r in reps):
        raise SpecError("'reps' must be one integer >= 2 or one per grid point")
    return reps


def _baseline(name: str, noisy: SampleMatrix, bandwidth: float, sigma: float) -> float:
    if name == "knn":
        return knn_kl_entropy(noisy).value
    if name == "kde":
        return kde_entropy(noisy, bandwidth if bandwidth > 0 else sigma).value
    raise SpecError(f"unknown estimator {name!r}; use plugin, knn or kde")


def _estimators(spec: ExperimentSpec) -> list[str]:
    names = [str(e) for e in spec.list("estimators")]
    for e in names:
        if e not in ("plugin", "knn", "kde"):
            raise SpecError(f"unknown estimator {e!r}; use plugin, knn or kde")
    return names


def _corner_mixture(spec: ExperimentSpec, workers: int):
    d, sigma = spec.int("d"), spec.float("sigma")
    tau, trunc = spec.float("component_sigma"), bool(spec.get("truncated"))
    mix = build_corner_mixture(d, tau, trunc)
    truth = corner_entropy(d, sigma, tau, trunc)
    names = _estimators(spec)
    grid = spec.ints("n_grid")
    yield ["estimator", "n", "reps", "mean_error", "std_error", "mean_bias", "bias_std_error"]
    fits = {e: ([], []) for e in names}
    for n, reps in zip(grid, _reps_for(spec, grid)):
        budget = McBudget(_n_mc(spec, n))

        def rep(r, n=n, budget=budget):
            s = sample(mix, n, derive_seed(spec.seed, "corner", n, r))
            noisy = SampleMatrix(s.rows + sigma * stream(spec.seed, "noise", n, r).standard_normal(s.rows.shape), s.seed)
            out = {}
            for e in names:
                if e == "plugin":
                    out[e] = plugin_entropy(s, sigma, budget, derive_seed(spec.seed, "mc", n, r)).value
                else:
                    out[e] = _baseline(e, noisy, spec.float("kde_bandwidth"), sigma)
            return out

        results = pmap(rep, range(reps), workers)
        for e in names:
            err = np.array([res[e] for res in results]) - truth
            mae = float(np.mean(np.abs(err)))
            fits[e][0].append(n)
            fits[e][1].append(mae)
            yield [e, n, reps, mae, float(np.std(np.abs(err), ddof=1) / math.sqrt(reps)),
                   float(np.mean(err)), float(np.std(err, ddof=1) / math.sqrt(reps))]
    trailer = [f"# truth = {truth!r}"]
    for e in names:
        if len(grid) >= 3:
            f = fit_loglog(*fits[e])
            trailer.append(f"# fit {e} slope = {f.slope!r} intercept = {f.intercept!r} r2 = {f.r_squared!r}")
    yield trailer


def _mc_convergence(spec: ExperimentSpec, workers: int):
    d, sigma = spec.int("d"), spec.float("sigma")
    mix0 = build_corner_mixture(d, spec.float("component_sigma"), bool(spec.get("truncated")))
    centers = sample(mix0, spec.int("n_centers"), derive_seed(spec.seed, "centers"))
    mix = smooth_empirical(centers, sigma)
    grid = spec.ints("n_mc_grid")
    yield ["n_mc", "reps", "mean", "rmse", "mse_bound"]
    rmses = []
    for n_mc, reps in zip(grid, _reps_for(spec, grid)):
        budget = McBudget(n_mc)
        vals = np.array(pmap(lambda r, b=budget, k=n_mc: mixture_entropy_mc(mix, b, derive_seed(spec.seed, "run", k, r)).value,
                             range(reps), workers))
        # the integrator is unbiased, so its MSE is its variance
        rmse = float(np.std(vals, ddof=1))
        rmses.append(rmse)
        yield [n_mc, reps, float(np.mean(vals)), rmse, mc_mse_bound(budget, d, sigma, mix.n_modes)]
    trailer = []
    if len(grid) >= 3:
        f = fit_loglog(grid, rmses)
        trailer.append(f"# fit rmse slope = {f.slope!r} intercept = {f.intercept!r} r2 = {f.r_squared!r}")
    yield trailer


def _distance_truth(spec: ExperimentSpec):
    if spec.get("truth_file") is not None:
        obj = load_mixture(str(spec.get("truth_file")))
        return obj
    atoms, probs = spec.list("atoms"), spec.list("probs")
    if not atoms:
        raise SpecError("distance_rates needs 'atoms' (with 'probs') or 'truth_file'")
    if not probs:
        probs = [1.0 / len(atoms)] * len(atoms)
    if len(probs) != len(atoms):
        raise SpecError("'atoms' and 'probs' must have the same length")
    try:
        return DiscreteDistribution(np.array(atoms, dtype=float).reshape(-1, 1), np.array(probs, dtype=float))
    except ValueError as exc:
        raise SpecError(f"invalid atoms/probs: {exc}") from None


def _distance_rates(spec: ExperimentSpec, workers: int):
    truth = _distance_truth(spec)
    budget = DistanceBudget(spec.int("n_points"), spec.int("ot_points"), str(spec.get("method")))
    grid = spec.ints("n_grid")
    reps = _reps_for(spec, grid)
    if len(set(reps)) != 1:
        raise SpecError("distance_rates takes a single 'reps' value")
    table = convergence_table(truth, spec.float("sigma"), str(spec.get("kind")), grid, reps[0], budget, spec.seed,
                              workers, bool(spec.get("stratified")))
    yield ["n", "mean", "std_error", "reps"]
    for t in table:
        yield [t.n, t.mean, t.std_error, t.reps]
    trailer = []
    if len(grid) >= 3 and all(t.mean > 0 for t in table):
        f = fit_loglog([t.n for t in table], [t.mean for t in table])
        trailer.append(f"# slope={f.slope!r} r2={f.r_squared!r}")
    yield trailer


def _dnn_spiral(spec: ExperimentSpec, workers: int):
    noise = spec.float("noise_sigma")
    net = load_network(str(spec.get("network")), noise if noise > 0 else None)
    layer = spec.int("layer")
    sigma = net.noise_sigma
    names = _estimators(spec)
    grid = spec.ints("n_grid")
    yield ["estimator", "n", "reps", "mean", "std"]
    for n, reps in zip(grid, _reps_for(spec, grid)):
        n_classes = spec.int("n_classes")
        per_class = math.ceil(n / n_classes)
        budget = McBudget(_n_mc(spec, n))

        def rep(r, n=n, budget=budget, per_class=per_class, n_classes=n_classes):
            data = spiral_dataset(per_class, n_classes, spec.float("spiral_noise"), derive_seed(spec.seed, "data", n, r))
            s = sample_unconditional(net, data, layer, derive_seed(spec.seed, "fwd", n, r))
            rows = s.rows[:n]
            s = SampleMatrix(rows, s.seed)
            noisy = SampleMatrix(rows + sigma * stream(spec.seed, "noise", n, r).standard_normal(rows.shape), s.seed)
            out = {}
            for e in names:
                if e == "plugin":
                    out[e] = plugin_entropy(s, sigma, budget, derive_seed(spec.seed, "mc", n, r)).value
                else:
                    out[e] = _baseline(e, noisy, spec.float("kde_bandwidth"), sigma)
            return out

        results = pmap(rep, range(reps), workers)
        for e in names:
            v = np.array([res[e] for res in results])
            yield [e, n, reps, float(np.mean(v)), float(np.std(v, ddof=1))]
    yield []


def _rm_awgn(spec: ExperimentSpec, workers: int):
    code = rm_generate(spec.int("r"), spec.int("m"))
    book = bpsk_modulate(code, force=True) if code.k <= 24 else None
    if book is None:
        raise SpecError(f"RM({spec.int('r')}, {spec.int('m')}) has 2^{code.k} codewords, too many to tabulate")
    mode = str(spec.get("mode"))
    n = spec.int("n_codewords")
    budget = McBudget(spec.int("n_mc"))
    yield ["sigma", "mi", "std_error", "n_codewords", "n_mc", "mse_bound"]
    # codewords have squared norm 2^m, which is the bounded-moment parameter
    bound_budget = McBudget(budget.n_mc, MseBoundMode.BOUNDED_MOMENT, float(book.dim))
    for i, s in enumerate(spec.list("sigma_grid")):
        rep = channel_mi(book, float(s), n, budget, derive_seed(spec.seed, "sigma", i), mode,
                         bool(spec.get("exhaustive")), True, workers)
        yield [float(s), rep.value, rep.std_error, rep.n, rep.n_mc, mc_mse_bound(bound_budget, book.dim, float(s), rep.n)]
    yield []


def _counterexample(spec: ExperimentSpec, workers: int):
    k_max = spec.int("k_max")
    cs = CounterexampleSpec(spec.float("eps"), max(2, k_max), spec.float("sigma"))
    r, log_p = counterexample_atoms(cs.eps, k_max)
    yield ["k", "r_k", "log_p_k", "partial_sum"]
    sums = divergence_diagnostic(cs, k_max)
    for k, total in enumerate(sums, 1):
        yield [k, float(r[k]), float(log_p[k]), total]
    lo = spec.int("fit_from")
    ks = list(range(lo, k_max + 1))
    trailer = []
    if len(ks) >= 3:
        f = fit_line(np.log(ks), [sums[k - 1] for k in ks])
        trailer.append(f"# fit partial_sum vs ln k from k = {lo} slope = {f.slope!r} r2 = {f.r_squared!r}")
    yield trailer


def _bounds_table(spec: ExperimentSpec, workers: int):
    def opt(key, conv):
        v = spec.get(key)
        return None if v is None else conv(v)

    q = BoundQuery(d=spec.int("d"), sigma=spec.float("sigma"), k_subg=opt("k_subg", float),
                   diameter=opt("diameter", float), n=opt("n", int), eps=opt("eps", float))
    rows = [("gaussian_entropy", lambda: gaussian_entropy_analytic(q.d, q.sigma)),
            ("plugin_risk_constant_bounded", lambda: plugin_risk_constant_bounded(q))]
    if q.k_subg is not None:
        rows += [("w1_constant", lambda: w1_constant(q)), ("tv_constant", lambda: tv_constant(q)),
                 ("plugin_risk_constant_subg", lambda: plugin_risk_constant_subg(q))]
        if q.k_subg < q.sigma / 2:
            rows.append(("chi2_constant", lambda: chi2_constant(q)))
    if q.diameter is not None:
        rows.append(("chi2_bounded_constant", lambda: chi2_bounded_constant(q)))
    if q.eps is not None:
        rows.append(("k_star", lambda: k_star(q.d, q.sigma, q.eps)))
        if q.n is not None:
            rows.append(("bias_lower_bound", lambda: bias_lower_bound(q.d, q.sigma, q.eps, q.n)))
    yield ["quantity", "value"]
    for name, fn in rows:
        yield [name, fn()]
    yield []


_FAMILIES: dict[Family, Callable[[ExperimentSpec, int], Iterator]] = {
    Family.CORNER_MIXTURE: _corner_mixture,
    Family.MC_CONVERGENCE: _mc_convergence,
    Family.DISTANCE_RATES: _distance_rates,
    Family.DNN_SPIRAL: _dnn_spiral,
    Family.RM_AWGN: _rm_awgn,
    Family.COUNTEREXAMPLE: _counterexample,
    Family.BOUNDS_TABLE: _bounds_table,
}

COLUMNS = {
    Family.CORNER_MIXTURE: "estimator,n,reps,mean_error,std_error,mean_bias,bias_std_error",
    Family.MC_CONVERGENCE: "n_mc,reps,mean,rmse,mse_bound",
    Family.DISTANCE_RATES: "n,mean,std_error,reps",
    Family.DNN_SPIRAL: "estimator,n,reps,mean,std",
    Family.RM_AWGN: "sigma,mi,std_error,n_codewords,n_mc,mse_bound",
    Family.COUNTEREXAMPLE: "k,r_k,log_p_k,partial_sum",
    Family.BOUNDS_TABLE: "quantity,value",
}


def run_to_text(spec: ExperimentSpec, workers: int = 1, sink=None) -> tuple[str, Exception | None]:
    """Run ``spec`` and return the CSV text plus the numeric failure, if any.

    Rows are passed to ``sink`` (a text stream) as they are produced, so a
    failure part-way keeps everything computed before it.
    """
    buf = io.StringIO()
    streams = [buf] + ([sink] if sink is not None else [])

    def emit(line: str):
        for s in streams:
            s.write(line + "\n")
            if s is not buf:
                s.flush()

    for line in spec_echo(spec):
        emit(line)
    error = None
    try:
        for item in _FAMILIES[spec.family](spec, workers):
            if item and isinstance(item[0], str) and item[0].startswith("#"):
                for line in item:
                    emit(line)
            elif item:
                emit(",".join(_fmt(v) for v in item))
    except (NumericError, FloatingPointError, RuntimeError) as exc:
        error = exc
        emit(f"# error = {type(exc).__name__}: {exc}")
    return buf.getvalue(), error


def run(spec: ExperimentSpec, workers: int = 1) -> int:
    """Write the experiment CSV to ``spec.output_path``; return an exit status.

    0 on success, :data:`EXIT_NUMERIC` when a numeric failure stopped the
    run (rows computed so far stay in the file).
    """
    if spec.output_path is None:
        raise SpecError("spec needs key 'output_path'")
    path = Path(spec.output_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        _, error = run_to_text(spec, workers, fh)
    return 0 if error is None else EXIT_NUMERIC
