"""Command-line interface.  Every subcommand writes CSV (to stdout unless ``--out`` is given)."""

from __future__ import annotations

import argparse
import math
import sys
from contextlib import contextmanager
from pathlib import Path

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
from .distances import DistanceBudget, convergence_table, fit_loglog
from .dnn import load_dataset_csv, load_network, mi_input, mi_label
from .entropy import McBudget, kde_entropy, knn_kl_entropy, mixture_entropy_mc, plugin_entropy
from .experiments import COLUMNS, EXIT_NUMERIC, Family, SpecError, load_spec, parse_value, run
from .mixture import DiscreteDistribution, load_mixture, load_samples, smooth_discrete

LN2 = math.log(2.0)


@contextmanager
def _output(path: str | None):
    if path is None:
        yield sys.stdout
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        yield fh


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return [int(v) for v in vals]


def silverman_bandwidth(rows: np.ndarray) -> float:
    """Silverman's rule per dimension, averaged into one isotropic width."""
    n, d = rows.shape
    sd = np.std(rows, axis=0, ddof=1) if n > 1 else np.ones(d)
    factor = (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))
    h = float(np.mean(sd)) * factor
    if not h > 0:
        raise SpecError("samples have zero spread; pass --bandwidth")
    return h


def cmd_estimate_entropy(args) -> int:
    scale = 1.0 / LN2 if args.bits else 1.0
    if args.mixture:
        obj = load_mixture(args.mixture)
        if isinstance(obj, DiscreteDistribution):
            if args.sigma is None:
                raise SpecError("a discrete mixture file needs --sigma")
            obj = smooth_discrete(obj, args.sigma)
        rep = mixture_entropy_mc(obj, McBudget(args.n_mc), args.seed, args.workers)
        method = "mixture"
    else:
        if not args.input:
            raise SpecError("give --input (samples) or --mixture")
        samples = load_samples(args.input)
        method = args.method
        if method == "plugin":
            if args.sigma is None:
                raise SpecError("the plug-in estimator needs --sigma")
            rep = plugin_entropy(samples, args.sigma, McBudget(args.n_mc), args.seed, args.workers)
        elif method == "knn":
            rep = knn_kl_entropy(samples, args.seed)
        else:
            bw = args.bandwidth if args.bandwidth is not None else silverman_bandwidth(samples.rows)
            rep = kde_entropy(samples, bw, args.seed)
    with _output(args.out) as fh:
        fh.write("method,value,std_error,n,n_mc,seed\n")
        fh.write(f"{method},{rep.value * scale!r},{rep.std_error * scale!r},{rep.n},{rep.n_mc},{rep.seed}\n")
    return 0


def cmd_distances(args) -> int:
    truth = load_mixture(args.truth)
    budget = DistanceBudget(args.n_points, args.ot_points, args.method)
    table = convergence_table(truth, args.sigma, args.kind, args.n_grid, args.reps, budget, args.seed,
                              args.workers, args.stratified)
    with _output(args.out) as fh:
        fh.write("n,mean,std_error,reps\n")
        for t in table:
            fh.write(f"{t.n},{t.mean!r},{t.std_error!r},{t.reps}\n")
        if len(table) >= 3 and all(t.mean > 0 for t in table):
            f = fit_loglog([t.n for t in table], [t.mean for t in table])
            fh.write(f"# slope={f.slope!r} r2={f.r_squared!r}\n")
    return 0


def _query(text: str | None) -> BoundQuery:
    fields = {}
    for item in (text or "").split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise SpecError(f"--query expects key=value pairs, got {item!r}")
        k, v = (p.strip() for p in item.split("=", 1))
        k = {"K": "k_subg", "D": "diameter", "m": "moment_m"}.get(k, k)
        if k not in BoundQuery.__dataclass_fields__:
            raise SpecError(f"unknown query key {k!r}")
        fields[k] = parse_value(v)
    return BoundQuery(**fields)


BOUNDS = {
    "w1": w1_constant,
    "tv": tv_constant,
    "chi2": chi2_constant,
    "chi2-bdd": chi2_bounded_constant,
    "plugin-bdd": plugin_risk_constant_bounded,
    "plugin-subg": plugin_risk_constant_subg,
    "kstar": lambda q: k_star(q.need("d"), q.need("sigma"), q.need("eps")),
    "bias-lb": lambda q: bias_lower_bound(q.need("d"), q.need("sigma"), q.need("eps"), q.need("n")),
}


def cmd_bounds(args) -> int:
    q = _query(args.query)
    which = args.which or list(BOUNDS)
    rows = []
    for name in which:
        try:
            rows.append((name, BOUNDS[name](q)))
        except ValueError:
            if args.which:
                raise
    with _output(args.out) as fh:
        fh.write("name,value\n")
        for name, val in rows:
            fh.write(f"{name},{val!r}\n")
    return 0


def cmd_counterexample(args) -> int:
    spec = CounterexampleSpec(args.eps, max(2, args.k_max), args.sigma)
    r, log_p = counterexample_atoms(spec.eps, args.k_max)
    status = 0
    try:
        sums = divergence_diagnostic(spec, args.k_max)
    except NumericError as exc:
        sums = list(exc.partial or [])
        print(f"smoothent counterexample: numeric failure: {exc}", file=sys.stderr)
        status = EXIT_NUMERIC
    with _output(args.out) as fh:
        fh.write("k,r_k,log_p_k,partial_sum\n")
        for k, total in enumerate(sums, 1):
            fh.write(f"{k},{float(r[k])!r},{float(log_p[k])!r},{total!r}\n")
    return status


def cmd_estimate_mi(args) -> int:
    scale = 1.0 / LN2 if args.bits else 1.0
    net = load_network(args.net, args.noise_sigma)
    data = load_dataset_csv(args.data)
    budget = McBudget(args.n_mc)
    if args.target == "input":
        rep = mi_input(net, data, args.layer, budget, args.seed, args.n_cond, workers=args.workers)
    else:
        rep = mi_label(net, data, args.layer, budget, args.seed, args.workers)
    with _output(args.out) as fh:
        # std_error is a root-sum-square of component errors: a heuristic error bar
        fh.write("target,layer,value,std_error_heuristic,n,n_mc,seed\n")
        fh.write(f"{args.target},{args.layer},{rep.value * scale!r},{rep.std_error * scale!r},{rep.n},{rep.n_mc},{rep.seed}\n")
    return 0


def cmd_rm_mi(args) -> int:
    scale = 1.0 / LN2 if args.bits else 1.0
    book = bpsk_modulate(rm_generate(args.r, args.m), force=args.force)
    with _output(args.out) as fh:
        fh.write("sigma,mi,std_error,mode,n_codewords,n_mc\n")
        for i, s in enumerate(args.sigma_grid):
            rep = channel_mi(book, s, args.n, McBudget(args.n_mc), args.seed + i, args.mode,
                             args.exhaustive, args.force, args.workers)
            fh.write(f"{s!r},{rep.value * scale!r},{rep.std_error * scale!r},{args.mode},{rep.n},{rep.n_mc}\n")
    return 0


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise SpecError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def cmd_run_experiment(args) -> int:
    overrides = _parse_sets(args.set)
    if args.out:
        overrides["output_path"] = args.out
    return run(load_spec(args.spec, overrides), args.workers)


_EXPERIMENT_HELP = ("CSV columns per family (after a '#' block echoing the spec):\n"
                    + "\n".join(f"  {f.value}: {COLUMNS[f]}" for f in Family))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smoothent", description="Entropy and information estimation under Gaussian smoothing.")
    p.add_argument("--version", action="version", version=f"smoothent {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=1, help="worker threads; results do not depend on it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="write CSV here instead of stdout")
    bits = argparse.ArgumentParser(add_help=False)
    bits.add_argument("--bits", action="store_true", help="report entropies in bits (default nats)")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate-entropy", parents=[common, bits], help="h(S + Z) from samples of S")
    e.add_argument("--input", help="sample CSV, one row per sample")
    e.add_argument("--mixture", help="mixture file: report its Monte Carlo entropy instead")
    e.add_argument("--sigma", type=float, help="noise level (plug-in)")
    e.add_argument("--method", choices=["plugin", "knn", "kde"], default="plugin")
    e.add_argument("--bandwidth", type=float, help="KDE width (default: Silverman's rule)")
    e.add_argument("--n-mc", type=int, default=100)
    e.set_defaults(fn=cmd_estimate_entropy)

    d = sub.add_parser("distances", parents=[common], help="convergence of the smoothed empirical measure")
    d.add_argument("--truth", required=True, help="mixture or discrete distribution file")
    d.add_argument("--sigma", type=float, required=True)
    d.add_argument("--kind", choices=["tv", "kl", "chi2", "w1", "w2sq"], required=True)
    d.add_argument("--n-grid", type=_ints, required=True, help="e.g. 10,100,1000")
    d.add_argument("--reps", type=int, default=20)
    d.add_argument("--stratified", action="store_true", help="stratified multinomial draws (discrete truth)")
    d.add_argument("--method", choices=["auto", "mc", "quadrature"], default="auto")
    d.add_argument("--n-points", type=int, default=20_000)
    d.add_argument("--ot-points", type=int, default=1024)
    d.set_defaults(fn=cmd_distances)

    b = sub.add_parser("bounds", parents=[common], help="closed-form constants, k_star and the bias bound")
    b.add_argument("--query", help="comma list, e.g. d=2,sigma=1,k_subg=1")
    b.add_argument("--which", choices=list(BOUNDS), action="append",
                   help="bound to print (repeatable; default: every bound the query supports)")
    b.set_defaults(fn=cmd_bounds)

    c = sub.add_parser("counterexample", parents=[common], help="divergence diagnostic partial sums")
    c.add_argument("--k-max", type=int, default=40)
    c.add_argument("--eps", type=float, default=0.25)
    c.add_argument("--sigma", type=float, default=1.0)
    c.set_defaults(fn=cmd_counterexample)

    m = sub.add_parser("estimate-mi", parents=[common, bits], help="I(X; T) or I(Y; T) over a noisy network")
    m.add_argument("--net", required=True, help="weight file")
    m.add_argument("--data", required=True, help="CSV rows x1,...,xd,label")
    m.add_argument("--layer", type=int, required=True)
    m.add_argument("--target", choices=["input", "label"], default="input")
    m.add_argument("--noise-sigma", type=float, help="override the weight file's noise level")
    m.add_argument("--n-mc", type=int, default=20)
    m.add_argument("--n-cond", type=int, help="conditional draws per input (default n)")
    m.set_defaults(fn=cmd_estimate_mi)

    r = sub.add_parser("rm-mi", parents=[common, bits], help="I(S; S + Z) for a BPSK Reed-Muller codebook")
    r.add_argument("--r", type=int, required=True)
    r.add_argument("--m", type=int, required=True)
    r.add_argument("--sigma-grid", type=_floats, required=True, help="e.g. 0.5,1,2,4")
    r.add_argument("--n", type=int, default=1000, help="codewords sampled for the plug-in")
    r.add_argument("--mode", choices=["plugin", "exact"], default="plugin")
    r.add_argument("--n-mc", type=int, default=20)
    r.add_argument("--exhaustive", action="store_true", help="plug-in over every codeword once")
    r.add_argument("--force", action="store_true", help="allow codebooks beyond 2^20 words")
    r.set_defaults(fn=cmd_rm_mi)

    x = sub.add_parser("run-experiment", help="run a config-file experiment", epilog=_EXPERIMENT_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    x.add_argument("--spec", required=True, help="flat key = value file")
    x.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec key (repeatable)")
    x.add_argument("--out", help="output CSV path (overrides output_path)")
    x.add_argument("--workers", type=int, default=1)
    x.set_defaults(fn=cmd_run_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"smoothent {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"smoothent {args.command}: error: {exc}", file=sys.stderr)
        return 2
