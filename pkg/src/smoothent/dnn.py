"""Noisy feed-forward networks and mutual-information estimates over them.

Layer ``l`` maps ``T_{l-1}`` to ``S_l = f_l(T_{l-1})`` and then adds noise,
``T_l = S_l + Z_l`` with ``Z_l ~ N(0, sigma^2 I)``; ``T_0`` is the input.
Since ``T_l`` given the network is ``S_l`` smoothed by a Gaussian, every
entropy of ``T_l`` is the entropy of a smoothed law, estimated with the
plug-in estimator on samples of ``S_l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .entropy import EstimateReport, McBudget, gaussian_entropy_analytic, plugin_entropy
from .mixture import SampleMatrix
from .rng import BLOCK_ROWS, derive_seed, pmap, stream

ACTIVATIONS = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class Layer:
    """Affine map ``x @ weight + bias`` followed by an activation."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64, copy=True)
        b = np.array(self.bias, dtype=np.float64, copy=True).reshape(-1)
        if w.ndim != 2 or w.shape[1] != b.size:
            raise ValueError(f"weight {w.shape} and bias {b.shape} do not match")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; use one of {sorted(ACTIVATIONS)}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return ACTIVATIONS[self.activation](x @ self.weight + self.bias)


@dataclass(frozen=True)
class NoisyNetwork:
    layers: tuple[Layer, ...]
    noise_sigma: float

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:]), start=1):
            if a.d_out != b.d_in:
                raise ValueError(f"layer {i} outputs {a.d_out} values but layer {i + 1} takes {b.d_in}")
        if not self.noise_sigma > 0:
            raise ValueError(f"noise_sigma must be positive, got {self.noise_sigma}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def width(self, layer: int) -> int:
        return self.layers[layer - 1].d_out


@dataclass(frozen=True)
class LabeledDataset:
    """Feature rows with one label each; ``label_set`` lists every class."""

    features: np.ndarray
    labels: tuple
    label_set: tuple | None = None

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        labels = tuple(np.asarray(self.labels).tolist())
        object.__setattr__(self, "labels", labels)
        if len(labels) != x.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but {len(labels)} labels")
        classes = tuple(sorted(set(labels))) if self.label_set is None else tuple(self.label_set)
        if not classes:
            raise ValueError("the label set is empty")
        unknown = set(labels) - set(classes)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} are not in the label set")
        object.__setattr__(self, "label_set", classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# forward passes


def _check_layer(net: NoisyNetwork, layer: int) -> None:
    if not 1 <= layer <= net.depth:
        raise ValueError(f"layer must be in 1..{net.depth}, got {layer}")


def _forward_block(net: NoisyNetwork, x: np.ndarray, layer: int, rng: np.random.Generator) -> np.ndarray:
    t = x
    for lyr in net.layers[: layer - 1]:
        s = lyr(t)
        t = s + net.noise_sigma * rng.standard_normal(s.shape)
    return net.layers[layer - 1](t)


def forward_batch(net: NoisyNetwork, x: np.ndarray, layer: int, seed: int, workers: int = 1) -> np.ndarray:
    """``S_layer`` for every row of ``x``, with fresh noise at layers before it.

    Rows are processed in fixed blocks, each with its own random stream.
    """
    _check_layer(net, layer)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.layers[0].d_in:
        raise ValueError(f"inputs have {x.shape[1]} features but the network takes {net.layers[0].d_in}")
    blocks = [(b, lo, min(x.shape[0], lo + BLOCK_ROWS)) for b, lo in enumerate(range(0, x.shape[0], BLOCK_ROWS))]
    parts = pmap(lambda a: _forward_block(net, x[a[1]:a[2]], layer, stream(seed, "fwd", a[0])), blocks, workers)
    return np.vstack(parts)


def forward_pre_noise(net: NoisyNetwork, x, layer: int, seed: int) -> np.ndarray:
    """``S_layer = f_layer(T_{layer-1})`` for one input; layer ``layer``'s own noise is not added."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return forward_batch(net, x, layer, seed)[0]


def sample_unconditional(net: NoisyNetwork, data: LabeledDataset, layer: int, seed: int,
                         workers: int = 1) -> SampleMatrix:
    """One ``S_layer`` draw per dataset row, independent noise per row."""
    return SampleMatrix(forward_batch(net, data.features, layer, seed, workers), seed)


def sample_conditional(net: NoisyNetwork, x, layer: int, n_cond: int, seed: int,
                       workers: int = 1) -> SampleMatrix:
    """``n_cond`` draws of ``S_layer`` given input ``x``, fresh noise in every pass."""
    if layer < 2:
        raise ValueError("conditional sampling needs layer >= 2; at layer 1 S is a function of x")
    if n_cond < 1:
        raise ValueError("n_cond must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return SampleMatrix(forward_batch(net, np.repeat(x, n_cond, axis=0), layer, seed, workers), seed)


# ---------------------------------------------------------------------------
# mutual information


def _rss(*errs: float) -> float:
    return math.sqrt(math.fsum(e * e for e in errs))


def mi_input(
    net: NoisyNetwork,
    data: LabeledDataset,
    layer: int,
    budget: McBudget,
    seed: int,
    n_cond: int | None = None,
    cond_budget: McBudget | None = None,
    workers: int = 1,
) -> EstimateReport:
    """``I(X; T_layer)`` as ``h(T) - (1/n) sum_i h(T | X = x_i)``, all by plug-in.

    At layer 1, ``h(T | X)`` is the Gaussian entropy of the noise and is
    subtracted exactly.  Deeper layers sample ``n_cond`` (default ``n``)
    conditional draws per input row.  The reported standard error is the
    root-sum-square of the component errors, a heuristic error bar.
    """
    sigma = net.noise_sigma
    uncond = sample_unconditional(net, data, layer, derive_seed(seed, "uncond"), workers)
    h_t = plugin_entropy(uncond, sigma, budget, derive_seed(seed, "h"), workers)
    if layer == 1:
        h_cond = gaussian_entropy_analytic(net.width(1), sigma)
        return EstimateReport(h_t.value - h_cond, h_t.std_error, data.n, budget.n_mc, seed)
    n_cond = data.n if n_cond is None else n_cond
    cond_budget = budget if cond_budget is None else cond_budget

    def cond(i):
        s = sample_conditional(net, data.features[i], layer, n_cond, derive_seed(seed, "cond", i))
        return plugin_entropy(s, sigma, cond_budget, derive_seed(seed, "hc", i))

    reps = pmap(cond, range(data.n), workers)
    mean_cond = math.fsum(r.value for r in reps) / data.n
    se = _rss(h_t.std_error, *(r.std_error / data.n for r in reps))
    return EstimateReport(h_t.value - mean_cond, se, data.n, budget.n_mc, seed)


def mi_label(
    net: NoisyNetwork,
    data: LabeledDataset,
    layer: int,
    budget: McBudget,
    seed: int,
    workers: int = 1,
) -> EstimateReport:
    """``I(Y; T_layer)`` as ``h(T) - sum_y p(y) h(T | Y = y)``.

    ``p`` is the empirical label distribution and the class-conditional
    samples are the unconditional draws of the rows carrying each label.
    """
    counts = {y: 0 for y in data.label_set}
    for y in data.labels:
        counts[y] += 1
    empty = [y for y, c in counts.items() if c == 0]
    if empty:
        raise ValueError(f"label class {empty[0]!r} has no rows")
    sigma = net.noise_sigma
    uncond = sample_unconditional(net, data, layer, derive_seed(seed, "uncond"), workers)
    h_t = plugin_entropy(uncond, sigma, budget, derive_seed(seed, "h"), workers)
    labels = np.array(data.labels, dtype=object)
    terms, errs = [], [h_t.std_error]
    for k, y in enumerate(data.label_set):
        rows = uncond.rows[labels == y]
        rep = plugin_entropy(SampleMatrix(rows, uncond.seed), sigma, budget, derive_seed(seed, "hy", k), workers)
        p = counts[y] / data.n
        terms.append(p * rep.value)
        errs.append(p * rep.std_error)
    return EstimateReport(h_t.value - math.fsum(terms), _rss(*errs), data.n, budget.n_mc, seed)


def mi_input_risk_bound(delta_n: float, d: int, sigma: float, n: int) -> float:
    """``2 delta_n + d log(1 + 1/sigma^2) / (4 sqrt(n))``."""
    if d < 1 or n < 1 or not sigma > 0 or delta_n < 0:
        raise ValueError("need d, n >= 1, sigma > 0 and delta_n >= 0")
    return 2.0 * delta_n + d * math.log1p(1.0 / (sigma * sigma)) / (4.0 * math.sqrt(n))


# ---------------------------------------------------------------------------
# weight files and the spiral task


def network_to_text(net: NoisyNetwork) -> str:
    lines = [f"sigma {net.noise_sigma!r}"]
    for lyr in net.layers:
        lines.append(f"layer {lyr.d_in} {lyr.d_out} {lyr.activation}")
        lines += [" ".join(repr(float(v)) for v in row) for row in lyr.weight]
        lines.append(" ".join(repr(float(v)) for v in lyr.bias))
    return "\n".join(lines) + "\n"


def network_from_text(text: str, noise_sigma: float | None = None) -> NoisyNetwork:
    """Parse ``layer <in> <out> <activation>`` blocks (row-major weights, then bias).

    An optional ``sigma <value>`` line sets the noise level unless
    ``noise_sigma`` is given.
    """
    tokens = text.split()
    pos = 0
    sigma = None
    layers = []
    while pos < len(tokens):
        tag = tokens[pos]
        if tag == "sigma":
            sigma = float(tokens[pos + 1])
            pos += 2
        elif tag == "layer":
            d_in, d_out, act = int(tokens[pos + 1]), int(tokens[pos + 2]), tokens[pos + 3]
            pos += 4
            need = d_in * d_out + d_out
            vals = tokens[pos:pos + need]
            if len(vals) < need:
                raise ValueError(f"layer {len(layers) + 1} needs {need} numbers, found {len(vals)}")
            nums = np.array([float(v) for v in vals])
            layers.append(Layer(nums[: d_in * d_out].reshape(d_in, d_out), nums[d_in * d_out:], act))
            pos += need
        else:
            raise ValueError(f"unexpected token {tag!r} in weight file")
    sigma = noise_sigma if noise_sigma is not None else sigma
    if sigma is None:
        raise ValueError("no noise level: add a 'sigma <value>' line or pass noise_sigma")
    return NoisyNetwork(tuple(layers), sigma)


def load_network(path: str | Path, noise_sigma: float | None = None) -> NoisyNetwork:
    return network_from_text(Path(path).read_text(), noise_sigma)


def save_network(net: NoisyNetwork, path: str | Path) -> None:
    Path(path).write_text(network_to_text(net))


def spiral_dataset(n_per_class: int, n_classes: int = 3, noise: float = 0.2, seed: int = 0) -> LabeledDataset:
    """Interleaved 2-d spirals, one arm per class, radii in [0, 1]."""
    rng = stream(seed, "spiral")
    xs, ys = [], []
    for c in range(n_classes):
        r = np.linspace(0.0, 1.0, n_per_class)
        t = np.linspace(c * 4.0, (c + 1) * 4.0, n_per_class) + noise * rng.standard_normal(n_per_class)
        xs.append(np.column_stack([r * np.sin(t), r * np.cos(t)]))
        ys += [c] * n_per_class
    return LabeledDataset(np.vstack(xs), tuple(ys), tuple(range(n_classes)))


def load_dataset_csv(path: str | Path) -> LabeledDataset:
    """Rows ``x1,...,xd,label``; lines starting with ``#`` and a header row are skipped."""
    feats, labels = [], []
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split(",")
        try:
            row = [float(v) for v in parts[:-1]]
        except ValueError:
            if feats:
                raise
            continue
        feats.append(row)
        lab = parts[-1].strip()
        try:
            labels.append(int(lab))
        except ValueError:
            labels.append(lab)
    if not feats:
        raise ValueError(f"no data rows in {path}")
    return LabeledDataset(np.array(feats), tuple(labels))
