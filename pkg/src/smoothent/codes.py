"""Reed-Muller codes, BPSK modulation and mutual information over an AWGN channel.

With ``S`` uniform on a BPSK codebook in ``R^d`` (``d = 2^m``) and
``Y = S + Z``, ``I(S; Y) = h(Y) - (d/2) log(2 pi e sigma^2)``; ``h(Y)`` is the
entropy of a Gaussian mixture centered at the codewords.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .entropy import EstimateReport, McBudget, gaussian_entropy_analytic, mixture_entropy_mc, plugin_entropy
from .mixture import GaussianMixture, SampleMatrix
from .rng import stream

# codebooks with more than 2^MAX_FULL_K words need force=True
MAX_FULL_K = 20


def gf2_rank(mat: np.ndarray) -> int:
    a = (np.asarray(mat) % 2).astype(np.uint8).copy()
    rank = 0
    rows, cols = a.shape
    for c in range(cols):
        pivot = next((r for r in range(rank, rows) if a[r, c]), None)
        if pivot is None:
            continue
        a[[rank, pivot]] = a[[pivot, rank]]
        for r in range(rows):
            if r != rank and a[r, c]:
                a[r] ^= a[rank]
        rank += 1
        if rank == rows:
            break
    return rank


@dataclass(frozen=True)
class ReedMullerCode:
    """RM(r, m): evaluations of all monomials of degree <= r on ``{0,1}^m``."""

    r: int
    m: int
    generator: np.ndarray

    def __post_init__(self):
        g = np.array(self.generator, dtype=np.uint8, copy=True)
        k = sum(math.comb(self.m, i) for i in range(self.r + 1))
        if g.shape != (k, 2 ** self.m):
            raise ValueError(f"generator must be {k} x {2 ** self.m}, got {g.shape}")
        g.setflags(write=False)
        object.__setattr__(self, "generator", g)

    @property
    def k(self) -> int:
        return self.generator.shape[0]

    @property
    def length(self) -> int:
        return self.generator.shape[1]

    def encode(self, messages: np.ndarray) -> np.ndarray:
        """Codewords ``message @ G mod 2`` for each row of ``messages``."""
        msg = np.atleast_2d(np.asarray(messages, dtype=np.int64))
        return (msg @ self.generator.astype(np.int64)) % 2

    def codewords(self, force: bool = False) -> np.ndarray:
        """All ``2^k`` codewords, in the order of their messages read as binary numbers."""
        if self.k > MAX_FULL_K and not force:
            raise ValueError(f"2^{self.k} codewords is too many to enumerate; pass force=True")
        idx = np.arange(2 ** self.k, dtype=np.int64)
        msgs = (idx[:, None] >> np.arange(self.k - 1, -1, -1)) & 1
        return self.encode(msgs).astype(np.uint8)


def rm_generate(r: int, m: int) -> ReedMullerCode:
    """Generator of RM(r, m), rows ordered by monomial degree then variables."""
    if m < 0 or r < 0:
        raise ValueError("r and m must be nonnegative")
    if r > m:
        raise ValueError(f"need r <= m, got r={r}, m={m}")
    pts = (np.arange(2 ** m)[:, None] >> np.arange(m - 1, -1, -1)) & 1
    rows = []
    for deg in range(r + 1):
        for vars_ in itertools.combinations(range(m), deg):
            rows.append(np.prod(pts[:, list(vars_)], axis=1) if vars_ else np.ones(2 ** m, dtype=np.int64))
    return ReedMullerCode(r, m, np.array(rows, dtype=np.uint8))


@dataclass(frozen=True)
class BpskCodebook:
    """Codewords as rows of +-1 symbols (bit 0 -> -1, bit 1 -> +1)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64, copy=True)
        if p.ndim != 2 or not np.all(np.abs(p) == 1.0):
            raise ValueError("BPSK points must be a matrix of +-1 entries")
        if np.unique(p, axis=0).shape[0] != p.shape[0]:
            raise ValueError("codewords must be pairwise distinct")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def bpsk_modulate(code: ReedMullerCode, force: bool = False) -> BpskCodebook:
    return BpskCodebook(2.0 * code.codewords(force).astype(np.float64) - 1.0)


def channel_mi(
    codebook: BpskCodebook,
    sigma: float,
    n_codewords_sampled: int,
    budget: McBudget,
    seed: int,
    mode: str = "plugin",
    exhaustive: bool = False,
    force: bool = False,
    workers: int = 1,
) -> EstimateReport:
    """``I(S; S + Z)`` for ``S`` uniform on the codebook, in nats.

    ``mode="plugin"`` estimates ``h(S + Z)`` from ``n_codewords_sampled``
    codewords drawn with replacement (``exhaustive=True`` uses each codeword
    exactly once instead).  ``mode="exact"`` integrates the mixture over the
    whole codebook.
    """
    d = codebook.dim
    if mode == "exact":
        if codebook.size > 2 ** MAX_FULL_K and not force:
            raise ValueError(f"the full mixture has {codebook.size} modes; pass force=True")
        pts = codebook.points
        h = mixture_entropy_mc(GaussianMixture(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]), sigma),
                               budget, seed, workers)
    elif mode == "plugin":
        if exhaustive:
            rows = codebook.points
        else:
            if not 1 <= n_codewords_sampled <= codebook.size:
                raise ValueError(f"n_codewords_sampled must be in 1..{codebook.size}")
            idx = stream(seed, "codewords").integers(0, codebook.size, n_codewords_sampled)
            rows = codebook.points[idx]
        h = plugin_entropy(SampleMatrix(rows, seed), sigma, budget, seed, workers)
    else:
        raise ValueError(f"unknown mode {mode!r}; use 'plugin' or 'exact'")
    return EstimateReport(h.value - gaussian_entropy_analytic(d, sigma), h.std_error, h.n, h.n_mc, seed)
