"""Differentiable and straight-through selection operators.

All operators accept a single logit vector ``[n]`` or a batch ``[B, n]``.
Rows of a relaxed permutation are indexed by rank: row ``i`` (1-based in the
formula below) is a softmax over items approximating "which item is the
i-th largest".

    P[i, :] = softmax(((n + 1 - 2i) * pi - A_pi @ 1) / tau),  i = 1..n

with ``A_pi[j, k] = |pi_j - pi_k|``. Getting ``i`` off by one reverses the
sort order, so :func:`neuralsort_scores` is kept separate for testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, SeededRng

GUMBEL_EPS = 1e-12


@dataclass
class LogitVector:
    """Allocation logits over all layers, partitioned by modality."""

    values: DiffValue
    sizes: tuple

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if any(s < 1 for s in self.sizes) or sum(self.sizes) != self.values.shape[-1]:
            raise ValueError(f"partition {self.sizes} does not cover {self.values.shape[-1]} logits")

    @property
    def offsets(self):
        return tuple(np.cumsum((0,) + self.sizes)[1:].tolist())

    def split(self):
        bounds = np.cumsum((0,) + self.sizes)
        return [self.values[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


@dataclass
class RelaxedPermutation:
    matrix: DiffValue
    tau: float


@dataclass
class SoftGateVector:
    gates: DiffValue
    budget: object
    sizes: tuple = ()

    def split(self):
        sizes = self.sizes or (self.gates.shape[-1],)
        bounds = np.cumsum((0,) + tuple(sizes))
        return [self.gates[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


@dataclass
class HardMask:
    bits: np.ndarray

    @property
    def popcount(self):
        return np.asarray(self.bits).sum(axis=-1).astype(int)


def _values(pi):
    return pi.values if isinstance(pi, LogitVector) else ad.as_value(pi)


def _check_budget(b, n):
    b = np.asarray(b)
    if np.any(b < 0) or np.any(b > n):
        raise ValueError(f"budget {b.tolist()} outside [0, {n}]")
    return b.astype(int)


def neuralsort_scores(pi):
    """Pre-softmax scores ``(n+1-2i) pi_j - (A_pi 1)_j`` as [..., n, n]."""
    v = _values(pi)
    n = v.shape[-1]
    rank_coef = (n + 1 - 2 * np.arange(1, n + 1, dtype=np.float64))[:, None]
    row = ad.reshape(v, v.shape[:-1] + (1, n))
    spread = ad.reshape(ad.sum_axis(ad.abs_pairwise_diff(v), axis=-1), v.shape[:-1] + (1, n))
    return ad.sub(ad.mul(ad.const(rank_coef), row), spread)


def neuralsort(pi, tau: float) -> RelaxedPermutation:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = neuralsort_scores(pi)
    return RelaxedPermutation(ad.softmax_rows(ad.scale(scores, 1.0 / tau)), float(tau))


def sample_gumbel(rng: SeededRng, shape, eps=GUMBEL_EPS) -> DiffValue:
    u = np.clip(rng.uniform(shape), eps, 1.0 - eps)
    return ad.const(-np.log(-np.log(u)))


def _rank_rows(b, n):
    """0/1 matrix selecting the first ``b`` rank rows, per batch entry."""
    b = np.atleast_1d(b)
    return (np.arange(n)[None, :] < b[:, None]).astype(np.float64)


def budget_gate(P: RelaxedPermutation, b, sizes=()) -> SoftGateVector:
    """Soft k-hot gate: sum of the first ``b`` rows of ``P`` (``b`` may vary per sample)."""
    mat = P.matrix
    n = mat.shape[-1]
    b = _check_budget(b, n)
    if mat.ndim == 2:
        if b.ndim != 0:
            raise ValueError("a single permutation takes a scalar budget")
        sel = ad.const(_rank_rows(b, n))
        gates = ad.reshape(ad.matmul(sel, mat), (n,))
    else:
        batch = mat.shape[0]
        b = np.broadcast_to(b, (batch,))
        sel = ad.const(_rank_rows(b, n)[:, None, :])
        gates = ad.reshape(ad.matmul(sel, mat), (batch, n))
    return SoftGateVector(gates, b, tuple(sizes))


def topk_mask(pi, b, forced=None) -> HardMask:
    """Hard mask of the ``b`` largest logits; ties go to the lower index.

    ``forced`` marks positions that are always on and count against ``b``.
    """
    v = np.asarray(pi.data if isinstance(pi, DiffValue) else _values(pi).data, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    n = v.shape[-1]
    b = np.broadcast_to(_check_budget(b, n), (v.shape[0],))
    bits = np.zeros(v.shape, dtype=np.int64)
    if forced is not None:
        forced = np.broadcast_to(np.asarray(forced, dtype=bool), v.shape)
        if np.any(forced.sum(axis=-1) > b):
            raise ValueError("forced positions exceed the budget")
        v = np.where(forced, np.inf, v)
    order = np.argsort(-v, axis=-1, kind="stable")
    for r in range(v.shape[0]):
        bits[r, order[r, : b[r]]] = 1
    return HardMask(bits[0] if single else bits)


def gumbel_sigmoid(d, tau: float, rng: SeededRng | None = None, noise=True) -> DiffValue:
    """``sigmoid((d + g1 - g2) / tau)`` with Gumbel draws; ``noise=False`` drops them."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    d = ad.as_value(d)
    if noise:
        if rng is None:
            raise ValueError("gumbel_sigmoid with noise needs an rng")
        g = sample_gumbel(rng, d.shape).data - sample_gumbel(rng, d.shape).data
        d = ad.add(d, ad.const(g))
    return ad.sigmoid(ad.scale(d, 1.0 / tau))


def hard_round(w):
    return (np.asarray(w) >= 0.5).astype(np.float64)


def st_round(w) -> DiffValue:
    """Round to {0, 1} (0.5 goes up) with an identity backward."""
    return ad.straight_through(w, hard_round)


def st_topk(pi, b, tau=1.0, rng: SeededRng | None = None, noise=True, forced=None, sizes=()):
    """Straight-through top-k over ``softmax((pi + G) / tau)``.

    Forward is the hard k-hot mask; backward copies the gradient onto the
    softmax as if the discretisation were the identity.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    v = _values(pi)
    n = v.shape[-1]
    b = _check_budget(b, n)
    if noise:
        if rng is None:
            raise ValueError("st_topk with noise needs an rng")
        v = ad.add(v, sample_gumbel(rng, v.shape))
    soft_in = v if v.ndim > 1 else ad.reshape(v, (1, n))
    soft = ad.softmax_rows(ad.scale(soft_in, 1.0 / tau))
    if v.ndim == 1:
        soft = ad.reshape(soft, (n,))
    hard = topk_mask(v.data, b, forced=forced).bits.astype(np.float64)
    # forward value == hard, gradient == d soft
    gates = ad.add(soft, ad.const(hard - soft.data))
    return SoftGateVector(gates, b, tuple(sizes))


def hinge_utilization(d, beta=2.0, beta_m=1.0, weights=None) -> DiffValue:
    """``sum(ReLU(d + beta)) / beta_m``; flat once a logit reaches ``-beta``.

    ``d`` is a DiffValue (any shape) or a list of scalar DiffValues.
    ``weights`` optionally scales each term (e.g. to count only allocated layers).
    """
    if beta <= 0 or beta_m <= 0:
        raise ValueError("beta and beta_m must be positive")
    if isinstance(d, (list, tuple)):
        d = ad.concat([ad.reshape(ad.as_value(x), (1,)) for x in d], axis=0)
    terms = ad.relu(ad.add(d, beta))
    if weights is not None:
        terms = ad.mul(terms, ad.as_value(weights))
    return ad.scale(ad.sum_axis(terms), 1.0 / beta_m)


def logit_margin(pi, b, eligible=None) -> np.ndarray:
    """Gap between the b-th and (b+1)-th largest logit (per row).

    ``eligible`` restricts the ranking to a subset of positions.
    """
    v = np.atleast_2d(np.asarray(pi.data if isinstance(pi, DiffValue) else pi, dtype=np.float64))
    b = np.broadcast_to(np.asarray(b), (v.shape[0],))
    out = np.empty(v.shape[0])
    for r in range(v.shape[0]):
        row = v[r] if eligible is None else v[r][np.asarray(eligible, dtype=bool)]
        if not 0 < b[r] < row.size:
            raise ValueError(f"margin needs 0 < b < n, got b={b[r]}, n={row.size}")
        s = np.sort(row)[::-1]
        out[r] = s[b[r] - 1] - s[b[r]]
    return out
