"""Plackett-Luce distributions over rank assignments and expected utilities.

Scores ``s`` parameterize the model through weights ``exp(s)``; weights are
kept in log-space so large scores never overflow.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .metrics import RankAssignment, idcg, ndcg, rank_to_order, reciprocal_rank, ranks_from_scores

MAX_EXACT_LEN = 8
UTILITIES = ("rr", "ndcg")
_MASK = -1e30


@dataclass(frozen=True)
class PLModel:
    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=np.float64).reshape(-1)
        if lw.size < 1 or not np.all(np.isfinite(lw)):
            raise ValueError("Plackett-Luce weights must be finite and positive")
        lw.setflags(write=False)
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def from_weights(cls, w):
        w = np.asarray(w, dtype=np.float64)
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("Plackett-Luce weights must be finite and positive")
        return cls(np.log(w))

    @classmethod
    def from_scores(cls, s):
        return cls(np.asarray(s, dtype=np.float64))

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def __len__(self):
        return self.log_weights.size


@lru_cache(maxsize=None)
def permutation_table(n):
    """All orders of ``range(n)`` and the matching 1-based rank matrix."""
    orders = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    ranks = np.empty_like(orders)
    rows = np.arange(orders.shape[0])[:, None]
    ranks[rows, orders] = np.arange(1, n + 1)
    orders.setflags(write=False)
    ranks.setflags(write=False)
    return orders, ranks


def _suffix_logsumexp(x):
    return np.logaddexp.accumulate(x[..., ::-1], axis=-1)[..., ::-1]


def log_pmf_orders(log_weights, orders):
    lw = np.asarray(log_weights)[orders]
    return np.sum(lw - _suffix_logsumexp(lw), axis=-1)


def pl_log_pmf(model, r):
    order = rank_to_order(r)
    if order.size != len(model):
        raise ValueError(f"rank assignment of length {order.size} for a model of length {len(model)}")
    return float(log_pmf_orders(model.log_weights, order[None, :])[0])


def pl_pmf(model, r):
    return float(np.exp(pl_log_pmf(model, r)))


def pl_sample_orders(model, rng, n):
    """``n`` sequential draws without replacement; returns an ``(n, ℓ)`` order array."""
    lw = model.log_weights
    size = lw.size
    remaining = np.ones((n, size), dtype=bool)
    orders = np.empty((n, size), dtype=np.intp)
    rows = np.arange(n)
    for stage in range(size):
        logits = np.where(remaining, lw, -np.inf)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        cdf = np.cumsum(w, axis=1)
        u = rng.random(n) * cdf[:, -1]
        above = cdf > u[:, None]
        # u may round up to the total; fall back to the last remaining item
        last = size - 1 - np.argmax(remaining[:, ::-1], axis=1)
        pick = np.where(above.any(axis=1), np.argmax(above, axis=1), last)
        orders[:, stage] = pick
        remaining[rows, pick] = False
    return orders


def pl_sample(model, rng):
    order = pl_sample_orders(model, rng, 1)[0]
    ranks = np.empty(order.size, dtype=np.intp)
    ranks[order] = np.arange(1, order.size + 1)
    return RankAssignment(tuple(ranks))


def _check_metric(metric):
    if metric not in UTILITIES:
        raise ValueError(f"unknown utility {metric!r}; expected one of {UTILITIES}")


def utility(r, y, metric):
    """``u(r, y)``; NDCG of a list without relevant items counts as 0."""
    _check_metric(metric)
    if metric == "rr":
        return reciprocal_rank(r, y)
    return ndcg(r, y) if idcg(y) > 0 else 0.0


def utility_table(ranks, y, metric):
    """Vectorized ``u`` for each row of an ``(m, ℓ)`` rank matrix."""
    _check_metric(metric)
    y = np.asarray(y, dtype=np.float64)
    if metric == "rr":
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("reciprocal rank needs binary labels")
        if not y.any():
            return np.zeros(ranks.shape[0])
        best = np.where(y == 1, ranks, np.iinfo(np.intp).max).min(axis=1)
        return 1.0 / best
    ideal = idcg(y)
    if ideal <= 0:
        return np.zeros(ranks.shape[0])
    return (y / np.log2(ranks + 1.0)).sum(axis=1) / ideal


def max_utility(y, metric):
    """Utility of the descending order of ``y`` (optimal for RR and NDCG)."""
    return utility(ranks_from_scores(y), y, metric)


def expected_utility_exact(s, y, metric):
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size > MAX_EXACT_LEN:
        raise ValueError(
            f"exact enumeration supports ℓ <= {MAX_EXACT_LEN}, got {s.size}; "
            "use expected_utility_mc")
    orders, ranks = permutation_table(s.size)
    p = np.exp(log_pmf_orders(s, orders))
    return float(np.dot(p, utility_table(ranks, y, metric)))


def expected_utility_mc(s, y, metric, n_samples, rng):
    """Monte-Carlo estimate and its standard error."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    orders = pl_sample_orders(PLModel.from_scores(s), rng, n_samples)
    ranks = np.empty_like(orders)
    ranks[np.arange(n_samples)[:, None], orders] = np.arange(1, orders.shape[1] + 1)
    u = utility_table(ranks, y, metric)
    se = u.std(ddof=1) / np.sqrt(n_samples) if n_samples > 1 else 0.0
    return float(u.mean()), float(se)


def expected_utility_node(s, y, metric):
    """Differentiable ``E_{R ~ PL(exp(s))}[u(R, y)]`` for a length-ℓ score node."""
    s = ad.as_node(s)
    n = s.shape[0]
    if n > MAX_EXACT_LEN:
        raise ValueError(f"exact enumeration supports ℓ <= {MAX_EXACT_LEN}, got {n}")
    orders, ranks = permutation_table(n)
    u = utility_table(ranks, y, metric)
    permuted = ad.take(s, orders, axis=0)
    mask = np.where(np.arange(n)[None, :] >= np.arange(n)[:, None], 0.0, _MASK)
    suffix = ad.logsumexp(ad.add(ad.reshape(permuted, (orders.shape[0], 1, n)), mask), axis=-1)
    log_p = ad.sum(ad.sub(permuted, suffix), axis=1)
    return ad.sum(ad.mul(ad.exp(log_p), u))


def expected_utility_grad(s, y, metric):
    s_node = ad.parameter(np.asarray(s, dtype=np.float64))
    grads = ad.backward(expected_utility_node(s_node, y, metric))
    return grads[s_node]


def risk(score_lists, lists, metric, n_samples=None, rng=None):
    """Mean over lists of ``max_r u(r, y) - E[u(R, y)]``.

    Lists longer than the exact-enumeration threshold need ``n_samples`` and
    ``rng`` for a Monte-Carlo estimate.
    """
    gaps = []
    for s, lst in zip(score_lists, lists):
        y = lst.labels if hasattr(lst, "labels") else lst
        if y is None:
            raise ValueError("risk needs labels on every list")
        best = max_utility(y, metric)
        if len(s) <= MAX_EXACT_LEN:
            expected = expected_utility_exact(s, y, metric)
        elif n_samples and rng is not None:
            expected, _ = expected_utility_mc(s, y, metric, n_samples, rng)
        else:
            raise ValueError("list too long for exact risk; pass n_samples and rng")
        gaps.append(max(best - expected, 0.0))
    if not gaps:
        raise ValueError("risk of an empty collection of lists")
    return float(np.mean(gaps))
