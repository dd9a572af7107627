"""Ranking data types, exact evaluation metrics and the paired t-test.

Rank assignments are 1-based: ``r[i]`` is the predicted rank of item ``i``.
DCG uses base-2 logarithms and the identity gain.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import special


@dataclass(frozen=True)
class RankedList:
    """One list of ``ℓ`` items, optionally with nonnegative ground-truth scores."""

    items: np.ndarray
    labels: np.ndarray | None = None
    list_id: object = None

    def __post_init__(self):
        items = np.atleast_2d(np.asarray(self.items, dtype=np.float64))
        if items.shape[0] < 1:
            raise ValueError("a list needs at least one item")
        object.__setattr__(self, "items", items)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if labels.shape[0] != items.shape[0]:
                raise ValueError(
                    f"list {self.list_id!r}: {labels.shape[0]} labels for {items.shape[0]} items")
            if np.any(labels < 0) or not np.all(np.isfinite(labels)):
                raise ValueError(f"list {self.list_id!r}: labels must be finite and >= 0")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.items.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RankedList):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.list_id == other.list_id and same_labels
                and np.array_equal(self.items, other.items))

    __hash__ = None


@dataclass(frozen=True)
class RankAssignment:
    """A permutation of ``1..ℓ``; ``ranks[i]`` is the rank of item ``i``."""

    ranks: tuple

    def __post_init__(self):
        ranks = tuple(int(r) for r in np.asarray(self.ranks).reshape(-1))
        if sorted(ranks) != list(range(1, len(ranks) + 1)):
            raise ValueError(f"ranks {ranks} are not a permutation of 1..{len(ranks)}")
        object.__setattr__(self, "ranks", ranks)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.ranks, dtype=dtype or np.intp)

    def __len__(self):
        return len(self.ranks)

    def order(self):
        return rank_to_order(self)


def _ranks(r):
    return np.asarray(r, dtype=np.intp).reshape(-1)


def _labels(y):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if np.any(y < 0):
        raise ValueError("labels must be nonnegative")
    return y


def _binary(y):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"labels must be binary, got {np.unique(y)}")
    return y


def ranks_from_scores(s):
    """Descending order of ``s``; ties go to the lower item index."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    order = np.lexsort((np.arange(s.size), -s))
    ranks = np.empty(s.size, dtype=np.intp)
    ranks[order] = np.arange(1, s.size + 1)
    return RankAssignment(tuple(ranks))


def rank_to_order(r):
    """Item indices (0-based) sorted by rank: ``r[order[i]] == i + 1``."""
    r = _ranks(r)
    order = np.empty(r.size, dtype=np.intp)
    order[r - 1] = np.arange(r.size)
    return order


def order_to_ranks(order):
    order = np.asarray(order, dtype=np.intp).reshape(-1)
    ranks = np.empty(order.size, dtype=np.intp)
    ranks[order] = np.arange(1, order.size + 1)
    return RankAssignment(tuple(ranks))


def ideal_ranks(y):
    return ranks_from_scores(_labels(y))


def reciprocal_rank(r, y, k=None):
    """``max({1/r_i : y_i = 1} ∪ {0})``, optionally truncated at rank ``k``."""
    r, y = _ranks(r), _binary(y)
    relevant = r[y == 1]
    if k is not None:
        relevant = relevant[relevant <= k]
    return 1.0 / relevant.min() if relevant.size else 0.0


def rr_at_k(r, y, k):
    return reciprocal_rank(r, y, k=k)


def dcg(r, y, k=None):
    r, y = _ranks(r), _labels(y)
    keep = r <= k if k is not None else np.ones(r.size, dtype=bool)
    return float(np.sum(y[keep] / np.log2(r[keep] + 1.0)))


def idcg(y, k=None):
    return dcg(ideal_ranks(y), y, k=k)


def ndcg(r, y, k=None):
    ideal = idcg(y, k=k)
    if ideal <= 0:
        raise ValueError("no relevant items")
    return dcg(r, y, k=k) / ideal


def ndcg_at_k(r, y, k):
    return ndcg(r, y, k=k)


def average_precision(r, y):
    r, y = _ranks(r), _binary(y)
    n_rel = int(y.sum())
    if n_rel == 0:
        raise ValueError("no relevant items")
    hit_ranks = np.sort(r[y == 1])
    precisions = np.arange(1, n_rel + 1) / hit_ranks
    return float(precisions.mean())


def binarize(y, positive_min):
    """Grade ``>= positive_min`` maps to 1, everything else to 0."""
    y = np.asarray(y)
    return (y >= positive_min).astype(np.float64)


def student_t_sf(t, df):
    """Upper tail ``P(T > t)`` via the regularized incomplete beta function."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(a, b):
    """Two-sided paired Student t-test of ``a - b``; returns ``(t, p)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0 or np.all(d == d[0]):
        raise ValueError("differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    p = min(1.0, 2.0 * student_t_sf(abs(t), n - 1))
    return float(t), float(p)


# ----------------------------------------------------------------- reporting

METRICS = ("ndcg", "rr", "map", "dcg")


def parse_metric(name):
    """``"ndcg@5"`` -> ``("ndcg", 5)``; ``"mrr"`` is an alias of ``"rr"``."""
    base, _, cut = name.lower().partition("@")
    base = {"mrr": "rr", "ap": "map"}.get(base, base)
    if base not in METRICS:
        raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")
    return base, (int(cut) if cut else None)


def evaluate_list(scores, labels, metric, positive_min=1):
    """Metric value for one list, or ``None`` when it is undefined (no relevant items)."""
    base, k = parse_metric(metric)
    r = ranks_from_scores(scores)
    if base in ("rr", "map"):
        y = binarize(labels, positive_min)
        if base == "rr":
            return reciprocal_rank(r, y, k=k)
        return average_precision(r, y) if y.any() else None
    if base == "dcg":
        return dcg(r, labels, k=k)
    return ndcg(r, labels, k=k) if idcg(labels, k=k) > 0 else None


@dataclass
class MetricReport:
    """Per-list metric values and their means."""

    values: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def add(self, list_id, metric, value):
        if value is None:
            self.skipped[metric] = self.skipped.get(metric, 0) + 1
        else:
            self.values[(str(list_id), metric)] = float(value)

    @property
    def metrics(self):
        seen = []
        for _, m in self.values:
            if m not in seen:
                seen.append(m)
        return seen

    def per_list(self, metric):
        return {lid: v for (lid, m), v in self.values.items() if m == metric}

    def aggregate(self):
        groups = defaultdict(list)
        for (_, m), v in self.values.items():
            groups[m].append(v)
        return {m: float(np.mean(vs)) for m, vs in groups.items()}

    def to_tsv(self):
        lines = ["list_id\tmetric\tvalue"]
        for (lid, m), v in self.values.items():
            lines.append(f"{lid}\t{m}\t{v!r}")
        for m, v in self.aggregate().items():
            lines.append(f"__mean__\t{m}\t{v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        report = cls()
        lines = text.strip("\n").split("\n")
        if not lines or lines[0].split("\t") != ["list_id", "metric", "value"]:
            raise ValueError("not a metric report: bad header")
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {n}: expected 3 tab-separated fields")
            lid, m, v = parts
            if lid != "__mean__":
                report.values[(lid, m)] = float(v)
        return report

    def to_text(self):
        agg = self.aggregate()
        width = max([len(m) for m in agg] + [6])
        rows = [f"{'metric':<{width}}  {'mean':>8}  {'lists':>6}"]
        for m, v in agg.items():
            rows.append(f"{m:<{width}}  {v:8.4f}  {len(self.per_list(m)):6d}")
        for m, n in self.skipped.items():
            rows.append(f"{m:<{width}}  skipped {n} lists without relevant items")
        return "\n".join(rows) + "\n"


def evaluate(score_lists, lists, metrics, positive_min=1):
    """Score every list with every metric; lists without relevant items are skipped."""
    report = MetricReport()
    for scores, lst in zip(score_lists, lists):
        if lst.labels is None:
            raise ValueError(f"list {lst.list_id!r} has no labels")
        for metric in metrics:
            report.add(lst.list_id, metric,
                       evaluate_list(scores, lst.labels, metric, positive_min))
    return report
