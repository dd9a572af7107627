"""Ranking and adversarial losses built on :mod:`listda.autodiff`.

Score nodes are ``(b, ℓ)`` batches of lists (a single ``(ℓ,)`` list is
promoted).  Each loss returns a :class:`LossValue` whose ``node`` is the
mean over lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LossValue:
    node: ad.Node
    per_list: np.ndarray

    @property
    def value(self):
        return self.node.item()


def _batch(s, y):
    s = ad.as_node(s)
    y = np.asarray(y, dtype=np.float64)
    if s.ndim == 1:
        s = ad.reshape(s, (1, s.shape[0]))
        y = y.reshape(1, -1)
    if s.shape != y.shape:
        raise ad.ShapeError("loss", s.shape, y.shape)
    if np.any(y < 0):
        raise ValueError("labels must be nonnegative")
    return s, y


def _finish(per_list):
    return LossValue(ad.mean(per_list), per_list.value.copy())


def softmax_ce_loss(s, y):
    """``-Σ_i y_i log softmax(s)_i`` per list, labels used unnormalized."""
    s, y = _batch(s, y)
    per_list = ad.scale(ad.sum(ad.mul(ad.log_softmax(s, axis=-1), y), axis=-1), -1.0)
    return _finish(per_list)


def pairwise_logistic_loss(s, y):
    """``Σ_{i,j: y_i > y_j} log(1 + exp(s_j - s_i))`` per list."""
    s, y = _batch(s, y)
    b, n = s.shape
    diff = ad.sub(ad.reshape(s, (b, 1, n)), ad.reshape(s, (b, n, 1)))  # [b, i, j] = s_j - s_i
    mask = (y[:, :, None] > y[:, None, :]).astype(np.float64)
    per_list = ad.sum(ad.reshape(ad.mul(ad.softplus(diff), mask), (b, n * n)), axis=-1)
    return _finish(per_list)


def adversarial_logistic(a_hat, a):
    """``log(1 + exp((1 - 2a) â))``; element-wise node, no reduction."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("domain identity must be 0 (source) or 1 (target)")
    return ad.softplus(ad.mul(a_hat, 1.0 - 2.0 * a))


def zero_one_adversarial(a_hat, a):
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return (1 - a) * (a_hat >= 0) + a * (a_hat < 0)


def balanced_01_loss(pred_source, pred_target):
    """``E_μ[f] + E_μ'[1 - f]`` for binary decisions ``f`` on each sample."""
    pred_source = np.asarray(pred_source, dtype=np.float64)
    pred_target = np.asarray(pred_target, dtype=np.float64)
    if pred_source.size == 0 or pred_target.size == 0:
        raise ValueError("balanced 0-1 loss needs two nonempty samples")
    return float(pred_source.mean() + (1.0 - pred_target).mean())


def _atom_masses(points):
    points = np.asarray(points, dtype=np.float64)
    points = points.reshape(points.shape[0], -1)
    counts = {}
    for row in points:
        key = row.tobytes()
        counts[key] = counts.get(key, 0) + 1
    return {key: c / points.shape[0] for key, c in counts.items()}


def min_balanced_01_loss(sample_source, sample_target):
    """Balanced 0-1 loss of the Bayes discriminator ``1[μ'(x) >= μ(x)]`` on the atoms."""
    if len(sample_source) == 0 or len(sample_target) == 0:
        raise ValueError("balanced 0-1 loss needs two nonempty samples")
    p = _atom_masses(sample_source)
    q = _atom_masses(sample_target)
    total = 0.0
    for key in sorted(set(p) | set(q)):
        mu, mu_prime = p.get(key, 0.0), q.get(key, 0.0)
        f = 1.0 if mu_prime >= mu else 0.0
        total += f * mu + (1.0 - f) * mu_prime
    return total
