"""Numerical harness for the list-level adaptation bound

    R_T(h∘g) <= R_S(h∘g) + 4 (L_u L_y L_g + B ℓ L_h) W1(list features) + λ*_g

evaluated on equal-size empirical samples.  Every constant is computed on
the finite supports, so the inequality is a statement about the empirical
distributions and each field records how it was obtained.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .divergence import canonical_order, wasserstein1_exact
from .losses import softmax_ce_loss
from .metrics import binarize, idcg
from .plackett_luce import expected_utility_exact, max_utility

BOUND_METRICS = ("rr", "ndcg")


def spectral_norm(w):
    return float(np.linalg.norm(np.atleast_2d(w), 2))


def power_iteration_norm(w, n_iter=200, seed=0):
    """Largest singular value by power iteration on ``WᵀW``."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    v = np.random.default_rng(seed).normal(size=w.shape[1])
    sigma = 0.0
    for _ in range(n_iter):
        u = w @ v
        v = w.T @ u
        norm = np.linalg.norm(v)
        if norm == 0:
            return 0.0
        v /= norm
        sigma = float(np.linalg.norm(w @ v))
    return sigma


def mlp_lipschitz_upper(scorer, norm=spectral_norm):
    """Product-of-layer-norms upper bound for the scorer ``x_i ↦ s_i``.

    The two input branches act on disjoint coordinates, so the pair is
    Lipschitz with the larger of the two branch constants.
    """
    p = scorer.params

    def branch(name):
        return norm(p[f"{name}.0.w"]) * norm(p[f"{name}.1.w"])

    lip = branch("shared")
    if scorer.n_disjoint:
        lip = max(lip, branch("disjoint"))
    return lip * norm(p["merge.w"]) * norm(p["head.w"])


def _pair_ratios(num_points, den_points):
    num = pdist(np.asarray(num_points, dtype=np.float64).reshape(len(num_points), -1))
    den = pdist(np.asarray(den_points, dtype=np.float64).reshape(len(den_points), -1))
    return num, den


def estimate_lipschitz_forward(fn, points):
    """``max ‖f(a) - f(b)‖ / ‖a - b‖`` over sampled pairs (a lower bound on the constant)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("need at least two sample points")
    out = np.asarray([np.asarray(fn(x), dtype=np.float64) for x in points])
    num, den = _pair_ratios(out, points)
    keep = den > 0
    if not keep.any():
        raise ValueError("all sample points coincide")
    return float((num[keep] / den[keep]).max())


def lipschitz_on_support(values, inputs):
    """Exact Lipschitz constant of ``inputs[i] ↦ values[i]`` on a finite set.

    Returns ``inf`` when two coincident inputs carry different values.
    """
    num, den = _pair_ratios(values, inputs)
    if num.size == 0:
        return 0.0
    collide = den == 0
    if np.any(collide & (num > 0)):
        return math.inf
    keep = ~collide
    return float((num[keep] / den[keep]).max()) if keep.any() else 0.0


def estimate_inverse_lipschitz(g, inputs):
    """``max ‖x - x'‖ / ‖g(x) - g(x')‖``; ``inf`` when distinct inputs collide."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) < 2:
        raise ValueError("need at least two sample lists")
    feats = np.asarray([np.asarray(g(x), dtype=np.float64) for x in inputs])
    return lipschitz_on_support(inputs, feats)


def _risk_per_list(scores, labels, metric):
    return np.array([max(max_utility(y, metric) - expected_utility_exact(s, y, metric), 0.0)
                     for s, y in zip(scores, labels)])


def _head_scores(z, w, b):
    return (np.asarray(z) @ w)[..., 0] + b[0]


@dataclass
class LambdaStar:
    value: float
    risk_source: float
    risk_target: float
    head_w: np.ndarray
    head_b: np.ndarray
    steps: int

    @property
    def head_lipschitz(self):
        return spectral_norm(self.head_w)


def estimate_lambda_star(z_source, y_source, z_target, y_target, metric, budget=200, lr=0.05,
                         init=None, seed=0, eval_every=10):
    """Upper bound on ``min_h' R_S(h'∘g) + R_T(h'∘g)`` over linear heads.

    Trains a linear head on frozen features with the softmax cross-entropy
    surrogate on both labeled domains and returns the best achieved sum of
    exact risks among the evaluated iterates.  ``init`` is an optional
    ``(w, b)`` starting head; ``budget=0`` evaluates it unchanged.
    """
    if y_source is None or y_target is None or any(y is None for y in list(y_source) + list(y_target)):
        raise ValueError("lambda* estimation needs labels on both domains")
    zs, zt = np.asarray(z_source, dtype=np.float64), np.asarray(z_target, dtype=np.float64)
    ys, yt = np.asarray(y_source, dtype=np.float64), np.asarray(y_target, dtype=np.float64)
    k = zs.shape[-1]
    if init is None:
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (k + 1))
        w, b = rng.uniform(-bound, bound, (k, 1)), np.zeros(1)
    else:
        w, b = np.array(init[0], dtype=np.float64).reshape(k, 1), np.array(init[1], dtype=np.float64).reshape(1)

    def risks(w, b):
        rs = _risk_per_list(_head_scores(zs, w, b), ys, metric).mean()
        rt = _risk_per_list(_head_scores(zt, w, b), yt, metric).mean()
        return float(rs), float(rt)

    best = LambdaStar(math.inf, math.nan, math.nan, w, b, 0)
    z_all, y_all = np.concatenate([zs, zt]), np.concatenate([ys, yt])
    b_all, n_all = z_all.shape[0], z_all.shape[1]
    for step in range(budget + 1):
        if step % eval_every == 0 or step == budget:
            rs, rt = risks(w, b)
            if rs + rt < best.value:
                best = LambdaStar(rs + rt, rs, rt, w.copy(), b.copy(), step)
        if step == budget:
            break
        wn, bn = ad.parameter(w), ad.parameter(b)
        z = ad.constant(z_all.reshape(b_all * n_all, k))
        s = ad.reshape(ad.add(ad.matmul(z, wn), bn), (b_all, n_all))
        grads = ad.backward(softmax_ce_loss(s, y_all).node)
        w, b = w - lr * grads[wn], b - lr * grads[bn]
    return best


def ndcg_lipschitz(ell, c):
    """``√ℓ (C + C ln²(ℓ+1))``: Lipschitz constant of NDCG in ``y`` when ``1/C <= IDCG <= C``."""
    return math.sqrt(ell) * (c + c * math.log(ell + 1) ** 2)


def idcg_constant(label_lists):
    values = np.array([idcg(y) for y in label_lists])
    if np.any(values <= 0):
        raise ValueError("every list needs a relevant item for the NDCG constant")
    return float(max(values.max(), 1.0 / values.min()))


_DIRECTIONS = {
    "risk_source": "exact (enumeration over all permutations)",
    "risk_target": "exact (enumeration over all permutations)",
    "w1_list": "exact (assignment on canonically ordered lists)",
    "L_u": "exact constant from the metric",
    "L_y": "exact on the sample support unless taken from the generator",
    "L_g": "exact on the union of both sample supports; lower bound for the population",
    "L_h": "exact (spectral norm, max over the evaluated and the lambda* head)",
    "B": "exact utility upper bound",
    "lambda_star_upper": "upper bound (best trained linear head)",
}


@dataclass
class BoundReport:
    metric: str
    ell: int
    n: int
    risk_source: float
    risk_target: float
    w1_list: float
    L_u: float
    L_y: float
    L_g: float
    L_h: float
    B: float
    lambda_star_upper: float
    lambda_star_risk_source: float
    lambda_star_risk_target: float
    coefficient: float
    rhs: float
    slack: float
    C: float = math.nan
    head_lipschitz_sampled: float = math.nan
    directions: dict = field(default_factory=lambda: dict(_DIRECTIONS))

    @property
    def holds(self):
        return self.slack >= 0

    def to_tsv(self):
        rows = []
        for key, value in asdict(self).items():
            if key == "directions":
                continue
            rows.append(f"{key}\t{value!r}" if isinstance(value, float) else f"{key}\t{value}")
        rows.extend(f"direction.{k}\t{v}" for k, v in self.directions.items())
        return "\n".join(rows) + "\n"

    def to_json(self):
        def clean(v):
            return v if not isinstance(v, float) or math.isfinite(v) else repr(v)

        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=2, sort_keys=True) + "\n"


def _canonical(z, *aligned):
    """Reorder each list by the canonical order of its features and apply it to ``aligned``."""
    orders = [canonical_order(zi) for zi in z]
    out = [np.stack([zi[o] for zi, o in zip(z, orders)])]
    for arr in aligned:
        out.append(np.stack([np.asarray(a)[o] for a, o in zip(arr, orders)]))
    return out


def bound_from_features(z_source, y_source, z_target, y_target, head_w, head_b, metric="ndcg",
                        latent_source=None, latent_target=None, label_lipschitz=None, B=None,
                        lambda_budget=200, lambda_lr=0.05, seed=0):
    """Bound terms for a linear head ``s_i = W v_i + b`` on given feature lists.

    ``latent_*`` are the pre-image coordinates used for ``L_g`` and ``L_y``
    (the observed inputs when no generator is known).  ``label_lipschitz``
    overrides the empirical ``L_y`` with a constant known by construction,
    which is valid only when the labels are the generator's raw labels.
    """
    if metric not in BOUND_METRICS:
        raise ValueError(f"bound metric must be one of {BOUND_METRICS}; got {metric!r}")
    zs, zt = np.asarray(z_source, dtype=np.float64), np.asarray(z_target, dtype=np.float64)
    if zs.shape != zt.shape:
        raise ValueError(f"equal-size samples with equal list shape required: {zs.shape} vs {zt.shape}")
    n, ell, _ = zs.shape
    ys, yt = np.asarray(y_source, dtype=np.float64), np.asarray(y_target, dtype=np.float64)
    xs = zs if latent_source is None else np.asarray(latent_source, dtype=np.float64)
    xt = zt if latent_target is None else np.asarray(latent_target, dtype=np.float64)
    zs, ys, xs = _canonical(zs, ys, xs)
    zt, yt, xt = _canonical(zt, yt, xt)
    head_w = np.asarray(head_w, dtype=np.float64).reshape(zs.shape[-1], 1)
    head_b = np.asarray(head_b, dtype=np.float64).reshape(1)

    r_s = float(_risk_per_list(_head_scores(zs, head_w, head_b), ys, metric).mean())
    r_t = float(_risk_per_list(_head_scores(zt, head_w, head_b), yt, metric).mean())
    w1 = wasserstein1_exact(zs.reshape(n, -1), zt.reshape(n, -1))

    c = math.nan
    if metric == "rr":
        L_u = 1.0
    else:
        c = idcg_constant(list(ys) + list(yt))
        L_u = ndcg_lipschitz(ell, c)
    if B is None:
        B = 1.0
    z_all = np.concatenate([zs, zt]).reshape(2 * n, -1)
    x_all = np.concatenate([xs, xt]).reshape(2 * n, -1)
    y_all = np.concatenate([ys, yt])
    L_g = lipschitz_on_support(x_all, z_all)
    L_y = float(label_lipschitz) if label_lipschitz is not None else lipschitz_on_support(y_all, x_all)

    lam = estimate_lambda_star(zs, ys, zt, yt, metric, budget=lambda_budget, lr=lambda_lr,
                               init=(head_w, head_b), seed=seed)
    L_h = max(spectral_norm(head_w), lam.head_lipschitz)
    label_term = 0.0 if L_y == 0 or L_g == 0 else L_u * L_y * L_g
    coefficient = 4.0 * (label_term + B * ell * L_h)
    # a non-invertible feature map makes the bound vacuous rather than undefined
    w1_term = math.inf if math.isinf(coefficient) else coefficient * w1
    rhs = r_s + w1_term + lam.value
    try:
        sampled = estimate_lipschitz_forward(lambda v: v @ head_w, zs.reshape(n * ell, -1)[:64])
    except ValueError:
        sampled = math.nan
    return BoundReport(metric=metric, ell=ell, n=n, risk_source=r_s, risk_target=r_t, w1_list=w1,
                       L_u=L_u, L_y=L_y, L_g=L_g, L_h=L_h, B=float(B),
                       lambda_star_upper=lam.value, lambda_star_risk_source=lam.risk_source,
                       lambda_star_risk_target=lam.risk_target, coefficient=coefficient,
                       rhs=rhs, slack=rhs - r_t, C=c, head_lipschitz_sampled=sampled)


def theorem2_report(scorer, source, target, metric="ndcg", truth=None, n=None, positive_min=1.0,
                    B=None, lambda_budget=200, lambda_lr=0.05, seed=0):
    """Evaluate the bound for ``scorer`` on two labeled datasets of equal-length lists.

    Samples are cut to ``n = min(|S|, |T|)`` (or the given ``n``) lists by
    a seeded draw.  For ``rr`` labels are binarized at ``positive_min``.
    With a generator ``truth`` the latent coordinates give the pre-images,
    and its label constant is used when the labels are exactly the
    generator's; otherwise ``L_y`` is measured on the support.
    """
    if metric not in BOUND_METRICS:
        raise ValueError(f"bound metric must be one of {BOUND_METRICS}; got {metric!r}")
    if not (source.labeled and target.labeled):
        raise ValueError("the bound harness needs labels on both domains")
    rng = np.random.default_rng(seed)
    m = min(len(source), len(target)) if n is None else int(n)
    if m > min(len(source), len(target)) or m < 1:
        raise ValueError(f"cannot draw {m} lists from samples of {len(source)} and {len(target)}")
    pick_s = np.sort(rng.choice(len(source), m, replace=False))
    pick_t = np.sort(rng.choice(len(target), m, replace=False))

    def gather(ds, pick, domain):
        items = [ds.items()[i] for i in pick]
        raw = [ds.lists[i].items for i in pick]
        if len({x.shape for x in items}) != 1:
            raise ValueError("the bound harness needs lists of one length")
        labels = [ds.lists[i].labels for i in pick]
        if metric == "rr":
            labels = [binarize(y, positive_min) for y in labels]
        latent = np.stack([truth.to_latent(x, domain) for x in raw]) if truth is not None else np.stack(raw)
        z = scorer.feature_map(np.stack(items)).value
        return z, np.stack(labels), latent

    zs, ys, xs = gather(source, pick_s, "source")
    zt, yt, xt = gather(target, pick_t, "target")
    label_lip = None
    if truth is not None and metric == "ndcg":
        # the generator constant applies only to the generator's own labels
        if np.array_equal(ys, truth.labels_for(xs)) and np.array_equal(yt, truth.labels_for(xt)):
            label_lip = truth.label_lipschitz
    return bound_from_features(zs, ys, zt, yt, scorer.params["head.w"], scorer.params["head.b"],
                               metric=metric, latent_source=xs, latent_target=xt,
                               label_lipschitz=label_lip, B=B, lambda_budget=lambda_budget,
                               lambda_lr=lambda_lr, seed=seed)
