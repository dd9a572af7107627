"""Joint ranking and adversarial alignment training.

One step builds a single graph: the ranking loss on a labeled source batch
and, in the alignment modes, the discriminator ensemble loss on source and
target features passed through :func:`autodiff.grad_reverse`.  A single
backward pass then yields descent directions for the discriminators and the
reversed (ascent) direction for the feature map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .data import Dataset
from .losses import pairwise_logistic_loss, softmax_ce_loss
from .metrics import RankedList, evaluate
from .models import ItemDiscriminator, MLPScorer, SetDiscriminator, ensemble_adversarial_loss
from .validation import check_lists, group_by_length

MODES = ("zero_shot", "item_da", "list_da")
LOSSES = {"softmax_ce": softmax_ce_loss, "pairwise_logistic": pairwise_logistic_loss}


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NumericalAbort(FloatingPointError):
    """Raised when a step produces a non-finite value."""

    def __init__(self, step, detail):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "list_da"
    lam: float = 1.0
    eta_rank: float = 0.05
    eta_ad: float = 0.05
    decay_factor: float = 0.7
    decay_every: int = 500
    steps: int = 2000
    batch_size: int = 32
    ensemble_size: int = 5
    loss: str = "softmax_ce"
    seed: int = 0
    hidden: int = 64
    k: int = 32
    disc_hidden: int = 32
    attention: bool = False
    disc_activation: str = "relu"
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"expected one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSSES:
            raise ConfigError("loss", f"expected one of {tuple(LOSSES)}, got {self.loss!r}")
        if self.mode != "zero_shot" and not self.lam > 0:
            raise ConfigError("lambda", "must be > 0 in alignment modes")
        for name in ("eta_rank", "eta_ad"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "learning rate must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor", "must lie in (0, 1]")
        for name in ("decay_every", "batch_size", "ensemble_size", "hidden", "k", "disc_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.steps < 0 or self.eval_every < 0:
            raise ConfigError("steps" if self.steps < 0 else "eval_every", "must be >= 0")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string or typed values; the key ``lambda`` maps to ``lam``."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            name = "lam" if key == "lambda" else key.replace("-", "_")
            if name not in types:
                raise ConfigError(key, "unknown training option")
            kind = types[name]
            try:
                if kind == "bool" and isinstance(value, str):
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(value)
                    value = value.lower() in ("true", "1", "yes")
                elif kind == "int":
                    value = int(value)
                elif kind == "float":
                    value = float(value)
            except ValueError:
                raise ConfigError(key, f"cannot parse {value!r} as {kind}") from None
            kwargs[name] = value
        return cls(**kwargs)

    def to_mapping(self):
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


def lr_at(step, config, kind="rank"):
    """``η · decay_factor ** (step // decay_every)`` for ``kind`` in ``{"rank", "ad"}``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    eta = config.eta_rank if kind == "rank" else config.eta_ad
    return eta * config.decay_factor ** (step // config.decay_every)


@dataclass
class TrainState:
    step: int
    scorer: MLPScorer
    discriminators: list
    running: dict = field(default_factory=dict)

    def modules(self):
        out = {"scorer": self.scorer}
        out.update({f"disc.{i}": d for i, d in enumerate(self.discriminators)})
        return out


def init_state(config, n_shared, n_disjoint=0):
    seeds = np.random.SeedSequence(config.seed).generate_state(1 + config.ensemble_size)
    scorer = MLPScorer(n_shared, n_disjoint, hidden=config.hidden, k=config.k, seed=int(seeds[0]))
    discs = []
    if config.mode == "item_da":
        discs = [ItemDiscriminator(config.k, config.disc_hidden, seed=int(s),
                                   activation=config.disc_activation) for s in seeds[1:]]
    elif config.mode == "list_da":
        discs = [SetDiscriminator(config.k, config.disc_hidden, config.attention, seed=int(s),
                                  activation=config.disc_activation) for s in seeds[1:]]
    return TrainState(0, scorer, discs)


def _as_groups(batch, labeled):
    """Accept one ``(x, y)``/``x`` group or a list of them."""
    if labeled:
        if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[1]) == 2:
            batch = [batch]
        return [(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)) for x, y in batch]
    if isinstance(batch, np.ndarray):
        batch = [batch]
    return [np.asarray(x, dtype=np.float64) for x in batch]


@dataclass(frozen=True)
class StepMetrics:
    step: int
    lr_rank: float
    lr_ad: float
    loss_rank: float
    loss_ad: float
    per_discriminator: np.ndarray

    def log_line(self):
        return f"{self.step}\t{self.lr_rank!r}\t{self.lr_ad!r}\t{self.loss_rank!r}\t{self.loss_ad!r}"


def build_objective(state, source_batch, target_batch, config):
    """Forward pass of one joint step.

    Returns ``(total, loss_rank, loss_ad, scorer_nodes, disc_nodes)``; the
    gradient of ``total`` is the update direction for every parameter.
    """
    src = _as_groups(source_batch, labeled=True)
    tgt = _as_groups(target_batch, labeled=False) if target_batch is not None else []
    if not src:
        raise ValueError("source batch is empty")
    p_s = state.scorer.bind()
    loss_fn = LOSSES[config.loss]
    n_src = sum(x.shape[0] for x, _ in src)
    loss_rank, feats_s = None, []
    for x, y in src:
        z = state.scorer.feature_map(x, p_s)
        feats_s.append(z)
        term = ad.scale(loss_fn(state.scorer.score_head(z, p_s), y).node, x.shape[0] / n_src)
        loss_rank = term if loss_rank is None else ad.add(loss_rank, term)
    p_d, loss_ad = [], None
    if config.mode != "zero_shot":
        if not tgt or sum(x.shape[0] for x in tgt) == 0:
            raise ValueError(f"mode {config.mode} needs a nonempty target batch")
        feats_t = [state.scorer.feature_map(x, p_s) for x in tgt]
        rev_s = [ad.grad_reverse(z, config.lam) for z in feats_s]
        rev_t = [ad.grad_reverse(z, config.lam) for z in feats_t]
        p_d = [d.bind() for d in state.discriminators]
        loss_ad = ensemble_adversarial_loss(state.discriminators, rev_s, rev_t, p_d)
    total = loss_rank if loss_ad is None else ad.add(loss_rank, loss_ad.node)
    return total, loss_rank, loss_ad, p_s, p_d


def joint_step(state, source_batch, target_batch, config):
    """One simultaneous update; mutates ``state`` in place and returns it with metrics.

    ``source_batch`` is ``(x, y)`` with ``x`` of shape ``(b, ℓ, p)`` or a
    list of such groups of equal list length; ``target_batch`` is an
    unlabeled ``x`` or list of them.
    """
    step = state.step
    try:
        total, loss_rank, loss_ad, p_s, p_d = build_objective(state, source_batch, target_batch, config)
        grads = ad.backward(total)
    except FloatingPointError as exc:
        raise NumericalAbort(step, str(exc)) from exc
    lr_rank, lr_ad = lr_at(step, config, "rank"), lr_at(step, config, "ad")
    state.scorer.apply_update(grads, p_s, lr_rank)
    for disc, nodes in zip(state.discriminators, p_d):
        disc.apply_update(grads, nodes, lr_ad)
    for module in state.modules().values():
        bad = [k for k, v in module.params.items() if not np.all(np.isfinite(v))]
        if bad:
            raise NumericalAbort(step, f"{module.kind} parameters {bad}")
    ad_value = loss_ad.value if loss_ad is not None else 0.0
    per_disc = loss_ad.per_list if loss_ad is not None else np.zeros(0)
    metrics = StepMetrics(step, lr_rank, lr_ad, loss_rank.item(), ad_value, per_disc)
    for key, value in (("loss_rank", metrics.loss_rank), ("loss_ad", ad_value)):
        prev = state.running.get(key, value)
        state.running[key] = 0.99 * prev + 0.01 * value
    state.step += 1
    return state, metrics


class _Stream:
    """Endless seeded epoch shuffling over list indices."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, b):
        out = []
        while len(out) < b:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            m = min(b - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + m].tolist())
            self.pos += m
        return out


def _stack(items, labels, idx):
    groups = group_by_length(idx, items)
    x = [np.stack([items[i] for i in g]) for g in groups]
    if labels is None:
        return x
    return [(xi, np.stack([labels[i] for i in g])) for xi, g in zip(x, groups)]


@dataclass
class TrainResult:
    state: TrainState
    log: list
    evaluations: list

    def log_text(self):
        return "".join(m.log_line() + "\n" for m in self.log)


def score_lists(scorer, items):
    """Scores for a sequence of ``(ℓ_i, p)`` arrays, batched by length."""
    out = [None] * len(items)
    for g in group_by_length(range(len(items)), items):
        s = scorer.scores(np.stack([items[i] for i in g])).value
        for row, i in zip(s, g):
            out[i] = row.copy()
    return out


def feature_lists(scorer, items):
    out = [None] * len(items)
    for g in group_by_length(range(len(items)), items):
        z = scorer.feature_map(np.stack([items[i] for i in g])).value
        for row, i in zip(z, g):
            out[i] = row.copy()
    return out


def train(source, target, config, eval_sets=None, metric="ndcg", callback=None):
    """Run ``config.steps`` joint steps.

    ``source`` must be a labeled :class:`Dataset`.  Only the unlabeled view
    of ``target`` is ever touched.  ``eval_sets`` maps names to labeled
    datasets evaluated every ``config.eval_every`` steps.
    """
    if not isinstance(source, Dataset) or not source.labeled:
        raise ValueError("source must be a labeled Dataset")
    if config.mode != "zero_shot":
        if target is None or len(target) == 0:
            raise ConfigError("target", f"mode {config.mode} needs target data")
        if target.ordered_columns() != source.ordered_columns():
            raise ValueError("source and target declare different feature splits")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    s_items, s_labels = source.items(), source.labels()
    state = init_state(config, len(source.shared), len(source.disjoint))
    src_stream = _Stream(len(s_items), rng)
    tgt_items, tgt_stream = None, None
    if config.mode != "zero_shot":
        tgt_items = target.unlabeled().items()
        tgt_stream = _Stream(len(tgt_items), rng)
    log, evaluations = [], []
    for step in range(config.steps):
        src_batch = _stack(s_items, s_labels, src_stream.take(config.batch_size))
        tgt_batch = None
        if tgt_stream is not None:
            tgt_batch = _stack(tgt_items, None, tgt_stream.take(config.batch_size))
        state, metrics = joint_step(state, src_batch, tgt_batch, config)
        log.append(metrics)
        if callback is not None:
            callback(state, metrics)
        if eval_sets and config.eval_every and (step + 1) % config.eval_every == 0:
            for name, ds in eval_sets.items():
                report = evaluate(score_lists(state.scorer, ds.items()), ds.lists, [metric])
                evaluations.append((step + 1, name, report.aggregate()[metric]))
    return TrainResult(state, log, evaluations)


def _to_dataset(X, y=None, domain="source", require_labels=False):
    if isinstance(X, Dataset):
        return X
    items, labels = check_lists(X, y, require_labels=require_labels)
    lists = [RankedList(x, None if labels is None else labels[i], str(i)) for i, x in enumerate(items)]
    return Dataset(tuple(lists), items[0].shape[1], domain=domain)


class AdversarialRanker(BaseEstimator):
    """Listwise scorer trained with optional item- or list-level feature alignment.

    ``fit(X, y, X_target)`` takes source lists with labels and unlabeled
    target lists.  ``X`` may be a :class:`Dataset`, a ``(n, ℓ, p)`` array
    or a sequence of ``(ℓ_i, p)`` arrays.

    Attributes set by ``fit``: ``scorer_``, ``discriminators_``, ``log_``,
    ``n_features_in_``, ``columns_``.
    """

    def __init__(self, mode="list_da", lam=1.0, eta_rank=0.05, eta_ad=0.05, decay_factor=0.7,
                 decay_every=500, steps=2000, batch_size=32, ensemble_size=5, loss="softmax_ce",
                 hidden=64, k=32, disc_hidden=32, attention=False, disc_activation="relu", seed=0,
                 metric="ndcg"):
        self.mode = mode
        self.lam = lam
        self.eta_rank = eta_rank
        self.eta_ad = eta_ad
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.steps = steps
        self.batch_size = batch_size
        self.ensemble_size = ensemble_size
        self.loss = loss
        self.hidden = hidden
        self.k = k
        self.disc_hidden = disc_hidden
        self.attention = attention
        self.disc_activation = disc_activation
        self.seed = seed
        self.metric = metric

    def _config(self):
        params = self.get_params()
        params.pop("metric")
        return TrainConfig(**params)

    def fit(self, X, y=None, X_target=None):
        config = self._config()
        source = _to_dataset(X, y, require_labels=True)
        target = None if X_target is None else _to_dataset(X_target, domain="target")
        if target is not None and target.feature_dim != source.feature_dim:
            raise ValueError("source and target have different feature dimensions")
        if target is not None and isinstance(X, Dataset) and not isinstance(X_target, Dataset):
            target = Dataset(target.lists, target.feature_dim, source.shared, source.disjoint, "target")
        result = train(source, target, config)
        self.scorer_ = result.state.scorer
        self.discriminators_ = result.state.discriminators
        self.log_ = result.log
        self.n_features_in_ = source.feature_dim
        self.columns_ = source.ordered_columns()
        return self

    def _items(self, X):
        if not hasattr(self, "scorer_"):
            raise AttributeError("this AdversarialRanker is not fitted yet; call fit first")
        if isinstance(X, Dataset):
            return X.items()
        items, _ = check_lists(X, n_features=self.n_features_in_)
        return [x[:, self.columns_] for x in items]

    def predict(self, X):
        """Per-list scores; an ``(n, ℓ)`` array when all lists have equal length."""
        out = score_lists(self.scorer_, self._items(X))
        return np.stack(out) if len({s.size for s in out}) == 1 else out

    def transform(self, X):
        """Per-list ``(ℓ, k)`` feature lists from the learned feature map."""
        out = feature_lists(self.scorer_, self._items(X))
        return np.stack(out) if len({z.shape for z in out}) == 1 else out

    def score(self, X, y=None):
        """Mean of ``self.metric`` over lists where it is defined."""
        ds = _to_dataset(X, y, require_labels=True)
        report = evaluate(list(self.predict(ds)), ds.lists, [self.metric])
        return report.aggregate()[self.metric]
