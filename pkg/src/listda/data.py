"""Datasets: LETOR text I/O, feature-split manifests, synthetic domain pairs
and negative-sampled training lists.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .metrics import RankedList


class FormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class Dataset:
    """A collection of lists from one domain.

    ``shared`` and ``disjoint`` are 0-based column indices; an empty
    ``disjoint`` means a single feature branch.
    """

    lists: tuple
    feature_dim: int
    shared: tuple = None
    disjoint: tuple = ()
    domain: str = "source"

    def __post_init__(self):
        lists = tuple(self.lists)
        for lst in lists:
            if lst.items.shape[1] != self.feature_dim:
                raise ValueError(
                    f"list {lst.list_id!r} has {lst.items.shape[1]} features, expected {self.feature_dim}")
        object.__setattr__(self, "lists", lists)
        shared = tuple(range(self.feature_dim)) if self.shared is None else tuple(int(i) for i in self.shared)
        disjoint = tuple(int(i) for i in self.disjoint)
        if set(shared) & set(disjoint):
            raise ValueError("shared and disjoint feature sets overlap")
        if any(not 0 <= i < self.feature_dim for i in shared + disjoint):
            raise ValueError("feature index out of range")
        object.__setattr__(self, "shared", shared)
        object.__setattr__(self, "disjoint", disjoint)

    def __len__(self):
        return len(self.lists)

    @property
    def labeled(self):
        return bool(self.lists) and all(lst.labels is not None for lst in self.lists)

    def unlabeled(self):
        """Copy with labels stripped, the only view of a target domain that training sees."""
        return replace(self, lists=tuple(RankedList(l.items, None, l.list_id) for l in self.lists))

    def ordered_columns(self):
        """Column order ``[shared..., disjoint...]`` expected by the split scorer."""
        return list(self.shared) + list(self.disjoint)

    def items(self):
        cols = self.ordered_columns()
        return [lst.items[:, cols] for lst in self.lists]

    def labels(self):
        return [lst.labels for lst in self.lists]

    def subset(self, indices):
        return replace(self, lists=tuple(self.lists[i] for i in indices))


# --------------------------------------------------------------------- LETOR

def _parse_line(line, n):
    body = line.split("#", 1)[0].split()
    if len(body) < 2:
        raise FormatError("expected '<grade> qid:<id> ...'", n)
    grade_tok, qid_tok, feats = body[0], body[1], body[2:]
    try:
        grade = int(grade_tok)
    except ValueError:
        raise FormatError(f"grade {grade_tok!r} is not an integer", n) from None
    if grade < 0:
        raise FormatError("grade must be nonnegative", n)
    if not qid_tok.startswith("qid:") or len(qid_tok) == 4:
        raise FormatError(f"second token must be qid:<id>, got {qid_tok!r}", n)
    values = {}
    last = 0
    for tok in feats:
        fid, sep, val = tok.partition(":")
        try:
            fid_i, val_f = int(fid), float(val)
        except ValueError:
            raise FormatError(f"bad feature token {tok!r}", n) from None
        if not sep or fid_i < 1:
            raise FormatError(f"bad feature token {tok!r}", n)
        if fid_i <= last:
            raise FormatError(f"feature id {fid_i} is duplicated or out of order", n)
        last = fid_i
        values[fid_i] = val_f
    return grade, qid_tok[4:], values


def parse_letor_text(text, feature_dim=None, domain="source"):
    groups = {}
    max_fid = 0
    for n, raw in enumerate(text.splitlines(), start=1):
        if not raw.split("#", 1)[0].strip():
            continue
        grade, qid, values = _parse_line(raw, n)
        if values:
            max_fid = max(max_fid, max(values))
        groups.setdefault(qid, []).append((grade, values))
    p = feature_dim if feature_dim is not None else max_fid
    if max_fid > p:
        raise FormatError(f"feature id {max_fid} exceeds feature_dim {p}")
    lists = []
    for qid, rows in groups.items():
        items = np.zeros((len(rows), p))
        for i, (_, values) in enumerate(rows):
            for fid, val in values.items():
                items[i, fid - 1] = val
        labels = np.array([g for g, _ in rows], dtype=np.float64)
        lists.append(RankedList(items, labels, qid))
    return Dataset(tuple(lists), p, domain=domain)


def parse_letor(path, feature_dim=None, domain="source"):
    with open(path, encoding="utf-8") as fh:
        return parse_letor_text(fh.read(), feature_dim, domain)


def write_letor_text(dataset):
    """Every feature is written (zeros included) so the dimension round-trips."""
    out = []
    for lst in dataset.lists:
        labels = lst.labels if lst.labels is not None else np.zeros(len(lst))
        for grade, row in zip(labels, lst.items):
            if grade != int(grade):
                raise ValueError(f"list {lst.list_id!r}: LETOR grades must be integers, got {grade}")
            feats = " ".join(f"{j + 1}:{float(v)!r}" for j, v in enumerate(row))
            out.append(f"{int(grade)} qid:{lst.list_id} {feats}".rstrip())
    return "\n".join(out) + ("\n" if out else "")


def write_letor(path, dataset):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_letor_text(dataset))


# ------------------------------------------------------- key = value configs

def parse_config_text(text):
    config = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError("expected 'key = value'", n)
        config[key.strip()] = value.strip()
    return config


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_config(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def read_manifest(path):
    """Feature split sidecar: ``shared = 1,2,3`` / ``disjoint = 4,5`` (1-based ids)."""
    config = read_config(path)

    def ids(key):
        raw = config.get(key, "").strip()
        return tuple(int(t) - 1 for t in raw.split(",") if t.strip())

    return ids("shared"), ids("disjoint")


def write_manifest(path, shared, disjoint):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config({
            "shared": ",".join(str(i + 1) for i in shared),
            "disjoint": ",".join(str(i + 1) for i in disjoint),
        }))


def with_manifest(dataset, shared, disjoint):
    return replace(dataset, shared=tuple(shared) or None, disjoint=tuple(disjoint))


# ----------------------------------------------------------------- synthetic

SHIFTS = ("none", "affine", "listwise_correlation")


@dataclass(frozen=True)
class SyntheticSpec:
    """Domain-pair generator settings.

    The first ``n_signal`` coordinates carry the labels; the rest are
    nuisance coordinates that the affine shift rotates and translates.  In
    ``listwise_correlation`` mode the nuisance coordinates hold cluster
    centres: source lists draw every item from one cluster, target lists
    draw one item from each cluster, so item marginals agree.
    """

    list_len: int = 4
    n_features: int = 8
    n_lists: int = 512
    n_signal: int = 4
    shift: str = "affine"
    angle: float = 60.0
    translation: float = 2.0
    n_clusters: int = 4
    cluster_scale: float = 6.0
    interaction: float = 1.0
    y_max: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.shift not in SHIFTS:
            raise ValueError(f"shift must be one of {SHIFTS}, got {self.shift!r}")
        if not 0 < self.n_signal <= self.n_features:
            raise ValueError("need 0 < n_signal <= n_features")
        if self.shift != "none" and self.n_features - self.n_signal < 2:
            raise ValueError("shifts need at least two nuisance coordinates")
        if self.list_len < 1 or self.n_lists < 1:
            raise ValueError("list_len and n_lists must be positive")

    @classmethod
    def from_config(cls, config):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in config.items():
            if key not in types:
                raise ValueError(f"unknown synthetic spec key {key!r}")
            kind = types[key]
            kwargs[key] = value if kind == "str" else (int(value) if kind == "int" else float(value))
        return cls(**kwargs)

    def to_config(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SyntheticTruth:
    """Constants known by construction.

    Labels are ``clip(w·ξ + γ·relu(u·ξ - u0) - c0, 0, y_max)`` on latent
    items ``ξ``; the rule is item-wise with Lipschitz constant ``‖w‖ + |γ|‖u‖``.
    """

    label_lipschitz: float
    label_weights: np.ndarray
    interaction_weights: np.ndarray
    interaction_offset: float
    label_offset: float
    rotation: np.ndarray
    translation: np.ndarray
    spec: SyntheticSpec

    _VECTORS = ("label_weights", "interaction_weights", "rotation", "translation")
    _SCALARS = ("label_lipschitz", "interaction_offset", "label_offset")

    def labels_for(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        hinge = np.maximum(latent @ self.interaction_weights - self.interaction_offset, 0.0)
        raw = latent @ self.label_weights + self.spec.interaction * hinge - self.label_offset
        return np.clip(raw, 0.0, self.spec.y_max)

    def to_latent(self, items, domain):
        """Undo the declared shift (identity for source items)."""
        items = np.asarray(items, dtype=np.float64)
        if domain == "source" or self.spec.shift != "affine":
            return items
        return (items - self.translation) @ self.rotation  # rotation is orthogonal

    def to_config(self):
        out = {k: repr(float(getattr(self, k))) for k in self._SCALARS}
        for k in self._VECTORS:
            out[k] = ",".join(repr(float(v)) for v in np.asarray(getattr(self, k)).reshape(-1))
        return out

    @classmethod
    def from_config(cls, config, spec):
        def vec(key):
            return np.array([float(t) for t in config[key].split(",") if t])

        p = spec.n_features
        return cls(float(config["label_lipschitz"]), vec("label_weights"),
                   vec("interaction_weights"), float(config["interaction_offset"]),
                   float(config["label_offset"]), vec("rotation").reshape(p, p),
                   vec("translation"), spec)


def _rotation(p, nuisance, angle_deg):
    """Rotate every consecutive pair of nuisance coordinates by ``angle_deg``."""
    rot = np.eye(p)
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    for a, b in zip(nuisance[0::2], nuisance[1::2]):
        rot[a, a], rot[a, b], rot[b, a], rot[b, b] = c, -s, s, c
    return rot


def generate_synthetic(spec):
    """Return ``(source, target, truth)``; deterministic given ``spec.seed``.

    Lists whose labels are all zero are redrawn, so every list has IDCG > 0.
    """
    rng = np.random.default_rng(spec.seed)
    p, n_sig, ell, n = spec.n_features, spec.n_signal, spec.list_len, spec.n_lists
    nuisance = list(range(n_sig, p))

    w = np.zeros(p)
    w[:n_sig] = rng.uniform(0.5, 1.5, n_sig) * 4.0 / n_sig
    u = np.zeros(p)
    u[:n_sig] = rng.normal(size=n_sig)
    u[:n_sig] *= 2.0 / np.linalg.norm(u[:n_sig])
    rot, trans, centers = np.eye(p), np.zeros(p), None
    if spec.shift == "affine":
        rot = _rotation(p, nuisance, spec.angle)
        trans[nuisance] = spec.translation / math.sqrt(len(nuisance))
    if spec.shift == "listwise_correlation":
        centers = rng.normal(size=(spec.n_clusters, p - n_sig))
        centers *= spec.cluster_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    truth = SyntheticTruth(
        label_lipschitz=float(np.linalg.norm(w) + abs(spec.interaction) * np.linalg.norm(u)),
        label_weights=w, interaction_weights=u, interaction_offset=0.5 * float(u.sum()),
        label_offset=0.25 * float(w.sum()), rotation=rot, translation=trans, spec=spec)

    def latent_lists(domain):
        x = np.zeros((n, ell, p))
        x[..., :n_sig] = rng.uniform(0.0, 1.0, (n, ell, n_sig))
        dead = ~np.any(truth.labels_for(x) > 0, axis=1)
        while dead.any():
            x[dead, :, :n_sig] = rng.uniform(0.0, 1.0, (int(dead.sum()), ell, n_sig))
            dead = ~np.any(truth.labels_for(x) > 0, axis=1)
        if spec.shift == "listwise_correlation":
            if domain == "source":
                cid = np.repeat(rng.integers(spec.n_clusters, size=(n, 1)), ell, axis=1)
            else:
                base = np.resize(np.arange(spec.n_clusters), ell)
                cid = np.stack([rng.permutation(base) for _ in range(n)])
            x[..., n_sig:] = centers[cid] + rng.normal(scale=0.1, size=(n, ell, p - n_sig))
        else:
            x[..., n_sig:] = rng.uniform(0.0, 1.0, (n, ell, p - n_sig))
        return x

    def build(latent, domain):
        items = latent @ rot.T + trans if domain == "target" else latent
        lists = tuple(RankedList(items[i], truth.labels_for(latent[i]), f"{domain[0]}{i}")
                      for i in range(n))
        return Dataset(lists, p, domain=domain)

    source = build(latent_lists("source"), "source")
    target = build(latent_lists("target"), "target")
    return source, target, truth


def quantize_labels(dataset):
    """Round labels to integer grades (needed by the LETOR writer)."""
    lists = tuple(RankedList(l.items, np.rint(l.labels), l.list_id) for l in dataset.lists)
    return replace(dataset, lists=lists)


# ------------------------------------------------------ training-list builder

def build_training_lists(pools, list_len=31, negative_rank_cutoff=300, rng=None,
                         return_indices=False):
    """One positive plus ``list_len - 1`` sampled negatives per query.

    ``pools`` is a sequence of dicts with keys ``query``, ``positive`` (one
    item vector), ``candidates`` (negative item vectors) and optionally
    ``ranking`` (1-based rank of each candidate under a pretrained ranker).
    With a ranking, only candidates ranked ``>= negative_rank_cutoff`` are
    eligible.  Labels are ``(1, 0, ..., 0)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out, picked = [], []
    for pool in pools:
        query = pool.get("query")
        cands = np.atleast_2d(np.asarray(pool["candidates"], dtype=np.float64))
        eligible = np.arange(cands.shape[0])
        if pool.get("ranking") is not None:
            ranking = np.asarray(pool["ranking"])
            eligible = eligible[ranking >= negative_rank_cutoff]
        need = list_len - 1
        if eligible.size < need:
            raise ValueError(
                f"query {query!r}: {eligible.size} eligible negatives, need {need}")
        chosen = rng.choice(eligible, size=need, replace=False) if need else eligible[:0]
        items = np.vstack([np.asarray(pool["positive"], dtype=np.float64)[None, :], cands[chosen]])
        labels = np.zeros(list_len)
        labels[0] = 1.0
        out.append(RankedList(items, labels, query))
        picked.append(chosen)
    return (out, picked) if return_indices else out


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
