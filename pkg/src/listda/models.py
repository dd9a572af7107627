"""Scorer, discriminators and the checkpoint container.

Parameters live as plain arrays in ``module.params``.  Forward methods take
an optional ``p`` mapping from :meth:`Module.bind`; passing it records the
parameters as autodiff leaves, leaving it out evaluates with constants.
"""

from __future__ import annotations

import io
import json
import math
import struct

import numpy as np

from . import autodiff as ad
from .losses import LossValue, adversarial_logistic

_MAGIC = b"LISTDA-CKPT\x001\n"


def glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    kind = "module"

    def __init__(self):
        self.params = {}

    def _dense(self, rng, name, fan_in, fan_out):
        self.params[f"{name}.w"] = glorot(rng, fan_in, fan_out)
        self.params[f"{name}.b"] = np.zeros(fan_out)

    def bind(self):
        return {name: ad.parameter(value, name=name) for name, value in self.params.items()}

    def _resolve(self, p):
        if p is None:
            return {name: ad.constant(value) for name, value in self.params.items()}
        return p

    def config(self):
        raise NotImplementedError

    def copy(self):
        clone = type(self)(**self.config())
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def apply_update(self, grads, nodes, lr):
        """Plain SGD step on every parameter that received a gradient."""
        for name, node in nodes.items():
            g = grads.get(node)
            if g is not None:
                self.params[name] = self.params[name] - lr * g

    def n_params(self):
        return sum(v.size for v in self.params.values())


ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


def _activation(name):
    if name not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {tuple(ACTIVATIONS)}, got {name!r}")
    return ACTIVATIONS[name]


def _linear(x, p, name):
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


class MLPScorer(Module):
    """``f = h ∘ g`` with optional separate input branches for shared and disjoint features.

    Each branch is ``ReLU(W2 ReLU(W1 x + b1) + b2)``; the branch outputs are
    concatenated and merged by ``ReLU(W3 [..] + b3)`` into ``k`` features.
    The head is linear: ``s_i = W4 v_i + b4``.
    """

    kind = "mlp_scorer"

    def __init__(self, n_shared, n_disjoint=0, hidden=64, k=32, seed=0):
        super().__init__()
        if n_shared < 1 or n_disjoint < 0:
            raise ValueError("need n_shared >= 1 and n_disjoint >= 0")
        self.n_shared, self.n_disjoint = int(n_shared), int(n_disjoint)
        self.hidden, self.k, self.seed = int(hidden), int(k), int(seed)
        rng = np.random.default_rng(seed)
        self._dense(rng, "shared.0", self.n_shared, self.hidden)
        self._dense(rng, "shared.1", self.hidden, self.k)
        branches = 1
        if self.n_disjoint:
            self._dense(rng, "disjoint.0", self.n_disjoint, self.hidden)
            self._dense(rng, "disjoint.1", self.hidden, self.k)
            branches = 2
        self._dense(rng, "merge", branches * self.k, self.k)
        self._dense(rng, "head", self.k, 1)

    def config(self):
        return dict(n_shared=self.n_shared, n_disjoint=self.n_disjoint,
                    hidden=self.hidden, k=self.k, seed=self.seed)

    @property
    def n_features(self):
        return self.n_shared + self.n_disjoint

    def feature_map(self, x, p=None):
        """``(b, ℓ, n_features)`` items to ``(b, ℓ, k)`` feature lists (item-wise)."""
        p = self._resolve(p)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.n_features:
            raise ad.ShapeError("feature_map", x.shape, (None, None, self.n_features))
        b, n, _ = x.shape
        flat = x.reshape(b * n, -1)

        def branch(cols, name):
            h = ad.relu(_linear(ad.constant(cols), p, f"{name}.0"))
            return ad.relu(_linear(h, p, f"{name}.1"))

        parts = [branch(flat[:, :self.n_shared], "shared")]
        if self.n_disjoint:
            parts.append(branch(flat[:, self.n_shared:], "disjoint"))
        merged = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        v = ad.relu(_linear(merged, p, "merge"))
        return ad.reshape(v, (b, n, self.k))

    def score_head(self, z, p=None):
        """``(b, ℓ, k)`` features to ``(b, ℓ)`` scores."""
        p = self._resolve(p)
        z = ad.as_node(z)
        if z.shape[-1] != self.k:
            raise ad.ShapeError("score_head", z.shape, (None, None, self.k))
        b, n, _ = z.shape
        s = _linear(ad.reshape(z, (b * n, self.k)), p, "head")
        return ad.reshape(s, (b, n))

    def scores(self, x, p=None):
        p = self._resolve(p)
        return self.score_head(self.feature_map(x, p), p)

    def head_lipschitz(self):
        """Exact Lipschitz constant of the linear head (spectral norm of ``W4``)."""
        return float(np.linalg.norm(self.params["head.w"], 2))


class ItemDiscriminator(Module):
    """Three-layer MLP from one feature vector to one logit."""

    kind = "item_discriminator"

    def __init__(self, k, hidden=32, seed=0, activation="relu"):
        super().__init__()
        self.k, self.hidden, self.seed = int(k), int(hidden), int(seed)
        self.activation = activation
        self._act = _activation(activation)
        rng = np.random.default_rng(seed)
        self._dense(rng, "l0", self.k, self.hidden)
        self._dense(rng, "l1", self.hidden, self.hidden)
        self._dense(rng, "l2", self.hidden, 1)

    def config(self):
        return dict(k=self.k, hidden=self.hidden, seed=self.seed, activation=self.activation)

    def discriminate_items(self, v, p=None):
        """``(m, k)`` item vectors to ``(m,)`` logits."""
        p = self._resolve(p)
        v = ad.as_node(v)
        if v.ndim != 2 or v.shape[1] != self.k:
            raise ad.ShapeError("discriminate_items", v.shape, (None, self.k))
        h = self._act(_linear(v, p, "l0"))
        h = self._act(_linear(h, p, "l1"))
        return ad.reshape(_linear(h, p, "l2"), (v.shape[0],))

    def __call__(self, z, p=None):
        z = ad.as_node(z)
        b, n, k = z.shape
        return self.discriminate_items(ad.reshape(z, (b * n, k)), p)


class SetDiscriminator(Module):
    """Permutation-invariant list discriminator.

    Per-item encoder ``φ``, an optional single-head self-attention layer with
    a residual connection and no positional encoding, mean pooling over the
    list, then a head ``ρ`` producing one logit per list.
    """

    kind = "set_discriminator"

    def __init__(self, k, hidden=32, attention=False, seed=0, activation="relu"):
        super().__init__()
        self.k, self.hidden, self.attention, self.seed = int(k), int(hidden), bool(attention), int(seed)
        self.activation = activation
        self._act = _activation(activation)
        rng = np.random.default_rng(seed)
        self._dense(rng, "phi.0", self.k, self.hidden)
        self._dense(rng, "phi.1", self.hidden, self.hidden)
        if self.attention:
            for name in ("q", "k", "v"):
                self.params[f"attn.{name}"] = glorot(rng, self.hidden, self.hidden)
        self._dense(rng, "rho.0", self.hidden, self.hidden)
        self._dense(rng, "rho.1", self.hidden, 1)

    def config(self):
        return dict(k=self.k, hidden=self.hidden, attention=self.attention, seed=self.seed,
                    activation=self.activation)

    def discriminate_list(self, z, p=None):
        """``(b, ℓ, k)`` feature lists to ``(b,)`` logits."""
        p = self._resolve(p)
        z = ad.as_node(z)
        if z.ndim == 2:
            z = ad.reshape(z, (1,) + z.shape)
        if z.ndim != 3 or z.shape[-1] != self.k:
            raise ad.ShapeError("discriminate_list", z.shape, (None, None, self.k))
        h = self._act(_linear(z, p, "phi.0"))
        h = self._act(_linear(h, p, "phi.1"))
        if self.attention:
            q = ad.matmul(h, p["attn.q"])
            key = ad.matmul(h, p["attn.k"])
            val = ad.matmul(h, p["attn.v"])
            logits = ad.scale(ad.matmul(q, ad.transpose(key)), 1.0 / math.sqrt(self.hidden))
            h = ad.add(h, ad.matmul(ad.softmax(logits, axis=-1), val))
        pooled = ad.mean(h, axis=1)
        out = _linear(self._act(_linear(pooled, p, "rho.0")), p, "rho.1")
        return ad.reshape(out, (z.shape[0],))

    def __call__(self, z, p=None):
        return self.discriminate_list(z, p)


def _logits(disc, groups, p):
    outs = [disc(g, p) for g in groups]
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)


def ensemble_adversarial_loss(discriminators, features_source, features_target, params=None):
    """``Σ_i [mean_S ℓ_ad(f_i(z), 0) + mean_T ℓ_ad(f_i(z), 1)]``.

    ``features_*`` are ``(b, ℓ, k)`` nodes or lists of them (one per list
    length).  An :class:`ItemDiscriminator` sees the items pooled across
    lists; a :class:`SetDiscriminator` sees whole lists.
    """
    if not discriminators:
        raise ValueError("need at least one discriminator")
    src = features_source if isinstance(features_source, (list, tuple)) else [features_source]
    tgt = features_target if isinstance(features_target, (list, tuple)) else [features_target]
    if not src or not tgt or any(ad.as_node(g).shape[0] == 0 for g in list(src) + list(tgt)):
        raise ValueError("adversarial loss needs nonempty source and target batches")
    params = params or [None] * len(discriminators)
    terms, per_disc = [], []
    for disc, p in zip(discriminators, params):
        loss_s = ad.mean(adversarial_logistic(_logits(disc, src, p), 0.0))
        loss_t = ad.mean(adversarial_logistic(_logits(disc, tgt, p), 1.0))
        term = ad.add(loss_s, loss_t)
        terms.append(term)
        per_disc.append(term.item())
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return LossValue(total, np.asarray(per_disc))


# ---------------------------------------------------------------- checkpoints

MODULE_KINDS = {cls.kind: cls for cls in (MLPScorer, ItemDiscriminator, SetDiscriminator)}


def dump_checkpoint(modules, meta=None):
    """Serialize named modules to bytes.

    Layout: magic line, one JSON header line (architectures, parameter names,
    shapes, byte offsets), then little-endian float64 payloads in order.
    """
    header = {"meta": meta or {}, "modules": []}
    payload = io.BytesIO()
    for name, module in modules.items():
        entry = {"name": name, "kind": module.kind, "config": module.config(), "tensors": []}
        for pname, value in module.params.items():
            data = np.ascontiguousarray(value, dtype="<f8").tobytes()
            entry["tensors"].append({"name": pname, "shape": list(value.shape),
                                     "offset": payload.tell(), "nbytes": len(data)})
            payload.write(data)
        header["modules"].append(entry)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _MAGIC + struct.pack("<Q", len(head)) + head + payload.getvalue()


def load_checkpoint_bytes(blob):
    if not blob.startswith(_MAGIC):
        raise ValueError("not a listda checkpoint")
    pos = len(_MAGIC)
    (size,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    header = json.loads(blob[pos:pos + size].decode())
    body = blob[pos + size:]
    modules = {}
    for entry in header["modules"]:
        module = MODULE_KINDS[entry["kind"]](**entry["config"])
        params = {}
        for t in entry["tensors"]:
            raw = body[t["offset"]:t["offset"] + t["nbytes"]]
            params[t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        if set(params) != set(module.params):
            raise ValueError(f"checkpoint tensors do not match {entry['kind']} architecture")
        module.params = {k: params[k] for k in module.params}
        modules[entry["name"]] = module
    return modules, header["meta"]


def save_checkpoint(path, modules, meta=None):
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(modules, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
