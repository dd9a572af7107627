"""Input validation for list-structured data."""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .metrics import RankedList


def check_lists(X, y=None, n_features=None, require_labels=False, name="X"):
    """Normalize ``X`` to a list of ``(ℓ_i, p)`` float arrays.

    ``X`` may be a :class:`Dataset`, a sequence of :class:`RankedList`, a
    3-D array ``(n, ℓ, p)`` or a sequence of 2-D arrays.  Returns
    ``(items, labels)`` where ``labels`` is ``None`` or a parallel list.
    """
    if isinstance(X, Dataset):
        if y is not None:
            raise ValueError(f"{name} is a Dataset; labels come from it, pass y=None")
        items = X.items()
        labels = X.labels() if X.labeled else None
    elif len(X) and isinstance(X[0], RankedList):
        items = [lst.items for lst in X]
        labels = [lst.labels for lst in X] if all(l.labels is not None for l in X) else None
        if y is not None:
            labels = list(y)
    else:
        if isinstance(X, np.ndarray) and X.ndim == 3:
            items = list(np.asarray(X, dtype=np.float64))
        else:
            items = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in X]
        labels = None if y is None else [np.asarray(v, dtype=np.float64).reshape(-1) for v in y]
    if not items:
        raise ValueError(f"{name} contains no lists")
    widths = {x.shape[1] for x in items}
    if len(widths) != 1 or any(x.ndim != 2 or x.shape[0] < 1 for x in items):
        raise ValueError(f"{name}: every list must be a nonempty (ℓ, p) array with one p")
    if n_features is not None and widths != {n_features}:
        raise ValueError(f"{name} has {widths.pop()} features, expected {n_features}")
    for x in items:
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{name} contains non-finite values")
    if labels is not None:
        if len(labels) != len(items):
            raise ValueError(f"{len(labels)} label lists for {len(items)} lists")
        for x, lab in zip(items, labels):
            lab = np.asarray(lab)
            if lab.shape != (x.shape[0],) or np.any(lab < 0):
                raise ValueError("labels must be nonnegative and match list lengths")
        labels = [np.asarray(lab, dtype=np.float64) for lab in labels]
    elif require_labels:
        raise ValueError(f"{name} needs labels")
    return items, labels


def group_by_length(indices, items):
    """Split ``indices`` into groups of equal list length, in first-seen order."""
    groups = {}
    for i in indices:
        groups.setdefault(items[i].shape[0], []).append(i)
    return list(groups.values())
