"""Weighted federated averaging of parameter stores and metrics."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..models.params import ParamStore, ShapeMismatch


class EmptyUpdateSet(ValueError):
    pass


class AllZeroWeights(ValueError):
    pass


class KeyMismatch(ValueError):
    pass


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise EmptyUpdateSet("no weights")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"weights must be finite and non-negative: {weights}")
    total = w.sum()
    if total <= 0:
        raise AllZeroWeights("aggregation weights sum to zero")
    return w / total


def _canonical(items: Sequence, weights: Sequence[float], ids: Sequence[str] | None):
    if ids is None:
        return list(items), list(weights)
    if len(ids) != len(items) or len(set(ids)) != len(ids):
        raise ValueError("ids must be unique and match the updates")
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    return [items[k] for k in order], [weights[k] for k in order]


def fedavg(stores: Sequence[ParamStore], weights: Sequence[float], ids: Sequence[str] | None = None) -> ParamStore:
    """``sum_k alpha_k w^k`` with ``alpha`` the weights normalised to sum to one.

    Accumulation runs in float64 in collaborator-id order (when ids are given),
    so the result does not depend on update arrival order.
    """
    if len(stores) == 0:
        raise EmptyUpdateSet("no updates to aggregate")
    if len(weights) != len(stores):
        raise ValueError("one weight per update is required")
    stores, weights = _canonical(stores, weights, ids)
    alpha = normalize_weights(weights)
    ref = stores[0]
    for s in stores[1:]:
        if s.shapes() != ref.shapes():
            raise ShapeMismatch("updates differ in tensor names or shapes")
    out = {}
    for name, arr in ref.items():
        acc = np.zeros(arr.shape, dtype=np.float64)
        for a, s in zip(alpha, stores):
            acc += a * s[name].astype(np.float64)
        out[name] = acc.astype(arr.dtype)
    return ParamStore(out)


def aggregate_metrics(metrics: Sequence[Mapping[str, float]], weights: Sequence[float],
                      ids: Sequence[str] | None = None) -> dict[str, float]:
    """Weighted mean per metric key, using the same normalised weights as :func:`fedavg`."""
    if len(metrics) == 0:
        raise EmptyUpdateSet("no metrics to aggregate")
    metrics, weights = _canonical(metrics, weights, ids)
    keys = set(metrics[0])
    for m in metrics[1:]:
        if set(m) != keys:
            raise KeyMismatch(f"metric keys differ: {sorted(keys)} vs {sorted(m)}")
    alpha = normalize_weights(weights)
    return {k: float(sum(a * float(m[k]) for a, m in zip(alpha, metrics))) for k in sorted(keys)}
