"""Structural and spectral features computed from a (noisy) graph batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .molgraph import MAX_ATOMS, N_ATOM_KINDS

N_NODE_FEATURES = 3 + 1 + N_ATOM_KINDS
N_GRAPH_FEATURES = 12
N_EIGEN = 5
_PAD_EIGEN = 1.0e3


@dataclass(frozen=True)
class FeatureBundle:
    node_features: np.ndarray  # (B, N, N_NODE_FEATURES)
    graph_features: np.ndarray  # (B, N_GRAPH_FEATURES)


def cycle_counts(adj: np.ndarray) -> np.ndarray:
    """Counts of 3-, 4- and 5-cycles from closed-walk traces, batched (B, N, N) -> (B, 3)."""
    a2 = adj @ adj
    a3 = a2 @ adj
    a4 = a3 @ adj
    a5 = a4 @ adj
    deg = adj.sum(-1)
    d3 = np.einsum("bii->bi", a3)
    tr3 = d3.sum(-1)
    tr4 = np.einsum("bii->b", a4)
    tr5 = np.einsum("bii->b", a5)
    m = deg.sum(-1) / 2
    c3 = tr3 / 6
    c4 = (tr4 - 2 * m - 2 * (deg * (deg - 1)).sum(-1)) / 8
    c5 = (tr5 - 5 * (d3 * (deg - 1)).sum(-1)) / 10
    return np.stack([c3, c4, c5], axis=-1)


def laplacian_spectrum(adj: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smallest eigenvalues of the combinatorial Laplacian on real nodes, and component counts.

    Padded nodes get a large diagonal so their eigenvalues sort past the real ones.
    Slots beyond the real node count are filled with 0.
    """
    lap = np.einsum("bij->bi", adj)[..., None] * np.eye(adj.shape[-1]) - adj
    lap = lap + np.where(mask, 0.0, _PAD_EIGEN)[..., None] * np.eye(adj.shape[-1])
    eig = np.linalg.eigvalsh(lap)
    n = mask.sum(-1)
    k = min(N_EIGEN, eig.shape[-1])
    out = np.zeros((adj.shape[0], N_EIGEN))
    out[:, :k] = eig[:, :k]
    slot = np.arange(N_EIGEN)[None, :]
    out = np.where(slot < n[:, None], out, 0.0)
    real = np.arange(eig.shape[-1])[None, :] < n[:, None]
    comps = ((np.abs(eig) < 1e-6) & real).sum(-1)
    return np.clip(out, 0.0, None), comps


def extra_features(nodes_onehot: np.ndarray, edge_cat: np.ndarray, mask: np.ndarray,
                   t_frac: np.ndarray) -> FeatureBundle:
    """Batched features.

    Node: degree per bond order (1, 2, 3), triangles through the node, node one-hot.
    Graph: n/9, bonds/n^2, c3, c4, c5, five smallest Laplacian eigenvalues,
    component count, t/T.
    """
    pair = mask[:, :, None] & mask[:, None, :] & ~np.eye(mask.shape[-1], dtype=bool)
    degs = np.stack([((edge_cat == k) & pair).sum(-1) for k in (1, 2, 3)], axis=-1).astype(float)
    adj = ((edge_cat > 0) & pair).astype(float)
    a3_diag = np.einsum("bii->bi", adj @ adj @ adj)
    tri = a3_diag / 2
    node = np.concatenate([degs, tri[..., None], nodes_onehot * mask[..., None]], axis=-1)

    n = mask.sum(-1).astype(float)
    bonds = adj.sum((-1, -2)) / 2
    cycles = cycle_counts(adj)
    eig, comps = laplacian_spectrum(adj, mask)
    graph = np.concatenate([
        (n / MAX_ATOMS)[:, None],
        (bonds / np.maximum(n, 1) ** 2)[:, None],
        cycles,
        eig,
        comps[:, None].astype(float),
        np.asarray(t_frac, dtype=float).reshape(-1, 1),
    ], axis=-1)
    return FeatureBundle(node * mask[..., None], graph)
