"""Discrete denoising diffusion over node and edge categories.

Forward noising uses the marginal transition kernel
``Qbar_t = abar_t * I + (1 - abar_t) * 1 m^T`` per channel, so the chain
converges to the data marginals ``m``. Graphs travel through the sampler as
padded integer batches (:class:`NoisyBatch`); :class:`NoisyGraph` is the
single-graph one-hot view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import FeatureBundle, extra_features
from .molgraph import MAX_ATOMS, N_ATOM_KINDS, N_BOND_KINDS, MolGraph

COSINE_OFFSET = 0.008
ABAR_FLOOR = 1e-6
_EPS = 1e-30


class InvalidStepCount(ValueError):
    pass


class StepOutOfRange(ValueError):
    pass


class DegenerateDenominator(ArithmeticError):
    pass


class NonFiniteLogits(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    abar: np.ndarray

    def check_step(self, t, lo=0):
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise StepOutOfRange(f"step {t} outside [{lo}, {self.T}]")


def build_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    """Cosine retention schedule, clamped to [1e-6, 1]."""
    if int(T) != T or T < 1:
        raise InvalidStepCount(f"T must be a positive integer, got {T}")
    t = np.arange(T + 1) / T
    f = np.cos(0.5 * math.pi * (t + s) / (1 + s)) ** 2
    abar = np.clip(f / f[0], ABAR_FLOOR, 1.0)
    abar[0] = 1.0
    abar = np.minimum.accumulate(abar)
    abar.flags.writeable = False
    return NoiseSchedule(int(T), abar)


@dataclass(frozen=True)
class TransitionModel:
    m_nodes: np.ndarray
    m_edges: np.ndarray

    def __post_init__(self):
        for m in (self.m_nodes, self.m_edges):
            if m.shape != (4,) or np.any(m < 0) or abs(m.sum() - 1) > 1e-9:
                raise ValueError(f"marginal must be a probability 4-vector, got {m}")

    @classmethod
    def uniform(cls) -> "TransitionModel":
        return cls(np.full(N_ATOM_KINDS, 0.25), np.full(N_BOND_KINDS, 0.25))

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolGraph]) -> "TransitionModel":
        """Category frequencies over atoms and over unordered atom pairs."""
        nodes = np.zeros(N_ATOM_KINDS)
        edges = np.zeros(N_BOND_KINDS)
        for g in graphs:
            nodes += np.bincount(g.nodes, minlength=N_ATOM_KINDS)
            iu = np.triu_indices(g.n, 1)
            edges += np.bincount(g.edges[iu], minlength=N_BOND_KINDS)
        if edges.sum() == 0:
            edges[0] = 1.0
        return cls(nodes / nodes.sum(), edges / edges.sum())

    def marginal(self, channel: str) -> np.ndarray:
        return self.m_nodes if channel == "nodes" else self.m_edges


def qbar_matrix(abar: float, m: np.ndarray) -> np.ndarray:
    return abar * np.eye(len(m)) + (1 - abar) * np.outer(np.ones(len(m)), m)


def transition_matrices(model: TransitionModel, schedule: NoiseSchedule, t: int) -> dict:
    """``{channel: (Qbar_t, Q_t)}`` for channel in nodes/edges."""
    if not 1 <= t <= schedule.T:
        raise StepOutOfRange(f"step {t} outside [1, {schedule.T}]")
    beta = schedule.abar[t] / schedule.abar[t - 1]
    return {
        ch: (qbar_matrix(schedule.abar[t], model.marginal(ch)), qbar_matrix(beta, model.marginal(ch)))
        for ch in ("nodes", "edges")
    }


# --------------------------------------------------------------------------
# graph containers

@dataclass(frozen=True)
class NoisyGraph:
    t: int
    nodes_onehot: np.ndarray
    edges_onehot: np.ndarray


@dataclass
class NoisyBatch:
    """Padded batch of categorical graphs. Padded slots carry category 0."""

    t: np.ndarray  # (B,)
    nodes: np.ndarray  # (B, N) int
    edges: np.ndarray  # (B, N, N) int, symmetric, zero diagonal
    mask: np.ndarray  # (B, N) bool
    T: int = 1

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def onehot(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.eye(N_ATOM_KINDS)[self.nodes] * self.mask[..., None]
        pair = self.mask[:, :, None] & self.mask[:, None, :]
        e = np.eye(N_BOND_KINDS)[self.edges] * pair[..., None]
        return x, e

    def features(self) -> FeatureBundle:
        x, _ = self.onehot()
        return extra_features(x, self.edges, self.mask, self.t / self.T)

    def graph(self, b: int) -> NoisyGraph:
        n = int(self.mask[b].sum())
        x, e = self.onehot()
        return NoisyGraph(int(self.t[b]), x[b, :n], e[b, :n, :n])

    def molgraph(self, b: int) -> MolGraph:
        n = int(self.mask[b].sum())
        return MolGraph(self.nodes[b, :n], self.edges[b, :n, :n])

    def molgraphs(self) -> list[MolGraph]:
        return [self.molgraph(b) for b in range(self.size)]

    def with_state(self, t, nodes, edges) -> "NoisyBatch":
        return NoisyBatch(np.broadcast_to(np.asarray(t), (self.size,)).copy(), nodes, edges, self.mask, self.T)

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolGraph], t=0, T: int = 1, pad_to: int | None = None) -> "NoisyBatch":
        n_max = pad_to or max(g.n for g in graphs)
        b = len(graphs)
        nodes = np.zeros((b, n_max), dtype=np.int64)
        edges = np.zeros((b, n_max, n_max), dtype=np.int64)
        mask = np.zeros((b, n_max), dtype=bool)
        for k, g in enumerate(graphs):
            nodes[k, :g.n] = g.nodes
            edges[k, :g.n, :g.n] = g.edges
            mask[k, :g.n] = True
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,)).copy()
        return cls(t, nodes, edges, mask, T)

    @classmethod
    def from_noisy(cls, z: NoisyGraph, T: int) -> "NoisyBatch":
        n = z.nodes_onehot.shape[0]
        return cls(np.array([z.t]), z.nodes_onehot.argmax(-1)[None], z.edges_onehot.argmax(-1)[None],
                   np.ones((1, n), dtype=bool), T)


# denoiser: NoisyBatch -> (node_logits (B,N,4), edge_logits (B,N,N,4))
Denoiser = Callable[[NoisyBatch], tuple[np.ndarray, np.ndarray]]


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw; ``u`` has the shape of ``probs`` minus the last axis."""
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    idx = (cdf < u[..., None]).sum(-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(-1, keepdims=True)


def upper_pairs(mask: np.ndarray) -> np.ndarray:
    n = mask.shape[-1]
    return mask[:, :, None] & mask[:, None, :] & np.triu(np.ones((n, n), dtype=bool), 1)


def _symmetric_from_upper(upper: np.ndarray) -> np.ndarray:
    u = np.triu(upper, 1)
    return u + np.swapaxes(u, -1, -2)


class DiscreteDiffusion:
    """Schedule plus transition model, with batched forward and reverse kernels."""

    def __init__(self, schedule: NoiseSchedule, transitions: TransitionModel):
        self.schedule = schedule
        self.transitions = transitions
        T = schedule.T
        self.qbar = {}
        self.q = {}
        for ch in ("nodes", "edges"):
            m = transitions.marginal(ch)
            self.qbar[ch] = np.stack([qbar_matrix(a, m) for a in schedule.abar])
            beta = np.concatenate([[1.0], schedule.abar[1:] / schedule.abar[:-1]])
            self.q[ch] = np.stack([qbar_matrix(b, m) for b in beta])
        assert self.qbar["nodes"].shape == (T + 1, 4, 4)

    @property
    def T(self) -> int:
        return self.schedule.T

    # ---------------------------------------------------------------- forward
    def noise_batch(self, clean: NoisyBatch, t: np.ndarray, u_nodes: np.ndarray,
                    u_edges: np.ndarray) -> NoisyBatch:
        """Sample ``z_t ~ q(z_t | x)`` cell-wise from pre-drawn uniforms.

        Uniforms are passed in (shape (B, N) and (B, N, N)) so each record's
        noise can come from its own seeded stream, independent of batching.
        """
        t = np.asarray(t, dtype=np.int64)
        self.schedule.check_step(t)
        n = clean.nodes.shape[1]
        qn = self.qbar["nodes"][t]  # (B,4,4)
        qe = self.qbar["edges"][t]
        bidx = np.arange(clean.size)[:, None]
        pn = qn[bidx, clean.nodes]  # (B,N,4)
        nodes = sample_categorical(pn, u_nodes[:, :n]) * clean.mask
        pe = qe[bidx[:, :, None], clean.edges]  # (B,N,N,4)
        edges = sample_categorical(pe, u_edges[:, :n, :n])
        edges = _symmetric_from_upper(edges * upper_pairs(clean.mask))
        keep = t == 0
        nodes = np.where(keep[:, None], clean.nodes, nodes)
        edges = np.where(keep[:, None, None], clean.edges, edges)
        return NoisyBatch(t.copy(), nodes, edges, clean.mask, self.T)

    def apply_noise(self, g: MolGraph, t: int, rng: np.random.Generator) -> NoisyGraph:
        clean = NoisyBatch.from_graphs([g], 0, self.T)
        z = self.noise_batch(clean, np.array([t]), rng.random((1, g.n)), rng.random((1, g.n, g.n)))
        return z.graph(0)

    def limit_batch(self, n_atoms: Sequence[int], rng: np.random.Generator) -> NoisyBatch:
        """``z_T`` drawn from the limit marginals."""
        n_max = max(n_atoms)
        b = len(n_atoms)
        mask = np.arange(n_max)[None, :] < np.asarray(n_atoms)[:, None]
        nodes = sample_categorical(np.broadcast_to(self.transitions.m_nodes, (b, n_max, 4)),
                                   rng.random((b, n_max))) * mask
        edges = sample_categorical(np.broadcast_to(self.transitions.m_edges, (b, n_max, n_max, 4)),
                                   rng.random((b, n_max, n_max)))
        edges = _symmetric_from_upper(edges * upper_pairs(mask))
        return NoisyBatch(np.full(b, self.T), nodes, edges, mask, self.T)

    # -------------------------------------------------------------- posterior
    def posterior_distribution(self, z_t: int, x: int, t: int, channel: str) -> np.ndarray:
        """``q(z_{t-1} = . | z_t, x)`` as a 4-vector."""
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside [1, {self.T}]")
        q, qb_prev, qb = self.q[channel][t], self.qbar[channel][t - 1], self.qbar[channel][t]
        denom = qb[x, z_t]
        if denom <= 0:
            raise DegenerateDenominator(f"Qbar_t[{x}, {z_t}] = 0 at t={t}")
        return q[:, z_t] * qb_prev[x, :] / denom

    def reverse_probs(self, p_hat: np.ndarray, z_t: np.ndarray, t: np.ndarray, channel: str) -> np.ndarray:
        """``sum_x p_hat(x) q(z_{t-1} | z_t, x)`` per cell.

        ``p_hat`` is (B, ..., 4), ``z_t`` (B, ...) and ``t`` (B,) with t >= 1.
        """
        b = p_hat.shape[0]
        shape = p_hat.shape
        p = p_hat.reshape(b, -1, shape[-1])
        z = z_t.reshape(b, -1)
        q_t = self.q[channel][t]
        qb_prev = self.qbar[channel][t - 1]
        qb_t = self.qbar[channel][t]
        bidx = np.arange(b)[:, None]
        left = np.swapaxes(q_t, 1, 2)[bidx, z]  # (B,C,j) = Q_t[j, z]
        denom = np.swapaxes(qb_t, 1, 2)[bidx, z]  # (B,C,x) = Qbar_t[x, z]
        mix = np.einsum("bcx,bxj->bcj", p / np.maximum(denom, _EPS), qb_prev)
        out = left * mix
        out /= np.maximum(out.sum(-1, keepdims=True), _EPS)
        return out.reshape(shape)

    def step_distributions(self, node_logits, edge_logits, z: NoisyBatch) -> tuple[np.ndarray, np.ndarray]:
        if not (np.all(np.isfinite(node_logits)) and np.all(np.isfinite(edge_logits))):
            raise NonFiniteLogits("denoiser produced non-finite logits")
        if np.any(z.t < 1):
            raise StepOutOfRange("reverse step needs t >= 1")
        pn = self.reverse_probs(softmax(node_logits), z.nodes, z.t, "nodes")
        pe = self.reverse_probs(softmax(edge_logits), z.edges, z.t, "edges")
        return pn, pe

    def sample_from(self, pn: np.ndarray, pe: np.ndarray, z: NoisyBatch, rng: np.random.Generator) -> NoisyBatch:
        nodes = sample_categorical(pn, rng.random(pn.shape[:-1])) * z.mask
        edges = sample_categorical(pe, rng.random(pe.shape[:-1]))
        edges = _symmetric_from_upper(edges * upper_pairs(z.mask))
        return z.with_state(z.t - 1, nodes, edges)

    def reverse_step(self, node_logits, edge_logits, z: NoisyBatch, rng: np.random.Generator) -> NoisyBatch:
        pn, pe = self.step_distributions(node_logits, edge_logits, z)
        return self.sample_from(pn, pe, z, rng)

    # -------------------------------------------------------------- sampling
    def sample_chain(self, denoiser: Denoiser, n_atoms: Sequence[int], rng: np.random.Generator,
                     guide=None, keep_trajectory: bool = False) -> tuple[list[MolGraph], list[NoisyBatch]]:
        """Run the reverse chain from ``z_T`` to ``z_0`` for a batch of sizes.

        ``guide``, when given, maps ``(z, pn, pe)`` to reweighted distributions.
        """
        if min(n_atoms) < 1 or max(n_atoms) > MAX_ATOMS:
            raise ValueError(f"n_atoms must lie in [1, {MAX_ATOMS}]")
        z = self.limit_batch(n_atoms, rng)
        trajectory = [z] if keep_trajectory else []
        for _ in range(self.T):
            node_logits, edge_logits = denoiser(z)
            pn, pe = self.step_distributions(node_logits, edge_logits, z)
            if guide is not None:
                pn, pe = guide(z, pn, pe)
            z = self.sample_from(pn, pe, z, rng)
            if keep_trajectory:
                trajectory.append(z)
        return z.molgraphs(), trajectory

    # -------------------------------------------------------------- NLL
    def nll_bound(self, denoiser: Denoiser, graphs: Sequence[MolGraph], rng: np.random.Generator,
                  mc_samples: int = 1) -> np.ndarray:
        """Monte-Carlo variational bound on -log p(G), in nats, one value per graph.

        prior KL(q(z_T|G) || m) + T * KL(q(z_{t-1}|z_t,G) || p(z_{t-1}|z_t)) at
        t ~ U{2..T} - log p(G | z_1), summed over atoms and atom pairs.
        """
        clean = NoisyBatch.from_graphs(graphs, 0, self.T)
        b, n = clean.nodes.shape
        up = upper_pairs(clean.mask)
        x_onehot, e_onehot = clean.onehot()

        def cell_sum(node_vals, edge_vals):
            return (node_vals * clean.mask).sum(-1) + (edge_vals * up).sum((-1, -2))

        prior = cell_sum(
            _kl(self.qbar["nodes"][self.T][clean.nodes], self.transitions.m_nodes),
            _kl(self.qbar["edges"][self.T][clean.edges], self.transitions.m_edges),
        )
        total = np.zeros(b)
        for _ in range(mc_samples):
            diff = np.zeros(b)
            if self.T >= 2:
                t = rng.integers(2, self.T + 1, size=b)
                z = self.noise_batch(clean, t, rng.random((b, n)), rng.random((b, n, n)))
                nl, el = denoiser(z)
                pn, pe = self.step_distributions(nl, el, z)
                qn = self.reverse_probs(x_onehot, z.nodes, z.t, "nodes")
                qe = self.reverse_probs(e_onehot, z.edges, z.t, "edges")
                diff = self.T * cell_sum(_kl(qn, pn), _kl(qe, pe))
            z1 = self.noise_batch(clean, np.ones(b, dtype=np.int64), rng.random((b, n)), rng.random((b, n, n)))
            nl, el = denoiser(z1)
            recon = -cell_sum(
                np.take_along_axis(_log_softmax(nl), clean.nodes[..., None], -1)[..., 0],
                np.take_along_axis(_log_softmax(el), clean.edges[..., None], -1)[..., 0],
            )
            total += prior + diff + recon
        return total / mc_samples


def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _kl(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    p = np.broadcast_to(p, q.shape)
    terms = np.where(q > 0, q * (np.log(np.maximum(q, _EPS)) - np.log(np.maximum(p, _EPS))), 0.0)
    return terms.sum(-1)


def write_trajectory(trajectory: Sequence[NoisyBatch], index: int, path) -> None:
    """TSV dump of one chain: step index then the SMILES of the intermediate graph."""
    from .molgraph import write_smiles

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tsmiles\n")
        for z in trajectory:
            fh.write(f"{int(z.t[index])}\t{write_smiles(z.molgraph(index))}\n")


@dataclass
class RecordNoise:
    """Per-record noise draw: step plus padded uniforms."""

    t: int
    u_nodes: np.ndarray = field(repr=False)
    u_edges: np.ndarray = field(repr=False)

    @classmethod
    def draw(cls, rng: np.random.Generator, T: int, t_low: int = 1) -> "RecordNoise":
        t = int(rng.integers(t_low, T + 1))
        return cls(t, rng.random(MAX_ATOMS), rng.random((MAX_ATOMS, MAX_ATOMS)))

    @staticmethod
    def stack(draws: Sequence["RecordNoise"]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.array([d.t for d in draws]), np.stack([d.u_nodes for d in draws]),
                np.stack([d.u_edges for d in draws]))
