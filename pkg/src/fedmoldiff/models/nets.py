"""Graph-transformer denoiser and property regressor.

Both networks share one backbone shape and are written as pure functions of a
parameter dict so the same code serves forward passes, reverse-mode gradients
and guidance. Per layer: multi-head node attention with an additive bias read
from the edge state, FiLM modulation from the global stream, an edge update
from symmetric functions of the endpoint states, and a global update pooled
from nodes and edges.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..diffusion import NoisyBatch
from ..features import N_GRAPH_FEATURES, N_NODE_FEATURES
from ..molgraph import N_ATOM_KINDS, N_BOND_KINDS
from .params import ParamStore, ShapeMismatch

EDGE_LOSS_WEIGHT = 5.0
N_TARGETS = 2


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden_node: int = 64
    hidden_edge: int = 32
    hidden_global: int = 32
    heads: int = 4
    node_features: int = N_NODE_FEATURES
    graph_features: int = N_GRAPH_FEATURES

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.hidden_node % self.heads:
            raise ValueError("heads must divide hidden_node")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig, kind: str) -> dict[str, tuple[int, ...]]:
    dn, de, dy, h = cfg.hidden_node, cfg.hidden_edge, cfg.hidden_global, cfg.heads
    shapes = {
        "in_x.w": (N_ATOM_KINDS + cfg.node_features, dn), "in_x.b": (dn,),
        "in_e.w": (N_BOND_KINDS, de), "in_e.b": (de,),
        "in_y.w": (cfg.graph_features, dy), "in_y.b": (dy,),
    }
    for l in range(cfg.layers):
        p = f"layer{l}."
        shapes.update({
            p + "q.w": (dn, dn), p + "q.b": (dn,),
            p + "k.w": (dn, dn), p + "k.b": (dn,),
            p + "v.w": (dn, dn), p + "v.b": (dn,),
            p + "o.w": (dn, dn), p + "o.b": (dn,),
            p + "ebias.w": (de, h), p + "ebias.b": (h,),
            p + "film.w": (dy, 2 * dn), p + "film.b": (2 * dn,),
            p + "ff1.w": (dn, 2 * dn), p + "ff1.b": (2 * dn,),
            p + "ff2.w": (2 * dn, dn), p + "ff2.b": (dn,),
            p + "eu1.w": (de + 2 * dn, de), p + "eu1.b": (de,),
            p + "eu2.w": (de, de), p + "eu2.b": (de,),
            p + "yu.w": (dy + dn + de, dy), p + "yu.b": (dy,),
        })
    if kind == "denoiser":
        shapes.update({"out_x.w": (dn, N_ATOM_KINDS), "out_x.b": (N_ATOM_KINDS,),
                       "out_e.w": (de, N_BOND_KINDS), "out_e.b": (N_BOND_KINDS,)})
    elif kind == "regressor":
        shapes.update({"out_r.w": (dn + dy, N_TARGETS), "out_r.b": (N_TARGETS,)})
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return shapes


def init_params(cfg: ModelConfig, seed: int, kind: str = "denoiser") -> ParamStore:
    """Glorot-uniform weights, zero biases, deterministic for a seed."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in sorted(param_shapes(cfg, kind).items()):
        if name.endswith(".b"):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    return ParamStore(out)


# --------------------------------------------------------------------------
# tensors in

@dataclass
class Inputs:
    x: torch.Tensor  # (B,N,4)
    e: torch.Tensor  # (B,N,N,4)
    node_feats: torch.Tensor
    graph_feats: torch.Tensor
    mask: torch.Tensor  # (B,N) float


def make_inputs(z: NoisyBatch, dtype=torch.float32, requires_grad: bool = False) -> Inputs:
    x, e = z.onehot()
    feats = z.features()
    xt = torch.tensor(x, dtype=dtype, requires_grad=requires_grad)
    et = torch.tensor(e, dtype=dtype, requires_grad=requires_grad)
    return Inputs(xt, et, torch.tensor(feats.node_features, dtype=dtype),
                  torch.tensor(feats.graph_features, dtype=dtype), torch.tensor(z.mask, dtype=dtype))


def _lin(p, name, x):
    return x @ p[name + ".w"] + p[name + ".b"]


def _norm(x):
    return F.layer_norm(x, x.shape[-1:])


def _check(p, cfg, kind, inp: Inputs):
    expected = param_shapes(cfg, kind)
    if {k: tuple(v.shape) for k, v in p.items()} != expected:
        raise ShapeMismatch(f"parameters do not match the {kind} layout for {cfg}")
    b, n, c = inp.x.shape
    if c != N_ATOM_KINDS or inp.e.shape != (b, n, n, N_BOND_KINDS):
        raise ShapeMismatch("graph tensors have unexpected shapes")
    if inp.node_feats.shape[-1] != cfg.node_features or inp.graph_feats.shape[-1] != cfg.graph_features:
        raise ShapeMismatch("feature widths differ from the model config")


def backbone(p: dict, cfg: ModelConfig, inp: Inputs):
    b, n, _ = inp.x.shape
    m = inp.mask[..., None]
    eye = torch.eye(n, dtype=inp.x.dtype)
    pair = (inp.mask[:, :, None] * inp.mask[:, None, :] * (1 - eye))[..., None]
    n_nodes = inp.mask.sum(1, keepdim=True).clamp(min=1)
    n_pairs = pair.sum((1, 2)).clamp(min=1)

    h = _lin(p, "in_x", torch.cat([inp.x, inp.node_feats], -1)) * m
    e = _lin(p, "in_e", inp.e) * pair
    y = _lin(p, "in_y", inp.graph_feats)
    heads, dk = cfg.heads, cfg.hidden_node // cfg.heads
    key_mask = (1 - inp.mask)[:, None, None, :] * -1e9
    for l in range(cfg.layers):
        pre = f"layer{l}."
        q = _lin(p, pre + "q", h).view(b, n, heads, dk)
        k = _lin(p, pre + "k", h).view(b, n, heads, dk)
        v = _lin(p, pre + "v", h).view(b, n, heads, dk)
        scores = torch.einsum("bihd,bjhd->bhij", q, k) / math.sqrt(dk)
        scores = scores + _lin(p, pre + "ebias", e).permute(0, 3, 1, 2) + key_mask
        attn = torch.softmax(scores, dim=-1)
        att = torch.einsum("bhij,bjhd->bihd", attn, v).reshape(b, n, cfg.hidden_node)
        gain, shift = _lin(p, pre + "film", y).chunk(2, dim=-1)
        h = _norm(h + _lin(p, pre + "o", att) * (1 + gain[:, None]) + shift[:, None]) * m
        h = _norm(h + _lin(p, pre + "ff2", F.silu(_lin(p, pre + "ff1", h)))) * m

        hi, hj = h[:, :, None, :], h[:, None, :, :]
        hi, hj = hi.expand(b, n, n, -1), hj.expand(b, n, n, -1)
        upd = F.silu(_lin(p, pre + "eu1", torch.cat([e, hi + hj, hi * hj], -1)))
        e = _norm(e + _lin(p, pre + "eu2", upd)) * pair

        pooled_h = (h * m).sum(1) / n_nodes
        pooled_e = e.sum((1, 2)) / n_pairs
        y = y + _lin(p, pre + "yu", torch.cat([y, pooled_h, pooled_e], -1))
    return h, e, y


def denoiser_forward(p: dict, cfg: ModelConfig, inp: Inputs) -> tuple[torch.Tensor, torch.Tensor]:
    """Node logits (B,N,4) and symmetric edge logits (B,N,N,4)."""
    _check(p, cfg, "denoiser", inp)
    h, e, _ = backbone(p, cfg, inp)
    node_logits = _lin(p, "out_x", h)
    edge_logits = _lin(p, "out_e", e)
    edge_logits = (edge_logits + edge_logits.transpose(1, 2)) / 2
    return node_logits, edge_logits


def regressor_forward(p: dict, cfg: ModelConfig, inp: Inputs) -> torch.Tensor:
    """Standardised (mu, HOMO) predictions, shape (B, 2)."""
    _check(p, cfg, "regressor", inp)
    h, _, y = backbone(p, cfg, inp)
    m = inp.mask[..., None]
    pooled = (h * m).sum(1) / inp.mask.sum(1, keepdim=True).clamp(min=1)
    return _lin(p, "out_r", torch.cat([pooled, y], -1))


def denoiser_loss(p: dict, cfg: ModelConfig, inp: Inputs, clean: NoisyBatch) -> torch.Tensor:
    """Batch mean of per-graph [node CE + 5 * edge CE], each CE averaged over its cells."""
    node_logits, edge_logits = denoiser_forward(p, cfg, inp)
    x_true = torch.as_tensor(clean.nodes)
    e_true = torch.as_tensor(clean.edges)
    mask = inp.mask
    n = mask.shape[1]
    up = mask[:, :, None] * mask[:, None, :] * torch.triu(torch.ones(n, n, dtype=mask.dtype), 1)
    node_ce = F.cross_entropy(node_logits.reshape(-1, N_ATOM_KINDS), x_true.reshape(-1),
                              reduction="none").view(x_true.shape)
    edge_ce = F.cross_entropy(edge_logits.reshape(-1, N_BOND_KINDS), e_true.reshape(-1),
                              reduction="none").view(e_true.shape)
    node_term = (node_ce * mask).sum(1) / mask.sum(1).clamp(min=1)
    edge_term = (edge_ce * up).sum((1, 2)) / up.sum((1, 2)).clamp(min=1)
    return (node_term + EDGE_LOSS_WEIGHT * edge_term).mean()


def regressor_loss(p: dict, cfg: ModelConfig, inp: Inputs, target: torch.Tensor) -> torch.Tensor:
    pred = regressor_forward(p, cfg, inp)
    return ((pred - target) ** 2).mean(-1).mean()


class NonFiniteLoss(ArithmeticError):
    pass


def gradients(params: ParamStore, loss_closure) -> tuple[float, ParamStore]:
    """Reverse-mode gradient of ``loss_closure(param_tensors)`` for every parameter."""
    tensors = params.to_torch(requires_grad=True)
    loss = loss_closure(tensors)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    else:
        grads = [None] * len(tensors)
    out = {}
    for (name, t), g in zip(tensors.items(), grads):
        out[name] = (torch.zeros_like(t) if g is None else g).detach().numpy()
    return float(loss.detach()), ParamStore(out)


def torch_dtype(params: ParamStore):
    return torch.float64 if params.dtype == np.float64 else torch.float32


class DenoiserHandle:
    """Callable adapter: ``NoisyBatch -> (node_logits, edge_logits)`` as float64 arrays."""

    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params
        self._tensors = params.to_torch()
        self._dtype = torch_dtype(params)

    def __call__(self, z: NoisyBatch):
        with torch.no_grad():
            nl, el = denoiser_forward(self._tensors, self.cfg, make_inputs(z, self._dtype))
        return nl.double().numpy(), el.double().numpy()


class RegressorHandle:
    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params
        self._tensors = params.to_torch()
        self._dtype = torch_dtype(params)

    def __call__(self, z: NoisyBatch) -> np.ndarray:
        with torch.no_grad():
            return regressor_forward(self._tensors, self.cfg, make_inputs(z, self._dtype)).double().numpy()
