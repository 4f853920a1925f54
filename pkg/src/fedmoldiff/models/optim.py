"""AdamW with decoupled weight decay, plus plain SGD, over ParamStores."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .params import ParamStore


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"  # "adamw" | "sgd"
    lr: float = 2e-4
    weight_decay: float = 1e-12
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OptimizerState:
    step: int
    m: ParamStore
    v: ParamStore
    lr: float = 2e-4
    weight_decay: float = 1e-12
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: ParamStore, cfg: OptimizerConfig = OptimizerConfig()) -> OptimizerState:
    zeros = params.zeros_like()
    return OptimizerState(0, zeros, zeros, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)


def adamw_step(params: ParamStore, grads: ParamStore, state: OptimizerState) -> tuple[ParamStore, OptimizerState]:
    """One decoupled AdamW update; returns new params and state, inputs untouched.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    params.check_congruent(grads)
    params.check_congruent(state.m)
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    m = state.m.zip_map(lambda mk, g: b1 * mk + (1 - b1) * g, grads)
    v = state.v.zip_map(lambda vk, g: b2 * vk + (1 - b2) * g * g, grads)

    def update(p, mk, vk):
        m_hat = mk / c1
        v_hat = vk / c2
        return (p - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)).astype(p.dtype)

    new = params.zip_map(update, m, v)
    return new, replace(state, step=step, m=m, v=v)


def sgd_step(params: ParamStore, grads: ParamStore, lr: float) -> ParamStore:
    return params.zip_map(lambda p, g: (p - lr * g).astype(p.dtype), grads)


class LocalOptimizer:
    """Stateful wrapper used by training loops; state never leaves its owner."""

    def __init__(self, params: ParamStore, cfg: OptimizerConfig):
        self.cfg = cfg
        self.state = init_optimizer(params, cfg) if cfg.name == "adamw" else None

    def step(self, params: ParamStore, grads: ParamStore) -> ParamStore:
        if self.cfg.name == "sgd":
            return sgd_step(params, grads, self.cfg.lr)
        if not math.isfinite(self.cfg.lr):
            raise ValueError("learning rate must be finite")
        params, self.state = adamw_step(params, grads, self.state)
        return params
