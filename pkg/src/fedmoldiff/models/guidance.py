"""Regressor guidance for reverse sampling.

The regressor's squared error to a target is differentiated with respect to
the one-hot graph tensors (treated as real-valued); each cell's reverse
distribution is then multiplied by ``exp(-lambda_g * grad)`` and renormalised.
"""

from __future__ import annotations

import numpy as np
import torch

from ..diffusion import DiscreteDiffusion, NoisyBatch
from .nets import ModelConfig, make_inputs, regressor_forward, torch_dtype
from .params import ParamStore

DEFAULT_GUIDANCE_SCALE = 100.0


class NonFiniteGuidance(ArithmeticError):
    pass


def reweight(probs: np.ndarray, grad: np.ndarray, lambda_g: float) -> np.ndarray:
    logw = -lambda_g * grad
    logw = logw - logw.max(-1, keepdims=True)
    out = probs * np.exp(logw)
    total = out.sum(-1, keepdims=True)
    # a cell whose mass vanished keeps its unguided distribution
    return np.where(total > 0, out / np.where(total > 0, total, 1.0), probs)


class RegressorGuidance:
    def __init__(self, cfg: ModelConfig, params: ParamStore, target, lambda_g: float = DEFAULT_GUIDANCE_SCALE):
        self.cfg = cfg
        self.params = params
        self.target = np.asarray(target, dtype=float)
        if self.target.shape != (2,) or not np.all(np.isfinite(self.target)):
            raise NonFiniteGuidance(f"guidance target must be a finite 2-vector, got {target}")
        self.lambda_g = float(lambda_g)
        self._tensors = params.to_torch()
        self._dtype = torch_dtype(params)

    def input_gradients(self, z: NoisyBatch) -> tuple[np.ndarray, np.ndarray]:
        """d ||regressor(z) - target||^2 / d one-hot, per node cell and per edge cell."""
        inp = make_inputs(z, self._dtype, requires_grad=True)
        pred = regressor_forward(self._tensors, self.cfg, inp)
        err = ((pred - torch.as_tensor(self.target, dtype=self._dtype)) ** 2).sum()
        gx, ge = torch.autograd.grad(err, [inp.x, inp.e])
        gx = gx.double().numpy()
        ge = ge.double().numpy()
        ge = ge + np.swapaxes(ge, 1, 2)  # both triangle copies encode one bond variable
        if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(ge))):
            raise NonFiniteGuidance("regressor input gradient is not finite")
        return gx, ge

    def __call__(self, z: NoisyBatch, pn: np.ndarray, pe: np.ndarray):
        if self.lambda_g == 0.0:
            return pn, pe
        gx, ge = self.input_gradients(z)
        return reweight(pn, gx, self.lambda_g), reweight(pe, ge, self.lambda_g)


def guided_reverse_step(diffusion: DiscreteDiffusion, denoiser, guidance: RegressorGuidance,
                        z: NoisyBatch, rng: np.random.Generator) -> NoisyBatch:
    node_logits, edge_logits = denoiser(z)
    pn, pe = diffusion.step_distributions(node_logits, edge_logits, z)
    pn, pe = guidance(z, pn, pe)
    return diffusion.sample_from(pn, pe, z, rng)
