"""Local training and validation loops shared by centralized runs and collaborators.

Every random draw that touches a training record is seeded by
``(seed, epoch, record_id, stream)``, and minibatch order by ``(seed, epoch)``,
so a record's noise does not depend on which site holds it or which batch it
lands in. That is what makes federated runs comparable draw-for-draw with
centralized ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import Normalizer, Record, Split
from .diffusion import DiscreteDiffusion, NoisyBatch, RecordNoise
from .models import (
    DenoiserHandle,
    LocalOptimizer,
    ModelConfig,
    OptimizerConfig,
    ParamStore,
    denoiser_loss,
    gradients,
    make_inputs,
    regressor_forward,
    regressor_loss,
)
from .models.nets import torch_dtype

STREAM_DENOISER = 0
STREAM_REGRESSOR = 1
STREAM_VAL_REGRESSOR = 2
STREAM_SHUFFLE = 3
STREAM_VAL_NLL = 4


@dataclass(frozen=True)
class TrainSettings:
    T: int = 100
    batch_size: int | None = 512  # None: full batch
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_regressor: bool = True
    nll_mc_samples: int = 1


def record_noise(seed: int, epoch: int, record_id: int, stream: int, T: int) -> RecordNoise:
    return RecordNoise.draw(np.random.default_rng([seed, epoch, record_id, stream]), T)


def noisy_batch(diffusion: DiscreteDiffusion, records: Sequence[Record], ids: Sequence[int],
                seed: int, epoch: int, stream: int) -> tuple[NoisyBatch, NoisyBatch]:
    clean = NoisyBatch.from_graphs([r.graph for r in records], 0, diffusion.T)
    draws = [record_noise(seed, epoch, int(i), stream, diffusion.T) for i in ids]
    t, un, ue = RecordNoise.stack(draws)
    return clean, diffusion.noise_batch(clean, t, un, ue)


class Site:
    """A data-holding training site: one collaborator, or the pooled centralized site.

    Holds its records, split, normaliser and optimiser states. Nothing here is
    ever transmitted; the federation layer only sees the parameters and
    metrics returned from :meth:`train_epoch` and :meth:`validate`.
    """

    def __init__(self, name: str, records: Sequence[Record], split: Split, settings: TrainSettings,
                 diffusion: DiscreteDiffusion, normalizer: Normalizer | None):
        self.name = name
        self._records = records
        self.split = split
        self.settings = settings
        self.diffusion = diffusion
        self.normalizer = normalizer if normalizer is not None else Normalizer.identity()
        self._opt_den: LocalOptimizer | None = None
        self._opt_reg: LocalOptimizer | None = None

    @property
    def train_count(self) -> int:
        return len(self.split.train)

    def _batches(self, epoch: int) -> list[np.ndarray]:
        ids = np.asarray(self.split.train)
        order = np.random.default_rng([self.settings.seed, epoch, STREAM_SHUFFLE]).permutation(len(ids))
        ids = ids[order]
        bs = self.settings.batch_size or len(ids)
        return [ids[i:i + bs] for i in range(0, len(ids), bs)]

    def _targets(self, ids, dtype):
        y = np.stack([self._records[int(i)].targets for i in ids])
        return torch.tensor(self.normalizer.apply(y), dtype=dtype)

    def train_epoch(self, denoiser: ParamStore, regressor: ParamStore, epoch: int):
        cfg = self.settings.model
        if self._opt_den is None:
            self._opt_den = LocalOptimizer(denoiser, self.settings.optimizer)
            self._opt_reg = LocalOptimizer(regressor, self.settings.optimizer)
        dtype = torch_dtype(denoiser)
        ce_sum = mse_sum = 0.0
        seen = 0
        for ids in self._batches(epoch):
            recs = [self._records[int(i)] for i in ids]
            clean, z = noisy_batch(self.diffusion, recs, ids, self.settings.seed, epoch, STREAM_DENOISER)
            inp = make_inputs(z, dtype)
            loss, g = gradients(denoiser, lambda p: denoiser_loss(p, cfg, inp, clean))
            denoiser = self._opt_den.step(denoiser, g)
            ce_sum += loss * len(ids)
            if self.settings.train_regressor:
                _, zr = noisy_batch(self.diffusion, recs, ids, self.settings.seed, epoch, STREAM_REGRESSOR)
                inp_r = make_inputs(zr, dtype)
                target = self._targets(ids, dtype)
                loss_r, gr = gradients(regressor, lambda p: regressor_loss(p, cfg, inp_r, target))
                regressor = self._opt_reg.step(regressor, gr)
                mse_sum += loss_r * len(ids)
            seen += len(ids)
        metrics = {"train_ce": ce_sum / seen}
        if self.settings.train_regressor:
            metrics["train_mse"] = mse_sum / seen
        return denoiser, regressor, metrics

    def validate(self, denoiser: ParamStore, regressor: ParamStore, epoch: int,
                 mc_samples: int | None = None, which: str = "val") -> dict:
        """NLL bound (nats/graph) and standardized MAE on the validation (or test) split."""
        ids = np.asarray(self.split.val if which == "val" else self.split.test)
        if len(ids) == 0:
            return {}
        recs = [self._records[int(i)] for i in ids]
        mc = mc_samples or self.settings.nll_mc_samples
        rng = np.random.default_rng([self.settings.seed, epoch, STREAM_VAL_NLL])
        nll = self.diffusion.nll_bound(DenoiserHandle(self.settings.model, denoiser),
                                       [r.graph for r in recs], rng, mc)
        out = {"val_nll": float(nll.mean())}
        if self.settings.train_regressor:
            mae = self.regressor_mae(regressor, ids, epoch)
            out["val_mae"] = float(mae.mean())
        return out

    def regressor_mae(self, regressor: ParamStore, ids, epoch: int) -> np.ndarray:
        """Per-target MAE in standardized units, on noisy inputs at seeded steps."""
        recs = [self._records[int(i)] for i in ids]
        _, z = noisy_batch(self.diffusion, recs, ids, self.settings.seed, epoch, STREAM_VAL_REGRESSOR)
        dtype = torch_dtype(regressor)
        with torch.no_grad():
            pred = regressor_forward(regressor.to_torch(), self.settings.model, make_inputs(z, dtype))
        target = self._targets(ids, dtype)
        return (pred - target).abs().mean(0).double().numpy()
