"""Experiment configuration (JSON) shared by centralized and federated runs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..data import SplitSpec
from ..models import ModelConfig, OptimizerConfig


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "FL"  # "CL" | "FL"
    dataset: str = "fixtures/qm9_small.csv"
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    T: int = 100
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int | None = 512
    samples_per_eval: int = 1000
    chains: int = 10
    eval_every: int = 10
    use_regressor: bool = True
    guidance: bool = True
    guidance_scale: float = 100.0
    guidance_target: tuple[float, float] = (0.0, 0.0)
    weights: str = "samples"
    transport: str = "inproc"
    parallel: bool = True
    nll_mc_samples: int = 1
    final_nll_mc_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("CL", "FL"):
            raise ValueError(f"mode must be CL or FL, got {self.mode!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.chains < 1 or self.samples_per_eval % self.chains:
            raise ValueError("samples_per_eval must be a positive multiple of chains")
        if self.mode == "FL" and self.split.collaborators < 2:
            raise ValueError("federated runs need at least two collaborators")

    @property
    def epochs(self) -> int:
        """Centralized epochs: the same number of passes as rounds x local epochs."""
        return self.rounds * self.local_epochs

    @property
    def chain_batch(self) -> int:
        return self.samples_per_eval // self.chains

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"]["fractions"] = list(self.split.fractions)
        d["guidance_target"] = list(self.guidance_target)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "split" in d:
            s = dict(d["split"])
            if "fractions" in s:
                s["fractions"] = tuple(s["fractions"])
            d["split"] = SplitSpec(**s)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig.from_dict(d["optimizer"])
        if "guidance_target" in d:
            d["guidance_target"] = tuple(d["guidance_target"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def override(self, **kw) -> "ExperimentConfig":
        """Apply non-None overrides; ``collaborators`` and ``seed`` also reach the split."""
        kw = {k: v for k, v in kw.items() if v is not None}
        split = self.split
        if "collaborators" in kw:
            split = replace(split, collaborators=kw.pop("collaborators"))
        if "seed" in kw:
            split = replace(split, seed=kw["seed"])
        return replace(self, split=split, **kw)


def plan_dict(cfg: ExperimentConfig) -> dict:
    """The federation plan every party agrees to before round 0."""
    return {
        "rounds": cfg.rounds,
        "local_epochs": cfg.local_epochs,
        "weights": cfg.weights,
        "optimizer": cfg.optimizer.to_dict(),
        "model": asdict(cfg.model),
        "T": cfg.T,
        "batch_size": cfg.batch_size,
        "seeds": {"experiment": cfg.seed, "split": cfg.split.seed},
        "collaborators": cfg.split.collaborators,
    }
