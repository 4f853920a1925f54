"""Centralized and federated experiment runners plus sampling evaluation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..data import Normalizer, Record, Split, atom_count_histogram, central_split, fit_normalizer, load_dataset, shard_and_split
from ..diffusion import DiscreteDiffusion, TransitionModel, build_schedule
from ..federation import Collaborator, WorkflowSpec, run_workflow
from ..federation.transport import AggregatorListener, start_collaborator_threads
from ..federation.wire import ModelUpdate, decode_update, encode_update
from ..models import DenoiserHandle, ParamStore, RegressorGuidance, init_params
from ..molgraph import MAX_ATOMS, N_ATOM_KINDS, N_BOND_KINDS, MolGraph, uniqueness_fraction, validity_fraction
from ..training import Site, TrainSettings
from .config import ExperimentConfig, plan_dict

log = logging.getLogger(__name__)

CURVE_METRICS = ("train_ce", "val_nll", "val_mae", "validity", "uniqueness")
FINAL_METRICS = ("NLL", "MAE", "Validity", "Uniqueness")


@dataclass
class SiteStatistics:
    """Aggregate category counts a site may disclose: no records, only totals."""

    node_counts: np.ndarray
    edge_counts: np.ndarray
    size_counts: np.ndarray

    @classmethod
    def of(cls, records: Sequence[Record], ids) -> "SiteStatistics":
        nodes, edges, sizes = np.zeros(N_ATOM_KINDS), np.zeros(N_BOND_KINDS), np.zeros(MAX_ATOMS)
        for i in ids:
            g = records[int(i)].graph
            nodes += np.bincount(g.nodes, minlength=N_ATOM_KINDS)
            edges += np.bincount(g.edges[np.triu_indices(g.n, 1)], minlength=N_BOND_KINDS)
            sizes[g.n - 1] += 1
        return cls(nodes, edges, sizes)

    def __add__(self, other: "SiteStatistics") -> "SiteStatistics":
        return SiteStatistics(self.node_counts + other.node_counts, self.edge_counts + other.edge_counts,
                              self.size_counts + other.size_counts)

    def transition_model(self) -> TransitionModel:
        edges = self.edge_counts if self.edge_counts.sum() > 0 else np.eye(N_BOND_KINDS)[0]
        return TransitionModel(self.node_counts / self.node_counts.sum(), edges / edges.sum())

    def size_histogram(self) -> np.ndarray:
        return self.size_counts / self.size_counts.sum()


@dataclass
class SamplingResult:
    validity: float
    uniqueness: float
    graphs: list[MolGraph] = field(repr=False)


@dataclass
class RunResult:
    config: ExperimentConfig
    history: list[dict]
    denoiser: ParamStore
    regressor: ParamStore
    final: dict
    diffusion: DiscreteDiffusion
    histogram: np.ndarray
    normalizers: dict[str, Normalizer]
    details: list[dict] = field(default_factory=list)


def train_settings(cfg: ExperimentConfig) -> TrainSettings:
    return TrainSettings(T=cfg.T, batch_size=cfg.batch_size, seed=cfg.seed, optimizer=cfg.optimizer,
                         model=cfg.model, train_regressor=cfg.use_regressor, nll_mc_samples=cfg.nll_mc_samples)


def initial_models(cfg: ExperimentConfig) -> tuple[ParamStore, ParamStore]:
    return (init_params(cfg.model, cfg.seed * 2 + 11, "denoiser"),
            init_params(cfg.model, cfg.seed * 2 + 12, "regressor"))


def _normalizer(cfg, records, ids) -> Normalizer | None:
    if not cfg.use_regressor:
        return None
    return fit_normalizer([records[int(i)] for i in ids])


def evaluate_sampling(denoiser: ParamStore, regressor: ParamStore, diffusion: DiscreteDiffusion,
                      histogram: np.ndarray, cfg: ExperimentConfig, tag: int = 0) -> SamplingResult:
    """``chains`` batches of ``chain_batch`` molecules each, scored for validity and uniqueness."""
    handle = DenoiserHandle(cfg.model, denoiser)
    guide = None
    if cfg.use_regressor and cfg.guidance:
        guide = RegressorGuidance(cfg.model, regressor, cfg.guidance_target, cfg.guidance_scale)
    graphs: list[MolGraph] = []
    for chain in range(cfg.chains):
        rng = np.random.default_rng([cfg.seed, 7919, tag, chain])
        sizes = rng.choice(np.arange(1, MAX_ATOMS + 1), size=cfg.chain_batch, p=histogram)
        batch, _ = diffusion.sample_chain(handle, sizes, rng, guide=guide)
        graphs.extend(batch)
    return SamplingResult(validity_fraction(graphs), uniqueness_fraction(graphs), graphs)


def _should_sample(cfg: ExperimentConfig, index: int, total: int) -> bool:
    return cfg.eval_every > 0 and ((index + 1) % cfg.eval_every == 0 or index + 1 == total)


def _final_from_sites(sites: Sequence[Site], den, reg, cfg) -> dict:
    nll_sum = mae_sum = 0.0
    mae_targets = np.zeros(2)
    count = 0
    for site in sites:
        ids = np.asarray(site.split.val)
        rng = np.random.default_rng([cfg.seed, 4242])
        nll = site.diffusion.nll_bound(DenoiserHandle(cfg.model, den),
                                       [site._records[int(i)].graph for i in ids], rng, cfg.final_nll_mc_samples)
        nll_sum += float(nll.sum())
        if cfg.use_regressor:
            per = site.regressor_mae(reg, ids, 4242)
            mae_targets += per * len(ids)
        count += len(ids)
    out = {"NLL": nll_sum / count}
    if cfg.use_regressor:
        mae_targets /= count
        out.update({"MAE": float(mae_targets.mean()), "MAE_mu": float(mae_targets[0]),
                    "MAE_homo": float(mae_targets[1])})
    return out


def run_central(cfg: ExperimentConfig, out: str | Path | None = None) -> RunResult:
    """Train both models on the pooled 80% split for ``rounds x local_epochs`` epochs."""
    torch.set_num_threads(1)
    records = load_dataset(cfg.dataset)
    split = central_split(records, cfg.split)
    stats = SiteStatistics.of(records, split.train)
    diffusion = DiscreteDiffusion(build_schedule(cfg.T), stats.transition_model())
    histogram = stats.size_histogram()
    normalizer = _normalizer(cfg, records, split.train)
    site = Site("central", records, split, train_settings(cfg), diffusion, normalizer)
    den, reg = initial_models(cfg)
    history = []
    for epoch in range(cfg.epochs):
        den, reg, row = site.train_epoch(den, reg, epoch)
        row = {"round": epoch, **row, **site.validate(den, reg, epoch)}
        if _should_sample(cfg, epoch, cfg.epochs):
            s = evaluate_sampling(den, reg, diffusion, histogram, cfg, epoch)
            row.update(validity=s.validity, uniqueness=s.uniqueness)
        log.info("CL epoch %d: %s", epoch, row)
        history.append(row)
    final = _final_metrics([site], den, reg, diffusion, histogram, cfg, history)
    result = RunResult(cfg, history, den, reg, final, diffusion, histogram,
                       {"central": normalizer} if normalizer else {})
    if out is not None:
        save_run(out, result)
    return result


def _final_metrics(sites, den, reg, diffusion, histogram, cfg, history) -> dict:
    final = _final_from_sites(sites, den, reg, cfg)
    if history and "validity" in history[-1]:
        final["Validity"], final["Uniqueness"] = history[-1]["validity"], history[-1]["uniqueness"]
    else:
        s = evaluate_sampling(den, reg, diffusion, histogram, cfg, len(history))
        final["Validity"], final["Uniqueness"] = s.validity, s.uniqueness
    return final


def build_collaborators(cfg: ExperimentConfig, records, splits: Sequence[Split], diffusion: DiscreteDiffusion):
    settings = train_settings(cfg)
    sites, collabs = [], []
    for k, split in enumerate(splits):
        site = Site(f"collaborator{k}", records, split, settings, diffusion, _normalizer(cfg, records, split.train))
        sites.append(site)
        collabs.append(Collaborator(site.name, site, cfg.local_epochs))
    return sites, collabs


def run_federated(cfg: ExperimentConfig, out: str | Path | None = None) -> RunResult:
    """Federated run over ``split.collaborators`` random shards of the dataset."""
    torch.set_num_threads(1)
    records = load_dataset(cfg.dataset)
    splits = shard_and_split(records, cfg.split)
    # plan setup: sites disclose aggregate category counts only
    stats = SiteStatistics.of(records, splits[0].train)
    for s in splits[1:]:
        stats = stats + SiteStatistics.of(records, s.train)
    diffusion = DiscreteDiffusion(build_schedule(cfg.T), stats.transition_model())
    histogram = stats.size_histogram()
    sites, collabs = build_collaborators(cfg, records, splits, diffusion)
    den, reg = initial_models(cfg)
    spec = WorkflowSpec(cfg.rounds, cfg.local_epochs, cfg.weights, cfg.parallel)
    history: list[dict] = []

    def on_round(state):
        entry = state.history[-1]
        row = {"round": entry["round"], **entry["aggregated"]}
        if _should_sample(cfg, entry["round"], cfg.rounds):
            s = evaluate_sampling(state.global_denoiser, state.global_regressor, diffusion, histogram, cfg,
                                  entry["round"])
            row.update(validity=s.validity, uniqueness=s.uniqueness)
        log.info("FL round %d: %s", entry["round"], row)
        history.append(row)

    if cfg.transport == "tcp":
        listener = AggregatorListener()
        threads = start_collaborator_threads(collabs, listener.address)
        handles = sorted(listener.accept(len(collabs)), key=lambda h: h.collaborator_id)
        try:
            state = run_workflow(spec, den, reg, handles, on_round)
        finally:
            for h in handles:
                h.close()
            listener.close()
            for th in threads:
                th.join(timeout=10)
    else:
        state = run_workflow(spec, den, reg, collabs, on_round)
    den, reg = state.global_denoiser, state.global_regressor
    final = _final_metrics(sites, den, reg, diffusion, histogram, cfg, history)
    result = RunResult(cfg, history, den, reg, final, diffusion, histogram,
                       {s.name: s.normalizer for s in sites if cfg.use_regressor},
                       [dict(e) for e in state.history])
    if out is not None:
        save_run(out, result)
    return result


# --------------------------------------------------------------------------
# run directories

def fmt(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def save_run(out: str | Path, result: RunResult) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    if cfg.mode == "FL":
        (out / "plan.json").write_text(json.dumps(plan_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "rounds.json").write_text(json.dumps(result.details, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "history.json").write_text(json.dumps(result.history, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    keys = ["round"] + sorted({k for row in result.history for k in row} - {"round"})
    with (out / "history.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in result.history:
            w.writerow([row["round"]] + [fmt(row.get(k)) for k in keys[1:]])
    (out / "final.json").write_text(json.dumps(result.final, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    stats = {
        "m_nodes": result.diffusion.transitions.m_nodes.tolist(),
        "m_edges": result.diffusion.transitions.m_edges.tolist(),
        "size_histogram": result.histogram.tolist(),
        "normalizers": {k: {"mean": n.mean.tolist(), "std": n.std.tolist()} for k, n in result.normalizers.items()},
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_checkpoint(out / "final.fpk", result.denoiser, result.regressor, cfg.mode)
    return out


def save_checkpoint(path: str | Path, denoiser: ParamStore, regressor: ParamStore, name: str = "checkpoint") -> None:
    Path(path).write_bytes(encode_update(ModelUpdate(name, denoiser, regressor, 1, {})))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, ParamStore]:
    u = decode_update(Path(path).read_bytes())
    return u.denoiser_params, u.regressor_params


@dataclass
class LoadedRun:
    config: ExperimentConfig
    denoiser: ParamStore
    regressor: ParamStore
    diffusion: DiscreteDiffusion
    histogram: np.ndarray
    history: list[dict]
    final: dict


def load_run(run_dir: str | Path) -> LoadedRun:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    stats = json.loads((run_dir / "stats.json").read_text(encoding="utf-8"))
    den, reg = load_checkpoint(run_dir / "final.fpk")
    diffusion = DiscreteDiffusion(build_schedule(cfg.T),
                                  TransitionModel(np.array(stats["m_nodes"]), np.array(stats["m_edges"])))
    history = json.loads((run_dir / "history.json").read_text(encoding="utf-8"))
    final = json.loads((run_dir / "final.json").read_text(encoding="utf-8"))
    return LoadedRun(cfg, den, reg, diffusion, np.array(stats["size_histogram"]), history, final)
