"""Command-line entry point: ``fedmoldiff <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import SplitSpec, central_split, load_dataset, shard_and_split
from ..diffusion import write_trajectory
from ..molgraph import MAX_ATOMS, write_smiles
from .config import ExperimentConfig
from .experiments import evaluate_sampling, load_run, run_central, run_federated
from .report import compare


def _config(args, mode: str) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.override(mode=mode, seed=args.seed, rounds=args.rounds,
                       collaborators=getattr(args, "collaborators", None),
                       transport=getattr(args, "transport", None), dataset=args.dataset)
    return cfg


def cmd_prepare(args):
    if args.synthetic:
        from ..synth import write_fixtures

        seeded = {} if args.seed is None else {"seed": args.seed}
        print(f"wrote synthetic fixtures to {write_fixtures(args.out, **seeded)}")
        return 0
    records = load_dataset(args.dataset)
    spec = SplitSpec(args.seed or 0, (0.8, 0.1, 0.1), args.collaborators)
    shards = shard_and_split(records, spec)
    central = central_split(records, spec)

    def as_lists(s):
        return {"train": s.train.tolist(), "val": s.val.tolist(), "test": s.test.tolist()}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"dataset": args.dataset, "records": len(records), "skipped": records.skipped,
               "central": as_lists(central), "collaborators": [as_lists(s) for s in shards]}
    (out / "splits.json").write_text(json.dumps(payload) + "\n", encoding="utf-8")
    print(f"{len(records)} records ({records.skipped} skipped); splits written to {out / 'splits.json'}")
    return 0


def cmd_train(args, mode):
    cfg = _config(args, mode)
    result = (run_central if mode == "CL" else run_federated)(cfg, args.out)
    print(json.dumps(result.final, indent=2, sort_keys=True))
    return 0


def cmd_sample(args):
    run = load_run(args.run)
    rng = np.random.default_rng(args.seed)
    sizes = rng.choice(np.arange(1, MAX_ATOMS + 1), size=args.n, p=run.histogram)
    from ..models import DenoiserHandle, RegressorGuidance

    guide = None
    if args.guided and run.config.use_regressor:
        guide = RegressorGuidance(run.config.model, run.regressor, run.config.guidance_target,
                                  run.config.guidance_scale)
    graphs, traj = run.diffusion.sample_chain(DenoiserHandle(run.config.model, run.denoiser), sizes, rng,
                                              guide=guide, keep_trajectory=args.trajectory is not None)
    for g in graphs:
        print(write_smiles(g))
    if args.trajectory:
        write_trajectory(traj, 0, args.trajectory)
    return 0


def cmd_evaluate(args):
    run = load_run(args.run)
    cfg = run.config.override(samples_per_eval=args.samples, chains=args.chains)
    s = evaluate_sampling(run.denoiser, run.regressor, run.diffusion, run.histogram, cfg, tag=10**6)
    print(json.dumps({"validity": s.validity, "uniqueness": s.uniqueness, "samples": len(s.graphs)}))
    return 0


def cmd_compare(args):
    report = compare(args.central, args.federated, args.out)
    print(report.format_table())
    return 0


def cmd_selftest(args):
    import pytest

    root = Path(__file__).resolve().parents[3] / "tests"
    return pytest.main([str(root), "-q", "-m", "not slow"] + args.pytest_args)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedmoldiff", description="federated discrete graph diffusion experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="split a dataset CSV, or write synthetic fixtures")
    p.add_argument("--dataset", default="fixtures/qm9_small.csv")
    p.add_argument("--out", default="runs/data")
    p.add_argument("--seed", type=int, help="split seed (default 0) or fixture generator seed")
    p.add_argument("--collaborators", type=int, default=2)
    p.add_argument("--synthetic", action="store_true", help="generate the fixture CSVs into --out")

    for name, mode in (("train-central", "CL"), ("train-federated", "FL")):
        p = sub.add_parser(name, help=f"{mode} training run")
        p.add_argument("--config")
        p.add_argument("--dataset")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        if mode == "FL":
            p.add_argument("--collaborators", type=int)
            p.add_argument("--transport", choices=["inproc", "tcp"])
        p.set_defaults(mode=mode)

    p = sub.add_parser("sample", help="sample molecules from a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guided", action="store_true")
    p.add_argument("--trajectory", help="TSV path for the first chain's trajectory")

    p = sub.add_parser("evaluate", help="validity/uniqueness of a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--chains", type=int, default=10)

    p = sub.add_parser("compare", help="CL vs FL report, table and curves")
    p.add_argument("--central", required=True)
    p.add_argument("--federated", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run the fast property suites")
    p.add_argument("pytest_args", nargs="*")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "prepare-data":
        return cmd_prepare(args)
    if args.command in ("train-central", "train-federated"):
        return cmd_train(args, args.mode)
    return {"sample": cmd_sample, "evaluate": cmd_evaluate, "compare": cmd_compare,
            "selftest": cmd_selftest}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
