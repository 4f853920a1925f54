"""Desk-scale CL vs FL comparison on qm9_small (about 7 minutes on one CPU core).

    python scripts/run_desk_experiment.py --out runs/desk
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from fedmoldiff.harness import ExperimentConfig, compare, run_central, run_federated
from fedmoldiff.models import OptimizerConfig


def main():
    ap = argparse.ArgumentParser(description="train CL and FL with matched settings, then compare")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--dataset", default="fixtures/qm9_small.csv")
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = ExperimentConfig(dataset=args.dataset, T=50, rounds=args.rounds, batch_size=32,
                            optimizer=OptimizerConfig(lr=1e-3), eval_every=10,
                            transport=args.transport).override(seed=args.seed)
    out = Path(args.out)
    run_central(replace(base, mode="CL"), out / "cl")
    run_federated(base, out / "fl")
    print(compare(out / "cl", out / "fl", out / "compare").format_table())


if __name__ == "__main__":
    main()
