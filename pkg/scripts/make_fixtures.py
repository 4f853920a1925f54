"""Regenerate the synthetic QM9-profile fixtures.

    python scripts/make_fixtures.py --out fixtures
"""

import argparse

from fedmoldiff.synth import write_fixtures


def main():
    ap = argparse.ArgumentParser(description="write fixture CSVs and the SMILES corpus")
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--seed", type=int, default=20240607)
    args = ap.parse_args()
    print(f"wrote fixtures to {write_fixtures(args.out, args.seed)}")


if __name__ == "__main__":
    main()
