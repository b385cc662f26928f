"""End-to-end architecture search: benchmark operators, search, report.

Produces a device latency table, runs the bilevel search at the requested
latency pressure, and prints the discretized genotype with its estimated
latency. Expects a dataset from scripts/make_datasets.py.
"""

import argparse
import json
import sys
from pathlib import Path

from mefnas.cli import main as cli


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="runs/data/train")
    ap.add_argument("--out", default="runs/search")
    ap.add_argument("--table", default="runs/latency_table.json")
    ap.add_argument("--eta", type=float, default=0.5)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--pretrain-epochs", type=int, default=10)
    ap.add_argument("--misaligned", default="false")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not Path(args.table).exists():
        code = cli(["bench", "--out", args.table, "--seed", str(args.seed)])
        if code != 0:
            return code

    code = cli(["search", "--data", args.data, "--table", args.table,
                "--out", args.out, "--eta", str(args.eta),
                "--epochs", str(args.epochs),
                "--pretrain-epochs", str(args.pretrain_epochs),
                "--misaligned", args.misaligned, "--seed", str(args.seed)])
    if code != 0:
        return code

    genotype = json.loads((Path(args.out) / "genotype.json").read_text())
    print(json.dumps(genotype, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(run())
