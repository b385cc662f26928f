"""Run the matched-budget ablation battery.

Covers the relighting cascade depth, the alignment module on shifted data,
the loss-term mix, fixed-operator search spaces, and the latency-pressure
sweep. Each row trains under one budget and seed; results land in
runs/ablate/<kind>/ablation_<kind>.csv.
"""

import argparse
import sys

from mefnas.cli import main as cli


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="runs/data/train")
    ap.add_argument("--misaligned-data", default="runs/data/train_misaligned")
    ap.add_argument("--table", default="runs/latency_table.json")
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--patch", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kinds", default="srsm_cascade,dasm,losses,search_space,eta")
    args = ap.parse_args(argv)

    for kind in args.kinds.split(","):
        data = args.misaligned_data if kind == "dasm" else args.data
        cmd = ["ablate", "--kind", kind, "--data", data,
               "--out", f"{args.out}/{kind}", "--epochs", str(args.epochs),
               "--patch", str(args.patch), "--seed", str(args.seed)]
        if kind == "eta":
            cmd += ["--table", args.table]
        if kind == "dasm":
            cmd += ["--misaligned", "true"]
        code = cli(cmd)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
