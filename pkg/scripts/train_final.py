"""Train a discretized network from a searched genotype and score it.

Runs the full objective (intensity + gradient + adversarial) by default and
evaluates on a held-out split. Pass --adversarial false for the lighter
reconstruction-only objective.
"""

import argparse
import sys

from mefnas.cli import main as cli


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--genotype", default="runs/search/genotype.json")
    ap.add_argument("--train-data", default="runs/data/train")
    ap.add_argument("--test-data", default="runs/data/test")
    ap.add_argument("--out", default="runs/train")
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--patch", type=int, default=64)
    ap.add_argument("--adversarial", default="true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    code = cli(["train", "--data", args.train_data, "--genotype", args.genotype,
                "--out", args.out, "--epochs", str(args.epochs),
                "--batch-size", str(args.batch_size), "--patch", str(args.patch),
                "--adversarial", args.adversarial, "--augment", "true",
                "--seed", str(args.seed)])
    if code != 0:
        return code
    return cli(["eval", "--data", args.test_data, "--ckpt", args.out,
                "--out", f"{args.out}/eval"])


if __name__ == "__main__":
    sys.exit(run())
