"""Command-line entry point: synth, bench, search, train, fuse, eval, ablate.

Exit codes: 0 success, 2 input error, 3 benchmark error, 4 diverged run.
Flat key=value config files provide defaults; flags override; the MEFNAS_SEED
environment variable is the global seed fallback.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch

from .ablation import ABLATION_KINDS, run_ablation
from .data import DataError, load_dataset, load_image, save_image, write_dataset
from .genotype import Genotype
from .latency import LatencyError, LatencyTable, build_latency_table
from .losses import LossWeights
from .metrics import EvalResult, psnr, ssim
from .network import NetError
from .ops import OPERATOR_NAMES, OpError
from .search import SearchConfig, SearchError, run_search
from .train import (TrainConfig, TrainError, evaluate, latest_checkpoint,
                    load_checkpoint, restore_net, train, write_eval)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BENCH = 3
EXIT_DIVERGED = 4


class InputError(ValueError):
    """CLI-level input problem: missing path, malformed flag value."""


def parse_config(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment; values stay strings."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"missing config: {path}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"malformed config line {lineno}: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _to_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {value}")


def _resolve(args, config: dict, key: str, default, cast=None):
    """Priority: explicit flag > config file > MEFNAS-independent default."""
    flag_val = getattr(args, key, None)
    if flag_val is not None:
        raw = flag_val
    elif key in config:
        raw = config[key]
    else:
        return default
    if cast is bool:
        return _to_bool(raw)
    return cast(raw) if cast else raw


def resolve_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("MEFNAS_SEED")
    if env is not None:
        return int(env)
    return 0


def _hash_inputs(paths: list[Path]) -> str:
    h = hashlib.sha1()
    for p in sorted(str(x) for x in paths):
        path = Path(p)
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, args, seed: int,
                   inputs: list[Path], outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": getattr(args, "config", None),
        "seed": seed,
        "argv": sys.argv[1:],
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "input_hash": _hash_inputs(inputs),
        "outputs": outputs,
    }
    with open(out_dir / "manifest.jsonl", "a") as f:
        f.write(json.dumps(record) + "\n")


def _require(path: str | Path, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"missing {kind}: {p}")
    return p


def cmd_synth(args, config) -> int:
    seed = resolve_seed(args, config)
    out = Path(args.out)
    count = _resolve(args, config, "count", 8, int)
    size = _resolve(args, config, "size", 64, int)
    misaligned = _resolve(args, config, "misaligned", False, bool)
    max_translation = _resolve(args, config, "max_translation", 8.0, float)
    try:
        write_dataset(out, count=count, seed=seed, size=size,
                      misaligned=misaligned, max_translation=max_translation)
    except OSError as exc:
        raise InputError(f"unwritable output: {out}") from exc
    write_manifest(out, "synth", args, seed, [], [str(out / "manifest.json")])
    print(f"wrote {count} pairs to {out}")
    return EXIT_OK


def cmd_bench(args, config) -> int:
    seed = resolve_seed(args, config)
    shape = tuple(int(v) for v in
                  str(_resolve(args, config, "shape", "16,64,64")).split(","))
    if len(shape) != 3:
        raise InputError("shape must be C,H,W")
    ops_arg = _resolve(args, config, "ops", "all")
    names = OPERATOR_NAMES if ops_arg == "all" else tuple(ops_arg.split(","))
    warmup = _resolve(args, config, "warmup", 10, int)
    timed = _resolve(args, config, "timed", 30, int)
    table = build_latency_table(names, shape, warmup_runs=warmup,
                                timed_runs=timed, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    write_manifest(out.parent, "bench", args, seed, [], [str(out)])
    print(f"benchmarked {len(table.entries)} operators -> {out}")
    return EXIT_OK


def cmd_search(args, config) -> int:
    seed = resolve_seed(args, config)
    data_dir = _require(args.data, "dataset")
    table = LatencyTable.load(_require(args.table, "latency table"))
    pairs = load_dataset(data_dir)
    cfg = SearchConfig(
        eta=_resolve(args, config, "eta", 0.5, float),
        pretrain_epochs=_resolve(args, config, "pretrain_epochs", 10, int),
        search_epochs=_resolve(args, config, "epochs", 300, int),
        batch_size=_resolve(args, config, "batch_size", 2, int),
        patch=_resolve(args, config, "patch", 32, int),
        seed=seed,
        base_channels=_resolve(args, config, "base_channels", 16, int),
        cascade_count=_resolve(args, config, "cascade", 2, int),
        misaligned=_resolve(args, config, "misaligned", False, bool),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    genotype = run_search(pairs, cfg, table, log_path=out / "search_log.csv")
    genotype.save(out / "genotype.json")
    write_manifest(out, "search", args, seed,
                   [data_dir / "manifest.json", Path(args.table)],
                   [str(out / "genotype.json"), str(out / "search_log.csv")])
    print(f"genotype: {[b.op for b in genotype.blocks]} "
          f"latency {genotype.estimated_latency_ms:.3f} ms, "
          f"{genotype.parameter_count} parameters")
    return EXIT_OK


def _train_config(args, config, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=_resolve(args, config, "epochs", 2000, int),
        batch_size=_resolve(args, config, "batch_size", 4, int),
        patch=_resolve(args, config, "patch", 128, int),
        lr=_resolve(args, config, "lr", 1e-4, float),
        lr_end=_resolve(args, config, "lr_end", 1e-10, float),
        seed=seed,
        misaligned=_resolve(args, config, "misaligned", False, bool),
        cascade_count=_resolve(args, config, "cascade", 2, int),
        adversarial=_resolve(args, config, "adversarial", True, bool),
        weights=LossWeights(
            beta1=_resolve(args, config, "beta1", 0.75, float),
            beta2=_resolve(args, config, "beta2", 0.05, float),
            gp_weight=_resolve(args, config, "gp_weight", 10.0, float)),
        augment=_resolve(args, config, "augment", True, bool),
        checkpoint_every=_resolve(args, config, "checkpoint_every", 0, int),
    )


def cmd_train(args, config) -> int:
    seed = resolve_seed(args, config)
    data_dir = _require(args.data, "dataset")
    genotype = Genotype.load(_require(args.genotype, "genotype"))
    pairs = load_dataset(data_dir)
    cfg = _train_config(args, config, seed)
    out = Path(args.out)
    max_steps = int(args.max_steps) if args.max_steps is not None else None
    resume = args.resume if args.resume is None else _require(args.resume, "checkpoint")
    result = train(genotype, pairs, cfg, out, resume_from=resume,
                   max_steps=max_steps)
    write_manifest(out, "train", args, seed,
                   [data_dir / "manifest.json", Path(args.genotype)],
                   [str(result.final_checkpoint), str(result.log_path)])
    print(f"trained {result.steps} steps -> {result.final_checkpoint}")
    return EXIT_OK


def cmd_fuse(args, config) -> int:
    seed = resolve_seed(args, config)
    under_path = _require(args.under, "input image")
    over_path = _require(args.over, "input image")
    ckpt_dir = _require(args.ckpt, "checkpoint directory")
    under = load_image(under_path)
    over = load_image(over_path)
    ckpt_file = latest_checkpoint(ckpt_dir)
    net, _ = restore_net(load_checkpoint(ckpt_file))
    with torch.no_grad():
        fused = net(under, over)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(fused, out)
    write_manifest(out.parent, "fuse", args, seed,
                   [under_path, over_path, ckpt_file], [str(out)])
    print(f"fused -> {out}")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    seed = resolve_seed(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.image is not None or args.reference is not None:
        # direct image-versus-reference scoring, no checkpoint involved
        if args.image is None or args.reference is None:
            raise InputError("--image and --reference must be given together")
        img_path = _require(args.image, "input image")
        ref_path = _require(args.reference, "reference image")
        img = load_image(img_path)
        ref = load_image(ref_path)
        result = EvalResult(psnr_db=psnr(img, ref), ssim=ssim(img, ref),
                            per_image=[{"image": "0000", "psnr": psnr(img, ref),
                                        "ssim": ssim(img, ref)}])
        inputs = [img_path, ref_path]
    else:
        data_dir = _require(args.data, "dataset")
        ckpt_dir = _require(args.ckpt, "checkpoint directory")
        pairs = load_dataset(data_dir)
        ckpt_file = latest_checkpoint(ckpt_dir)
        net, _ = restore_net(load_checkpoint(ckpt_file))
        result = evaluate(net, pairs)
        inputs = [data_dir / "manifest.json", ckpt_file]
    write_eval(result, out / "eval.csv", out / "eval.json")
    write_manifest(out, "eval", args, seed, inputs,
                   [str(out / "eval.csv"), str(out / "eval.json")])
    print(f"psnr {result.psnr_db:.3f} dB  ssim {result.ssim:.4f}")
    return EXIT_OK


def cmd_ablate(args, config) -> int:
    seed = resolve_seed(args, config)
    if args.kind not in ABLATION_KINDS:
        raise InputError(f"unknown ablation kind: {args.kind}")
    data_dir = _require(args.data, "dataset")
    pairs = load_dataset(data_dir)
    train_cfg = _train_config(args, config, seed)
    search_cfg = None
    table = None
    if args.kind == "eta":
        table = LatencyTable.load(_require(args.table, "latency table"))
        search_cfg = SearchConfig(
            pretrain_epochs=_resolve(args, config, "pretrain_epochs", 2, int),
            search_epochs=_resolve(args, config, "epochs", 20, int),
            batch_size=_resolve(args, config, "batch_size", 2, int),
            patch=_resolve(args, config, "patch", 32, int),
            seed=seed,
            base_channels=_resolve(args, config, "base_channels", 16, int),
            cascade_count=_resolve(args, config, "cascade", 1, int),
            misaligned=_resolve(args, config, "misaligned", False, bool),
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(args.kind, pairs, train_cfg, search_cfg=search_cfg,
                        table=table, out_root=out)
    report = out / f"ablation_{args.kind}.csv"
    fields = sorted({k for row in rows for k in row})
    with open(report, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "ablate", args, seed, [data_dir / "manifest.json"],
                   [str(report)])
    for row in rows:
        print(row)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mefnas",
        description="Latency-aware architecture search for multi-exposure fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", default=None, help="overrides config and MEFNAS_SEED")

    p = sub.add_parser("synth", help="write a synthetic exposure-pair dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", default=None)
    p.add_argument("--size", default=None)
    p.add_argument("--misaligned", default=None)
    p.add_argument("--max-translation", dest="max_translation", default=None)

    p = sub.add_parser("bench", help="measure per-operator latency")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", default=None, help="C,H,W reference shape")
    p.add_argument("--ops", default=None, help="'all' or comma-separated names")
    p.add_argument("--warmup", default=None)
    p.add_argument("--timed", default=None)

    p = sub.add_parser("search", help="run the architecture search")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    for flag in ("--eta", "--pretrain-epochs", "--epochs", "--batch-size",
                 "--patch", "--base-channels", "--cascade", "--misaligned"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), default=None)

    p = sub.add_parser("train", help="train a discretized network")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--genotype", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--max-steps", dest="max_steps", default=None)
    for flag in ("--epochs", "--batch-size", "--patch", "--lr", "--lr-end",
                 "--cascade", "--adversarial", "--beta1", "--beta2",
                 "--gp-weight", "--augment", "--checkpoint-every",
                 "--misaligned"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), default=None)

    p = sub.add_parser("fuse", help="fuse one under/over pair with a checkpoint")
    common(p)
    p.add_argument("--under", required=True)
    p.add_argument("--over", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--image", default=None, help="score one image against --reference")
    p.add_argument("--reference", default=None)

    p = sub.add_parser("ablate", help="run a matched-budget ablation")
    common(p)
    p.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table", default=None)
    for flag in ("--epochs", "--pretrain-epochs", "--batch-size", "--patch",
                 "--lr", "--cascade", "--adversarial", "--beta1", "--beta2",
                 "--base-channels", "--misaligned", "--augment"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), default=None)

    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "bench": cmd_bench,
    "search": cmd_search,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config) if args.config else {}
        return _HANDLERS[args.command](args, config)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DataError, OpError, NetError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LatencyError as exc:
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        if "lookup miss" in message or "unreadable" in message:
            return EXIT_INPUT
        return EXIT_BENCH
    except TrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if "diverged" in str(exc):
            return EXIT_DIVERGED
        return EXIT_INPUT
    except SearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if "diverged" in str(exc):
            return EXIT_DIVERGED
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
