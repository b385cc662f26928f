"""Final-network training, evaluation, and checkpointing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import ExposurePair, AugmentParams, apply_augment, augment
from .genotype import Genotype
from .losses import Discriminator, LossWeights, adversarial_losses, total_loss
from .metrics import EvalResult, psnr, ssim
from .network import FusionNet, SrsmConfig, DasmConfig, DrmConfig


class TrainError(RuntimeError):
    """Raised for diverged runs and checkpoint I/O failures."""


def cosine_lr(step: int, total_steps: int, lr0: float, lr1: float) -> float:
    """Cosine decay from lr0 (step 0) to lr1 (final step), endpoints exact."""
    if total_steps <= 1:
        return lr0
    t = min(step, total_steps - 1) / (total_steps - 1)
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 4
    patch: int = 128
    lr: float = 1e-4
    lr_end: float = 1e-10
    seed: int = 0
    misaligned: bool = False
    cascade_count: int = 2
    adversarial: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    augment: bool = True
    checkpoint_every: int = 0  # steps; 0 keeps only the final checkpoint

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be at least 1")
        if self.patch % 4 != 0:
            raise TrainError("patch must be divisible by 4")


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    log_path: Path
    steps: int
    net: FusionNet


def build_net(genotype: Genotype, cascade_count: int = 2) -> FusionNet:
    """Instantiate the discretized network described by a genotype."""
    cascade = cascade_count if genotype.has_module("srsm") else 0
    return FusionNet(srsm=SrsmConfig(cascade_count=cascade,
                                     base_channels=genotype.base_channels),
                     dasm=DasmConfig(enabled=genotype.has_module("dasm")),
                     drm=DrmConfig(),
                     genotype=genotype)


def _batch(pairs: list[ExposurePair], idx, patch: int, rng: np.random.Generator,
           do_augment: bool) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    unders, overs, gts = [], [], []
    for i in idx:
        pair = pairs[int(i)]
        if do_augment:
            pair = augment(pair, seed=int(rng.integers(2**31)), patch=patch)
        else:
            p = AugmentParams(0, 0, patch, False, False, 0)
            pair = ExposurePair(under=apply_augment(pair.under, p),
                                over=apply_augment(pair.over, p),
                                gt=apply_augment(pair.gt, p), warp=pair.warp)
        unders.append(pair.under)
        overs.append(pair.over)
        gts.append(pair.gt)
    return torch.cat(unders), torch.cat(overs), torch.cat(gts)


def save_checkpoint(path: Path, step: int, net: FusionNet,
                    opt: torch.optim.Optimizer, disc, disc_opt,
                    rng: np.random.Generator, genotype: Genotype,
                    cfg: TrainConfig) -> None:
    state = {
        "step": step,
        "model": net.state_dict(),
        "opt": opt.state_dict(),
        "disc": disc.state_dict() if disc is not None else None,
        "disc_opt": disc_opt.state_dict() if disc_opt is not None else None,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": rng.bit_generator.state,
        "genotype": genotype.to_dict(),
        "config": asdict(cfg),
    }
    try:
        torch.save(state, path)
    except OSError as exc:
        raise TrainError("checkpoint error") from exc


def load_checkpoint(path: str | Path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise TrainError("checkpoint error") from exc


def latest_checkpoint(run_dir: str | Path) -> Path:
    ckpts = sorted(Path(run_dir, "ckpt").glob("*.bin"),
                   key=lambda p: int(p.stem))
    if not ckpts:
        raise TrainError("checkpoint error")
    return ckpts[-1]


def restore_net(ckpt: dict) -> tuple[FusionNet, Genotype]:
    genotype = Genotype.from_dict(ckpt["genotype"])
    net = build_net(genotype, cascade_count=ckpt["config"]["cascade_count"])
    net.load_state_dict(ckpt["model"])
    net.eval()
    return net, genotype


def train(genotype: Genotype, pairs: list[ExposurePair], cfg: TrainConfig,
          out_dir: str | Path, resume_from: str | Path | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Train the discretized network with the weighted objective.

    Emits `ckpt/{step}.bin`, `genotype.json`, and `train_log.csv` under
    out_dir. Deterministic under cfg.seed; resuming from a checkpoint
    reproduces the uninterrupted run's remaining steps. `max_steps` stops
    early at an absolute step count (emulating an interrupted run).
    """
    if not pairs:
        raise TrainError("training needs at least one pair")
    out = Path(out_dir)
    ckpt_dir = out / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    genotype.save(out / "genotype.json")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = build_net(genotype, cascade_count=cfg.cascade_count)
    net.train()
    use_disc = cfg.adversarial and cfg.weights.beta2 > 0
    disc = Discriminator() if use_disc else None
    opt = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=cfg.lr)
    disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr) if use_disc else None

    steps_per_epoch = max(1, len(pairs) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    start_step = 0
    log_rows: list[dict] = []

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        net.load_state_dict(ckpt["model"])
        opt.load_state_dict(ckpt["opt"])
        if use_disc and ckpt["disc"] is not None:
            disc.load_state_dict(ckpt["disc"])
            disc_opt.load_state_dict(ckpt["disc_opt"])
        torch.set_rng_state(ckpt["torch_rng"])
        rng = np.random.default_rng(cfg.seed)
        rng.bit_generator.state = ckpt["numpy_rng"]
        start_step = ckpt["step"]

    stop_at = total_steps if max_steps is None else min(total_steps, max_steps)
    indices = np.arange(len(pairs))
    for step in range(start_step, stop_at):
        lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_end)
        for group in opt.param_groups:
            group["lr"] = lr
        if disc_opt is not None:
            for group in disc_opt.param_groups:
                group["lr"] = lr

        batch_idx = rng.choice(indices, cfg.batch_size)
        under, over, gt = _batch(pairs, batch_idx, cfg.patch, rng, cfg.augment)
        y = net(under, over)

        d_loss_val = 0.0
        if use_disc:
            disc_opt.zero_grad()
            _, d_loss = adversarial_losses(disc, y, gt, cfg.weights)
            d_loss.backward()
            disc_opt.step()
            d_loss_val = float(d_loss.detach())

        opt.zero_grad()
        total, report = total_loss(y, gt, disc if use_disc else None, cfg.weights)
        if not torch.isfinite(total):
            raise TrainError(f"training diverged at step {step}: {report}")
        total.backward()
        opt.step()

        log_rows.append({"step": step, "l_int": report.l_int, "l_gra": report.l_gra,
                         "l_dis": report.l_dis, "l_total": report.l_total,
                         "d_loss": d_loss_val})
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"{step + 1}.bin", step + 1, net, opt,
                            disc, disc_opt, rng, genotype, cfg)

    final = ckpt_dir / f"{stop_at}.bin"
    save_checkpoint(final, stop_at, net, opt, disc, disc_opt, rng, genotype, cfg)
    log_path = out / "train_log.csv"
    _write_train_log(log_path, cfg, log_rows, append=resume_from is not None)
    net.eval()
    return TrainResult(out_dir=out, final_checkpoint=final, log_path=log_path,
                       steps=stop_at, net=net)


def _write_train_log(path: Path, cfg: TrainConfig, rows: list[dict],
                     append: bool = False) -> None:
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as f:
        if mode == "w":
            f.write(f"# batch_size={cfg.batch_size} patch={cfg.patch} "
                    f"lr={cfg.lr} seed={cfg.seed}\n")
        writer = csv.DictWriter(f, fieldnames=["step", "l_int", "l_gra", "l_dis",
                                               "l_total", "d_loss"])
        if mode == "w":
            writer.writeheader()
        writer.writerows(rows)


def evaluate(net: FusionNet, pairs: list[ExposurePair]) -> EvalResult:
    """Full-image metrics against ground truth, per pair and averaged."""
    rows = []
    net.eval()
    with torch.no_grad():
        for i, pair in enumerate(pairs):
            y = net(pair.under, pair.over)
            rows.append({"image": f"{i:04d}", "psnr": psnr(y, pair.gt),
                         "ssim": ssim(y, pair.gt)})
    mean_psnr = sum(r["psnr"] for r in rows) / len(rows)
    mean_ssim = sum(r["ssim"] for r in rows) / len(rows)
    return EvalResult(psnr_db=mean_psnr, ssim=mean_ssim, per_image=rows)


def write_eval(result: EvalResult, csv_path: str | Path, json_path: str | Path) -> None:
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["image", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(result.per_image)
    with open(json_path, "w") as f:
        json.dump({"psnr_db": result.psnr_db, "ssim": result.ssim,
                   "count": len(result.per_image)}, f, indent=2)
