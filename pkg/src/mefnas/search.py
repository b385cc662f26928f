"""Latency-regularized bilevel architecture search and discretization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ExposurePair, augment
from .genotype import Genotype, BlockChoice
from .latency import LatencyTable, latency_regularizer
from .losses import intensity_loss
from .network import FusionNet, SrsmConfig, DasmConfig, DrmConfig
from .ops import alpha_entropy


class SearchError(RuntimeError):
    """Raised when the search loop produces non-finite losses."""


@dataclass(frozen=True)
class SearchConfig:
    """Bilevel alternation: adaptive-moment steps on logits, descent on weights."""

    eta: float = 0.5
    pretrain_epochs: int = 10
    search_epochs: int = 300
    weight_lr: float = 3e-4
    arch_lr: float = 1e-4
    batch_size: int = 2
    patch: int = 32
    seed: int = 0
    base_channels: int = 16
    cascade_count: int = 2
    misaligned: bool = False

    def __post_init__(self):
        if self.eta < 0:
            raise SearchError("eta must be non-negative")
        if self.patch % 4 != 0:
            raise SearchError("patch must be divisible by 4")


def _cosine_lr(step: int, total: int, lr0: float, lr1: float) -> float:
    if total <= 1:
        return lr0
    t = min(step, total - 1) / (total - 1)
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * t))


def _make_batch(pairs: list[ExposurePair], idx: np.ndarray, patch: int,
                rng: np.random.Generator) -> tuple[torch.Tensor, ...]:
    unders, overs, gts = [], [], []
    for i in idx:
        crop = augment(pairs[int(i)], seed=int(rng.integers(2**31)), patch=patch)
        unders.append(crop.under)
        overs.append(crop.over)
        gts.append(crop.gt)
    return torch.cat(unders), torch.cat(overs), torch.cat(gts)


def _state_dump(net: FusionNet, epoch: int, losses: dict) -> str:
    alphas = {f"{c.module_tag}/{c.slot}": [round(v, 4) for v in c.alpha.detach().tolist()]
              for c in net.arch_cells()}
    return f"epoch={epoch} losses={losses} alphas={alphas}"


def search_step(net: FusionNet, batch_train, batch_val, cfg: SearchConfig,
                table: LatencyTable, weight_opt: torch.optim.Optimizer,
                arch_opt: torch.optim.Optimizer) -> tuple[float, float]:
    """One alternation: logits on validation loss + eta*latency, then weights.

    Returns (validation intensity loss, latency regularizer value).
    """
    u_val, o_val, gt_val = batch_val
    arch_opt.zero_grad()
    loss_val = intensity_loss(net(u_val, o_val), gt_val)
    reg = latency_regularizer(net.arch_cells(), table)
    arch_objective = loss_val + cfg.eta * reg
    if not torch.isfinite(arch_objective):
        raise SearchError("search diverged: "
                          + _state_dump(net, -1, {"loss_val": float(loss_val.detach()),
                                                  "latency_reg": float(reg.detach())}))
    arch_objective.backward()
    arch_opt.step()

    u_tr, o_tr, gt_tr = batch_train
    weight_opt.zero_grad()
    loss_train = intensity_loss(net(u_tr, o_tr), gt_tr)
    if not torch.isfinite(loss_train):
        raise SearchError("search diverged: "
                          + _state_dump(net, -1, {"loss_train": float(loss_train.detach())}))
    loss_train.backward()
    weight_opt.step()
    return float(loss_val.detach()), float(reg.detach())


def discretize(net: FusionNet, table: LatencyTable, eta: float = 0.0,
               seed: int = 0) -> Genotype:
    """Argmax per block; ties broken by lowest latency, then name.

    parameter_count counts the trainable parameters of the rebuilt final
    network; estimated_latency_ms is the plain sum of chosen latencies.
    """
    blocks = []
    for cell in net.arch_cells():
        probs = torch.softmax(cell.alpha.detach().double(), dim=0)
        top = float(probs.max())
        tied = [name for name, p in zip(cell.candidates, probs.tolist()) if p == top]
        chosen = min(tied, key=lambda n: (table.lookup(n), n))
        blocks.append(BlockChoice(module=cell.module_tag, slot=cell.slot, op=chosen))
    genotype = Genotype(blocks=blocks, base_channels=net.srsm_cfg.base_channels,
                        eta=eta, seed=seed)
    genotype.estimated_latency_ms = float(sum(table.lookup(b.op) for b in blocks))
    final = FusionNet(srsm=net.srsm_cfg, dasm=net.dasm_cfg, drm=net.drm_cfg,
                      genotype=genotype)
    genotype.parameter_count = sum(p.numel() for p in final.parameters()
                                   if p.requires_grad)
    return genotype


def run_search(pairs: list[ExposurePair], cfg: SearchConfig, table: LatencyTable,
               log_path: str | Path | None = None) -> Genotype:
    """Pretrain weights, alternate arch/weight steps, then discretize.

    The dataset is split homogeneously: even indices train weights, odd
    indices drive the architecture updates. Deterministic under cfg.seed.
    """
    if len(pairs) < 2:
        raise SearchError("search needs at least two pairs")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = FusionNet(srsm=SrsmConfig(cascade_count=cfg.cascade_count,
                                    base_channels=cfg.base_channels),
                    dasm=DasmConfig(enabled=cfg.misaligned),
                    drm=DrmConfig())
    train_idx = np.arange(0, len(pairs), 2)
    val_idx = np.arange(1, len(pairs), 2)
    weight_opt = torch.optim.SGD(net.weight_parameters(), lr=cfg.weight_lr,
                                 momentum=0.9)
    arch_opt = torch.optim.Adam(net.arch_parameters(), lr=cfg.arch_lr)
    steps_per_epoch = max(1, len(train_idx) // cfg.batch_size)
    total_epochs = cfg.pretrain_epochs + cfg.search_epochs

    def set_weight_lr(epoch: int) -> None:
        lr = _cosine_lr(epoch, total_epochs, cfg.weight_lr, 0.0)
        for group in weight_opt.param_groups:
            group["lr"] = lr

    for epoch in range(cfg.pretrain_epochs):
        set_weight_lr(epoch)
        for _ in range(steps_per_epoch):
            batch = _make_batch(pairs, rng.choice(train_idx, cfg.batch_size), cfg.patch, rng)
            weight_opt.zero_grad()
            loss = intensity_loss(net(batch[0], batch[1]), batch[2])
            if not torch.isfinite(loss):
                raise SearchError("search diverged: " + _state_dump(net, epoch, {
                    "pretrain_loss": float(loss.detach())}))
            loss.backward()
            weight_opt.step()

    rows = []
    for epoch in range(cfg.search_epochs):
        set_weight_lr(cfg.pretrain_epochs + epoch)
        epoch_val = []
        reg_value = 0.0
        for _ in range(steps_per_epoch):
            batch_train = _make_batch(pairs, rng.choice(train_idx, cfg.batch_size),
                                      cfg.patch, rng)
            batch_val = _make_batch(pairs, rng.choice(val_idx, cfg.batch_size),
                                    cfg.patch, rng)
            loss_val, reg_value = search_step(net, batch_train, batch_val, cfg,
                                              table, weight_opt, arch_opt)
            epoch_val.append(loss_val)
        rows.append({"epoch": epoch,
                     "loss_val": sum(epoch_val) / len(epoch_val),
                     "latency_reg": reg_value,
                     "alpha_entropy": alpha_entropy(net.arch_cells())})

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "loss_val",
                                                   "latency_reg", "alpha_entropy"])
            writer.writeheader()
            writer.writerows(rows)
    return discretize(net, table, eta=cfg.eta, seed=cfg.seed)
