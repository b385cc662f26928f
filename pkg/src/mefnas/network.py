"""Fusion network: relighting, deformable alignment, detail repletion.

The same class serves as the search super-network (full candidate sets,
trainable architecture logits) and as the discretized final network (one
candidate per block, frozen logits), so parameter names line up and weights
transfer by state-dict intersection.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .genotype import Genotype, BlockChoice
from .ops import (SRSM_CANDIDATES, DRM_CANDIDATES, DASM_CANDIDATES,
                  SearchCell, build_operator, LEAKY_SLOPE)


class NetError(ValueError):
    """Raised for network misuse: shape mismatches, disabled paths."""


@dataclass(frozen=True)
class SrsmConfig:
    """Relighting branch: cascaded stages, each with 3 searchable slots."""

    cascade_count: int = 2
    base_channels: int = 16

    def __post_init__(self):
        if not (0 <= self.cascade_count <= 3):
            raise NetError("cascade count out of tested range")
        if self.base_channels < 1:
            raise NetError("base channels must be positive")


@dataclass(frozen=True)
class DasmConfig:
    """Pyramid deformable alignment; only used in the misaligned scenario."""

    pyramid_levels: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 2:
            raise NetError("pyramid needs at least two levels")


@dataclass(frozen=True)
class DrmConfig:
    """Detail repletion: 4 searchable residual slots plus division head."""

    slots: int = 4
    division_epsilon: float = 0.05

    def __post_init__(self):
        if self.slots != 4:
            raise NetError("detail module uses exactly four slots")
        if self.division_epsilon <= 0:
            raise NetError("division epsilon must be positive")


class AttentionGate(nn.Module):
    """Salient-feature amplification: pooled statistics gate the features."""

    def __init__(self, channels: int):
        super().__init__()
        self.maxpool = build_operator("MaxPool", channels)
        self.avgpool = build_operator("AvgPool", channels)
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.conv(torch.cat([self.maxpool(x), self.avgpool(x)], dim=1)))
        return x * gate


class SrsmStage(nn.Module):
    """One relighting stage: entry conv, two gated slots, one free slot, map head."""

    def __init__(self, channels: int, cells: list[SearchCell]):
        super().__init__()
        if len(cells) != 3:
            raise NetError("relighting stage expects three slots")
        self.entry = nn.Conv2d(3, channels, 3, padding=1)
        self.slots = nn.ModuleList(cells)
        self.gates = nn.ModuleList([AttentionGate(channels), AttentionGate(channels)])
        self.exit = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        f = F.leaky_relu(self.entry(img), LEAKY_SLOPE)
        f = self.gates[0](self.slots[0](f))
        f = self.gates[1](self.slots[1](f))
        f = self.slots[2](f)
        return torch.sigmoid(self.exit(f))


class Srsm(nn.Module):
    """Cascaded relighting branch: x_t = x_{t-1} * map_t, maps in (0, 1)."""

    def __init__(self, stages: list[SrsmStage]):
        super().__init__()
        self.stages = nn.ModuleList(stages)

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        x, maps = img, []
        for stage in self.stages:
            m = stage(x)
            x = x * m
            maps.append(m)
        return x, maps


class Dasm(nn.Module):
    """Coarse-to-fine deformable alignment over strided-conv pyramids.

    The under-exposed features are aligned toward the over-exposed reference;
    coarser aligned features are upsampled into the next level's offset
    conditioning. Output is projection(aligned) + reference, so zeroing the
    projection reproduces the reference exactly.
    """

    def __init__(self, channels: int, cfg: DasmConfig, cells: list[SearchCell]):
        super().__init__()
        if len(cells) != cfg.pyramid_levels:
            raise NetError("alignment needs one slot per pyramid level")
        self.enabled = cfg.enabled
        levels = cfg.pyramid_levels
        self.down = nn.ModuleList(
            [nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(levels - 1)])
        self.cells = nn.ModuleList(cells)  # index 0 = finest level
        self.blend = nn.ModuleList(
            [nn.Conv2d(2 * channels, channels, 3, padding=1) for _ in range(levels - 1)])
        self.proj = nn.Conv2d(channels, channels, 3, padding=1)

    def pyramid(self, f: torch.Tensor) -> list[torch.Tensor]:
        feats = [f]
        for down in self.down:
            feats.append(F.leaky_relu(down(feats[-1]), LEAKY_SLOPE))
        return feats

    def forward(self, f_u: torch.Tensor, f_o: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            raise NetError("alignment disabled")
        if f_u.shape != f_o.shape:
            raise NetError("alignment arity error")
        pu, po = self.pyramid(f_u), self.pyramid(f_o)
        aligned = None
        for lvl in reversed(range(len(self.cells))):
            if aligned is None:
                cond = po[lvl]
            else:
                up = F.interpolate(aligned, size=po[lvl].shape[-2:], mode="bilinear",
                                   align_corners=False)
                cond = F.leaky_relu(self.blend[lvl](torch.cat([po[lvl], up], dim=1)),
                                    LEAKY_SLOPE)
            aligned = self.cells[lvl](pu[lvl], ref=cond)
        return self.proj(aligned) + f_o


class Drm(nn.Module):
    """Residual detail slots feeding a coarse head divided by an illumination head."""

    def __init__(self, channels: int, cfg: DrmConfig, cells: list[SearchCell]):
        super().__init__()
        self.slots = nn.ModuleList(cells)
        self.coarse_head = nn.Conv2d(channels, 3, 3, padding=1)
        self.illum_head = nn.Conv2d(channels, 3, 3, padding=1)
        self.eps = cfg.division_epsilon

    @staticmethod
    def compose(coarse: torch.Tensor, illum: torch.Tensor, eps: float) -> torch.Tensor:
        return (coarse / illum.clamp(min=eps)).clamp(0.0, 1.0)

    def forward(self, f_a: torch.Tensor, return_aux: bool = False):
        g = f_a
        for slot in self.slots:
            g = slot(g)
        coarse = self.coarse_head(g)
        illum = torch.sigmoid(self.illum_head(g))
        y = self.compose(coarse, illum, self.eps)
        return (y, coarse, illum) if return_aux else y


class FusionNet(nn.Module):
    """End-to-end fusion model, in super-network or discretized form.

    Search blocks: 3 relighting slots (architecture shared across both
    branches and all cascade stages, weights independent), one alignment slot
    per pyramid level, 4 detail slots.
    """

    def __init__(self, srsm: SrsmConfig = SrsmConfig(),
                 dasm: DasmConfig = DasmConfig(enabled=False),
                 drm: DrmConfig = DrmConfig(),
                 genotype: Genotype | None = None):
        super().__init__()
        self.srsm_cfg, self.dasm_cfg, self.drm_cfg = srsm, dasm, drm
        self.genotype_used = genotype
        c = srsm.base_channels
        block_id = 0

        def make_cell(module: str, slot: int, full: tuple[str, ...],
                      owner: SearchCell | None = None) -> SearchCell:
            nonlocal block_id
            if genotype is not None:
                cands = (genotype.choice(module, slot),)
                cell = SearchCell(cands, c, block_id=block_id, module=module,
                                  slot=slot, trainable=False)
            elif owner is not None:
                cell = SearchCell(owner.candidates, c, block_id=owner.block_id,
                                  module=module, slot=slot, shared_alpha=owner.alpha)
                return cell
            else:
                cell = SearchCell(full, c, block_id=block_id, module=module, slot=slot)
            block_id += 1
            return cell

        self.srsm_under = self.srsm_over = None
        if srsm.cascade_count > 0:
            owners = [make_cell("srsm", s, SRSM_CANDIDATES) for s in range(3)]
            branches = []
            for branch_idx in range(2):
                stages = []
                for stage_idx in range(srsm.cascade_count):
                    if branch_idx == 0 and stage_idx == 0:
                        cells = owners
                    else:
                        cells = [make_cell("srsm", s, SRSM_CANDIDATES, owner=owners[s])
                                 for s in range(3)]
                    stages.append(SrsmStage(c, cells))
                branches.append(Srsm(stages))
            self.srsm_under, self.srsm_over = branches

        self.enc_under = nn.Conv2d(3, c, 3, padding=1)
        self.enc_over = nn.Conv2d(3, c, 3, padding=1)

        self.dasm = None
        self.fuse_conv = None
        if dasm.enabled:
            cells = [make_cell("dasm", lvl, DASM_CANDIDATES)
                     for lvl in range(dasm.pyramid_levels)]
            self.dasm = Dasm(c, dasm, cells)
        else:
            self.fuse_conv = nn.Conv2d(2 * c, c, 3, padding=1)

        drm_cells = [make_cell("drm", s, DRM_CANDIDATES) for s in range(drm.slots)]
        self.drm = Drm(c, drm, drm_cells)

    def arch_cells(self) -> list[SearchCell]:
        """Unique search blocks (one per architecture decision), ordered by id."""
        seen: dict[tuple[str, int], SearchCell] = {}
        for mod in self.modules():
            if isinstance(mod, SearchCell):
                seen.setdefault((mod.module_tag, mod.slot), mod)
        return sorted(seen.values(), key=lambda cell: cell.block_id)

    def arch_parameters(self) -> list[nn.Parameter]:
        return [cell.alpha for cell in self.arch_cells()]

    def weight_parameters(self) -> list[nn.Parameter]:
        arch_ids = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch_ids]

    def forward(self, under: torch.Tensor, over: torch.Tensor,
                return_aux: bool = False):
        if under.shape != over.shape:
            raise NetError("pair shape error")
        relit_u, relit_o = under, over
        maps_u: list[torch.Tensor] = []
        maps_o: list[torch.Tensor] = []
        if self.srsm_under is not None:
            relit_u, maps_u = self.srsm_under(under)
            relit_o, maps_o = self.srsm_over(over)
        f_u = F.leaky_relu(self.enc_under(relit_u), LEAKY_SLOPE)
        f_o = F.leaky_relu(self.enc_over(relit_o), LEAKY_SLOPE)
        if self.dasm is not None:
            f_a = self.dasm(f_u, f_o)
        else:
            f_a = F.leaky_relu(self.fuse_conv(torch.cat([f_u, f_o], dim=1)), LEAKY_SLOPE)
        y = self.drm(f_a)
        if return_aux:
            return y, {"maps_under": maps_u, "maps_over": maps_o,
                       "relit_under": relit_u, "relit_over": relit_o, "fused": f_a}
        return y

    def fuse_pair(self, pair) -> torch.Tensor:
        return self.forward(pair.under, pair.over)


def one_hot_alphas(net: FusionNet, genotype: Genotype, logit: float = 1e4) -> None:
    """Saturate each block's logits toward the genotype's chosen candidate."""
    with torch.no_grad():
        for cell in net.arch_cells():
            chosen = genotype.choice(cell.module_tag, cell.slot)
            cell.alpha.zero_()
            cell.alpha[cell.candidates.index(chosen)] = logit


def transfer_weights(src: FusionNet, dst: FusionNet) -> int:
    """Copy every shape-matching non-logit parameter/buffer by name.

    Returns the number of tensors copied; raises if any destination weight
    found no source, which would mean the two networks are wired differently.
    """
    src_state = src.state_dict()
    dst_state = dst.state_dict()
    merged = {}
    for key, value in dst_state.items():
        if key.split(".")[-1] == "alpha":
            continue
        if key not in src_state or src_state[key].shape != value.shape:
            raise NetError(f"weight transfer mismatch at {key}")
        merged[key] = src_state[key]
    dst.load_state_dict(merged, strict=False)
    return len(merged)
