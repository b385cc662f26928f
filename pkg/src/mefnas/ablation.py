"""Ablation drivers: matched-budget variant training and metric tables."""

from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path

from .data import ExposurePair
from .genotype import Genotype, BlockChoice
from .latency import LatencyTable
from .losses import LossWeights
from .search import SearchConfig, run_search
from .train import TrainConfig, train, evaluate

ABLATION_KINDS = ("srsm_cascade", "dasm", "losses", "search_space", "eta")

# fixed-operator variants: plain slots take the named op, residual slots its
# residual counterpart, alignment slots the matching deformable kernel
_FIXED_SPACE = {
    "C-3": ("C-3", "RC-3", "DeC-3"),
    "C-7": ("C-7", "RC-7", "DeC-7"),
    "DC-3": ("DC-3", "RDC-3", "DeC-3"),
    "DC-7": ("DC-7", "RDC-7", "DeC-7"),
}


def fixed_genotype(srsm_op: str, drm_op: str, dasm_op: str | None,
                   base_channels: int = 16, with_srsm: bool = True) -> Genotype:
    """Hand-assembled genotype with a single operator family per module."""
    blocks = []
    if with_srsm:
        blocks += [BlockChoice("srsm", s, srsm_op) for s in range(3)]
    if dasm_op is not None:
        blocks += [BlockChoice("dasm", lvl, dasm_op) for lvl in range(3)]
    blocks += [BlockChoice("drm", s, drm_op) for s in range(4)]
    return Genotype(blocks=blocks, base_channels=base_channels)


def default_genotype(base_channels: int = 16, with_dasm: bool = False,
                     with_srsm: bool = True) -> Genotype:
    return fixed_genotype("C-3", "RC-3", "DeC-3" if with_dasm else None,
                          base_channels=base_channels, with_srsm=with_srsm)


def _train_and_score(tag: str, genotype: Genotype, pairs: list[ExposurePair],
                     cfg: TrainConfig, out_root: Path | None) -> dict:
    if out_root is None:
        run_dir = Path(tempfile.mkdtemp(prefix=f"ablate_{tag}_"))
    else:
        run_dir = Path(out_root) / tag
    result = train(genotype, pairs, cfg, run_dir)
    scores = evaluate(result.net, pairs)
    return {"variant": tag, "psnr": scores.psnr_db, "ssim": scores.ssim,
            "parameters": sum(p.numel() for p in result.net.parameters()
                              if p.requires_grad)}


def run_ablation(kind: str, pairs: list[ExposurePair], train_cfg: TrainConfig,
                 search_cfg: SearchConfig | None = None,
                 table: LatencyTable | None = None,
                 out_root: str | Path | None = None) -> list[dict]:
    """Train matched variants under one budget/seed and report metrics.

    kinds: srsm_cascade {0,1,2,3}; dasm {without, before_relighting,
    after_relighting}; losses {int, int_gra, int_dis, total}; search_space
    fixed-operator nets; eta {0, 0.5, 1, 5} (search-only: latency/params).
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind: {kind}")
    out = Path(out_root) if out_root is not None else None
    rows = []

    if kind == "srsm_cascade":
        for cascade in (0, 1, 2, 3):
            genotype = default_genotype(with_srsm=cascade > 0)
            cfg = replace(train_cfg, cascade_count=max(cascade, 1))
            row = _train_and_score(f"cascade_{cascade}", genotype, pairs, cfg, out)
            row["cascade"] = cascade
            rows.append(row)
        return rows

    if kind == "dasm":
        variants = {
            "without": default_genotype(with_dasm=False, with_srsm=True),
            "before_relighting": default_genotype(with_dasm=True, with_srsm=False),
            "after_relighting": default_genotype(with_dasm=True, with_srsm=True),
        }
        for tag, genotype in variants.items():
            rows.append(_train_and_score(tag, genotype, pairs, train_cfg, out))
        return rows

    if kind == "losses":
        base = train_cfg.weights
        variants = {
            "int": (LossWeights(0.0, 0.0, base.gp_weight), False),
            "int_gra": (LossWeights(base.beta1, 0.0, base.gp_weight), False),
            "int_dis": (LossWeights(0.0, base.beta2, base.gp_weight), True),
            "total": (LossWeights(base.beta1, base.beta2, base.gp_weight), True),
        }
        genotype = default_genotype()
        for tag, (weights, adversarial) in variants.items():
            cfg = replace(train_cfg, weights=weights, adversarial=adversarial)
            rows.append(_train_and_score(tag, genotype, pairs, cfg, out))
        return rows

    if kind == "search_space":
        for tag, (plain, residual, deform) in _FIXED_SPACE.items():
            genotype = fixed_genotype(plain, residual,
                                      deform if train_cfg.misaligned else None)
            rows.append(_train_and_score(tag, genotype, pairs, train_cfg, out))
        return rows

    # eta sweep: searches only, reporting the optimized quantities
    if search_cfg is None or table is None:
        raise ValueError("eta ablation needs a search config and latency table")
    for eta in (0.0, 0.5, 1.0, 5.0):
        cfg = replace(search_cfg, eta=eta)
        genotype = run_search(pairs, cfg, table)
        rows.append({"variant": f"eta_{eta:g}", "eta": eta,
                     "estimated_latency_ms": genotype.estimated_latency_ms,
                     "parameters": genotype.parameter_count,
                     "blocks": [b.op for b in genotype.blocks]})
    return rows
