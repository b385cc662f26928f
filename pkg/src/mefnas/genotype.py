"""Discretized architecture description and its JSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path


@dataclass(frozen=True)
class BlockChoice:
    module: str  # srsm | dasm | drm
    slot: int
    op: str


@dataclass
class Genotype:
    """One chosen operator per search block, plus provenance metadata."""

    blocks: list[BlockChoice]
    base_channels: int = 16
    eta: float = 0.0
    seed: int = 0
    estimated_latency_ms: float = 0.0
    parameter_count: int = 0

    def choice(self, module: str, slot: int) -> str:
        for b in self.blocks:
            if b.module == module and b.slot == slot:
                return b.op
        raise KeyError(f"no block for {module}/{slot}")

    def has_module(self, module: str) -> bool:
        return any(b.module == module for b in self.blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        blocks = [BlockChoice(**b) for b in d["blocks"]]
        rest = {k: v for k, v in d.items() if k != "blocks"}
        return cls(blocks=blocks, **rest)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "Genotype":
        with open(path) as f:
            return cls.from_dict(json.load(f))
