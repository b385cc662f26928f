"""Per-operator latency measurement and the differentiable latency regularizer."""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .ops import OPERATOR_NAMES, build_operator


class LatencyError(RuntimeError):
    """Raised for benchmarking failures and table lookups that miss."""


@dataclass
class LatencyTable:
    entries: dict[str, float]
    reference_shape: tuple[int, int, int]  # (C, H, W)
    device_label: str = "cpu"
    protocol: dict = field(default_factory=lambda: {
        "warmup_runs": 10, "timed_runs": 30, "reducer": "median"})

    def lookup(self, name: str) -> float:
        try:
            return self.entries[name]
        except KeyError as exc:
            raise LatencyError(f"latency lookup miss: {name}") from exc

    def to_dict(self) -> dict:
        return {"device_label": self.device_label,
                "reference_shape": list(self.reference_shape),
                "protocol": self.protocol,
                "entries": self.entries}

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyTable":
        return cls(entries=dict(d["entries"]),
                   reference_shape=tuple(d["reference_shape"]),
                   device_label=d.get("device_label", "cpu"),
                   protocol=dict(d.get("protocol", {})))

    @classmethod
    def load(cls, path: str | Path) -> "LatencyTable":
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise LatencyError(f"unreadable latency table: {path}") from exc


def build_latency_table(names: tuple[str, ...] = OPERATOR_NAMES,
                        reference_shape: tuple[int, int, int] = (16, 64, 64),
                        warmup_runs: int = 10, timed_runs: int = 30,
                        seed: int = 0) -> LatencyTable:
    """Benchmark each operator single-threaded: warmups discarded, median kept."""
    torch.set_num_threads(1)
    c, h, w = reference_shape
    entries: dict[str, float] = {}
    for name in names:
        try:
            torch.manual_seed(seed)
            op = build_operator(name, c)
            x = torch.randn(1, c, h, w)
            with torch.no_grad():
                for _ in range(warmup_runs):
                    op(x)
                samples = []
                for _ in range(timed_runs):
                    t0 = time.perf_counter_ns()
                    op(x)
                    samples.append((time.perf_counter_ns() - t0) / 1e6)
            entries[name] = statistics.median(samples)
        except LatencyError:
            raise
        except Exception as exc:
            raise LatencyError(f"unbenchmarkable operator: {name}") from exc
    return LatencyTable(entries=entries, reference_shape=reference_shape,
                        device_label=f"cpu/{platform.machine()}",
                        protocol={"warmup_runs": warmup_runs,
                                  "timed_runs": timed_runs,
                                  "reducer": "median"})


def latency_regularizer(cells, table: LatencyTable) -> torch.Tensor:
    """Expected latency of the relaxed network: sum over blocks of softmax(alpha).LAT.

    Differentiable in every cell's logits; computed in float64 so a one-hot
    evaluation reproduces the plain sum of chosen latencies exactly.
    """
    total = torch.zeros((), dtype=torch.float64)
    for cell in cells:
        lats = torch.tensor([table.lookup(n) for n in cell.candidates],
                            dtype=torch.float64)
        weights = torch.softmax(cell.alpha.double(), dim=0)
        total = total + (weights * lats).sum()
    return total
