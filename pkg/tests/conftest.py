"""Shared fixtures: tiny datasets, synthetic latency tables, gradient helpers."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from mefnas.data import SynthConfig, make_test_image, synth_pair
from mefnas.latency import LatencyTable
from mefnas.ops import OPERATOR_NAMES


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def aligned_pairs():
    return [synth_pair(make_test_image(i, 64), SynthConfig(seed=i)) for i in range(6)]


@pytest.fixture
def misaligned_pairs():
    return [synth_pair(make_test_image(i, 64), SynthConfig(seed=i), misaligned=True)
            for i in range(6)]


@pytest.fixture
def fake_table():
    """Deterministic stand-in latency table: no wall-clock noise in unit tests."""
    rng = np.random.default_rng(0)
    entries = {name: round(float(rng.uniform(0.05, 2.0)), 6) for name in OPERATOR_NAMES}
    return LatencyTable(entries=entries, reference_shape=(16, 64, 64),
                        device_label="synthetic")


def finite_difference_grad(fn, tensor: torch.Tensor, indices, eps: float = 1e-4):
    """Central differences of a scalar-valued fn at selected flat indices."""
    grads = []
    flat = tensor.detach().reshape(-1)
    for idx in indices:
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + eps
        up = float(fn().detach())
        with torch.no_grad():
            flat[idx] = orig - eps
        down = float(fn().detach())
        with torch.no_grad():
            flat[idx] = orig
        grads.append((up - down) / (2 * eps))
    return grads
