"""Searchable operator set and the continuous-relaxation search cell.

Operator names are the serialization contract shared with latency tables and
genotypes: "C-k" plain convolution, "DC-k" dilated (d=2), "RC-k"/"RDC-k" the
residual variants, "DeC-k" deformable, plus "MaxPool"/"AvgPool". All operators
are stride 1 and spatially preserving so any genotype composes without shape
errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class OpError(ValueError):
    """Raised for operator misuse: arity mismatches, degenerate cells."""


OPERATOR_NAMES = (
    "C-1", "C-3", "C-5", "C-7",
    "DC-3", "DC-5", "DC-7",
    "RC-3", "RC-5", "RC-7",
    "RDC-3", "RDC-5", "RDC-7",
    "DeC-3", "DeC-5", "DeC-7",
    "MaxPool", "AvgPool",
)

SRSM_CANDIDATES = ("C-1", "C-3", "C-5", "C-7", "DC-3", "DC-5", "DC-7")
DRM_CANDIDATES = ("RC-3", "RC-5", "RC-7", "RDC-3", "RDC-5", "RDC-7")
DASM_CANDIDATES = ("DeC-3", "DeC-5", "DeC-7")

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class OperatorSpec:
    kind: str  # C | DC | RConv | RDConv | DeC | MaxPool | AvgPool
    kernel: int
    dilation: int
    channels_in: int
    channels_out: int

    def __post_init__(self):
        if self.kind in ("DC", "RDConv") and self.dilation < 2:
            raise OpError("dilated operator requires dilation >= 2")
        if self.kind in ("C", "RConv") and self.dilation != 1:
            raise OpError("plain convolution requires dilation 1")
        if self.kind == "DeC" and self.kernel not in (3, 5, 7):
            raise OpError("deformable kernel must be 3, 5 or 7")


_KIND_BY_PREFIX = {"C": "C", "DC": "DC", "RC": "RConv", "RDC": "RDConv", "DeC": "DeC"}


def spec_from_name(name: str, channels: int) -> OperatorSpec:
    if name == "MaxPool":
        return OperatorSpec("MaxPool", 3, 1, channels, channels)
    if name == "AvgPool":
        return OperatorSpec("AvgPool", 3, 1, channels, channels)
    try:
        prefix, k = name.rsplit("-", 1)
        kind = _KIND_BY_PREFIX[prefix]
        kernel = int(k)
    except (ValueError, KeyError) as exc:
        raise OpError(f"unknown operator name: {name}") from exc
    dilation = 2 if kind in ("DC", "RDConv") else 1
    return OperatorSpec(kind, kernel, dilation, channels, channels)


class ConvOp(nn.Module):
    """Plain/dilated convolution with optional residual skip.

    Spatial size is preserved by symmetric zero padding. The activation is a
    leaky rectifier (slope 0.2); residual variants add the identity after it,
    so zero weights and bias give an exact identity map.
    """

    def __init__(self, spec: OperatorSpec, activation: bool = True):
        super().__init__()
        if spec.kind not in ("C", "DC", "RConv", "RDConv"):
            raise OpError(f"not a convolution spec: {spec.kind}")
        self.spec = spec
        self.residual = spec.kind in ("RConv", "RDConv")
        if self.residual and spec.channels_in != spec.channels_out:
            raise OpError("operator arity error")
        pad = spec.dilation * (spec.kernel - 1) // 2
        self.conv = nn.Conv2d(spec.channels_in, spec.channels_out, spec.kernel,
                              padding=pad, dilation=spec.dilation)
        self.act = nn.LeakyReLU(LEAKY_SLOPE) if activation else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.channels_in:
            raise OpError("operator arity error")
        out = self.act(self.conv(x))
        return out + x if self.residual else out


class PoolOp(nn.Module):
    """Stride-1 3x3 pooling; padding chosen so constants are preserved."""

    def __init__(self, spec: OperatorSpec):
        super().__init__()
        self.spec = spec
        if spec.kind == "MaxPool":
            self.pool = nn.MaxPool2d(spec.kernel, stride=1, padding=spec.kernel // 2)
        elif spec.kind == "AvgPool":
            self.pool = nn.AvgPool2d(spec.kernel, stride=1, padding=spec.kernel // 2,
                                     count_include_pad=False)
        else:
            raise OpError(f"not a pooling spec: {spec.kind}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.channels_in:
            raise OpError("operator arity error")
        return self.pool(x)


def deform_sample(x: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                  bias: torch.Tensor | None = None) -> torch.Tensor:
    """Deformable convolution given an explicit offset field.

    offsets: [B, 2*k*k, H, W] in pixel units; channel 2j is the horizontal and
    channel 2j+1 the vertical displacement of tap j (row-major tap order).
    output(p) = sum_j weight_j . bilinear(x, p + grid_j + offset_j(p)), with
    samples outside the image reading as zero, so the zero-offset case equals
    a standard zero-padded convolution.
    """
    b, c, h, w = x.shape
    k = weight.shape[-1]
    if offsets.shape != (b, 2 * k * k, h, w):
        raise OpError("alignment arity error")
    ys = torch.arange(h, dtype=x.dtype, device=x.device)
    xs = torch.arange(w, dtype=x.dtype, device=x.device)
    base_y, base_x = torch.meshgrid(ys, xs, indexing="ij")
    out = None
    for j in range(k * k):
        ky, kx = divmod(j, k)
        pos_x = base_x + (kx - k // 2) + offsets[:, 2 * j]
        pos_y = base_y + (ky - k // 2) + offsets[:, 2 * j + 1]
        gx = 2.0 * pos_x / max(w - 1, 1) - 1.0
        gy = 2.0 * pos_y / max(h - 1, 1) - 1.0
        grid = torch.stack([gx, gy], dim=-1)
        sampled = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros",
                                align_corners=True)
        tap = torch.einsum("oc,bchw->bohw", weight[:, :, ky, kx], sampled)
        out = tap if out is None else out + tap
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformableConv2d(nn.Module):
    """Deformable convolution; offsets predicted from concat(x, ref).

    The offset predictor is zero-initialized, so a fresh module reproduces the
    standard convolution exactly. Gradients flow to weights, inputs, and
    offsets through the bilinear sampler.
    """

    def __init__(self, spec: OperatorSpec):
        super().__init__()
        if spec.kind != "DeC":
            raise OpError(f"not a deformable spec: {spec.kind}")
        self.spec = spec
        k = spec.kernel
        self.weight = nn.Parameter(torch.empty(spec.channels_out, spec.channels_in, k, k))
        self.bias = nn.Parameter(torch.zeros(spec.channels_out))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.offset_conv = nn.Conv2d(2 * spec.channels_in, 2 * k * k, 3, padding=1)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)

    def predict_offsets(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if x.shape != ref.shape:
            raise OpError("alignment arity error")
        return self.offset_conv(torch.cat([x, ref], dim=1))

    def forward(self, x: torch.Tensor, ref: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[1] != self.spec.channels_in:
            raise OpError("operator arity error")
        offsets = self.predict_offsets(x, x if ref is None else ref)
        return deform_sample(x, offsets, self.weight, self.bias)


def build_operator(name: str, channels: int, activation: bool = True) -> nn.Module:
    """Instantiate a registry operator by serialized name."""
    spec = spec_from_name(name, channels)
    if spec.kind in ("C", "DC", "RConv", "RDConv"):
        return ConvOp(spec, activation=activation)
    if spec.kind == "DeC":
        return DeformableConv2d(spec)
    return PoolOp(spec)


class SearchCell(nn.Module):
    """One search block: candidate operators mixed by softmax architecture weights.

    `shared_alpha` lets replicas of the same block (independent weights, one
    architecture decision) reuse a single logit vector.
    """

    def __init__(self, candidates: tuple[str, ...], channels: int, block_id: int = 0,
                 module: str = "", slot: int = 0,
                 shared_alpha: nn.Parameter | None = None, trainable: bool = True):
        super().__init__()
        self.candidates = tuple(candidates)
        if not self.candidates:
            raise OpError("degenerate cell")
        self.block_id = block_id
        self.module_tag = module
        self.slot = slot
        self.ops = nn.ModuleDict({name: build_operator(name, channels)
                                  for name in self.candidates})
        if shared_alpha is not None:
            if shared_alpha.numel() != len(self.candidates):
                raise OpError("degenerate cell")
            self.alpha = shared_alpha
        else:
            self.alpha = nn.Parameter(torch.zeros(len(self.candidates)),
                                      requires_grad=trainable)

    def forward(self, x: torch.Tensor, ref: torch.Tensor | None = None) -> torch.Tensor:
        return relax_forward(self, x, ref=ref)


def relax_forward(cell: SearchCell, x: torch.Tensor,
                  ref: torch.Tensor | None = None) -> torch.Tensor:
    """Continuous relaxation: sum_O softmax(alpha)_O . O(x)."""
    if len(cell.candidates) == 0:
        raise OpError("degenerate cell")
    weights = torch.softmax(cell.alpha, dim=0)
    out = None
    for i, name in enumerate(cell.candidates):
        op = cell.ops[name]
        y = op(x, ref) if isinstance(op, DeformableConv2d) else op(x)
        term = weights[i] * y
        out = term if out is None else out + term
    return out


def alpha_entropy(cells: list[SearchCell]) -> float:
    """Mean softmax entropy across cells; a collapse indicator for search logs."""
    vals = []
    for cell in cells:
        p = torch.softmax(cell.alpha.detach(), dim=0)
        vals.append(float(-(p * (p + 1e-12).log()).sum()))
    return float(sum(vals) / max(len(vals), 1))
