"""Training objectives: intensity, Sobel gradient, and adversarial terms.

Conventions follow the normalization as written rather than per-element means:
intensity and gradient terms divide by H*W only, so channel contributions sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class LossError(ValueError):
    """Raised for loss misuse: shape mismatches, non-finite penalties."""


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.75
    beta2: float = 0.05
    gp_weight: float = 10.0

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0 or self.gp_weight < 0:
            raise LossError("loss weights must be non-negative")


@dataclass
class LossReport:
    """Scalar loss terms in float64; l_total reconstructs exactly from the parts."""

    l_int: float
    l_gra: float
    l_dis: float
    l_total: float


def _check_pair(y: torch.Tensor, gt: torch.Tensor) -> None:
    if y.shape != gt.shape or y.dim() != 4:
        raise LossError("loss arity error")


def intensity_loss(y: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """(1/(H*W)) * sum |y - gt|, summed over channels, averaged over batch."""
    _check_pair(y, gt)
    h, w = y.shape[-2:]
    return (y - gt).abs().sum(dim=(1, 2, 3)).mean() / (h * w)


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def sobel_magnitude(x: torch.Tensor) -> torch.Tensor:
    """Unnormalized Sobel gradient magnitude per channel, reflect-padded."""
    b, c, h, w = x.shape
    kernel = torch.stack([_SOBEL_X, _SOBEL_Y]).unsqueeze(1).to(dtype=x.dtype, device=x.device)
    flat = x.reshape(b * c, 1, h, w)
    padded = F.pad(flat, (1, 1, 1, 1), mode="reflect")
    g = F.conv2d(padded, kernel)
    mag = torch.sqrt(g[:, 0] ** 2 + g[:, 1] ** 2 + 1e-12)
    return mag.reshape(b, c, h, w)


def gradient_loss(y: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """(1/(H*W)) * per-image L2 norm of Sobel-magnitude difference, batch mean."""
    _check_pair(y, gt)
    h, w = y.shape[-2:]
    diff = sobel_magnitude(y) - sobel_magnitude(gt)
    return diff.flatten(1).norm(2, dim=1).mean() / (h * w)


class Discriminator(nn.Module):
    """Patch critic: four stride-2 convolutions to a spatial score map.

    No normalization layers; the gradient penalty replaces weight clipping.
    """

    def __init__(self, in_channels: int = 3, width: int = 64):
        super().__init__()
        chans = [width, width * 2, width * 4, width * 8]
        layers: list[nn.Module] = []
        prev = in_channels
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = ch
        # kernel 3 here so 16x16 inputs still leave a valid 1x1 map
        layers.append(nn.Conv2d(prev, 1, 3, stride=1, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def gradient_penalty(d: nn.Module, y: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Evaluated at random per-sample interpolants between gt and y.
    """
    b = y.shape[0]
    u = torch.rand(b, 1, 1, 1, dtype=y.dtype, device=y.device)
    y_hat = (u * gt + (1.0 - u) * y).detach().requires_grad_(True)
    scores = d(y_hat)
    grads = torch.autograd.grad(outputs=scores.sum(), inputs=y_hat, create_graph=True)[0]
    norms = grads.flatten(1).norm(2, dim=1)
    penalty = ((norms - 1.0) ** 2).mean()
    if not torch.isfinite(penalty):
        raise LossError("GP divergence")
    return penalty


def adversarial_losses(d: nn.Module, y: torch.Tensor, gt: torch.Tensor,
                       weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, torch.Tensor]:
    """Wasserstein generator/critic losses with gradient penalty.

    gen_loss backpropagates into y; disc_loss sees y detached.
    """
    _check_pair(y, gt)
    gen_loss = -d(y).mean()
    y_fixed = y.detach()
    disc_loss = (d(y_fixed).mean() - d(gt).mean()
                 + weights.gp_weight * gradient_penalty(d, y_fixed, gt))
    return gen_loss, disc_loss


def total_loss(y: torch.Tensor, gt: torch.Tensor, d: nn.Module | None,
               weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, LossReport]:
    """Weighted training objective and its report.

    Returns the differentiable total and a float64 LossReport whose l_total is
    reconstructed from the reported parts, so the identity
    l_total = l_int + beta1*l_gra + beta2*l_dis holds exactly.
    """
    l_int = intensity_loss(y, gt)
    l_gra = gradient_loss(y, gt)
    if d is not None and weights.beta2 > 0:
        l_dis = -d(y).mean()
    else:
        l_dis = torch.zeros((), dtype=y.dtype, device=y.device)
    total = l_int + weights.beta1 * l_gra + weights.beta2 * l_dis
    f_int, f_gra, f_dis = (float(l_int.detach()), float(l_gra.detach()),
                           float(l_dis.detach()))
    report = LossReport(l_int=f_int, l_gra=f_gra, l_dis=f_dis,
                        l_total=f_int + weights.beta1 * f_gra + weights.beta2 * f_dis)
    return total, report
