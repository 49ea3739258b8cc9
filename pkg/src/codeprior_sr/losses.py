"""Training objectives.

All image tensors are ``(B, C, H, W)``; uncertainty maps are ``(B, 1, H, W)``
log-variances. Every loss is a mean over elements so that the weights below
keep their relative scale at any resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    gram: float = 1.0  # alpha
    latent_l2: float = 0.25  # beta
    adv: float = 0.1  # lambda_adv

    def __post_init__(self):
        if min(self.gram, self.latent_l2, self.adv) < 0:
            raise ValueError("loss weights must be non-negative")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _residual(x: torch.Tensor, f: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    _same_shape(x, f, "image")
    if s.shape[-2:] != x.shape[-2:] or s.shape[:-3] != x.shape[:-3]:
        raise ValueError(f"uncertainty map {tuple(s.shape)} does not match image {tuple(x.shape)}")
    # per-pixel L1 over colour channels
    return (x - f).abs().sum(dim=-3, keepdim=True)


def esu_loss(x: torch.Tensor, f: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """``mean_i[exp(-s_i) |x_i - f_i|_1 + 2 s_i]`` over pixels."""
    r = _residual(x, f, s)
    return (torch.exp(-s) * r + 2.0 * s).mean()


def shifted_uncertainty(s: torch.Tensor) -> torch.Tensor:
    """``s - min(s)`` with the minimum taken per image."""
    return s - s.amin(dim=(-3, -2, -1), keepdim=True)


def udl_loss(x: torch.Tensor, f: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Residual weighted by the shifted (non-negative) uncertainty, averaged over pixels."""
    r = _residual(x, f, s)
    return (shifted_uncertainty(s) * r).mean()


def heteroscedastic_gaussian_loss(x: torch.Tensor, f: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Classic Gaussian NLL form ``|x - f|^2 / (2 var) + 0.5 ln var``.

    Reference only; neither training stage uses it.
    """
    r = (x - f).pow(2).sum(dim=-3, keepdim=True)
    return (r / (2.0 * var) + 0.5 * torch.log(var)).mean()


def l1_loss(hr: torch.Tensor, sr: torch.Tensor) -> torch.Tensor:
    _same_shape(hr, sr, "l1")
    return (hr - sr).abs().mean()


class RandomFeatureExtractor(nn.Module):
    """Frozen three-layer conv stack with seeded random weights (perceptual surrogate)."""

    def __init__(self, seed: int = 1234, channels: tuple[int, int, int] = (16, 32, 32), dtype=torch.float32):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for i, c_out in enumerate(channels):
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers).to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        for i, conv in enumerate(self.layers):
            x = conv(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


def perceptual_loss(hr: torch.Tensor, sr: torch.Tensor, phi: nn.Module) -> torch.Tensor:
    _same_shape(hr, sr, "perceptual")
    return (phi(hr) - phi(sr)).pow(2).mean()


def squash(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator and discriminator losses from discriminator probabilities.

    ``d_real``/``d_fake`` are D's outputs on HR and SR images, already squashed
    into (0, 1). The discriminator minimises ``-E[log D(hr) + log(1 - D(sr))]``;
    the generator uses the non-saturating ``-E[log D(sr)]``.
    """
    for t in (d_real, d_fake):
        if (t <= 0).any() or (t >= 1).any():
            raise ValueError("discriminator outputs must lie strictly inside (0, 1)")
    d_loss = -(torch.log(d_real).mean() + torch.log(1.0 - d_fake).mean())
    g_loss = -torch.log(d_fake).mean()
    return g_loss, d_loss


def gram(z: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix of ``(B, C, h, w)`` features, normalised by ``h * w``."""
    b, c, h, w = z.shape
    f = z.reshape(b, c, h * w)
    return f @ f.transpose(1, 2) / (h * w)


def codebook_loss(z_lq: torch.Tensor, z_gt: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``beta * mean|z_lq - z_gt|^2 + alpha * mean|G(z_lq) - G(z_gt)|^2``; ``z_gt`` is a constant target."""
    _same_shape(z_lq, z_gt, "codebook")
    z_gt = z_gt.detach()
    l2 = (z_lq - z_gt).pow(2).mean()
    g = (gram(z_lq) - gram(z_gt)).pow(2).mean()
    return weights.latent_l2 * l2 + weights.gram * g


STAGE_COMPONENTS = {
    1: ("codebook", "l1", "perceptual", "adversarial", "esu"),
    2: ("codebook", "l1", "perceptual", "adversarial", "udl"),
}


def stage_total(stage: int, components: dict, weights: LossWeights = LossWeights(), adv_ramp: float = 1.0):
    """Stage objective; ``adv_ramp`` in [0, 1] scales the adversarial weight during warm-up."""
    if stage not in STAGE_COMPONENTS:
        raise ValueError(f"unknown stage {stage}")
    missing = [k for k in STAGE_COMPONENTS[stage] if k not in components]
    if missing:
        raise KeyError(f"stage {stage} total is missing components: {missing}")
    c = components
    uncertainty = c["esu"] if stage == 1 else c["udl"]
    return c["codebook"] + c["l1"] + c["perceptual"] + weights.adv * adv_ramp * c["adversarial"] + uncertainty
