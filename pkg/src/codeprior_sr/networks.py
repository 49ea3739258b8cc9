"""Toy-scale encoder / decoder, uncertainty head, Align-Attention and the SR model."""

from __future__ import annotations

import copy
import math
from collections import Counter
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codebook import CandidateFusion, MatchResult, quantize_nearest, quantize_topk, straight_through
from .degradation import resize_weights


@dataclass(frozen=True)
class NetConfig:
    n_z: int = 16
    K: int = 64
    width: int = 32
    lq_width: int = 48
    r_e: int = 4
    scale: int = 2
    d_k: int = 32
    head_width: int = 64
    k: int = 3
    use_topk: bool = True
    use_aa: bool = True

    def __post_init__(self):
        if self.r_e & (self.r_e - 1) or self.r_e < 1:
            raise ValueError("encoder factor r_e must be a power of two")
        if self.scale not in (1, 2, 4) or self.r_e % self.scale:
            raise ValueError(f"scale {self.scale} must divide r_e {self.r_e}")

    def to_dict(self) -> dict:
        return asdict(self)


def _act():
    return nn.LeakyReLU(0.2)


class Encoder(nn.Module):
    """Conv stack with ``log2(factor)`` stride-2 blocks, then a 1x1 projection to n_z."""

    def __init__(self, factor: int, width: int, n_z: int, extra_blocks: int = 0):
        super().__init__()
        self.factor = factor
        n_down = int(math.log2(factor))
        layers = [nn.Conv2d(3, width, 3, padding=1), _act()]
        for _ in range(n_down):
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), _act()]
        for _ in range(extra_blocks):
            layers += [nn.Conv2d(width, width, 3, padding=1), _act()]
        layers.append(nn.Conv2d(width, n_z, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"input {h}x{w} not divisible by encoder factor {self.factor}")
        return self.net(x)


class Decoder(nn.Module):
    """Latent grid -> RGB at ``r_e`` times the resolution; also returns final features."""

    def __init__(self, factor: int, width: int, n_z: int):
        super().__init__()
        self.head = nn.Sequential(nn.Conv2d(n_z, width, 3, padding=1), _act())
        self.ups = nn.ModuleList(
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, padding=1), _act())
            for _ in range(int(math.log2(factor)))
        )
        self.refine = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), _act())
        self.to_rgb = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.head(z)
        for up in self.ups:
            h = up(h)
        h = self.refine(h)
        return self.to_rgb(h), h


class UncertaintyHead(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(width, 16, 3, padding=1), _act(), nn.Conv2d(16, 1, 3, padding=1))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.net(feats)


class AlignAttention(nn.Module):
    """Cross-attention: LQ tokens query, codebook-retrieved HQ tokens give keys and values.

    ``softmax((F_lq W_Q)(F_hq W_K)^T / sqrt(d_k)) (F_hq W_V)``. ``W_V`` starts
    at zero, so a fresh block contributes nothing.
    """

    def __init__(self, channels: int, d_k: int = 32):
        super().__init__()
        self.channels = channels
        self.d_k = d_k
        self.W_Q = nn.Parameter(torch.empty(channels, d_k))
        self.W_K = nn.Parameter(torch.empty(channels, d_k))
        self.W_V = nn.Parameter(torch.zeros(channels, channels))
        nn.init.normal_(self.W_Q, std=channels**-0.5)
        nn.init.normal_(self.W_K, std=channels**-0.5)

    def attention(self, f_lq: torch.Tensor, f_hq: torch.Tensor) -> torch.Tensor:
        if f_lq.shape[-1] != self.channels or f_hq.shape[-1] != self.channels:
            raise ValueError(
                f"token channels {f_lq.shape[-1]}/{f_hq.shape[-1]} do not match projections ({self.channels})"
            )
        q = f_lq @ self.W_Q
        k = f_hq @ self.W_K
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_k), dim=-1)

    def forward(self, f_lq: torch.Tensor, f_hq: torch.Tensor) -> torch.Tensor:
        """Token tensors ``(..., N, C)``; returns ``(..., N_lq, C)``."""
        return self.attention(f_lq, f_hq) @ (f_hq @ self.W_V)


def align_attention(f_lq, f_hq, params: AlignAttention):
    return params(f_lq, f_hq)


class ConcatFusion(nn.Module):
    """1x1 conv over ``[z_lq, z_q]``, initialised to pass ``z_q`` through unchanged."""

    def __init__(self, n_z: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * n_z, n_z, 1)
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, n_z:, 0, 0] = torch.eye(n_z)
            self.conv.bias.zero_()

    def forward(self, z_lq, z_q):
        return self.conv(torch.cat([z_lq, z_q], dim=1))


def bicubic_up(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Batched ``(B, C, h, w)`` bicubic upsampling with the same kernel as the data pipeline."""
    if scale == 1:
        return x
    h, w = x.shape[-2:]
    wh = torch.as_tensor(resize_weights(h, h * scale), dtype=x.dtype)
    ww = torch.as_tensor(resize_weights(w, w * scale), dtype=x.dtype)
    return torch.einsum("ij,bcjk,lk->bcil", wh, x, ww)


class ResidualHead(nn.Module):
    """Decoder features + bicubic image -> RGB correction; zero-initialised output layer.

    ``forward`` also returns the last hidden activation, the final feature map
    of the SR path.
    """

    def __init__(self, width: int, hidden: int = 64):
        super().__init__()
        self.hidden = hidden
        self.net = nn.Sequential(
            nn.Conv2d(width + 3, hidden, 3, padding=1), _act(),
            nn.Conv2d(hidden, hidden, 3, padding=1), _act(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, feats, base):
        h = self.net[:-1](torch.cat([feats, base], dim=1))
        return base + self.net[-1](h), h


def to_tokens(z: torch.Tensor) -> torch.Tensor:
    return z.flatten(2).transpose(1, 2)


def to_grid(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)


@dataclass
class SROutput:
    sr: torch.Tensor
    s: torch.Tensor
    lq_latents: torch.Tensor
    match: MatchResult
    z_q: torch.Tensor


class VQAutoencoder(nn.Module):
    """HR encoder, codebook and decoder trained in the pretraining phase."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.r_e, cfg.width, cfg.n_z)
        self.codebook = nn.Parameter(torch.randn(cfg.K, cfg.n_z) * 0.1)
        self.decoder = Decoder(cfg.r_e, cfg.width, cfg.n_z)

    def quantize(self, z: torch.Tensor) -> tuple[MatchResult, torch.Tensor]:
        match, q = quantize_nearest(z.permute(0, 2, 3, 1), self.codebook)
        return match, q.permute(0, 3, 1, 2)

    def forward(self, x):
        z = self.encoder(x)
        match, z_q = self.quantize(z)
        # codebook entries gathered with gradient for the codebook term
        z_q_grad = self.codebook[match.indices].permute(0, 3, 1, 2)
        rec, _ = self.decoder(straight_through(z, z_q))
        return rec, z, z_q_grad, match


class SRModel(nn.Module):
    """Two-stage codebook-prior SR network.

    Stage 1: LQ encoder -> nearest-code quantisation -> concat fusion -> decoder,
    uncertainty head on the final features. The decoder features drive a residual
    head on top of the bicubic upsampled input, whose last hidden activation is
    the final feature map.
    Stage 2: nearest quantisation is replaced by top-k + candidate fusion and
    Align-Attention is added on top of the concat fusion (each switchable for
    ablations); the log-variance map comes from the frozen stage-1 network
    held in ``guide``.
    """

    def __init__(self, cfg: NetConfig, stage: int = 1):
        super().__init__()
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        self.cfg = cfg
        self.stage = stage
        self.lq_encoder = Encoder(cfg.r_e // cfg.scale, cfg.lq_width, cfg.n_z, extra_blocks=2)
        self.register_buffer("codebook", torch.zeros(cfg.K, cfg.n_z))
        self.fusion = ConcatFusion(cfg.n_z)
        self.decoder = Decoder(cfg.r_e, cfg.width, cfg.n_z)
        self.head = ResidualHead(cfg.width, cfg.head_width)
        self.uncertainty = UncertaintyHead(self.head.hidden)
        self.candidate_fusion = CandidateFusion(cfg.n_z, cfg.k)
        self.align = AlignAttention(cfg.n_z, cfg.d_k)
        self.guide: SRModel | None = None
        self.match_counts: Counter = Counter()

    @classmethod
    def from_stage1(cls, stage1: "SRModel", cfg: NetConfig | None = None) -> "SRModel":
        """Stage-2 model warm-started from ``stage1``; a frozen copy becomes the guide."""
        if stage1.stage != 1:
            raise ValueError("stage-2 model must be built from a stage-1 model")
        cfg = cfg or stage1.cfg
        m = cls(cfg, stage=2)
        m.load_state_dict({k: v for k, v in stage1.state_dict().items() if not k.startswith("guide.")}, strict=False)
        m.attach_guide(copy.deepcopy(stage1))
        return m

    def attach_guide(self, guide: "SRModel") -> None:
        guide.eval()
        for p in guide.parameters():
            p.requires_grad_(False)
        self.guide = guide

    def matcher(self, z_lq_grid: torch.Tensor) -> tuple[MatchResult, torch.Tensor]:
        z = z_lq_grid.permute(0, 2, 3, 1)
        if self.stage == 2 and self.cfg.use_topk:
            self.match_counts["topk"] += 1
            match, q = quantize_topk(z, self.codebook, self.cfg.k, self.candidate_fusion)
        else:
            self.match_counts["nearest"] += 1
            match, q = quantize_nearest(z, self.codebook)
            q = straight_through(z, q)
        return match, q.permute(0, 3, 1, 2)

    def decode_from(self, z_lq: torch.Tensor, z_q: torch.Tensor):
        fused = self.fusion(z_lq, z_q)
        if self.stage == 2 and self.cfg.use_aa:
            h, w = z_q.shape[-2:]
            fused = fused + to_grid(self.align(to_tokens(z_lq), to_tokens(z_q)), h, w)
        return self.decoder(fused)

    def forward(self, lr: torch.Tensor, stage: int | None = None) -> SROutput:
        if stage is not None and stage != self.stage:
            raise ValueError(f"model holds stage-{self.stage} state, asked to run stage {stage}")
        z_lq = self.lq_encoder(lr)
        match, z_q = self.matcher(z_lq)
        _, feats = self.decode_from(z_lq, z_q)
        base = bicubic_up(lr, self.cfg.scale)
        if base.shape[-2:] != feats.shape[-2:]:
            raise ValueError(f"decoder output {tuple(feats.shape[-2:])} does not match {self.cfg.scale}x input")
        sr, final = self.head(feats, base)
        if self.stage == 1:
            s = self.uncertainty(final.detach())
        else:
            if self.guide is None:
                raise ValueError("stage-2 model has no frozen stage-1 guide attached")
            with torch.no_grad():
                s = self.guide(lr).s
        return SROutput(sr=sr, s=s, lq_latents=z_lq, match=match, z_q=z_q)


def sr_forward(lr: torch.Tensor, stage: int, model: SRModel) -> SROutput:
    return model(lr, stage=stage)


class PatchDiscriminator(nn.Module):
    """Four-layer patch discriminator returning per-patch logits."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), _act(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), _act(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), _act(),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)
