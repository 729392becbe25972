"""Cascaded generator (feature transformers + image heads) and per-stage discriminators.

Visual features travel between stages in flattened form (B, M, N) with
N = q * q regions; the conv layers reshape to (B, M, q, q) internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, DimensionError
from .glam import GLAM, AttentionOutput
from .numerics import upsample_nearest

LOGIT_CLAMP = 12.0


@dataclass
class StageConfig:
    sides: tuple[int, ...] = (16, 32, 64)
    M: tuple[int, ...] = (32, 32, 32)
    z_dim: int = 32
    D: int = 64
    D_ca: int = 16
    d_channels: tuple[int, ...] = (16, 32, 64, 64)

    def __post_init__(self):
        self.sides = tuple(self.sides)
        self.M = tuple(self.M)
        self.d_channels = tuple(self.d_channels)
        if len(self.M) != len(self.sides):
            raise ContractError("need one channel count per stage")
        for a, b in zip(self.sides, self.sides[1:]):
            if b != 2 * a:
                raise ContractError(f"stage sides must double, got {self.sides}")
        if self.sides[0] % 4:
            raise ContractError(f"first stage side must be a multiple of 4, got {self.sides[0]}")

    @property
    def m(self) -> int:
        return len(self.sides)

    @property
    def N(self) -> tuple[int, ...]:
        return tuple(q * q for q in self.sides)


def _side(N: int) -> int:
    q = math.isqrt(N)
    if q * q != N:
        raise DimensionError(f"region count {N} is not a perfect square")
    return q


def to_spatial(f: torch.Tensor) -> torch.Tensor:
    q = _side(f.shape[-1])
    return f.reshape(*f.shape[:-1], q, q)


def to_flat(f: torch.Tensor) -> torch.Tensor:
    return f.reshape(*f.shape[:-2], -1)


def _act(x):
    return F.leaky_relu(x, 0.2)


def _norm(kind: str, C: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(min(8, C), C)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class InitialTransform(nn.Module):
    """F_0: affine map of [z; s_ca] to a 4x4 grid, then upsample+conv to the first stage side."""

    def __init__(self, z_dim: int, D_ca: int, M: int, side: int, norm: str = "group"):
        super().__init__()
        self.z_dim, self.D_ca, self.M, self.side = z_dim, D_ca, M, side
        self.fc = nn.Linear(z_dim + D_ca, M * 4 * 4)
        n_up = int(math.log2(side // 4))
        if 4 * 2**n_up != side:
            raise ContractError(f"first stage side {side} must be 4 * 2^k")
        self.convs = nn.ModuleList(nn.Conv2d(M, M, 3, padding=1) for _ in range(n_up))
        self.norms = nn.ModuleList(_norm(norm, M) for _ in range(n_up))

    def forward(self, z: torch.Tensor, s_ca: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.z_dim or s_ca.shape[-1] != self.D_ca or z.shape[:-1] != s_ca.shape[:-1]:
            raise DimensionError(f"F_0: z {tuple(z.shape)} / s_ca {tuple(s_ca.shape)} "
                                 f"do not match z_dim={self.z_dim}, D'={self.D_ca}")
        h = _act(self.fc(torch.cat([z, s_ca], dim=-1)))
        h = h.reshape(-1, self.M, 4, 4)
        for conv, nrm in zip(self.convs, self.norms):
            h = _act(nrm(conv(upsample_nearest(h))))
        return to_flat(h)


class NextTransform(nn.Module):
    """F_i: fuse [f; att_w; att_s] with a 3x3 conv, upsample x2, 3x3 conv, residual from f_{i-1}."""

    def __init__(self, M_prev: int, M: int, norm: str = "group"):
        super().__init__()
        self.M_prev, self.M = M_prev, M
        self.fuse = nn.Conv2d(3 * M_prev, M, 3, padding=1)
        self.refine = nn.Conv2d(M, M, 3, padding=1)
        self.norm1, self.norm2 = _norm(norm, M), _norm(norm, M)
        self.skip = nn.Identity() if M == M_prev else nn.Conv2d(M_prev, M, 1)

    def forward(self, f_prev: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        if fused.shape[-2] != 3 * self.M_prev or f_prev.shape[-2] != self.M_prev \
                or fused.shape[-1] != f_prev.shape[-1]:
            raise DimensionError(f"F_i: f_prev {tuple(f_prev.shape)} / fused {tuple(fused.shape)}")
        h = _act(self.norm1(self.fuse(to_spatial(fused))))
        h = self.norm2(self.refine(upsample_nearest(h)))
        out = upsample_nearest(self.skip(to_spatial(f_prev))) + h
        return to_flat(_act(out))


class ImageHead(nn.Module):
    """G_i: 3x3 conv to RGB, tanh squash into [-1, 1]."""

    def __init__(self, M: int):
        super().__init__()
        self.conv = nn.Conv2d(M, 3, 3, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.conv(to_spatial(f)))


@dataclass
class DiscriminatorVerdict:
    uncond: torch.Tensor  # probabilities, shape (B,)
    cond: torch.Tensor


def clamp_logit(x: torch.Tensor) -> torch.Tensor:
    """Smooth clamp into (-12, 12); keeps a non-zero gradient unlike a hard clip."""
    return LOGIT_CLAMP * torch.tanh(x / LOGIT_CLAMP)


class StageDiscriminator(nn.Module):
    """D_i: stride-2 3x3 convs down to 4x4, then unconditional and sentence-conditional heads."""

    def __init__(self, side: int, D: int, channels: tuple[int, ...] = (16, 32, 64, 64)):
        super().__init__()
        self.side = side
        n_down = int(math.log2(side // 4))
        if 4 * 2**n_down != side:
            raise ContractError(f"discriminator side {side} must be 4 * 2^k")
        chans = [3] + [channels[min(k, len(channels) - 1)] for k in range(n_down)]
        self.down = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans, chans[1:]))
        C = chans[-1]
        self.uncond_head = nn.Conv2d(C, 1, 4)
        self.joint = nn.Conv2d(C + D, C, 3, padding=1)
        self.cond_head = nn.Conv2d(C, 1, 4)

    def logits(self, image: torch.Tensor, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if image.shape[-3:] != (3, self.side, self.side):
            raise DimensionError(f"discriminator for side {self.side} got image {tuple(image.shape)}")
        h = image
        for conv in self.down:
            h = _act(conv(h))
        u = self.uncond_head(h).reshape(-1)
        sb = s[:, :, None, None].expand(-1, -1, 4, 4)
        c = self.cond_head(_act(self.joint(torch.cat([h, sb], dim=1)))).reshape(-1)
        return clamp_logit(u), clamp_logit(c)

    def forward(self, image: torch.Tensor, s: torch.Tensor) -> DiscriminatorVerdict:
        single = image.dim() == 3
        if single:
            image, s = image.unsqueeze(0), s.unsqueeze(0)
        u, c = self.logits(image, s)
        v = DiscriminatorVerdict(torch.sigmoid(u), torch.sigmoid(c))
        if single:
            v = DiscriminatorVerdict(v.uncond[0], v.cond[0])
        return v


@dataclass
class CascadeOutput:
    features: list[torch.Tensor]
    images: list[torch.Tensor]
    attention: list[AttentionOutput] = field(default_factory=list)


class CascadeGenerator(nn.Module):
    def __init__(self, cfg: StageConfig, global_attention: bool = True, normalize_over: str = "regions",
                 norm: str = "group"):
        super().__init__()
        self.cfg = cfg
        self.f0 = InitialTransform(cfg.z_dim, cfg.D_ca, cfg.M[0], cfg.sides[0], norm)
        self.glams = nn.ModuleList(
            GLAM(cfg.M[i - 1], cfg.D, cfg.D_ca, global_attention, normalize_over) for i in range(1, cfg.m))
        self.transforms = nn.ModuleList(NextTransform(cfg.M[i - 1], cfg.M[i], norm) for i in range(1, cfg.m))
        self.heads = nn.ModuleList(ImageHead(M) for M in cfg.M)

    def forward(self, z, s_ca, w, lengths) -> CascadeOutput:
        f = self.f0(z, s_ca)
        feats, images, atts = [f], [self.heads[0](f)], []
        for i in range(1, self.cfg.m):
            fused, att = self.glams[i - 1](f, w, s_ca, lengths)
            f = self.transforms[i - 1](f, fused)
            feats.append(f)
            images.append(self.heads[i](f))
            atts.append(att)
        return CascadeOutput(feats, images, atts)


# single-sample functional entry points ------------------------------------


def f0_transform(z: torch.Tensor, s_ca: torch.Tensor, gen: CascadeGenerator) -> torch.Tensor:
    single = z.dim() == 1
    out = gen.f0(z.unsqueeze(0) if single else z, s_ca.unsqueeze(0) if single else s_ca)
    return out[0] if single else out


def fi_transform(f_prev: torch.Tensor, fused: torch.Tensor, gen: CascadeGenerator, stage: int) -> torch.Tensor:
    if stage < 1:
        raise ContractError("stage 0 features come from f0_transform")
    if stage >= gen.cfg.m:
        raise ContractError(f"stage {stage} out of range for {gen.cfg.m} stages")
    single = f_prev.dim() == 2
    out = gen.transforms[stage - 1](f_prev.unsqueeze(0) if single else f_prev,
                                    fused.unsqueeze(0) if single else fused)
    return out[0] if single else out


def generate_image(f: torch.Tensor, gen: CascadeGenerator, stage: int) -> torch.Tensor:
    single = f.dim() == 2
    out = gen.heads[stage](f.unsqueeze(0) if single else f)
    return out[0] if single else out


def discriminate(image: torch.Tensor, s: torch.Tensor, disc: StageDiscriminator) -> DiscriminatorVerdict:
    return disc(image, s)
