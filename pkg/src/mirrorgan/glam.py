"""Word-level and sentence-level attention over visual features, and their fusion.

All functions accept either single samples (f: M x N) or batches (f: B x M x N).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import DimensionError, InputError
from .numerics import softmax


@dataclass
class AttentionOutput:
    att_w: torch.Tensor  # (B, M, N)
    att_s: torch.Tensor  # (B, M, N)
    score_w: torch.Tensor  # (B, L, N)
    score_s: torch.Tensor  # (B, M, N)


def _batched(*ts):
    single = ts[0].dim() == 2
    return single, [t.unsqueeze(0) if single else t for t in ts]


def word_attention(f: torch.Tensor, w: torch.Tensor, U: torch.Tensor, mask,
                   normalize_over: str = "regions") -> tuple[torch.Tensor, torch.Tensor]:
    """att_w = sum_l (U w_l) softmax(f^T U w_l)^T over the first ``mask`` words.

    ``normalize_over="regions"`` normalizes each word's scores over the N
    regions. ``"words"`` normalizes each region's scores over the visible
    words instead (the AttnGAN convention). Scores of masked words are zero.
    """
    single, (f, w) = _batched(f, w)
    B, M, N = f.shape
    D, L = w.shape[1:]
    if w.shape[0] != B or U.shape != (M, D):
        raise DimensionError(f"word_attention: f {tuple(f.shape)}, w {tuple(w.shape)}, U {tuple(U.shape)}")
    lengths = torch.as_tensor(mask, dtype=torch.long).reshape(-1).expand(B)
    if int(lengths.min()) < 1 or int(lengths.max()) > L:
        raise InputError(f"word_attention: mask must lie in [1, {L}], got {lengths.tolist()}")
    visible = (torch.arange(L)[None, :] < lengths[:, None]).to(f.dtype)  # (B, L)

    uw = U @ w  # (B, M, L)
    logits = uw.transpose(1, 2) @ f  # (B, L, N)
    if normalize_over == "regions":
        score = softmax(logits, axis=2) * visible[:, :, None]
    elif normalize_over == "words":
        logits = logits.masked_fill(visible[:, :, None] == 0, float("-inf"))
        score = softmax(logits, axis=1)
    else:
        raise ValueError(f"normalize_over must be 'regions' or 'words', not {normalize_over!r}")
    att = uw @ score  # (B, M, N)
    if single:
        return att[0], score[0]
    return att, score


def sentence_attention(f: torch.Tensor, s_ca: torch.Tensor, V: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """att_s = v * softmax_N(f * v) with v = V s_ca replicated across regions."""
    single = f.dim() == 2
    if single:
        f, s_ca = f.unsqueeze(0), s_ca.unsqueeze(0)
    B, M, N = f.shape
    if s_ca.shape[0] != B or V.shape != (M, s_ca.shape[1]):
        raise DimensionError(
            f"sentence_attention: f {tuple(f.shape)}, s_ca {tuple(s_ca.shape)}, V {tuple(V.shape)}")
    v = (s_ca @ V.T)[:, :, None]  # (B, M, 1)
    score = softmax(f * v, axis=2)
    att = v * score
    if single:
        return att[0], score[0]
    return att, score


def glam_fuse(f: torch.Tensor, att_w: torch.Tensor, att_s: torch.Tensor) -> torch.Tensor:
    if not (f.shape == att_w.shape == att_s.shape):
        raise DimensionError(
            f"glam_fuse: f {tuple(f.shape)}, att_w {tuple(att_w.shape)}, att_s {tuple(att_s.shape)}")
    return torch.cat([f, att_w, att_s], dim=-2)


class GLAM(nn.Module):
    """Perception layers U (M x D) and V (M x D') for one stage."""

    def __init__(self, M: int, D: int, D_ca: int, global_attention: bool = True,
                 normalize_over: str = "regions"):
        super().__init__()
        self.U = nn.Parameter(torch.randn(M, D) / D**0.5)
        self.V = nn.Parameter(torch.randn(M, D_ca) / D_ca**0.5)
        self.global_attention = global_attention
        self.normalize_over = normalize_over

    def forward(self, f: torch.Tensor, w: torch.Tensor, s_ca: torch.Tensor,
                lengths: torch.Tensor) -> tuple[torch.Tensor, AttentionOutput]:
        att_w, score_w = word_attention(f, w, self.U, lengths, self.normalize_over)
        if self.global_attention:
            att_s, score_s = sentence_attention(f, s_ca, self.V)
        else:
            att_s = torch.zeros_like(f)
            score_s = torch.full_like(f, 1.0 / f.shape[-1])
        return glam_fuse(f, att_w, att_s), AttentionOutput(att_w, att_s, score_w, score_s)
