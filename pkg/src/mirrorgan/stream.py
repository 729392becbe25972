"""Image captioner used to redescribe generated images: conv encoder + LSTM decoder.

Pretrained on ground-truth pairs, then frozen; during GAN training only the
gradient w.r.t. its input image is used.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, InputError
from .stem import TokenSeq, Vocab, batch_tokens, length_mask, tokenize, with_end

log = logging.getLogger(__name__)


@dataclass
class CaptionDistribution:
    logp: torch.Tensor  # (B, L, V) or (L, V); row t predicts token t

    @property
    def probs(self) -> torch.Tensor:
        return self.logp.exp()


class ImageEncoder(nn.Module):
    """Four stride-2 conv layers, flattened into a layer-normed E-vector.

    Layers after the first use group norm; without it the decoder learns the
    caption prior long before it reads the image. The first layer is left
    unnormalized so absolute colour survives: per-image normalization there
    makes the encoder blind to palette shifts, which the generator exploits.
    """

    def __init__(self, side: int = 64, E: int = 64, channels=(16, 32, 64, 64)):
        super().__init__()
        self.side = side
        chans = (3,) + tuple(channels)
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans, chans[1:]))
        self.norms = nn.ModuleList([nn.Identity()] + [nn.GroupNorm(4, b) for b in chans[2:]])
        final = side // 2 ** len(channels)
        self.fc = nn.Linear(chans[-1] * final * final, E)
        self.ln = nn.LayerNorm(E)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-3:] != (3, self.side, self.side):
            raise DimensionError(f"image encoder expects 3x{self.side}x{self.side}, got {tuple(image.shape)}")
        h = image
        for conv, norm in zip(self.convs, self.norms):
            h = F.leaky_relu(norm(conv(h)), 0.2)
        return self.ln(self.fc(h.flatten(1)))


class Captioner(nn.Module):
    """x_{-1} = CNN(I); x_t = W_e T_t; p_{t+1} = RNN(x_t)."""

    def __init__(self, vocab_size: int, side: int = 64, E: int = 64, hidden: int = 128):
        super().__init__()
        self.vocab_size = vocab_size
        self.encoder = ImageEncoder(side, E)
        self.W_e = nn.Embedding(vocab_size, E)
        self.rnn = nn.LSTM(E, hidden, batch_first=True)
        self.out = nn.Linear(hidden, vocab_size)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        single = image.dim() == 3
        x = self.encoder(image.unsqueeze(0) if single else image)
        return x[0] if single else x

    def forward(self, image: torch.Tensor, ids: torch.Tensor) -> CaptionDistribution:
        """Teacher-forced log-probabilities, shape (B, L, V)."""
        if ids.numel() and int(ids.max()) >= self.vocab_size:
            raise InputError(f"token id {int(ids.max())} >= vocabulary size {self.vocab_size}")
        x_img = self.encoder(image)[:, None, :]
        x_tok = self.W_e(ids[:, :-1])
        h, _ = self.rnn(torch.cat([x_img, x_tok], dim=1))
        return CaptionDistribution(F.log_softmax(self.out(h), dim=-1))

    @torch.no_grad()
    def greedy(self, image: torch.Tensor, max_len: int, end_id: int) -> list[list[int]]:
        x = self.encoder(image)[:, None, :]
        state = None
        B = image.shape[0]
        seqs = [[] for _ in range(B)]
        done = [False] * B
        for _ in range(max_len):
            h, state = self.rnn(x, state)
            nxt = self.out(h[:, -1]).argmax(-1)
            for b in range(B):
                if not done[b]:
                    if int(nxt[b]) == end_id:
                        done[b] = True
                    else:
                        seqs[b].append(int(nxt[b]))
            if all(done):
                break
            x = self.W_e(nxt)[:, None, :]
        return seqs


def encode_image(image: torch.Tensor, cap: Captioner) -> torch.Tensor:
    return cap.encode(image)


def caption_logprobs(image: torch.Tensor, tokens: TokenSeq, cap: Captioner) -> CaptionDistribution:
    ids, _ = batch_tokens([tokens])
    return CaptionDistribution(cap(image.unsqueeze(0), ids).logp[0])


def stream_loss(dist: CaptionDistribution, tokens) -> torch.Tensor:
    """-sum_t log p_t(T_t) over the unpadded positions (mean over a batch axis).

    ``tokens`` is a TokenSeq, or an (ids, lengths) pair for batches.
    """
    logp = dist.logp
    if isinstance(tokens, TokenSeq):
        ids, lengths = batch_tokens([tokens])
    else:
        ids, lengths = tokens
    single = logp.dim() == 2
    if single:
        logp = logp.unsqueeze(0)
    if logp.shape[:2] != ids.shape:
        raise DimensionError(f"stream_loss: distribution {tuple(logp.shape)} vs tokens {tuple(ids.shape)}")
    picked = logp.gather(2, ids[:, :, None])[:, :, 0]
    mask = length_mask(lengths, ids.shape[1]).to(picked.dtype)
    per = -(picked * mask).sum(dim=1)
    return per[0] if single else per.mean()


def greedy_decode(image: torch.Tensor, cap: Captioner, vocab: Vocab, max_len: int) -> TokenSeq:
    ids = cap.greedy(image.unsqueeze(0), max_len, vocab.end_id)[0]
    if not ids:
        return TokenSeq([vocab.end_id] + [vocab.pad_id] * (max_len - 1), 1)
    return TokenSeq(ids + [vocab.pad_id] * (max_len - len(ids)), len(ids))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    module.frozen = True
    return module


def is_frozen(module: nn.Module) -> bool:
    return getattr(module, "frozen", False) and not any(p.requires_grad for p in module.parameters())


def weights_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class StreamConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    E: int = 64
    hidden: int = 128
    L: int = 12
    noise_std: float = 0.1
    adv_eps: float = 0.0
    seed: int = 0
    log_every: int = 100


def _fgsm(cap: Captioner, img: torch.Tensor, ids: torch.Tensor, tgt, eps: float) -> torch.Tensor:
    """One signed-gradient ascent step on the caption loss, applied to half the batch."""
    x = img.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(stream_loss(cap(x, ids), tgt), x)
    adv = (img + eps * grad.sign()).clamp(-1.5, 1.5).detach()
    half = img.shape[0] // 2
    return torch.cat([img[:half], adv[half:]])


def pretrain_stream(pairs: Sequence[tuple[np.ndarray, str]], vocab: Vocab, cfg: StreamConfig,
                    side: int | None = None, dtype=torch.float32) -> tuple[Captioner, list[float]]:
    """Fit the captioner on (top-stage image, caption) pairs; returns it frozen with its loss curve.

    Images get additive Gaussian noise during training, and with ``adv_eps``
    half of each batch is replaced by a one-step signed-gradient perturbation.
    Both make the frozen captioner's input gradient follow image content
    rather than imperceptible patterns, which is what the generator sees.
    """
    if not pairs:
        raise InputError("pretrain_stream: empty dataset")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    images = torch.as_tensor(np.stack([p[0] for p in pairs]), dtype=dtype)
    seqs = [with_end(tokenize(p[1], vocab, cfg.L), vocab) for p in pairs]
    ids_all, len_all = batch_tokens(seqs)
    side = side or images.shape[-1]
    cap = Captioner(len(vocab), side, cfg.E, cfg.hidden).to(dtype)
    opt = torch.optim.Adam(cap.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = []
    n = len(pairs)
    for step in range(cfg.steps):
        idx = [rng.randrange(n) for _ in range(min(cfg.batch_size, n))] if n > cfg.batch_size else list(range(n))
        img = images[idx]
        if cfg.noise_std:
            img = img + cfg.noise_std * torch.randn(img.shape, generator=gen, dtype=dtype)
        tgt = (ids_all[idx], len_all[idx])
        if cfg.adv_eps:
            img = _fgsm(cap, img, ids_all[idx], tgt, cfg.adv_eps)
        loss = stream_loss(cap(img, ids_all[idx]), tgt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("stream pretrain step %d loss %.4f", step, loss.item())
        if not math.isfinite(losses[-1]):
            raise FloatingPointError(f"stream pretraining diverged at step {step}")
    return freeze(cap), losses
