"""Text side: vocabulary, tokenization, recurrent caption encoder, conditioning augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import DimensionError, InputError
from .synthdata import COLORS, POSITIONS, SHAPES, SIZES, TEMPLATES, normalize

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIALS = (PAD, START, END, UNK)


class Vocab:
    """Dense token <-> id map with PAD=0, START=1, END=2, UNK=3."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(SPECIALS)
        seen = set(self.itos)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    pad_id, start_id, end_id, unk_id = 0, 1, 2, 3

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        if tuple(lines[: len(SPECIALS)]) != SPECIALS:
            raise InputError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(lines[len(SPECIALS):])


def grammar_vocab() -> Vocab:
    """Every token the caption grammar can produce, in a fixed order."""
    words = []
    for template in TEMPLATES:
        words.extend(t for t in template.split() if not t.startswith("{"))
    words.extend(SHAPES + COLORS + SIZES + POSITIONS)
    return Vocab(sorted(set(words)))


@dataclass
class TokenSeq:
    ids: list[int]
    true_length: int

    def __post_init__(self):
        if self.true_length < 1:
            raise InputError("token sequence must contain at least one token")


def tokenize(caption: str, vocab: Vocab, length: int = 12) -> TokenSeq:
    words = normalize(caption)
    if not words:
        raise InputError("empty caption")
    ids = [vocab[w] for w in words[:length]]
    n = len(ids)
    return TokenSeq(ids + [vocab.pad_id] * (length - n), n)


def with_end(t: TokenSeq, vocab: Vocab) -> TokenSeq:
    """Append END after the caption when there is room (captioner targets)."""
    if t.true_length >= len(t.ids):
        return t
    ids = list(t.ids)
    ids[t.true_length] = vocab.end_id
    return TokenSeq(ids, t.true_length + 1)


def batch_tokens(seqs: Sequence[TokenSeq]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    lengths = torch.tensor([s.true_length for s in seqs], dtype=torch.long)
    return ids, lengths


def length_mask(lengths: torch.Tensor, L: int) -> torch.Tensor:
    return torch.arange(L)[None, :] < lengths[:, None]


@dataclass
class TextEmbedding:
    w: torch.Tensor  # (B, D, L) or (D, L)
    s: torch.Tensor  # (B, D) or (D,)


@dataclass
class AugmentedSentence:
    s_ca: torch.Tensor
    mu: torch.Tensor
    logvar: torch.Tensor
    noise: torch.Tensor


class TextEncoder(nn.Module):
    """Embedding + (bi)LSTM. Word features are the per-step hidden states.

    In bidirectional mode each direction has D/2 units; the sentence vector
    concatenates the forward state at the last real token with the backward
    state at the first token.

    With ``normalize`` (the default) s and every word column are layer-normed
    over the feature axis (no learned affine). Raw LSTM states are small next
    to unit-variance noise, which leaves the generator ignoring the text.
    """

    def __init__(self, vocab_size: int, D: int = 64, emb_dim: int = 32, bidirectional: bool = True,
                 normalize: bool = True):
        super().__init__()
        if bidirectional and D % 2:
            raise DimensionError(f"bidirectional encoder needs even D, got {D}")
        self.vocab_size = vocab_size
        self.D = D
        self.bidirectional = bidirectional
        self.normalize = normalize
        self.embed = nn.Embedding(vocab_size, emb_dim, padding_idx=0)
        hidden = D // 2 if bidirectional else D
        self.rnn = nn.LSTM(emb_dim, hidden, batch_first=True, bidirectional=bidirectional)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> TextEmbedding:
        if ids.numel() and (int(ids.max()) >= self.vocab_size or int(ids.min()) < 0):
            raise InputError(f"token id out of range for vocabulary of size {self.vocab_size}")
        B, L = ids.shape
        x = self.embed(ids)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h, _) = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=L)
        w = out.transpose(1, 2)  # padded steps come back as exact zeros
        s = torch.cat([h[-2], h[-1]], dim=1) if self.bidirectional else h[-1]
        if self.normalize:
            s = F.layer_norm(s, (self.D,))
            w = F.layer_norm(w.transpose(1, 2), (self.D,)).transpose(1, 2)  # zero columns stay zero
        return TextEmbedding(w=w, s=s)


def encode_text(t: TokenSeq, encoder: TextEncoder) -> TextEmbedding:
    ids, lengths = batch_tokens([t])
    emb = encoder(ids, lengths)
    return TextEmbedding(w=emb.w[0], s=emb.s[0])


class CondAugment(nn.Module):
    """s_ca = mu(s) + exp(logvar(s) / 2) * noise, with mu and logvar affine in s."""

    def __init__(self, D: int = 64, D_ca: int = 16):
        super().__init__()
        self.D_ca = D_ca
        self.fc = nn.Linear(D, 2 * D_ca)

    def forward(self, s: torch.Tensor, noise: torch.Tensor) -> AugmentedSentence:
        if noise.shape[-1] != self.D_ca or noise.shape[:-1] != s.shape[:-1]:
            raise DimensionError(f"noise shape {tuple(noise.shape)} incompatible with D'={self.D_ca}")
        mu, logvar = self.fc(s).split(self.D_ca, dim=-1)
        s_ca = mu + torch.exp(0.5 * logvar) * noise
        return AugmentedSentence(s_ca=s_ca, mu=mu, logvar=logvar, noise=noise)


def condition_augment(s: torch.Tensor, noise: torch.Tensor, ca: CondAugment) -> AugmentedSentence:
    return ca(s, noise)


def kl_term(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over features, averaged over a leading batch axis."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl_term: mu {tuple(mu.shape)} vs logvar {tuple(logvar.shape)}")
    per = 0.5 * (torch.exp(logvar) + mu**2 - 1 - logvar).sum(dim=-1)
    return per.mean() if per.dim() else per
