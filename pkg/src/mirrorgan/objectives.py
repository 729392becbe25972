"""Adversarial and reconstruction losses, and the alternating G/D training loop."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cascade import CascadeGenerator, DiscriminatorVerdict, StageConfig, StageDiscriminator
from .errors import ContractError
from .stem import CondAugment, TextEncoder, Vocab, batch_tokens, kl_term, tokenize, with_end
from .stream import Captioner, is_frozen, stream_loss
from .synthdata import DatasetRecord

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "g0", "g1", "g2", "d0", "d1", "d2", "stream", "kl", "total_g", "total_d")


def _check_probs(*ps: torch.Tensor) -> None:
    for p in ps:
        p = p.detach()
        if torch.isnan(p).any() or (p < 0).any() or (p > 1).any():
            raise ContractError("discriminator outputs must be probabilities in [0, 1]")


def generator_stage_loss(fake: DiscriminatorVerdict) -> torch.Tensor:
    """-1/2 E[log D(I)] - 1/2 E[log D(I, s)] (non-saturating form)."""
    _check_probs(fake.uncond, fake.cond)
    return -0.5 * torch.log(fake.uncond).mean() - 0.5 * torch.log(fake.cond).mean()


def discriminator_stage_loss(real: DiscriminatorVerdict, fake: DiscriminatorVerdict,
                             wrong_cond: torch.Tensor | None = None) -> torch.Tensor:
    """-1/2 [log D(I_gt) + log(1 - D(I)) + log D(I_gt, s) + log(1 - D(I, s))].

    ``wrong_cond`` (optional) adds -1/2 log(1 - D(I_gt, s_wrong)) for
    real images paired with mismatched sentences.
    """
    _check_probs(real.uncond, real.cond, fake.uncond, fake.cond)
    loss = -0.5 * (torch.log(real.uncond).mean() + torch.log1p(-fake.uncond).mean()
                   + torch.log(real.cond).mean() + torch.log1p(-fake.cond).mean())
    if wrong_cond is not None:
        _check_probs(wrong_cond)
        loss = loss - 0.5 * torch.log1p(-wrong_cond).mean()
    return loss


@dataclass
class LossWeights:
    lam: float = 20.0
    kl_weight: float = 0.5


def total_generator_loss(stage_losses: Sequence, stream: torch.Tensor | float, weights: LossWeights,
                         m: int = 3, kl=None):
    if len(stage_losses) != m:
        raise ContractError(f"expected {m} stage losses, got {len(stage_losses)}")
    total = sum(stage_losses) + weights.lam * stream
    if kl is not None:
        total = total + weights.kl_weight * kl
    return total


@dataclass
class LossReport:
    g: list[float]
    d: list[float]
    stream: float
    kl: float
    total_g: float
    total_d: float

    def line(self, step: int) -> str:
        vals = [step, *self.g, *self.d, self.stream, self.kl, self.total_g, self.total_d]
        return "\t".join(str(v) if isinstance(v, int) else f"{v:.6f}" for v in vals)


@dataclass
class TrainConfig:
    sides: tuple = (16, 32, 64)
    M: tuple = (32, 32, 32)
    z_dim: int = 32
    D: int = 64
    D_ca: int = 16
    L: int = 12
    emb_dim: int = 32
    bidirectional: bool = True
    text_norm: bool = True
    lam: float = 20.0
    kl_weight: float = 0.5
    global_attention: bool = True
    word_normalize: str = "regions"
    g_norm: str = "group"
    mismatched_pairs: bool = False
    d_noise: float = 0.0
    stream_noise: float = 0.0
    stem_trainable: bool = True
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    dtype: str = "float32"
    threads: int = 1

    def __post_init__(self):
        self.sides = tuple(self.sides)
        self.M = tuple(self.M)

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def stage_config(self) -> StageConfig:
        return StageConfig(self.sides, self.M, self.z_dim, self.D, self.D_ca)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sides"], d["M"] = list(self.sides), list(self.M)
        return d


class MirrorModel(torch.nn.Module):
    """Text encoder + conditioning augmentation + cascade + discriminators (+ frozen captioner)."""

    def __init__(self, cfg: TrainConfig, vocab: Vocab, captioner: Captioner | None = None):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        sc = cfg.stage_config()
        self.text = TextEncoder(len(vocab), cfg.D, cfg.emb_dim, cfg.bidirectional, cfg.text_norm)
        self.ca = CondAugment(cfg.D, cfg.D_ca)
        self.gen = CascadeGenerator(sc, cfg.global_attention, cfg.word_normalize, cfg.g_norm)
        self.discs = torch.nn.ModuleList(StageDiscriminator(q, cfg.D, sc.d_channels) for q in sc.sides)
        self.captioner = captioner
        self.to(cfg.torch_dtype)

    def g_parameters(self):
        params = list(self.gen.parameters()) + list(self.ca.parameters())
        if self.cfg.stem_trainable:
            params += list(self.text.parameters())
        return params

    def tokens(self, captions: Sequence[str]):
        return batch_tokens([tokenize(c, self.vocab, self.cfg.L) for c in captions])

    def embed(self, captions: Sequence[str]):
        ids, lengths = self.tokens(captions)
        return self.text(ids, lengths), lengths

    def generate(self, captions: Sequence[str], z: torch.Tensor, noise: torch.Tensor | None = None):
        """Run the text encoder and cascade; ``noise=None`` means s_ca = mu."""
        emb, lengths = self.embed(captions)
        if noise is None:
            noise = torch.zeros(len(captions), self.cfg.D_ca, dtype=z.dtype)
        aug = self.ca(emb.s, noise)
        out = self.gen(z, aug.s_ca, emb.w, lengths)
        return out, emb, aug


class Trainer:
    def __init__(self, cfg: TrainConfig, records: Sequence[DatasetRecord], vocab: Vocab,
                 captioner: Captioner, model: MirrorModel | None = None):
        if captioner is None or not is_frozen(captioner):
            raise ContractError("captioner must be pretrained and frozen before GAN training")
        if not records:
            raise ContractError("no training records")
        self.cfg = cfg
        self.records = list(records)
        self.gen_torch = torch.Generator().manual_seed(cfg.seed)
        self.rng = random.Random(cfg.seed)
        torch.manual_seed(cfg.seed)
        if cfg.threads:
            torch.set_num_threads(cfg.threads)
        self.model = model or MirrorModel(cfg, vocab, captioner)
        self.model.captioner = captioner.to(cfg.torch_dtype)
        self.vocab = vocab
        dt = cfg.torch_dtype
        self.real = [torch.as_tensor(np.stack([r.images[i] for r in self.records]), dtype=dt)
                     for i in range(len(cfg.sides))]
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.model.g_parameters(), lr=cfg.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.model.discs.parameters(), lr=cfg.lr_d, betas=betas)
        self.step_count = 0
        self.weights = LossWeights(cfg.lam, cfg.kl_weight)

    def _batch(self):
        n = len(self.records)
        idx = [self.rng.randrange(n) for _ in range(self.cfg.batch_size)]
        caps = [self.rng.choice(self.records[i].captions) for i in idx]
        return idx, caps

    def _noisy(self, images: torch.Tensor) -> torch.Tensor:
        """Instance noise on discriminator inputs (off when d_noise == 0)."""
        if not self.cfg.d_noise:
            return images
        return images + self.cfg.d_noise * torch.randn(images.shape, generator=self.gen_torch, dtype=images.dtype)

    def step(self) -> LossReport:
        cfg, model = self.cfg, self.model
        dt = cfg.torch_dtype
        idx, caps = self._batch()
        B = len(idx)
        z = torch.randn(B, cfg.z_dim, generator=self.gen_torch, dtype=dt)
        noise = torch.randn(B, cfg.D_ca, generator=self.gen_torch, dtype=dt)
        ids, lengths = model.tokens(caps)
        emb = model.text(ids, lengths)
        aug = model.ca(emb.s, noise)
        out = model.gen(z, aug.s_ca, emb.w, lengths)
        s_d = emb.s.detach()
        reals = [self._noisy(r[idx]) for r in self.real]

        # discriminator update
        d_losses = []
        for i, disc in enumerate(model.discs):
            v_real = disc(reals[i], s_d)
            v_fake = disc(self._noisy(out.images[i].detach()), s_d)
            wrong = None
            if cfg.mismatched_pairs:
                wrong = disc(reals[i], s_d.roll(1, dims=0)).cond
            d_losses.append(discriminator_stage_loss(v_real, v_fake, wrong))
        total_d = sum(d_losses)
        self.opt_d.zero_grad()
        total_d.backward()
        self.opt_d.step()

        # generator update (discriminator and captioner weights are not stepped)
        g_losses = [generator_stage_loss(disc(self._noisy(out.images[i]), s_d))
                    for i, disc in enumerate(model.discs)]
        targets = [with_end(tokenize(c, self.vocab, cfg.L), self.vocab) for c in caps]
        t_ids, t_len = batch_tokens(targets)
        top = out.images[-1]
        if cfg.stream_noise:
            top = top + cfg.stream_noise * torch.randn(top.shape, generator=self.gen_torch, dtype=dt)
        l_stream = stream_loss(model.captioner(top, t_ids), (t_ids, t_len))
        kl = kl_term(aug.mu, aug.logvar)
        total_g = total_generator_loss(g_losses, l_stream, self.weights, len(cfg.sides), kl)
        self.opt_g.zero_grad()
        total_g.backward()
        self.opt_g.step()
        self.opt_d.zero_grad()  # drop grads that G's backward left on D

        self.step_count += 1
        report = LossReport([x.item() for x in g_losses], [x.item() for x in d_losses],
                            l_stream.item(), kl.item(), total_g.item(), total_d.item())
        if not all(map(math.isfinite, [report.total_g, report.total_d])):
            raise FloatingPointError(f"non-finite loss at step {self.step_count}: {report}")
        return report

    def run(self, steps: int | None = None, metrics_path=None, log_every: int = 100,
            dump_dir=None) -> list[LossReport]:
        steps = self.cfg.steps if steps is None else steps
        reports = []
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            if fh and fh.tell() == 0:
                fh.write("\t".join(METRIC_FIELDS) + "\n")
            for _ in range(steps):
                try:
                    rep = self.step()
                except (FloatingPointError, ContractError):
                    # NaN probabilities surface as ContractError from the loss checks
                    if dump_dir:
                        self._dump(dump_dir, reports)
                    raise
                reports.append(rep)
                if fh:
                    fh.write(rep.line(self.step_count) + "\n")
                if log_every and self.step_count % log_every == 0:
                    log.info("step %d g=%.3f d=%.3f stream=%.3f", self.step_count,
                             rep.total_g, rep.total_d, rep.stream)
        finally:
            if fh:
                fh.close()
        return reports

    def _dump(self, dump_dir, reports):
        d = Path(dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        payload = {"step": self.step_count, "config": self.cfg.to_dict(),
                   "recent": [asdict(r) for r in reports[-20:]]}
        (d / "nan_dump.json").write_text(json.dumps(payload, indent=2))
