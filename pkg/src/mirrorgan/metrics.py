"""Evaluation: cosine retrieval (R-precision), oracle semantic score, sample diversity."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError
from .synthdata import FIELDS, DatasetRecord, SceneSpec, read_scene, semantic_match


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def _cos_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of x against every row of y."""
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    ny = np.linalg.norm(y, axis=1, keepdims=True)
    if (nx == 0).any() or (ny == 0).any():
        raise InputError("cosine similarity of a zero vector is undefined")
    return (x / nx) @ (y / ny).T


def r_precision(image_emb, text_emb, cand_emb, gt_keys: Sequence, cand_keys: Sequence,
                pool_size: int = 20, ks: Sequence[int] = (1, 2, 3), seed: int = 0) -> dict[int, float]:
    """Top-k retrieval accuracy of the ground-truth caption among ``pool_size`` candidates.

    Row i of ``image_emb`` is paired with row i of ``text_emb``. For each row,
    ``pool_size - 1`` mismatches are drawn from ``cand_emb`` among candidates whose
    key (the scene spec) differs from ``gt_keys[i]``. The ground truth counts as
    retrieved at k when fewer than k mismatches score strictly higher.
    """
    image_emb = np.asarray(image_emb, dtype=np.float64)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    cand_emb = np.asarray(cand_emb, dtype=np.float64)
    if pool_size < 1:
        raise InputError("pool_size must be positive")
    if len(image_emb) != len(text_emb) or len(image_emb) != len(gt_keys):
        raise InputError("image, text and key counts differ")
    rng = random.Random(seed)
    hits = {k: 0 for k in ks}
    cand_keys = list(cand_keys)
    for i in range(len(image_emb)):
        pool = [j for j, key in enumerate(cand_keys) if key != gt_keys[i]]
        if pool_size - 1 > len(pool):
            raise InputError(f"pool size {pool_size} exceeds the {len(pool) + 1} distinct captions available")
        picks = rng.sample(pool, pool_size - 1)
        gt = _cos_rows(image_emb[i:i + 1], text_emb[i:i + 1])[0, 0]
        better = 0
        if picks:
            better = int((_cos_rows(image_emb[i:i + 1], cand_emb[picks])[0] > gt).sum())
        for k in ks:
            hits[k] += better < k
    n = max(len(image_emb), 1)
    return {k: hits[k] / n for k in ks}


class AlignmentHead(nn.Module):
    """Two linear maps into a shared space: frozen-captioner image code and sentence vector."""

    def __init__(self, E: int, D: int, dim: int = 32):
        super().__init__()
        self.img = nn.Linear(E, dim)
        self.txt = nn.Linear(D, dim)

    def forward(self, img_code: torch.Tensor, sent: torch.Tensor):
        return self.img(img_code), self.txt(sent)


def fit_alignment(img_codes: torch.Tensor, sents: torch.Tensor, keys: Sequence, dim: int = 32,
                  steps: int = 400, batch_size: int = 32, lr: float = 1e-2, temperature: float = 0.1,
                  seed: int = 0) -> AlignmentHead:
    """Contrastive fit on real (image, caption) pairs; pairs sharing a spec are not negatives."""
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    head = AlignmentHead(img_codes.shape[1], sents.shape[1], dim).to(img_codes.dtype)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    key_ids = {k: i for i, k in enumerate(dict.fromkeys(keys))}
    kid = torch.tensor([key_ids[k] for k in keys])
    n = len(img_codes)
    for _ in range(steps):
        idx = torch.randperm(n, generator=g)[:batch_size]
        a, b = head(img_codes[idx], sents[idx])
        logits = F.normalize(a, dim=1) @ F.normalize(b, dim=1).T / temperature
        same = kid[idx][:, None] == kid[idx][None, :]
        logits = logits.masked_fill(same & ~torch.eye(len(idx), dtype=torch.bool), float("-inf"))
        target = torch.arange(len(idx))
        loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
        opt.zero_grad()
        loss.backward()
        opt.step()
    head.eval()
    for p in head.parameters():
        p.requires_grad_(False)
    return head


@dataclass
class EvalReport:
    r_precision: dict
    semantic_score: float
    field_accuracy: dict
    diversity: int
    pool_size: int
    n_samples: int
    diversity_samples: int = 0
    extra: dict = field(default_factory=dict)

    def check(self) -> None:
        fracs = [self.semantic_score, *self.r_precision.values(), *self.field_accuracy.values()]
        if not all(0.0 <= f <= 1.0 for f in fracs):
            raise ValueError(f"fraction outside [0, 1] in {self}")
        ks = sorted(self.r_precision)
        vals = [self.r_precision[k] for k in ks]
        if any(a > b for a, b in zip(vals, vals[1:])):
            raise ValueError(f"r-precision must be non-decreasing in k: {self.r_precision}")

    def to_json(self) -> str:
        d = asdict(self)
        d["r_precision"] = {f"r@{k}": v for k, v in sorted(self.r_precision.items())}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["r_precision"] = {int(k[2:]): v for k, v in d["r_precision"].items()}
        return cls(**d)


def semantic_scores(images: Sequence[np.ndarray], specs: Sequence[SceneSpec]) -> tuple[float, dict]:
    reports = [semantic_match(img, spec) for img, spec in zip(images, specs)]
    n = max(len(reports), 1)
    score = sum(r.ok for r in reports) / n
    per_field = {f: sum(r.fields[f] for r in reports) / n for f in FIELDS}
    return score, per_field


def diversity(images: Sequence[np.ndarray]) -> int:
    """Number of distinct oracle readings among samples of one caption."""
    return len({tuple(getattr(read_scene(img), f) for f in FIELDS) for img in images})


@torch.no_grad()
def evaluate(model, records: Sequence[DatasetRecord], train_records: Sequence[DatasetRecord],
             pool_size: int = 20, seed: int = 0, diversity_samples: int = 10,
             align_steps: int = 400) -> EvalReport:
    """Generate one image per test record (first caption, s_ca = mu) and score it.

    R-precision embeds images with the frozen captioner's encoder and captions
    with the model's sentence vector, mapped through an alignment head fitted
    on real training pairs.
    """
    if model.captioner is None:
        raise InputError("evaluation needs the model's captioner")
    cfg = model.cfg
    dt = cfg.torch_dtype
    cap = model.captioner
    was_training = model.training
    model.eval()

    def sentence(captions):
        out = []
        for i in range(0, len(captions), 64):
            emb, _ = model.embed(captions[i:i + 64])
            out.append(emb.s)
        return torch.cat(out)

    def image_codes(images):
        return torch.cat([cap.encode(images[i:i + 64]) for i in range(0, len(images), 64)])

    # alignment head on real pairs
    tr_caps = [c for r in train_records for c in r.captions]
    tr_keys = [r.spec for r in train_records for _ in r.captions]
    tr_imgs = torch.as_tensor(np.stack([r.images[-1] for r in train_records for _ in r.captions]), dtype=dt)
    tr_codes, tr_sents = image_codes(tr_imgs), sentence(tr_caps)
    with torch.enable_grad():
        head = fit_alignment(tr_codes, tr_sents, tr_keys, steps=align_steps, seed=seed)

    caps = [r.captions[0] for r in records]
    specs = [r.spec for r in records]
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(len(caps), cfg.z_dim, generator=g, dtype=dt)
    gen_imgs = torch.cat([model.generate(caps[i:i + 64], z[i:i + 64])[0].images[-1]
                          for i in range(0, len(caps), 64)])
    images_np = [im.double().numpy() for im in gen_imgs]
    score, per_field = semantic_scores(images_np, specs)

    a, b = head(image_codes(gen_imgs), sentence(caps))
    cand_caps = [c for r in records for c in r.captions]
    cand_keys = [r.spec for r in records for _ in r.captions]
    cand = head.txt(sentence(cand_caps))
    rp = r_precision(a.double().numpy(), b.double().numpy(), cand.double().numpy(), specs, cand_keys,
                     pool_size=pool_size, seed=seed)

    div_caption = caps[0]
    zd = torch.randn(diversity_samples, cfg.z_dim, generator=g, dtype=dt)
    div_imgs = model.generate([div_caption] * diversity_samples, zd)[0].images[-1]
    div = diversity([im.double().numpy() for im in div_imgs])
    model.train(was_training)
    report = EvalReport(rp, score, per_field, div, pool_size, len(records), diversity_samples,
                        extra={"diversity_caption": div_caption})
    report.check()
    return report
