"""Seeded end-to-end runs: the 8-record overfit and the corpus-scale ablation grid.

Both are plain functions so the acceptance suite and interactive sessions
drive exactly the same code path as ``mirrorgan train``/``eval``.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .metrics import EvalReport, evaluate
from .objectives import MirrorModel, TrainConfig, Trainer
from .stem import Vocab, grammar_vocab
from .stream import Captioner, StreamConfig, pretrain_stream
from .synthdata import Corpus, DatasetRecord, make_corpus, semantic_match

log = logging.getLogger(__name__)


def overfit_records(n: int = 8, seed: int = 0) -> list[DatasetRecord]:
    """``n`` fixed training records, one caption each."""
    corpus = make_corpus(seed=seed, paraphrases=1)
    return [corpus.records[i] for i in random.Random(seed).sample(corpus.train, n)]


@dataclass
class OverfitResult:
    stream_losses: list[float]
    matches: int
    n: int
    failed_fields: list[list[str]]
    history: list[tuple[int, int]] = field(default_factory=list)  # (step, matches)
    seconds: float = 0.0


def count_matches(model: MirrorModel, records, seed: int = 123) -> tuple[int, list[list[str]]]:
    z = torch.randn(len(records), model.cfg.z_dim, generator=torch.Generator().manual_seed(seed),
                    dtype=model.cfg.torch_dtype)
    with torch.no_grad():
        out, _, _ = model.generate([r.captions[0] for r in records], z)
    reports = [semantic_match(out.images[-1][j].double().numpy(), r.spec) for j, r in enumerate(records)]
    return sum(r.ok for r in reports), [r.failed() for r in reports]


def overfit_experiment(steps: int = 2000, stream_steps: int = 500, seed: int = 0, n: int = 8,
                       check_every: int = 250, **overrides) -> OverfitResult:
    """Pretrain the captioner on ``n`` fixed pairs, then train the GAN on the same records."""
    t0 = time.time()
    vocab = grammar_vocab()
    records = overfit_records(n, seed)
    pairs = [(r.images[-1], r.captions[0]) for r in records]
    cap, losses = pretrain_stream(pairs, vocab, StreamConfig(steps=stream_steps, seed=seed, log_every=0))
    trainer = Trainer(TrainConfig(seed=seed, **overrides), records, vocab, cap)
    history = []
    done = 0
    while done < steps:
        chunk = min(check_every, steps - done)
        trainer.run(chunk, log_every=0)
        done += chunk
        history.append((done, count_matches(trainer.model, records)[0]))
        log.info("overfit step %d: %d/%d", done, history[-1][1], n)
    matches, failed = count_matches(trainer.model, records)
    return OverfitResult(losses, matches, n, failed, history, time.time() - t0)


# corpus-scale runs -----------------------------------------------------------


@dataclass
class DeskRun:
    label: str
    config: TrainConfig
    report: EvalReport
    model: MirrorModel
    seconds: float


def desk_corpus(seed: int = 0, paraphrases: int = 5) -> Corpus:
    return make_corpus(seed=seed, paraphrases=paraphrases)


def desk_captioner(corpus: Corpus, vocab: Vocab, steps: int = 3000, seed: int = 0) -> Captioner:
    pairs = [(r.images[-1], c) for r in corpus.subset("train") for c in r.captions]
    cap, _ = pretrain_stream(pairs, vocab, StreamConfig(steps=steps, seed=seed, log_every=0))
    return cap


def desk_run(corpus: Corpus, cap: Captioner, vocab: Vocab, label: str, steps: int, seed: int = 0,
             out_dir=None, pool_size: int = 20, **overrides) -> DeskRun:
    t0 = time.time()
    cfg = TrainConfig(seed=seed, steps=steps, **overrides)
    trainer = Trainer(cfg, corpus.subset("train"), vocab, cap)
    metrics = None
    if out_dir is not None:
        out = Path(out_dir) / label
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.tsv"
        if metrics.exists():
            metrics.unlink()
    trainer.run(steps, metrics_path=metrics, log_every=0)
    report = evaluate(trainer.model, corpus.subset("test"), corpus.subset("train"), pool_size=pool_size, seed=seed)
    if out_dir is not None:
        ckpt.save_model(trainer.model, Path(out_dir) / label / "final", step=steps)
        (Path(out_dir) / label / "report.json").write_text(report.to_json())
    log.info("%s: semantic %.3f r@1 %.3f (%.0fs)", label, report.semantic_score, report.r_precision[1],
             time.time() - t0)
    return DeskRun(label, cfg, report, trainer.model, time.time() - t0)


ABLATIONS = {
    "lam0": {"lam": 0.0},
    "lam10": {"lam": 10.0},
    "lam20": {"lam": 20.0},
    "lam20_noga": {"lam": 20.0, "global_attention": False},
}


def ablation_grid(steps: int, seed: int = 0, out_dir=None, stream_steps: int = 3000,
                  labels=tuple(ABLATIONS)) -> dict[str, DeskRun]:
    """Same corpus, captioner and seed for every configuration; only the listed knob differs."""
    vocab = grammar_vocab()
    corpus = desk_corpus(seed)
    cap = desk_captioner(corpus, vocab, stream_steps, seed)
    return {k: desk_run(corpus, cap, vocab, k, steps, seed, out_dir, **ABLATIONS[k]) for k in labels}


def color_probe_rate(model: MirrorModel, n: int = 50, seed: int = 0) -> float:
    from .probe import random_swap_trials
    reps = random_swap_trials(model, "color", n=n, seed=seed)
    return float(np.mean([r.edited_field_changed for r in reps]))
