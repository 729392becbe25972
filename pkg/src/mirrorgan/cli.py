"""Command-line driver: data generation, captioner pretraining, training, evaluation, export, probing."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import CONFIG_KEYS, build_config, parse_bool, read_config, write_config
from .errors import InputError, MirrorGANError
from .metrics import evaluate
from .objectives import Trainer
from .probe import word_swap_probe
from .stem import grammar_vocab, tokenize
from .stream import StreamConfig, pretrain_stream
from .synthdata import load_corpus, make_corpus, save_corpus
from .viz import export_attention, save_image

log = logging.getLogger("mirrorgan")


def _on_off(text: str) -> bool:
    try:
        return parse_bool(text)
    except InputError as err:
        raise argparse.ArgumentTypeError(str(err)) from err


def cmd_gen_data(args) -> int:
    corpus = make_corpus(seed=args.seed, paraphrases=args.paraphrases)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.records)} records ({len(corpus.train)} train / {len(corpus.test)} test) to {args.out}")
    return 0


def cmd_pretrain_stream(args) -> int:
    corpus = load_corpus(args.data)
    vocab = grammar_vocab()
    pairs = [(r.images[-1], c) for r in corpus.subset("train") for c in r.captions]
    cfg = StreamConfig(steps=args.steps, lr=args.lr, noise_std=args.noise, seed=args.seed)
    cap, losses = pretrain_stream(pairs, vocab, cfg)
    ckpt.save_stream(cap, vocab, args.out, config={"steps": cfg.steps, "lr": cfg.lr, "noise_std": cfg.noise_std,
                                                   "first_loss": losses[0], "last_loss": losses[-1]},
                     seed=args.seed)
    print(f"captioner loss {losses[0]:.3f} -> {losses[-1]:.3f}; saved to {args.out}")
    return 0


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    flags = {"lam": args.lam, "global_attention": args.global_attention, "seed": args.seed, "steps": args.steps}
    cfg = build_config(file_values, flags)
    corpus = load_corpus(args.data)
    cap, vocab = ckpt.load_stream(args.stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    trainer = Trainer(cfg, corpus.subset("train"), vocab, cap)
    metrics = out / "metrics.tsv"
    if metrics.exists():
        metrics.unlink()
    done = 0
    while done < cfg.steps:
        chunk = min(args.save_every or cfg.steps, cfg.steps - done)
        trainer.run(chunk, metrics_path=metrics, log_every=args.log_every, dump_dir=out)
        done += chunk
        ckpt.save_model(trainer.model, out / f"step_{done:06d}", step=done)
    ckpt.save_model(trainer.model, out / "final", step=done)
    print(f"trained {done} steps; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    model, state = ckpt.load_model(args.model)
    corpus = load_corpus(args.data)
    report = evaluate(model, corpus.subset("test"), corpus.subset("train"), pool_size=args.pool, seed=args.seed)
    report.extra.update(step=state.step, **{"lambda": state.extra.get("lambda")})
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    return 0


def cmd_visualize(args) -> int:
    model, _ = ckpt.load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z = torch.randn(1, model.cfg.z_dim, generator=torch.Generator().manual_seed(args.seed),
                    dtype=model.cfg.torch_dtype)
    with torch.no_grad():
        result, _, _ = model.generate([args.caption], z)
    seq = tokenize(args.caption, model.vocab, model.cfg.L)
    words = model.vocab.decode(seq.ids[: seq.true_length])
    for i, img in enumerate(result.images):
        save_image(img[0].double().numpy(), out / f"stage{i}_image.png")
    written = []
    for i, att in enumerate(result.attention, start=1):
        written += export_attention(att.score_w[0].double().numpy(), att.score_s[0].double().numpy(),
                                    words, i, out, top=args.top)
    print(f"wrote {len(result.images)} images and {len(written)} attention maps to {out}")
    return 0


def cmd_probe(args) -> int:
    if "=" not in args.swap:
        raise InputError("--swap expects field=value")
    field, value = (s.strip() for s in args.swap.split("=", 1))
    model, _ = ckpt.load_model(args.model)
    report = word_swap_probe(model, args.caption, field, value, seed=args.seed)
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mirrorgan", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic corpus to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--paraphrases", type=int, default=5)
    g.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("pretrain-stream", help="pretrain and freeze the captioner")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--noise", type=float, default=0.1, help="std of Gaussian noise added to training images")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_pretrain_stream)

    keys = ", ".join(CONFIG_KEYS)
    t = sub.add_parser("train", help="adversarial training with the frozen captioner",
                       epilog=f"config file keys: {keys}")
    t.add_argument("--data", required=True)
    t.add_argument("--stream", required=True, help="captioner checkpoint from pretrain-stream")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value file; explicit flags take precedence")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--global-attention", type=_on_off, metavar="on|off")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--save-every", type=int, default=500)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="R-precision, semantic score and diversity on the test split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--pool", type=int, default=20)
    e.add_argument("--report")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("visualize", help="export stage images and attention maps for one caption")
    v.add_argument("--model", required=True)
    v.add_argument("--caption", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--top", type=int, default=5)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_visualize)

    r = sub.add_parser("probe", help="swap one attribute word and compare oracle readings")
    r.add_argument("--model", required=True)
    r.add_argument("--caption", required=True)
    r.add_argument("--swap", required=True, metavar="field=value")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.fn(args)
    except MirrorGANError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
