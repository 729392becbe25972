import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mirrorgan.errors import DimensionError, InputError
from mirrorgan.numerics import grad_check
from mirrorgan.stem import TokenSeq, grammar_vocab, tokenize, with_end
from mirrorgan.stream import (CaptionDistribution, Captioner, StreamConfig, caption_logprobs, encode_image,
                              freeze, greedy_decode, is_frozen, pretrain_stream, stream_loss, weights_hash)
from mirrorgan.synthdata import make_corpus

from oracles import stream_loss_direct


@pytest.fixture(scope="module")
def vocab():
    return grammar_vocab()


@pytest.fixture(scope="module")
def overfit(vocab):
    corpus = make_corpus(seed=0, paraphrases=1)
    recs = [corpus.records[i] for i in random.Random(0).sample(corpus.train, 8)]
    pairs = [(r.images[-1], r.captions[0]) for r in recs]
    cap, losses = pretrain_stream(pairs, vocab, StreamConfig(steps=300, seed=0, log_every=0))
    return cap, losses, pairs


def test_rows_are_distributions(vocab):
    torch.manual_seed(0)
    cap = Captioner(len(vocab))
    img = torch.rand(3, 64, 64) * 2 - 1
    dist = caption_logprobs(img, tokenize("a red circle", vocab), cap)
    p = dist.probs
    assert p.shape == (12, len(vocab))
    assert torch.allclose(p.sum(-1), torch.ones(12), atol=1e-6)
    assert (p > 0).all()


def test_untrained_rows_near_uniform(vocab):
    torch.manual_seed(0)
    cap = Captioner(len(vocab))
    torch.nn.init.zeros_(cap.out.weight)
    torch.nn.init.zeros_(cap.out.bias)
    dist = caption_logprobs(torch.zeros(3, 64, 64), tokenize("a red circle", vocab), cap)
    ent = -(dist.probs * dist.logp).sum(-1)
    assert torch.allclose(ent, torch.full_like(ent, math.log(len(vocab))), atol=1e-5)


def test_stream_loss_known_values():
    V = 10
    uniform = CaptionDistribution(torch.full((5, V), -math.log(V), dtype=torch.float64))
    t = TokenSeq([1, 4, 7, 0, 0], 3)
    assert abs(stream_loss(uniform, t).item() - 3 * math.log(10)) < 1e-12
    onehot = torch.full((5, V), -1e300, dtype=torch.float64).clamp(min=-1e300)
    for row, tok in enumerate(t.ids):
        onehot[row, tok] = 0.0
    assert stream_loss(CaptionDistribution(onehot), t).item() == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_stream_loss_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    L, V = 7, 11
    logits = rng.standard_normal((L, V))
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    n = int(rng.integers(1, L + 1))
    ids = list(rng.integers(0, V, n)) + [0] * (L - n)
    got = stream_loss(CaptionDistribution(torch.log(torch.tensor(probs))), TokenSeq(ids, n)).item()
    assert abs(got - stream_loss_direct(probs, ids, n)) < 1e-12


def test_stream_loss_batch_is_mean_of_rows():
    rng = np.random.default_rng(0)
    logp = torch.log_softmax(torch.tensor(rng.standard_normal((2, 4, 6))), -1)
    ids = torch.tensor([[1, 2, 3, 0], [4, 5, 0, 0]])
    lengths = torch.tensor([3, 2])
    batch = stream_loss(CaptionDistribution(logp), (ids, lengths)).item()
    rows = [stream_loss(CaptionDistribution(logp[b]), TokenSeq(ids[b].tolist(), int(lengths[b]))).item()
            for b in range(2)]
    assert abs(batch - sum(rows) / 2) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_stream_loss_nonnegative_and_pad_masked(n, seed):
    g = torch.Generator().manual_seed(seed)
    logp = torch.log_softmax(torch.randn(6, 9, generator=g, dtype=torch.float64), -1)
    ids = torch.randint(0, 9, (6,), generator=g).tolist()
    base = stream_loss(CaptionDistribution(logp), TokenSeq(ids[:n] + [0] * (6 - n), n)).item()
    other = stream_loss(CaptionDistribution(logp), TokenSeq(ids[:n] + ids[n:], n)).item()
    assert base >= 0 and base == other


def test_stream_loss_length_mismatch():
    with pytest.raises(DimensionError):
        stream_loss(CaptionDistribution(torch.zeros(4, 5)), TokenSeq([1, 2, 3], 3))


def test_errors(vocab):
    cap = Captioner(len(vocab))
    with pytest.raises(DimensionError):
        encode_image(torch.zeros(3, 32, 32), cap)
    with pytest.raises(InputError):
        caption_logprobs(torch.zeros(3, 64, 64), TokenSeq([len(vocab)] + [0] * 3, 1), cap)
    with pytest.raises(InputError):
        pretrain_stream([], vocab, StreamConfig(steps=1))


def test_encode_image_deterministic(vocab):
    torch.manual_seed(0)
    cap = Captioner(len(vocab))
    img = torch.rand(3, 64, 64)
    a, b = encode_image(img, cap), encode_image(img, cap)
    assert a.shape == (64,) and torch.equal(a, b)


def test_pretrain_overfit_reduces_loss_tenfold(overfit):
    _, losses, _ = overfit
    assert np.mean(losses[-20:]) < 0.1 * losses[0]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_pretrained_token_probabilities(overfit, vocab):
    cap, _, pairs = overfit
    for img, caption in pairs:
        t = with_end(tokenize(caption, vocab), vocab)
        dist = caption_logprobs(torch.as_tensor(img, dtype=torch.float32), t, cap)
        p = dist.probs[torch.arange(t.true_length), torch.tensor(t.ids[: t.true_length])]
        assert (p > 0.5).all()


def test_greedy_decode_recovers_training_captions(overfit, vocab):
    cap, _, pairs = overfit
    for img, caption in pairs:
        image = torch.as_tensor(img, dtype=torch.float32)
        out = greedy_decode(image, cap, vocab, 12)
        assert " ".join(vocab.decode(out.ids[: out.true_length])) == caption
        assert greedy_decode(image, cap, vocab, 12) == out
    one = greedy_decode(torch.as_tensor(pairs[0][0], dtype=torch.float32), cap, vocab, 1)
    assert len(one.ids) == 1


def test_pretrained_features_distinguish_images(overfit):
    cap, _, pairs = overfit
    feats = [encode_image(torch.as_tensor(p[0], dtype=torch.float32), cap) for p in pairs]
    for i in range(len(feats)):
        for j in range(i + 1, len(feats)):
            assert not torch.allclose(feats[i], feats[j], atol=1e-3)


def test_freeze_contract(overfit):
    cap, _, _ = overfit
    assert is_frozen(cap)
    assert not any(p.requires_grad for p in cap.parameters())
    h = weights_hash(cap)
    assert weights_hash(cap) == h
    fresh = Captioner(cap.vocab_size)
    assert not is_frozen(fresh)
    assert is_frozen(freeze(fresh))


def test_gradient_wrt_image():
    torch.manual_seed(0)
    cap = Captioner(9, side=16, E=4, hidden=5).double()
    ids = torch.tensor([[4, 5, 2, 0]])
    lengths = torch.tensor([3])
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1
    assert grad_check(lambda x: stream_loss(cap(x, ids), (ids, lengths)), img) < 1e-4
