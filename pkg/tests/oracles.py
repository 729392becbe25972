"""Naive-loop reference implementations. Deliberately slow and independent of torch ops."""

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a), np.asarray(b)
    M, K = a.shape
    N = b.shape[1]
    c = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            acc = 0.0
            for k in range(K):
                acc += a[i, k] * b[k, j]
            c[i, j] = acc
    return c


def softmax_direct(x):
    e = [math.exp(v) for v in x]
    s = sum(e)
    return [v / s for v in e]


def conv2d_loops(x, k, stride=1, padding=0):
    x, k = np.asarray(x), np.asarray(k)
    C, H, W = x.shape
    Co, _, kh, kw = k.shape
    xp = np.zeros((C, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((Co, Ho, Wo))
    for o in range(Co):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


def word_attention_loops(f, w, U, mask):
    f, w, U = map(np.asarray, (f, w, U))
    M, N = f.shape
    D, L = w.shape
    att = np.zeros((M, N))
    for l in range(mask):
        uw = [sum(U[m, d] * w[d, l] for d in range(D)) for m in range(M)]
        logits = [sum(f[m, n] * uw[m] for m in range(M)) for n in range(N)]
        p = softmax_direct(logits)
        for m in range(M):
            for n in range(N):
                att[m, n] += uw[m] * p[n]
    return att


def sentence_attention_loops(f, s_ca, V):
    f, s_ca, V = map(np.asarray, (f, s_ca, V))
    M, N = f.shape
    att = np.zeros((M, N))
    for m in range(M):
        v = sum(V[m, d] * s_ca[d] for d in range(len(s_ca)))
        p = softmax_direct([f[m, n] * v for n in range(N)])
        for n in range(N):
            att[m, n] = v * p[n]
    return att


def stream_loss_direct(probs, ids, true_length):
    return -sum(math.log(probs[t][ids[t]]) for t in range(true_length))


def generator_loss_direct(u, c):
    return -0.5 * math.log(u) - 0.5 * math.log(c)


def discriminator_loss_direct(real, fake):
    (ru, rc), (fu, fc) = real, fake
    return -0.5 * (math.log(ru) + math.log(1 - fu) + math.log(rc) + math.log(1 - fc))


def kl_direct(mu, logvar):
    return sum(0.5 * (math.exp(lv) + m * m - 1 - lv) for m, lv in zip(mu, logvar))


def area_mean_loops(img, factor):
    C, H, W = img.shape
    out = np.zeros((C, H // factor, W // factor))
    for c in range(C):
        for i in range(H // factor):
            for j in range(W // factor):
                acc = 0.0
                for u in range(factor):
                    for v in range(factor):
                        acc += img[c, i * factor + u, j * factor + v]
                out[c, i, j] = acc / factor**2
    return out
