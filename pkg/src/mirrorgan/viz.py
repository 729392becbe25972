"""Grayscale attention-map and image export."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .cascade import _side
from .errors import DimensionError


def normalize_map(values) -> np.ndarray:
    """Min-max scale to 0..255 uint8; a constant map becomes mid-gray 128."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255).astype(np.uint8)


def _grid(row) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    q = _side(row.shape[-1])
    return row.reshape(q, q)


def _safe(token: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in token)


def select_words(score_w, tokens: Sequence[str], top: int = 5) -> list[int]:
    """Indices of up to ``top`` distinct words with the sharpest (highest peak) attention maps."""
    score_w = np.asarray(score_w, dtype=np.float64)
    order = sorted(range(len(tokens)), key=lambda j: (-score_w[j].max(), j))
    chosen, seen = [], set()
    for j in order:
        if tokens[j] in seen:
            continue
        seen.add(tokens[j])
        chosen.append(j)
        if len(chosen) == top:
            break
    return chosen


def export_attention(score_w, score_s, tokens: Sequence[str], stage: int, out_dir, top: int = 5) -> list[Path]:
    """Write ``stage{i}_word{token}.png`` for the top words and ``stage{i}_global.png``.

    ``score_w`` is (L, N) and ``score_s`` is (M, N); only the first
    ``len(tokens)`` rows of ``score_w`` (the real words) are considered. The
    global map is the channel mean of the sentence-attention scores.
    """
    score_w = np.asarray(score_w, dtype=np.float64)
    score_s = np.asarray(score_s, dtype=np.float64)
    for arr in (score_w, score_s):
        if arr.ndim != 2:
            raise DimensionError(f"attention scores must be 2-d, got shape {arr.shape}")
        _side(arr.shape[-1])
    if len(tokens) > score_w.shape[0]:
        raise DimensionError(f"{len(tokens)} tokens but only {score_w.shape[0]} score rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for j in select_words(score_w[: len(tokens)], tokens, top):
        path = out / f"stage{stage}_word{_safe(tokens[j])}.png"
        Image.fromarray(normalize_map(_grid(score_w[j])), mode="L").save(path)
        written.append(path)
    path = out / f"stage{stage}_global.png"
    Image.fromarray(normalize_map(_grid(score_s.mean(axis=0))), mode="L").save(path)
    written.append(path)
    return written


def save_image(image, path) -> Path:
    """Save a (3, q, q) image in [-1, 1] as RGB PNG."""
    arr = np.asarray(image, dtype=np.float64).transpose(1, 2, 0)
    Image.fromarray(np.clip(np.rint((arr + 1) * 127.5), 0, 255).astype(np.uint8), mode="RGB").save(path)
    return Path(path)
