"""Dense tensor helpers on top of torch autograd.

torch supplies the storage and the reverse-mode tape; this module adds the
shape-checked entry points the rest of the package uses, the region/stage
resampling ops, and a central-difference gradient checker.
"""

from __future__ import annotations

import random
from typing import Callable, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = torch.float64

TensorOrSeq = Union[torch.Tensor, Sequence[torch.Tensor]]


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype or DEFAULT_DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def seed_everything(seed: int, threads: int | None = 1) -> torch.Generator:
    """Seed python/numpy/torch and pin the intra-op thread count.

    Returns a dedicated torch generator seeded with ``seed``.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if threads is not None:
        torch.set_num_threads(threads)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    """Max-shifted exp-normalize along ``axis``."""
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax: axis {axis} out of range for shape {tuple(x.shape)}")
    shifted = x - x.detach().amax(dim=axis, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def conv2d(x: torch.Tensor, k: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation of ``x`` (C,H,W) or (B,C,H,W) with ``k`` (C',C,h,w)."""
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or k.dim() != 4:
        raise DimensionError(f"conv2d: expected (B,C,H,W) and (C',C,h,w), got {tuple(x.shape)} and {tuple(k.shape)}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input channels {x.shape[1]} != kernel channels {k.shape[1]}")
    h, w = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if k.shape[2] > h or k.shape[3] > w:
        raise DimensionError(
            f"conv2d: kernel {tuple(k.shape[2:])} larger than padded input {(h, w)}")
    out = F.conv2d(x, k, bias, stride=stride, padding=padding)
    return out[0] if unbatched else out


def upsample_nearest(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Nearest-neighbour upsampling of the trailing two axes."""
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def area_downsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Block-mean downsampling of the trailing two axes by an integer factor."""
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"area_downsample: {h}x{w} not divisible by {factor}")
    lead = x.shape[:-2]
    blocks = x.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(dim=(-3, -1))


def backward(root: torch.Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``root``."""
    if root.numel() != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {tuple(root.shape)}")
    if not root.requires_grad:
        raise ContractError("backward: root is not on the tape (no requires_grad ancestor)")
    root.reshape(()).backward()


def _as_list(x: TensorOrSeq) -> list[torch.Tensor]:
    return [x] if isinstance(x, torch.Tensor) else list(x)


def grad_check(f: Callable[..., torch.Tensor], x: TensorOrSeq, eps: float = 1e-5) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``f`` is called with the tensor(s) in ``x`` as positional arguments and must
    return a scalar. Inputs are promoted to float64 copies; the originals are
    left untouched.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check: eps={eps} outside [1e-7, 1e-3]")
    inputs = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in _as_list(x)]
    out = f(*inputs)
    if out.numel() != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out.reshape(()), inputs, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, g in zip(inputs, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            gflat = g.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                plus = f(*inputs).item()
                flat[j] = orig - eps
                minus = f(*inputs).item()
                flat[j] = orig
                numeric = (plus - minus) / (2 * eps)
                err = abs(gflat[j].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
