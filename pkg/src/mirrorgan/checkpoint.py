"""On-disk checkpoints: a JSON manifest plus one little-endian float32 file per tensor.

Layout of a checkpoint directory::

    manifest.json          version, config, step, seeds, modules, stream_frozen, ...
    vocab.txt              token list (one per line, id = line number)
    tensors/<name>.bin     raw float32 values, row-major
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, MissingTensorError, ShapeMismatchError, VersionMismatchError
from .objectives import MirrorModel, TrainConfig
from .stem import Vocab
from .stream import Captioner, freeze, is_frozen

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class CheckpointState:
    tensors: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    step: int = 0
    seeds: dict = field(default_factory=dict)
    modules: list[str] = field(default_factory=list)
    stream_frozen: bool = False
    extra: dict = field(default_factory=dict)
    vocab: Vocab | None = None


def save_checkpoint(state: CheckpointState, out_dir) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in sorted(state.tensors.items()):
        if not t.is_floating_point():
            raise CheckpointError(f"tensor {name!r} is not floating point")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype(_LE_F32, copy=False)
        fname = f"{name}.bin"
        (out / "tensors" / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": "float32-le"})
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "seeds": state.seeds,
        "config": state.config,
        "modules": state.modules,
        "stream_frozen": state.stream_frozen,
        "tensors": entries,
        **state.extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if state.vocab is not None:
        state.vocab.save(out / "vocab.txt")
    return out


def load_checkpoint(ckpt_dir) -> CheckpointState:
    root = Path(ckpt_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"{root}: no manifest.json")
    manifest = json.loads(path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{root}: checkpoint format {version}, this build reads {FORMAT_VERSION}")
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        fpath = root / "tensors" / entry["file"]
        if not fpath.exists():
            raise MissingTensorError(f"{root}: tensor {name!r} has no file {fpath.name}")
        raw = fpath.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * _LE_F32.itemsize
        if len(raw) != expected:
            raise ShapeMismatchError(f"tensor {name!r}: file holds {len(raw)} bytes, "
                                     f"shape {list(shape)} needs {expected}")
        arr = np.frombuffer(raw, dtype=_LE_F32).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    known = {"format_version", "step", "seeds", "config", "modules", "stream_frozen", "tensors"}
    vocab = Vocab.load(root / "vocab.txt") if (root / "vocab.txt").exists() else None
    return CheckpointState(tensors=tensors, config=manifest.get("config", {}), step=manifest.get("step", 0),
                           seeds=manifest.get("seeds", {}), modules=manifest.get("modules", []),
                           stream_frozen=manifest.get("stream_frozen", False),
                           extra={k: v for k, v in manifest.items() if k not in known}, vocab=vocab)


def _check_shapes(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> dict:
    sd = module.state_dict()
    out = {}
    for name, ref in sd.items():
        key = prefix + name
        if key not in tensors:
            raise MissingTensorError(f"checkpoint lacks tensor {key!r}")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise ShapeMismatchError(f"tensor {key!r}: checkpoint shape {list(tensors[key].shape)}, "
                                     f"model expects {list(ref.shape)}")
        out[name] = tensors[key]
    return out


# captioner ------------------------------------------------------------------


def save_stream(cap: Captioner, vocab: Vocab, out_dir, config: dict | None = None, seed: int = 0) -> Path:
    tensors = {f"captioner.{k}": v for k, v in cap.state_dict().items()}
    cfg = dict(config or {})
    cfg.update(side=cap.encoder.side, E=cap.W_e.embedding_dim, hidden=cap.rnn.hidden_size)
    state = CheckpointState(tensors, config=cfg, seeds={"stream": seed}, modules=["captioner"],
                            stream_frozen=is_frozen(cap), vocab=vocab)
    return save_checkpoint(state, out_dir)


def load_stream(ckpt_dir) -> tuple[Captioner, Vocab]:
    state = load_checkpoint(ckpt_dir)
    if "captioner" not in state.modules:
        raise CheckpointError(f"{ckpt_dir}: no captioner in checkpoint")
    if state.vocab is None:
        raise CheckpointError(f"{ckpt_dir}: missing vocab.txt")
    c = state.config
    cap = Captioner(len(state.vocab), c["side"], c["E"], c["hidden"])
    cap.load_state_dict(_check_shapes(cap, state.tensors, "captioner."))
    if state.stream_frozen:
        freeze(cap)
    return cap, state.vocab


# full model -----------------------------------------------------------------


def save_model(model: MirrorModel, out_dir, step: int = 0, extra: dict | None = None) -> Path:
    cfg = model.cfg
    modules = ["text", "ca", "gen", "discs"]
    tensors = {}
    for name in modules:
        for k, v in getattr(model, name).state_dict().items():
            tensors[f"{name}.{k}"] = v
    if model.captioner is not None:
        modules.append("captioner")
        cap = model.captioner
        for k, v in cap.state_dict().items():
            tensors[f"captioner.{k}"] = v
    sc = cfg.stage_config()
    meta = {"lambda": cfg.lam, "stages": {"sides": list(sc.sides), "M": list(sc.M), "z_dim": sc.z_dim}}
    if model.captioner is not None:
        meta["captioner"] = {"side": model.captioner.encoder.side, "E": model.captioner.W_e.embedding_dim,
                             "hidden": model.captioner.rnn.hidden_size}
    meta.update(extra or {})
    state = CheckpointState(tensors, config=cfg.to_dict(), step=step, seeds={"train": cfg.seed},
                            modules=modules,
                            stream_frozen=model.captioner is not None and is_frozen(model.captioner),
                            extra=meta, vocab=model.vocab)
    return save_checkpoint(state, out_dir)


def load_model(ckpt_dir) -> tuple[MirrorModel, CheckpointState]:
    state = load_checkpoint(ckpt_dir)
    if state.vocab is None:
        raise CheckpointError(f"{ckpt_dir}: missing vocab.txt")
    cfg = TrainConfig(**state.config)
    cap = None
    if "captioner" in state.modules:
        c = state.extra["captioner"]
        cap = Captioner(len(state.vocab), c["side"], c["E"], c["hidden"])
        cap.load_state_dict(_check_shapes(cap, state.tensors, "captioner."))
        if state.stream_frozen:
            freeze(cap)
    model = MirrorModel(cfg, state.vocab, None)
    for name in ("text", "ca", "gen", "discs"):
        mod = getattr(model, name)
        mod.load_state_dict(_check_shapes(mod, state.tensors, f"{name}."))
    model.captioner = cap.to(cfg.torch_dtype) if cap is not None else None
    return model, state
