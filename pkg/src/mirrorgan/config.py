"""Key-value config files for training runs.

One ``key = value`` pair per line; ``#`` starts a comment. Keys are the
fields of :class:`TrainConfig` (see ``CONFIG_KEYS`` for the documented list).
Tuple-valued keys take comma-separated integers, booleans take on/off,
true/false, yes/no or 1/0.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import InputError
from .objectives import TrainConfig

CONFIG_KEYS = {
    "sides": "stage image sides, comma-separated (default 16,32,64)",
    "M": "feature channels per stage, comma-separated (default 32,32,32)",
    "z_dim": "noise vector length (default 32)",
    "D": "word/sentence feature size (default 64)",
    "D_ca": "augmented sentence size (default 16)",
    "L": "caption length in tokens (default 12)",
    "emb_dim": "word embedding size inside the text encoder (default 32)",
    "bidirectional": "bidirectional text encoder (default on)",
    "text_norm": "layer-norm word and sentence features (default on)",
    "lam": "weight of the caption reconstruction loss (default 20)",
    "kl_weight": "weight of the conditioning-augmentation KL term (default 0.5)",
    "global_attention": "sentence-level attention on/off (default on)",
    "word_normalize": "word attention softmax axis: regions or words (default regions)",
    "g_norm": "generator normalization: group or none (default group)",
    "mismatched_pairs": "extra discriminator term for real image + wrong caption (default off)",
    "d_noise": "std of Gaussian instance noise on discriminator inputs (default 0)",
    "stream_noise": "std of Gaussian noise on the image fed to the captioner during generator steps (default 0)",
    "stem_trainable": "train the text encoder with the generator (default on)",
    "lr_g": "generator step size (default 2e-4)",
    "lr_d": "discriminator step size (default 2e-4)",
    "beta1": "Adam beta1 (default 0.5)",
    "beta2": "Adam beta2 (default 0.999)",
    "batch_size": "records per step (default 8)",
    "steps": "training steps (default 2000)",
    "seed": "random seed (default 0)",
    "dtype": "float32 or float64 (default float32)",
    "threads": "torch intra-op threads; 1 keeps runs bit-reproducible (default 1)",
}

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise InputError(f"not a boolean: {text!r}")


def _coerce(key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if key not in fields:
        raise InputError(f"unknown config key {key!r}")
    default = fields[key].default
    try:
        if isinstance(default, bool):
            return parse_bool(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as err:
        raise InputError(f"bad value for {key}: {raw!r}") from err
    return raw.strip()


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, raw)
    return out


def write_config(cfg: TrainConfig, path) -> None:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        lines.append(f"{key} = {value}  # {CONFIG_KEYS.get(key, '')}".rstrip(" #"))
    Path(path).write_text("\n".join(lines) + "\n")


def build_config(file_values: dict | None = None, flag_values: dict | None = None) -> TrainConfig:
    """Defaults, then the config file, then explicitly passed command-line flags."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    return TrainConfig(**merged)
