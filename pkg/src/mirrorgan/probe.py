"""Single-word edit probe: regenerate with one attribute word swapped, same z."""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import InputError
from .synthdata import (COLORS, FIELDS, POSITIONS, SHAPES, SIZES, TEMPLATES, PartialSpec, SceneSpec,
                        all_specs, caption_template, parse_caption, read_scene)

_ENUMS = {"shape": SHAPES, "color": COLORS, "bg_color": COLORS, "size": SIZES, "position": POSITIONS}


@dataclass
class ProbeReport:
    caption: str
    edited_caption: str
    field: str
    new_value: str
    original: PartialSpec   # oracle reading of the image for the original caption
    edited: PartialSpec     # ... and for the edited caption
    changed: list[str]      # fields whose reading differs between the two
    edited_field_changed: bool
    only_edited_field_changed: bool
    reached_new_value: bool

    def as_dict(self) -> dict:
        return {
            "caption": self.caption,
            "edited_caption": self.edited_caption,
            "field": self.field,
            "new_value": self.new_value,
            "original": vars(self.original),
            "edited": vars(self.edited),
            "changed": self.changed,
            "edited_field_changed": self.edited_field_changed,
            "only_edited_field_changed": self.only_edited_field_changed,
            "reached_new_value": self.reached_new_value,
        }


def edit_caption(caption: str, field: str, new_value: str) -> str:
    """Re-emit ``caption`` from its own template with one attribute replaced."""
    if field not in _ENUMS:
        raise InputError(f"unknown field {field!r}; expected one of {FIELDS}")
    if new_value not in _ENUMS[field]:
        raise InputError(f"{new_value!r} is not a valid {field}")
    spec = parse_caption(caption)
    try:
        edited = spec.replace(**{field: new_value})
    except InputError as err:
        raise InputError(f"edit {field}={new_value} leaves the grammar: {err}") from err
    return TEMPLATES[caption_template(caption)].format(**vars(edited))


@torch.no_grad()
def generate_pair(model, caption: str, edited: str, z: torch.Tensor):
    out, _, _ = model.generate([caption, edited], z.expand(2, -1).contiguous())
    return out.images[-1][0], out.images[-1][1]


def word_swap_probe(model, caption: str, field: str, new_value: str, z: torch.Tensor | None = None,
                    seed: int = 0) -> ProbeReport:
    edited_caption = edit_caption(caption, field, new_value)
    if z is None:
        z = torch.randn(1, model.cfg.z_dim, generator=torch.Generator().manual_seed(seed),
                        dtype=model.cfg.torch_dtype)
    z = z.reshape(1, -1)
    a, b = generate_pair(model, caption, edited_caption, z)
    ra, rb = read_scene(a.double().numpy()), read_scene(b.double().numpy())
    changed = [f for f in FIELDS if getattr(ra, f) != getattr(rb, f)]
    return ProbeReport(caption, edited_caption, field, new_value, ra, rb, changed,
                       field in changed, changed == [field], getattr(rb, field) == new_value)


def swap_trials(model, field: str, old: str, new: str, n: int = 50, seed: int = 0) -> list[ProbeReport]:
    """Seeded trials over random scenes whose ``field`` is ``old`` and stays valid after the edit."""
    rng = random.Random(seed)
    pool = [s for s in all_specs() if getattr(s, field) == old
            and _valid(s, field, new)]
    if not pool:
        raise InputError(f"no scene has {field}={old} with a valid swap to {new}")
    reports = []
    for t in range(n):
        spec = rng.choice(pool)
        caption = TEMPLATES[rng.randrange(len(TEMPLATES))].format(**vars(spec))
        reports.append(word_swap_probe(model, caption, field, new, seed=seed * 1000 + t))
    return reports


def random_swap_trials(model, field: str = "color", n: int = 50, seed: int = 0) -> list[ProbeReport]:
    """Like :func:`swap_trials`, but each trial draws its own scene, template and replacement value."""
    if field not in _ENUMS:
        raise InputError(f"unknown field {field!r}")
    rng = random.Random(seed)
    specs = all_specs()
    reports = []
    for t in range(n):
        while True:
            spec = rng.choice(specs)
            options = [v for v in _ENUMS[field] if v != getattr(spec, field) and _valid(spec, field, v)]
            if options:
                break
        caption = TEMPLATES[rng.randrange(len(TEMPLATES))].format(**vars(spec))
        reports.append(word_swap_probe(model, caption, field, rng.choice(options), seed=seed * 1000 + t))
    return reports


def _valid(spec: SceneSpec, field: str, value: str) -> bool:
    try:
        spec.replace(**{field: value})
        return True
    except InputError:
        return False
