"""Procedural single-object scenes, their caption grammar and the semantic oracle.

Every caption the grammar emits parses back to the exact scene attributes, and
``semantic_match`` decides from pixels alone whether an image realizes them.
"""

from __future__ import annotations

import itertools
import json
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InputError, ParseError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "white", "black")
SIZES = ("small", "large")
POSITIONS = ("left", "center", "right")
FIELDS = ("shape", "color", "bg_color", "size", "position")

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}

# fraction of the canvas covered by the shape's bounding box
SIZE_AREA = {"small": 0.15, "large": 0.40}
SIZE_THRESHOLD = float(np.sqrt(SIZE_AREA["small"] * SIZE_AREA["large"]))
POSITION_X = {"left": 0.34, "center": 0.5, "right": 0.66}
POSITION_THRESHOLDS = (0.42, 0.58)
# fill ratio of the bounding box: square 1, circle pi/4, triangle 1/2
FILL_THRESHOLDS = (0.64, 0.89)
MIN_OBJECT_FRACTION = 0.02

GRAMMAR_VERSION = 1
TEMPLATES = (
    "a {size} {color} {shape} on the {position} of a {bg_color} background",
    "a {bg_color} background with a {size} {color} {shape} on the {position}",
    "there is a {size} {color} {shape} at the {position} on {bg_color}",
    "{size} {color} {shape} at {position} on {bg_color}",
    "on {bg_color} a {size} {color} {shape} rests at the {position}",
)

_ENUMS = {
    "shape": SHAPES,
    "color": COLORS,
    "bg_color": COLORS,
    "size": SIZES,
    "position": POSITIONS,
}


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    bg_color: str
    size: str
    position: str

    def __post_init__(self):
        for name in FIELDS:
            if getattr(self, name) not in _ENUMS[name]:
                raise InputError(f"{name}={getattr(self, name)!r} not in {_ENUMS[name]}")
        if self.color == self.bg_color:
            raise InputError(f"object color equals background color ({self.color})")

    def replace(self, **changes) -> "SceneSpec":
        d = asdict(self)
        d.update(changes)
        return SceneSpec(**d)


@dataclass
class PartialSpec:
    """Best-effort parse result: fields that could not be read are None."""

    shape: str | None = None
    color: str | None = None
    bg_color: str | None = None
    size: str | None = None
    position: str | None = None

    def missing(self) -> list[str]:
        return [f for f in FIELDS if getattr(self, f) is None]


def all_specs() -> list[SceneSpec]:
    """The full 3*6*5*2*3 = 540 element scene universe, in a fixed order."""
    out = []
    for shape, color, bg, size, pos in itertools.product(SHAPES, COLORS, COLORS, SIZES, POSITIONS):
        if color != bg:
            out.append(SceneSpec(shape, color, bg, size, pos))
    return out


# --------------------------------------------------------------------------
# rendering


def _shape_mask(spec: SceneSpec, q: int) -> np.ndarray:
    side = np.sqrt(SIZE_AREA[spec.size]) * q
    cx, cy = POSITION_X[spec.position] * q, 0.5 * q
    ys, xs = np.mgrid[0:q, 0:q] + 0.5
    dx, dy = xs - cx, ys - cy
    half = side / 2
    if spec.shape == "circle":
        return dx**2 + dy**2 <= half**2
    if spec.shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # isosceles triangle, apex up, base == height == side
    depth = dy + half
    return (depth >= 0) & (depth <= side) & (np.abs(dx) <= depth / 2)


def render_scene(spec: SceneSpec, q: int) -> np.ndarray:
    """Rasterize ``spec`` to a (3, q, q) float64 array in [-1, 1]."""
    if q < 8:
        raise InputError(f"render_scene: side {q} < 8")
    img = np.empty((3, q, q))
    bg = np.asarray(PALETTE[spec.bg_color]) * 2 - 1
    fg = np.asarray(PALETTE[spec.color]) * 2 - 1
    img[:] = bg[:, None, None]
    mask = _shape_mask(spec, q)
    img[:, mask] = fg[:, None]
    return img


def area_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def render_pyramid(spec: SceneSpec, sides: tuple[int, ...]) -> list[np.ndarray]:
    """Ground-truth images for every stage, downsampled from the largest side."""
    top = max(sides)
    full = render_scene(spec, top)
    return [area_downsample(full, top // q) for q in sides]


# --------------------------------------------------------------------------
# caption grammar


def normalize(caption: str) -> list[str]:
    return re.sub(r"[^a-z0-9\s]", " ", caption.lower()).split()


def sample_caption(spec: SceneSpec, rng: random.Random, template: int | None = None) -> str:
    idx = rng.randrange(len(TEMPLATES)) if template is None else template
    return TEMPLATES[idx].format(**asdict(spec))


def _template_tokens(template: str) -> list[str]:
    return template.split()


def _match_template(tokens: list[str], template: str) -> tuple[dict | None, int]:
    """Return (fields, -1) on a full match, else (None, index of first mismatch)."""
    pattern = _template_tokens(template)
    fields = {}
    for i, slot in enumerate(pattern):
        if i >= len(tokens):
            return None, i
        tok = tokens[i]
        if slot.startswith("{"):
            name = slot[1:-1]
            if tok not in _ENUMS[name]:
                return None, i
            fields[name] = tok
        elif tok != slot:
            return None, i
    if len(tokens) != len(pattern):
        return None, len(pattern)
    return fields, -1


def parse_caption(caption: str, strict: bool = True) -> SceneSpec | PartialSpec:
    """Invert the caption grammar.

    Strict mode returns a SceneSpec or raises ParseError pointing at the token
    where the best-matching template diverged. Best-effort mode (``strict=False``)
    tolerates off-grammar text such as decoded captions and returns a
    PartialSpec with unreadable fields left as None.
    """
    tokens = normalize(caption)
    best_pos = 0
    for template in TEMPLATES:
        fields, pos = _match_template(tokens, template)
        if fields is not None:
            try:
                return SceneSpec(**fields)
            except InputError:
                if strict:
                    raise ParseError("caption names the same color for object and background", 0)
                return PartialSpec(**fields)
        best_pos = max(best_pos, pos)
    if strict:
        raise ParseError(f"caption does not match any template: {caption!r}", best_pos)
    return _best_effort(tokens)


def caption_template(caption: str) -> int:
    """Index of the template that produced ``caption``; ParseError if none does."""
    tokens = normalize(caption)
    for i, template in enumerate(TEMPLATES):
        if _match_template(tokens, template)[0] is not None:
            return i
    parse_caption(caption)  # raises with the failure position
    raise ParseError(f"caption does not match any template: {caption!r}", 0)


def _best_effort(tokens: list[str]) -> PartialSpec:
    out = PartialSpec()
    for tok in tokens:
        if tok in SHAPES and out.shape is None:
            out.shape = tok
        elif tok in SIZES and out.size is None:
            out.size = tok
        elif tok in POSITIONS and out.position is None:
            out.position = tok
    color_idx = [i for i, t in enumerate(tokens) if t in COLORS]
    if "background" in tokens:
        b = tokens.index("background")
        before = [i for i in color_idx if i == b - 1]
        if before:
            out.bg_color = tokens[before[0]]
    if out.shape is not None:
        s = tokens.index(out.shape)
        fg = [i for i in color_idx if i < s and tokens[i] != out.bg_color]
        if fg:
            out.color = tokens[fg[-1]]
    if out.bg_color is None:
        rest = [tokens[i] for i in color_idx if tokens[i] != out.color]
        if rest:
            out.bg_color = rest[-1]
    return out


# --------------------------------------------------------------------------
# semantic oracle


@dataclass
class MatchReport:
    ok: bool
    observed: PartialSpec
    fields: dict = field(default_factory=dict)  # field -> bool

    def failed(self) -> list[str]:
        return [k for k, v in self.fields.items() if not v]


_PALETTE_NAMES = list(PALETTE)
_PALETTE_RGB = np.array([PALETTE[c] for c in _PALETTE_NAMES])


def classify_pixels(image: np.ndarray) -> np.ndarray:
    """Nearest-palette label (index into COLORS order) for each pixel."""
    rgb = (np.asarray(image, dtype=np.float64).transpose(1, 2, 0) + 1) / 2
    d = ((rgb[:, :, None, :] - _PALETTE_RGB[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def read_scene(image: np.ndarray) -> PartialSpec:
    """Read scene attributes off an image in [-1, 1] with shape (3, q, q)."""
    image = np.asarray(image)
    q = image.shape[-1]
    labels = classify_pixels(image)
    border = np.concatenate([labels[0], labels[-1], labels[1:-1, 0], labels[1:-1, -1]])
    bg = int(np.bincount(border, minlength=len(COLORS)).argmax())
    out = PartialSpec(bg_color=_PALETTE_NAMES[bg])

    counts = np.bincount(labels.ravel(), minlength=len(COLORS))
    counts[bg] = 0
    if counts.max() < MIN_OBJECT_FRACTION * q * q:
        return out
    fg = int(counts.argmax())
    out.color = _PALETTE_NAMES[fg]

    comp, n = ndimage.label(labels == fg)
    sizes = np.bincount(comp.ravel())[1:]
    biggest = int(sizes.argmax()) + 1
    mask = comp == biggest
    area = mask.sum()
    if area < MIN_OBJECT_FRACTION * q * q:
        return out

    ys, xs = np.nonzero(mask)
    bbox = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = area / bbox
    lo, hi = FILL_THRESHOLDS
    out.shape = "triangle" if fill < lo else ("circle" if fill < hi else "square")
    out.size = "small" if bbox / (q * q) < SIZE_THRESHOLD else "large"
    cx = (xs.mean() + 0.5) / q
    left, right = POSITION_THRESHOLDS
    out.position = "left" if cx < left else ("right" if cx > right else "center")
    return out


def semantic_match(image, spec: SceneSpec) -> MatchReport:
    observed = read_scene(np.asarray(image))
    fields = {f: getattr(observed, f) == getattr(spec, f) for f in FIELDS}
    return MatchReport(ok=all(fields.values()), observed=observed, fields=fields)


# --------------------------------------------------------------------------
# corpus


@dataclass
class DatasetRecord:
    spec: SceneSpec
    images: list[np.ndarray]
    captions: list[str]


@dataclass
class Corpus:
    records: list[DatasetRecord]
    train: list[int]
    test: list[int]
    seed: int
    sides: tuple[int, ...]

    def subset(self, split: str) -> list[DatasetRecord]:
        return [self.records[i] for i in getattr(self, split)]


def make_corpus(seed: int = 0, paraphrases: int = 5, sides: tuple[int, ...] = (16, 32, 64),
                n_test: int = 100, specs: list[SceneSpec] | None = None) -> Corpus:
    specs = all_specs() if specs is None else specs
    records = []
    for i, spec in enumerate(specs):
        rng = random.Random(seed * 100003 + i)
        captions = [sample_caption(spec, rng) for _ in range(paraphrases)]
        records.append(DatasetRecord(spec, render_pyramid(spec, sides), captions))
    order = list(range(len(specs)))
    random.Random(seed).shuffle(order)
    n_test = min(n_test, len(specs) // 2)
    test = sorted(order[:n_test])
    train = sorted(order[n_test:])
    return Corpus(records, train, test, seed, tuple(sides))


def _to_png(img: np.ndarray) -> Image.Image:
    arr = np.clip(np.rint((img.transpose(1, 2, 0) + 1) * 127.5), 0, 255).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def _from_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 127.5 - 1


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, rec in enumerate(corpus.records):
        name = f"rec_{i:04d}"
        names.append(name)
        d = out / name
        d.mkdir(exist_ok=True)
        for q, img in zip(corpus.sides, rec.images):
            _to_png(img).save(d / f"image_{q}.png")
        with open(d / "captions.jsonl", "w") as fh:
            for cap in rec.captions:
                fh.write(json.dumps({"caption": cap, "spec": asdict(rec.spec)}, sort_keys=True) + "\n")
    manifest = {
        "grammar_version": GRAMMAR_VERSION,
        "seed": corpus.seed,
        "sides": list(corpus.sides),
        "records": names,
        "train": [names[i] for i in corpus.train],
        "test": [names[i] for i in corpus.test],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_corpus(data_dir) -> Corpus:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("grammar_version") != GRAMMAR_VERSION:
        raise InputError(f"unsupported grammar version {manifest.get('grammar_version')}")
    sides = tuple(manifest["sides"])
    names = manifest["records"]
    if not names:
        raise InputError(f"{root}: corpus has no records")
    records = []
    for name in names:
        d = root / name
        lines = [json.loads(line) for line in (d / "captions.jsonl").read_text().splitlines() if line]
        spec = SceneSpec(**lines[0]["spec"])
        images = [_from_png(d / f"image_{q}.png") for q in sides]
        records.append(DatasetRecord(spec, images, [ln["caption"] for ln in lines]))
    index = {n: i for i, n in enumerate(names)}
    return Corpus(records, [index[n] for n in manifest["train"]],
                  [index[n] for n in manifest["test"]], manifest["seed"], sides)
