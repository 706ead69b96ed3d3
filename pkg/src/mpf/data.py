"""Procedural caption-image corpus: rendered geometric scenes.

Every scene is one of 96 attribute combinations (shape, color, size,
background) rendered at 32x32 with seeded position/scale jitter, captioned by
a fixed template. Attribute overlap between captions stands in for semantic
relatedness.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError, ParseError
from .formats import read_ppm, read_tsr, write_ndjson, write_tsr

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SIZES = ("small", "large")
BACKGROUNDS = ("dark", "light")

_COLOR_RGB = {
    "red": (1, 0, 0),
    "green": (0, 1, 0),
    "blue": (0, 0, 1),
    "yellow": (1, 1, 0),
    "magenta": (1, 0, 1),
    "cyan": (0, 1, 1),
}

IMAGE_SHAPE = (3, 32, 32)

# Intensity constants; the non-shape mean of a dark background stays ~0.10.
_BG_LEVEL = {"dark": 0.10, "light": 0.90}
_CHANNEL_HI = 0.90
_CHANNEL_LO = 0.10
_NOISE_AMPLITUDE = 0.03
_BASE_RADIUS = {"small": 5.0, "large": 9.0}

CAPTION_TEMPLATE = "a {size} {color} {shape} on a {background} background"


def base_vocabulary() -> list[str]:
    """Sorted closed vocabulary of the caption template."""
    words = {"a", "on", "background"}
    words.update(SHAPES)
    words.update(COLORS)
    words.update(SIZES)
    words.update(BACKGROUNDS)
    return sorted(words)


@dataclass(frozen=True)
class Scene:
    shape: str
    color: str
    size: str
    background: str
    jitter_seed: int

    def __post_init__(self):
        if (
            self.shape not in SHAPES
            or self.color not in COLORS
            or self.size not in SIZES
            or self.background not in BACKGROUNDS
        ):
            raise ParseError(
                f"invalid attribute tuple ({self.shape}, {self.color}, "
                f"{self.size}, {self.background})"
            )

    @property
    def caption(self) -> str:
        return CAPTION_TEMPLATE.format(
            size=self.size, color=self.color, shape=self.shape, background=self.background
        )

    @property
    def attributes(self) -> tuple[str, str, str, str]:
        return (self.shape, self.color, self.size, self.background)


def all_attribute_tuples() -> list[tuple[str, str, str, str]]:
    return [
        (sh, co, si, bg)
        for sh, co, si, bg in itertools.product(SHAPES, COLORS, SIZES, BACKGROUNDS)
    ]


def all_captions() -> list[str]:
    return [Scene(*attrs, jitter_seed=0).caption for attrs in all_attribute_tuples()]


def parse_caption(caption: str) -> tuple[str, str, str, str]:
    """Invert the caption template to its attribute tuple."""
    words = caption.strip().split()
    if (
        len(words) != 8
        or words[0] != "a"
        or words[4] != "on"
        or words[5] != "a"
        or words[7] != "background"
    ):
        raise ParseError(f"caption does not match template: {caption!r}")
    size, color, shape, background = words[1], words[2], words[3], words[6]
    if (
        shape not in SHAPES
        or color not in COLORS
        or size not in SIZES
        or background not in BACKGROUNDS
    ):
        raise ParseError(f"caption has unknown attribute words: {caption!r}")
    return (shape, color, size, background)


def shared_attribute_count(caption_a: str, caption_b: str) -> int:
    a = parse_caption(caption_a)
    b = parse_caption(caption_b)
    return sum(1 for x, y in zip(a, b) if x == y)


def related_prompts(caption: str, k_shared: int) -> list[str]:
    """All other captions sharing exactly ``k_shared`` of the 4 attributes.

    ``k_shared`` ranges over 0..3; 4 shared attributes would be the caption
    itself, which is never returned.
    """
    if not 0 <= k_shared <= 3:
        raise ParseError(f"k_shared must be in 0..3, got {k_shared}")
    attrs = parse_caption(caption)
    out = []
    for other in all_attribute_tuples():
        if other == attrs:
            continue
        if sum(1 for x, y in zip(attrs, other) if x == y) == k_shared:
            out.append(Scene(*other, jitter_seed=0).caption)
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _shape_mask(kind: str, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:32, 0:32]
    dx = xx - cx
    dy = yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        half = 0.8 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "triangle":
        # upward triangle, vertices scaled about the centre
        verts = np.array([(0.0, -1.0), (-0.9, 0.8), (0.9, 0.8)]) * r
        mask = np.ones((32, 32), dtype=bool)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            # inside = left of every directed edge (vertices are clockwise
            # in image coordinates where y grows downward)
            cross = (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0)
            mask &= cross <= 0
        return mask
    if kind == "cross":
        arm = 0.35 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    raise ParseError(f"unknown shape {kind!r}")


def render_scene(scene: Scene) -> np.ndarray:
    """Deterministic (3,32,32) rendering with values in [0,1]."""
    rng = np.random.Generator(np.random.PCG64(scene.jitter_seed))
    cx, cy = 16.0 + rng.uniform(-3.0, 3.0, size=2)
    r = _BASE_RADIUS[scene.size] * (1.0 + rng.uniform(-0.15, 0.15))
    noise = rng.uniform(-_NOISE_AMPLITUDE, _NOISE_AMPLITUDE, size=IMAGE_SHAPE)

    img = np.full(IMAGE_SHAPE, _BG_LEVEL[scene.background], dtype=np.float64)
    mask = _shape_mask(scene.shape, cx, cy, r)
    rgb = _COLOR_RGB[scene.color]
    for c in range(3):
        img[c][mask] = _CHANNEL_HI if rgb[c] else _CHANNEL_LO
    img += noise
    return np.clip(img, 0.0, 1.0)


def shape_pixel_count(scene: Scene) -> int:
    rng = np.random.Generator(np.random.PCG64(scene.jitter_seed))
    cx, cy = 16.0 + rng.uniform(-3.0, 3.0, size=2)
    r = _BASE_RADIUS[scene.size] * (1.0 + rng.uniform(-0.15, 0.15))
    return int(_shape_mask(scene.shape, cx, cy, r).sum())


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


class DatasetManifest:
    """NDJSON-backed record list, images stored as sibling TSR files."""

    def __init__(self, records: list[dict], base_dir: Path):
        ids = [r["id"] for r in records]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest ids are not unique")
        self.records = records
        self.base_dir = Path(base_dir)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def by_caption(self, caption: str, split: str | None = None) -> list[dict]:
        recs = self.records if split is None else self.split(split)
        return [r for r in recs if r["caption"] == caption]

    def captions(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r["caption"], None)
        return list(seen)

    def load_image(self, record: dict) -> np.ndarray:
        path = self.base_dir / record["image"]
        if path.suffix == ".tsr":
            img = read_tsr(path)
        elif path.suffix == ".ppm":
            img = read_ppm(path)
        else:
            raise IoError(f"unsupported image format: {path}")
        if img.shape != IMAGE_SHAPE:
            raise IoError(f"image {path} has shape {img.shape}, expected {IMAGE_SHAPE}")
        return img

    @classmethod
    def load(cls, manifest_path) -> "DatasetManifest":
        from .formats import read_ndjson

        path = Path(manifest_path)
        return cls(list(read_ndjson(path)), path.parent)

    def save(self, manifest_path) -> None:
        write_ndjson(manifest_path, self.records)


def generate_dataset(n_per_class: int, seed: int, out_dir) -> DatasetManifest:
    """Render ``n_per_class`` jittered scenes for each of the 96 attribute
    combinations, split 80/10/10 per class, and write images + manifest."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    rng = np.random.Generator(np.random.PCG64(seed))

    n_val = n_per_class // 10
    n_test = n_per_class // 10
    n_train = n_per_class - n_val - n_test

    records = []
    index = 0
    for attrs in all_attribute_tuples():
        for i in range(n_per_class):
            jitter_seed = int(rng.integers(0, 2**63))
            scene = Scene(*attrs, jitter_seed=jitter_seed)
            rec_id = f"img-{index:05d}"
            rel_path = f"images/{rec_id}.tsr"
            write_tsr(out_dir / rel_path, render_scene(scene))
            if i < n_train:
                split = "train"
            elif i < n_train + n_val:
                split = "val"
            else:
                split = "test"
            records.append(
                {
                    "id": rec_id,
                    "caption": scene.caption,
                    "shape": attrs[0],
                    "color": attrs[1],
                    "size": attrs[2],
                    "background": attrs[3],
                    "jitter_seed": jitter_seed,
                    "image": rel_path,
                    "split": split,
                }
            )
            index += 1

    images_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(records, out_dir)
    manifest.save(out_dir / "manifest.ndjson")
    return manifest
