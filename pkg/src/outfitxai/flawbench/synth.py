"""Procedural outfit dataset with two planted compatibility rules.

Every item is a part-specific silhouette in one hue, two-toned with a darker
shade of that hue covering about a third of it: as a single block (plain),
wide stripes (sparse) or thin stripes (dense). The shade fraction is the same
for every texture, so the dominant colors carry the hue but not the texture;
texture only shows up in the edge image. An outfit is positive iff

(a) all item hues lie within ``hue_tolerance`` degrees of one shared base hue, and
(b) all items share the same texture class.

Negatives violate at least one rule; most are near-misses built by corrupting
one or two items of an otherwise positive outfit.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import InfeasibleSpecError, InvariantError
from ..outfit import PARTS

TEXTURES = ("plain", "sparse", "dense")
# shade band (period, width) in pixels at 64x64; plain is one band across the item
_STRIPES = {"plain": (64, 21), "sparse": (12, 4), "dense": (6, 2)}
_SILHOUETTES = {
    "outer": [(12, 8), (52, 8), (58, 56), (6, 56)],
    "upper": [(20, 10), (44, 10), (58, 22), (50, 30), (46, 26), (46, 54), (18, 54), (18, 26), (14, 30), (6, 22)],
    "lower": [(18, 6), (46, 6), (50, 58), (36, 58), (32, 24), (28, 58), (14, 58)],
    "full": [(24, 4), (40, 4), (42, 20), (54, 60), (10, 60), (22, 20)],
    "feet": [(8, 36), (30, 36), (34, 44), (56, 46), (56, 56), (8, 56)],
    "accessory0": [(14, 22), (50, 22), (54, 58), (10, 58)],
    "accessory1": [(6, 52), (6, 44), (18, 44), (22, 18), (42, 18), (46, 44), (58, 44), (58, 52)],
    "accessory2": None,  # ellipse
}


@dataclass
class SynthSpec:
    seed: int = 0
    items_per_part: int = 72
    n_hues: int = 12
    hue_jitter: float = 3.0
    hue_tolerance: float = 20.0
    textures: tuple[str, ...] = TEXTURES
    n_positive: int = 1200
    n_negative: int = 1200
    min_items: int = 6
    max_items: int = 8
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    image_size: int = 64
    max_attempts: int = 2000

    def validate(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise InvariantError(f"split ratios must be non-negative and sum to 1, got {self.split}")
        if self.items_per_part < 2:
            raise InvariantError("every part needs at least 2 items")
        if not 1 <= self.min_items <= self.max_items <= len(PARTS):
            raise InvariantError(f"item count range {self.min_items}..{self.max_items} is invalid")
        if not set(self.textures) <= set(TEXTURES) or not self.textures:
            raise InvariantError(f"textures must be a subset of {TEXTURES}")
        if self.image_size < 16:
            raise InvariantError("image_size must be at least 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["textures"] = list(self.textures)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["textures"] = tuple(d["textures"])
        d["split"] = tuple(d["split"])
        return cls(**d)


@dataclass
class SynthItem:
    item_id: str
    part: str
    hue: float
    texture: str
    path: str = ""
    render: dict = field(default_factory=dict)


def circular_distance(a, b):
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 360.0
    return np.minimum(d, 360.0 - d)


def hue_rule(hues, tolerance: float) -> bool:
    """True iff some base hue lies within ``tolerance`` of every hue (circular)."""
    h = np.sort(np.asarray(hues, dtype=float) % 360.0)
    if len(h) <= 1 or tolerance >= 180.0:
        return True
    gaps = np.diff(np.concatenate([h, [h[0] + 360.0]]))
    return bool(360.0 - gaps.max() <= 2.0 * tolerance + 1e-9)


def texture_rule(textures) -> bool:
    return len(set(textures)) <= 1


def is_positive(items: list[SynthItem], tolerance: float) -> bool:
    return hue_rule([it.hue for it in items], tolerance) and texture_rule([it.texture for it in items])


def hsv_color(hue: float, sat: float, val: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb((hue % 360.0) / 360.0, sat, val)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def render_item(part: str, hue: float, texture: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    scale = size / 64.0 * rng.uniform(0.85, 1.0)
    dx, dy = rng.uniform(-3, 3, size=2) * size / 64.0
    c = size / 2.0

    def tf(x, y):
        return (c + (x - 32) * scale + dx, c + (y - 32) * scale + dy)

    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    poly = _SILHOUETTES[part]
    if poly is None:
        draw.ellipse([tf(12, 12), tf(52, 52)], fill=255)
    else:
        draw.polygon([tf(x, y) for x, y in poly], fill=255)
    mask = np.asarray(canvas) > 0

    img = np.full((size, size, 3), 255, dtype=np.uint8)
    img[mask] = hsv_color(hue, 0.75, 0.9)
    render = {"scale": scale, "dx": dx, "dy": dy}
    period, width = (p * size / 64.0 for p in _STRIPES[texture])
    angle = float(rng.choice([0.0, 45.0, 90.0, 135.0]))
    phase = float(rng.uniform(0, period))
    yy, xx = np.mgrid[0:size, 0:size]
    t = np.deg2rad(angle)
    coord = xx * np.cos(t) + yy * np.sin(t) + phase
    img[mask & ((coord % period) < width)] = hsv_color(hue, 0.75, 0.45)
    render.update(angle=angle, phase=phase)
    return img, render


def _make_items(spec: SynthSpec, rng: np.random.Generator) -> dict[str, list[SynthItem]]:
    step = 360.0 / spec.n_hues
    nt = len(spec.textures)
    out = {}
    for part in PARTS:
        items = []
        for k in range(spec.items_per_part):
            hue = ((k % spec.n_hues) * step + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 360.0
            tex = spec.textures[(k // spec.n_hues) % nt]
            items.append(SynthItem(f"{part}-{k:03d}", part, float(hue), tex))
        out[part] = items
    return out


def _positive(spec, items, rng) -> list[SynthItem] | None:
    n = int(rng.integers(spec.min_items, spec.max_items + 1))
    parts = sorted(rng.choice(len(PARTS), size=n, replace=False))
    anchor = items[PARTS[parts[0]]][int(rng.integers(spec.items_per_part))]
    base_hue, tex = anchor.hue, anchor.texture
    chosen = [anchor]
    for p in parts[1:]:
        pool = [it for it in items[PARTS[p]]
                if it.texture == tex and circular_distance(it.hue, base_hue) <= spec.hue_tolerance]
        if not pool:
            return None
        chosen.append(pool[int(rng.integers(len(pool)))])
    return chosen if is_positive(chosen, spec.hue_tolerance) else None


def _corrupt(spec, items, outfit: list[SynthItem], rng) -> list[SynthItem] | None:
    out = list(outfit)
    base_hue = outfit[0].hue
    tex = outfit[0].texture
    k = 1 if rng.random() < 0.7 else 2
    for idx in rng.choice(len(out), size=min(k, len(out)), replace=False):
        part = out[idx].part
        kind = rng.choice(["hue", "texture", "both"])
        far = lambda it: circular_distance(it.hue, base_hue) > 2 * spec.hue_tolerance + 10.0
        if kind == "hue":
            pool = [it for it in items[part] if it.texture == tex and far(it)]
        elif kind == "texture":
            pool = [it for it in items[part] if it.texture != tex
                    and circular_distance(it.hue, base_hue) <= spec.hue_tolerance]
        else:
            pool = [it for it in items[part] if it.texture != tex and far(it)]
        if not pool:
            pool = [it for it in items[part] if it.texture != tex]
        if not pool:
            return None
        out[idx] = pool[int(rng.integers(len(pool)))]
    return None if is_positive(out, spec.hue_tolerance) else out


def _negative(spec, items, rng) -> list[SynthItem] | None:
    if rng.random() < 0.2:
        n = int(rng.integers(spec.min_items, spec.max_items + 1))
        parts = sorted(rng.choice(len(PARTS), size=n, replace=False))
        out = [items[PARTS[p]][int(rng.integers(spec.items_per_part))] for p in parts]
        return None if is_positive(out, spec.hue_tolerance) else out
    pos = _positive(spec, items, rng)
    return None if pos is None else _corrupt(spec, items, pos, rng)


def _sample(make, count: int, spec, items, rng, what: str) -> list[list[SynthItem]]:
    out = []
    failures = 0
    while len(out) < count:
        o = make(spec, items, rng)
        if o is None:
            failures += 1
            if failures > spec.max_attempts:
                raise InfeasibleSpecError(f"could not construct {what} outfits under {spec}")
            continue
        failures = 0
        out.append(o)
    return out


def generate_synthetic(spec: SynthSpec, out_dir) -> dict:
    """Render items, compose labelled outfits and write ``manifest.json`` plus PNGs.

    Returns the manifest. Output is a pure function of ``spec``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    items = _make_items(spec, rng)
    positives = _sample(_positive, spec.n_positive, spec, items, rng, "positive")
    negatives = _sample(_negative, spec.n_negative, spec, items, rng, "negative")

    out_dir = Path(out_dir)
    (out_dir / "items").mkdir(parents=True, exist_ok=True)
    for part in PARTS:
        for it in items[part]:
            img, it.render = render_item(part, it.hue, it.texture, spec.image_size, rng)
            it.path = f"items/{it.item_id}.png"
            Image.fromarray(img, "RGB").save(out_dir / it.path)

    labelled = [(o, "pos") for o in positives] + [(o, "neg") for o in negatives]
    order = rng.permutation(len(labelled))
    n = len(labelled)
    n_train = int(round(spec.split[0] * n))
    n_val = int(round(spec.split[1] * n))
    outfits = []
    for rank, k in enumerate(order):
        o, label = labelled[k]
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        outfits.append({
            "id": f"o{rank:05d}",
            "label": label,
            "split": split,
            "parts": {it.part: it.item_id for it in sorted(o, key=lambda it: PARTS.index(it.part))},
        })
    manifest = {
        "format": "outfit-manifest/1",
        "synth_spec": spec.to_dict(),
        "items": {it.item_id: {"part": it.part, "path": it.path, "hue": it.hue, "texture": it.texture,
                               "render": it.render}
                  for part in PARTS for it in items[part]},
        "outfits": outfits,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
