"""Outfit datasets on disk: a JSON manifest plus item images (or precomputed features).

Manifest layout::

    {"items":   {item_id: {"part": ..., "path": "items/x.png"}},
     "outfits": [{"id": ..., "label": "pos"|"neg", "split": "train"|"val"|"test",
                  "parts": {part: item_id}}]}

A part may also point straight at an image path instead of an item id.
Extracted features are cached next to the manifest in ``features-<key>.csv``.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataIOError, DimensionError
from .imagefeat import COLOR_DIM, FeatureConfig, item_features, load_image
from .outfit import PARTS, ItemFeatures, Outfit


@dataclass
class Dataset:
    root: Path
    items: dict[str, ItemFeatures]
    item_parts: dict[str, str]
    outfits: list[Outfit]
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Outfit]:
        return [o for o in self.outfits if o.meta.get("split") == name]

    def pool(self, part: str, split: str = "test") -> list[str]:
        """Sorted ids of the items used at ``part`` by outfits of ``split``."""
        ids = {o.items[part].item_id for o in self.split(split) if part in o.items}
        return sorted(ids)


def labels_of(outfits: list[Outfit]) -> np.ndarray:
    """Boolean array, True for positive outfits."""
    return np.array([o.label == "pos" for o in outfits], dtype=bool)


def _cache_key(config: FeatureConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def write_features_csv(path, items: dict[str, ItemFeatures], parts: dict[str, str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        first = next(iter(items.values()))
        w.writerow(["item_id", "part"] + [f"e{k}" for k in range(first.edge.size)]
                   + [f"c{k}" for k in range(first.colors.size)])
        for iid in sorted(items):
            it = items[iid]
            w.writerow([iid, parts.get(iid, "")] + [repr(float(v)) for v in it.edge]
                       + [repr(float(v)) for v in it.colors])


def read_features_csv(path, color_dim: int = COLOR_DIM) -> tuple[dict[str, ItemFeatures], dict[str, str]]:
    items, parts = {}, {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_edge = len(header) - 2 - color_dim
        if n_edge < 1:
            raise DimensionError(f"{path}: header has too few columns for {color_dim} color values")
        for row in reader:
            vals = np.array([float(v) for v in row[2:]])
            items[row[0]] = ItemFeatures(vals[:n_edge], vals[n_edge:], row[0])
            parts[row[0]] = row[1]
    return items, parts


def extract_item(path, config: FeatureConfig) -> ItemFeatures:
    edge, colors = item_features(load_image(path), config)
    return ItemFeatures(edge, colors, Path(path).stem)


def load_dataset(root, config: FeatureConfig = FeatureConfig(), cache: bool = True) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json" if root.is_dir() else root
    root = mpath.parent
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {mpath}: {exc}") from exc
    except ValueError as exc:
        raise DataIOError(f"manifest {mpath} is not valid JSON: {exc}") from exc

    table = dict(manifest.get("items", {}))
    for o in manifest["outfits"]:
        for part, ref in o["parts"].items():
            if ref not in table:
                table[ref] = {"part": part, "path": ref}

    cache_path = root / f"features-{_cache_key(config)}.csv"
    items: dict[str, ItemFeatures] = {}
    parts = {iid: info.get("part", "") for iid, info in table.items()}
    if cache and cache_path.exists():
        items, _ = read_features_csv(cache_path)
    missing = [iid for iid in table if iid not in items]
    for iid in missing:
        feat = extract_item(root / table[iid]["path"], config)
        feat.item_id = iid
        items[iid] = feat
    if cache and missing:
        write_features_csv(cache_path, items, parts)

    outfits = []
    for o in manifest["outfits"]:
        unknown = set(o["parts"]) - set(PARTS)
        if unknown:
            raise DataIOError(f"outfit {o.get('id')}: unknown parts {sorted(unknown)}")
        outfit = Outfit({p: items[ref] for p, ref in o["parts"].items()}, str(o["id"]), o.get("label"),
                        {"split": o.get("split", "train")})
        outfits.append(outfit)
    return Dataset(root, items, parts, outfits, manifest)
