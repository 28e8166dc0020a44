"""Outfit data types: fixed part slots and per-item raw features."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, InvariantError

PARTS = ("outer", "upper", "lower", "full", "feet", "accessory0", "accessory1", "accessory2")
PART_INDEX = {p: i for i, p in enumerate(PARTS)}
FEATURES = ("edge_image", "colors")
N_PARTS = len(PARTS)


@dataclass
class ItemFeatures:
    edge: np.ndarray
    colors: np.ndarray
    item_id: str | None = None

    def __post_init__(self):
        self.edge = np.asarray(self.edge, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)

    def feature(self, name: str) -> np.ndarray:
        return self.edge if name == "edge_image" else self.colors


@dataclass
class Outfit:
    """Slot map from part name to item features; missing parts are absent."""

    items: dict[str, ItemFeatures]
    outfit_id: str = ""
    label: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.items) - set(PARTS)
        if unknown:
            raise InvariantError(f"unknown outfit parts: {sorted(unknown)}")
        if not self.items:
            raise InvariantError(f"outfit {self.outfit_id!r} has no items")

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def present_parts(self) -> list[str]:
        return [p for p in PARTS if p in self.items]

    def replaced(self, part: str, edge=None, colors=None, item_id=None) -> "Outfit":
        """Copy with one part's features swapped."""
        old = self.items[part]
        new = ItemFeatures(old.edge if edge is None else edge,
                           old.colors if colors is None else colors,
                           item_id if item_id is not None else old.item_id)
        items = dict(self.items)
        items[part] = new
        return Outfit(items, self.outfit_id, self.label, dict(self.meta))


@dataclass
class OutfitBatch:
    edge: np.ndarray    # (B, 8, edge_dim)
    colors: np.ndarray  # (B, 8, 9)
    mask: np.ndarray    # (B, 8) 1.0 where present

    def __len__(self) -> int:
        return self.edge.shape[0]

    def subset(self, idx) -> "OutfitBatch":
        return OutfitBatch(self.edge[idx], self.colors[idx], self.mask[idx])


def stack_outfits(outfits: Sequence[Outfit], edge_dim: int, color_dim: int = 9) -> OutfitBatch:
    """Dense arrays for a list of outfits; absent parts are zero vectors."""
    n = len(outfits)
    edge = np.zeros((n, N_PARTS, edge_dim))
    colors = np.zeros((n, N_PARTS, color_dim))
    mask = np.zeros((n, N_PARTS))
    for b, o in enumerate(outfits):
        for part, item in o.items.items():
            i = PART_INDEX[part]
            if item.edge.shape != (edge_dim,) or item.colors.shape != (color_dim,):
                raise DimensionError(
                    f"outfit {o.outfit_id!r} part {part}: features {item.edge.shape}/{item.colors.shape}, "
                    f"model expects ({edge_dim},)/({color_dim},)")
            edge[b, i] = item.edge
            colors[b, i] = item.colors
            mask[b, i] = 1.0
    return OutfitBatch(edge, colors, mask)


def outfit_from_dict(d: Mapping, features: Mapping[str, ItemFeatures] | None = None) -> Outfit:
    """Build an outfit from ``{"id", "label", "parts": {part: ref}}``.

    A part reference is either an item id looked up in ``features`` or an
    inline ``{"edge": [...], "colors": [...]}`` object.
    """
    items = {}
    for part, ref in d["parts"].items():
        if isinstance(ref, Mapping):
            items[part] = ItemFeatures(ref["edge"], ref["colors"], ref.get("item_id"))
        else:
            if features is None or ref not in features:
                raise KeyError(f"unknown item id {ref!r} for part {part}")
            items[part] = features[ref]
    return Outfit(items, str(d.get("id", "")), d.get("label"))
