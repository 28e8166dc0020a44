"""Interpretable raw item features: dominant colors and an edge-map descriptor.

Images are plain numpy arrays: RGB images are ``(height, width, 3)`` uint8,
gray images ``(height, width)`` uint8.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataIOError, DimensionError, InvariantError, NoForegroundError

# 3x3 high-pass (Laplacian-style) kernel.
HIGHPASS_KERNEL = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.int64)
LUMA = np.array([0.299, 0.587, 0.114])
N_COLORS = 3
_PADDING_MODES = {"replicate": "nearest", "zero": "constant"}
COLOR_DIM = 3 * N_COLORS


@dataclass(frozen=True)
class FeatureConfig:
    """Constants of the feature pipeline; stored alongside every model."""

    whiteness_threshold: int = 245
    canny_sigma: float = 1.4
    canny_low: float = 50.0
    canny_high: float = 150.0
    grid: int = 16
    kmeans_seed: int = 0
    kmeans_max_iter: int = 100
    # "replicate" keeps the high-pass of a flat image at exactly zero up to the border;
    # "zero" pads with black, which lights up the border of any non-black image
    conv_padding: str = "replicate"

    def __post_init__(self):
        if self.conv_padding not in _PADDING_MODES:
            raise InvariantError(f"conv_padding must be one of {sorted(_PADDING_MODES)}, got {self.conv_padding!r}")

    @property
    def edge_dim(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


@dataclass
class ColorVector:
    values: np.ndarray  # 9 values in [1, 2], centroids ordered by cluster size
    sizes: tuple[int, int, int]


@dataclass
class EdgeDescriptor:
    values: np.ndarray
    provenance: str = "grid"


def load_image(path) -> np.ndarray:
    """Decode an image file to RGB; alpha is composited over white."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise DataIOError(f"{path}: image has zero width or height")
            rgba = np.asarray(im.convert("RGBA"), dtype=np.int64)
    except DataIOError:
        raise
    except (OSError, ValueError, SyntaxError) as exc:
        raise DataIOError(f"cannot decode image {path}: {exc}") from exc
    rgb, alpha = rgba[..., :3], rgba[..., 3:]
    out = (rgb * alpha + 255 * (255 - alpha) + 127) // 255
    return out.astype(np.uint8)


def save_gray_png(gray: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L").save(path)


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma, rounded to 8 bits."""
    y = np.asarray(img, dtype=np.float64) @ LUMA
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def background_mask(img: np.ndarray, whiteness_threshold: int = 245) -> np.ndarray:
    """Foreground mask; background is near-white and 4-connected to the border.

    Raises NoForegroundError when nothing survives, so callers can decide to
    fall back to the whole image.
    """
    img = np.asarray(img)
    whiteish = img.min(axis=-1) >= whiteness_threshold
    labels, _ = ndimage.label(whiteish)  # default structure is 4-connectivity
    border = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    border_ids = np.unique(border[border > 0])
    background = np.isin(labels, border_ids)
    fg = ~background
    if not fg.any():
        raise NoForegroundError("no foreground pixels after background removal")
    return fg


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sizes: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(points, np.array(centroids)).min(axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centroids.append(points[idx])
    return np.array(centroids, dtype=np.float64)


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from the given centroids.

    Stops once assignments repeat or after ``max_iter`` updates. An empty
    cluster is re-seeded at the point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = np.array(centroids, dtype=np.float64)
    k = len(centroids)
    history = []
    prev = None
    it = 0
    while True:
        d2 = _sq_dists(points, centroids)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), labels].sum()))
        if (prev is not None and np.array_equal(labels, prev)) or it >= max_iter:
            break
        prev = labels
        it += 1
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                centroids[j] = points[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            own = d2[np.arange(len(points)), labels]
            order = np.argsort(-own, kind="stable")
            for j, idx in zip(empty, order):
                centroids[j] = points[idx]
    sizes = np.bincount(labels, minlength=k)
    return KMeansResult(centroids, labels, sizes, history, it)


def kmeans(points: np.ndarray, k: int = N_COLORS, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    rng = np.random.default_rng(seed)
    points = np.asarray(points, dtype=np.float64)
    return lloyd(points, kmeans_pp_init(points, k, rng), max_iter)


def order_centroids(centroids: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Indices sorting clusters by descending size, then by (R, G, B)."""
    keys = [(-int(s), *map(float, c)) for c, s in zip(centroids, sizes)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__))


def extract_colors(img: np.ndarray, mask: np.ndarray | None = None, seed: int = 0,
                   max_iter: int = 100) -> ColorVector:
    """Three dominant RGB colors of the foreground, shifted from [0,1] into [1,2]."""
    img = np.asarray(img)
    if mask is None or not mask.any():
        mask = np.ones(img.shape[:2], dtype=bool)
    points = img[mask].astype(np.float64) / 255.0
    res = kmeans(points, N_COLORS, seed, max_iter)
    order = order_centroids(res.centroids, res.sizes)
    values = (res.centroids[order] + 1.0).reshape(-1)
    return ColorVector(values, tuple(int(s) for s in res.sizes[order]))


def canny(gray: np.ndarray, sigma: float = 1.4, low: float = 50.0, high: float = 150.0) -> np.ndarray:
    """Canny edge map with edge pixels set to 255.

    Gaussian smoothing and Sobel derivatives use nearest-edge padding; the
    one-pixel image border never carries edges.
    """
    g = np.asarray(gray, dtype=np.float64)
    smooth = ndimage.gaussian_filter(g, sigma, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)

    # quantize gradient direction into 0, 45, 90, 135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (((angle + 22.5) // 45.0) % 4).astype(int)
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]  # (drow, dcol) along the gradient
    pad = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dr, dc) in enumerate(offsets):
        fwd = pad[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        bwd = pad[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        sel = sector == s
        keep |= sel & (mag > bwd) & (mag >= fwd)
    keep &= mag > 0
    keep[0, :] = keep[-1, :] = keep[:, 0] = keep[:, -1] = False
    nms = np.where(keep, mag, 0.0)

    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    connected = np.zeros(n + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return np.where(connected[labels], 255, 0).astype(np.uint8)


def highpass(gray: np.ndarray, padding: str = "replicate") -> np.ndarray:
    """Signed 3x3 high-pass response; borders padded by edge replication or with zeros."""
    g = np.asarray(gray, dtype=np.int64)
    return ndimage.correlate(g, HIGHPASS_KERNEL, mode=_PADDING_MODES[padding], cval=0)


def edge_image(img: np.ndarray, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Inverted sum of the Canny map and the high-pass response, as uint8."""
    img = np.asarray(img)
    gray = to_gray(img) if img.ndim == 3 else np.asarray(img, dtype=np.uint8)
    e1 = canny(gray, config.canny_sigma, config.canny_low, config.canny_high).astype(np.int64)
    e2 = highpass(gray, config.conv_padding)
    return (255 - np.clip(e1 + e2, 0, 255)).astype(np.uint8)


def _cell_bounds(n: int, g: int) -> list[tuple[int, int]]:
    step = n // g
    return [(i * step, n if i == g - 1 else (i + 1) * step) for i in range(g)]


def embed_edge_image(edge: np.ndarray, grid: int = 16) -> EdgeDescriptor:
    """Grid descriptor: per cell, ``1 - mean/255`` so denser edges give larger values.

    Leftover rows/columns go to the last row/column of cells.
    """
    edge = np.asarray(edge, dtype=np.float64)
    if grid < 1:
        raise DimensionError(f"grid must be >= 1, got {grid}")
    h, w = edge.shape
    if h < grid or w < grid:
        raise DimensionError(f"edge image {w}x{h} smaller than {grid}x{grid} grid")
    out = np.empty(grid * grid)
    k = 0
    for r0, r1 in _cell_bounds(h, grid):
        for c0, c1 in _cell_bounds(w, grid):
            out[k] = 1.0 - edge[r0:r1, c0:c1].mean() / 255.0
            k += 1
    return EdgeDescriptor(out, "grid")


def ingest_external_embedding(path, item_id: str, dim: int, part: str | None = None) -> EdgeDescriptor:
    """Load one externally computed embedding.

    Accepts CSV rows ``item_id, v_1..v_d`` or a JSON array of objects
    ``{"item_id", "vector"[, "part"]}``.
    """
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"embedding file not found: {path}")
    vec = None
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text())
        for row in rows:
            if str(row["item_id"]) == item_id:
                if part is not None and row.get("part", part) != part:
                    raise DimensionError(f"item {item_id} is declared for part {row['part']}, not {part}")
                vec = row["vector"]
                break
    else:
        with path.open(newline="") as fh:
            for row in csv.reader(fh):
                if row and row[0] == item_id:
                    vec = row[1:]
                    break
    if vec is None:
        raise DataIOError(f"item id {item_id!r} not found in {path}")
    values = np.asarray([float(v) for v in vec], dtype=np.float64)
    if values.shape != (dim,):
        raise DimensionError(f"embedding for {item_id} has {values.size} values, model expects {dim}")
    if not np.any(values):
        warnings.warn(f"embedding for {item_id} is all zeros and is indistinguishable from an absent item")
    return EdgeDescriptor(values, "external")


def item_features(img: np.ndarray, config: FeatureConfig = FeatureConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Raw (edge descriptor, color vector) pair for one RGB item image."""
    try:
        mask = background_mask(img, config.whiteness_threshold)
    except NoForegroundError:
        mask = None
    colors = extract_colors(img, mask, config.kmeans_seed, config.kmeans_max_iter)
    edge = embed_edge_image(edge_image(img, config), config.grid)
    return edge.values, colors.values
