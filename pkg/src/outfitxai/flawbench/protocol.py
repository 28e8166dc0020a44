"""Flaw-detection benchmark: base selection, mod samples, detection accuracy, chance rates.

From the highest-scoring test outfits, every (present part, replacement type)
gets 500 candidate replacements; the 10 lowest-scoring ones are kept as mod
samples. IFIVs must then point at the replaced part (and, for feature-typed
samples, the replaced feature).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..dataset import Dataset
from ..errors import InvariantError
from ..grader import GraderModel, VariantScorer, scores_from_logits
from ..grader import score as grader_score
from ..ifiv import DEFAULT_TARGET, ifiv_batch, predict_batch
from ..outfit import FEATURES, PARTS, ItemFeatures, Outfit, stack_outfits

TYPES = ("item", "edge_image", "colors")
TYPE_ALIASES = {"item": "item", "edge": "edge_image", "edge_image": "edge_image", "colors": "colors",
                "color": "colors"}
N_CANDIDATES = 500
N_KEEP = 10


def parse_types(spec: str | Sequence[str]) -> tuple[str, ...]:
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    try:
        return tuple(TYPE_ALIASES[n.strip()] for n in names if n.strip())
    except KeyError as exc:
        raise InvariantError(f"unknown replacement type {exc.args[0]!r}; choose from item, edge, colors") from None


# --------------------------------------------------------------------------- base selection

@dataclass
class BaseSelection:
    outfits: list[Outfit]
    scores: np.ndarray
    part_counts: dict[str, int]
    size_counts: dict[int, int]

    @property
    def mean_score(self) -> float:
        return float(self.scores.mean()) if len(self.scores) else float("nan")


def sample_statistics(outfits: Sequence[Outfit], weight: Sequence[int] | None = None):
    """Counts per outfit part and per number of items (the base-sample table schema)."""
    weight = [1] * len(outfits) if weight is None else weight
    parts = {p: 0 for p in PARTS}
    sizes = {n: 0 for n in range(1, len(PARTS) + 1)}
    for o, w in zip(outfits, weight):
        for p in o.items:
            parts[p] += w
        sizes[o.n_items] += w
    return parts, sizes


def select_base(model: GraderModel, outfits: Sequence[Outfit], n: int, T: float | None = None) -> BaseSelection:
    """Top-``n`` outfits by score, descending; ties broken by outfit id."""
    if n > len(outfits):
        raise InvariantError(f"asked for {n} base outfits but the pool has {len(outfits)}")
    scores = np.asarray(grader_score(model, list(outfits), T)) if outfits else np.zeros(0)
    order = sorted(range(len(outfits)), key=lambda k: (-scores[k], outfits[k].outfit_id))[:n]
    chosen = [outfits[k] for k in order]
    parts, sizes = sample_statistics(chosen)
    return BaseSelection(chosen, scores[order], parts, sizes)


# --------------------------------------------------------------------------- mod samples

@dataclass
class ModSample:
    base_id: str
    part: str
    mtype: str
    edge: np.ndarray
    colors: np.ndarray
    source_item: str | None
    score: float
    rank: int
    candidate_index: int
    n_items: int

    def outfit(self, base: Outfit) -> Outfit:
        return base.replaced(self.part, edge=self.edge, colors=self.colors, item_id=self.source_item or "random")


def make_mods(model: GraderModel, base: Outfit, part: str, mtype: str, pool: Sequence[ItemFeatures],
              rng: np.random.Generator, n_candidates: int = N_CANDIDATES, keep: int = N_KEEP,
              T: float | None = None, scorer: VariantScorer | None = None) -> list[ModSample]:
    """Create ``n_candidates`` replacements of (part, type) and keep the ``keep`` lowest-scoring.

    Items for ``item``/``edge_image`` are drawn with replacement from ``pool``;
    ``colors`` are 9 values uniform on [1, 2]. Ties keep the lower candidate index.
    A ``scorer`` built for ``base`` can be reused across calls.
    """
    T = model.temperature if T is None else T
    if part not in base.items:
        raise InvariantError(f"part {part} is absent from base outfit {base.outfit_id}")
    if mtype not in TYPES:
        raise InvariantError(f"unknown replacement type {mtype!r}")
    own = base.items[part]
    scorer = VariantScorer(model, base) if scorer is None else scorer
    if mtype == "colors":
        colors = rng.uniform(1.0, 2.0, size=(n_candidates, own.colors.size))
        edges = np.broadcast_to(own.edge, (n_candidates, own.edge.size))
        s = scorer.logits(part, None, colors)
        sources = [None] * n_candidates
    else:
        if len(pool) < 1:
            raise InvariantError(f"no same-part alternatives for part {part}")
        pick = rng.integers(len(pool), size=n_candidates)
        uniq, inverse = np.unique(pick, return_inverse=True)
        u_edges = np.stack([pool[k].edge for k in uniq])
        if mtype == "item":
            u_colors = np.stack([pool[k].colors for k in uniq])
            s = scorer.logits(part, u_edges, u_colors)[inverse]
        else:
            u_colors = np.broadcast_to(own.colors, (len(uniq), own.colors.size))
            s = scorer.logits(part, u_edges, None)[inverse]
        edges, colors = u_edges[inverse], u_colors[inverse]
        sources = [pool[k].item_id for k in pick]
    scores = scores_from_logits(s, T)
    order = np.argsort(scores, kind="stable")[:keep]
    return [ModSample(base.outfit_id, part, mtype, np.array(edges[k]), np.array(colors[k]), sources[k],
                      float(scores[k]), rank, int(k), base.n_items)
            for rank, k in enumerate(order)]


def _rng_for(seed: int, base_index: int, part: str, mtype: str) -> np.random.Generator:
    ss = np.random.SeedSequence([seed, base_index, PARTS.index(part), TYPES.index(mtype)])
    return np.random.default_rng(ss)


@dataclass
class ProtocolRun:
    bases: BaseSelection
    mods: list[ModSample]
    types: tuple[str, ...]

    def base_lookup(self) -> dict[str, Outfit]:
        return {o.outfit_id: o for o in self.bases.outfits}


def build_mod_samples(model: GraderModel, dataset: Dataset, n_bases: int = 100, types=TYPES, seed: int = 0,
                      n_candidates: int = N_CANDIDATES, keep: int = N_KEEP, T: float | None = None,
                      pool_split: str = "test") -> ProtocolRun:
    """Base selection followed by mod-sample creation for every present part and type."""
    types = parse_types(types)
    tests = dataset.split("test")
    bases = select_base(model, tests, n_bases, T)
    pools = {p: [dataset.items[i] for i in dataset.pool(p, pool_split)] for p in PARTS}
    mods = []
    slot_weights: dict = {}
    for b, base in enumerate(bases.outfits):
        scorer = VariantScorer(model, base, slot_weights)
        for part in base.present_parts:
            own_id = base.items[part].item_id
            pool = [it for it in pools[part] if it.item_id != own_id]
            for mtype in types:
                mods.extend(make_mods(model, base, part, mtype, pool, _rng_for(seed, b, part, mtype),
                                      n_candidates, keep, T, scorer))
    return ProtocolRun(bases, mods, types)


LEDGER_COLUMNS = ["base_id", "part", "type", "score", "rank", "candidate_index", "n_items", "source_item"]


def write_ledger(mods: Sequence[ModSample], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for m in mods:
            w.writerow([m.base_id, m.part, m.mtype, repr(m.score), m.rank, m.candidate_index, m.n_items,
                        m.source_item or ""])


# --------------------------------------------------------------------------- chance rates

@dataclass
class ChanceRates:
    item: float     # percent
    feature: float  # percent
    n_samples: int


def chance_rates(n_items: Sequence[int]) -> ChanceRates:
    """Uniform-guess accuracy: mean of 1/n (item-wise) and 1/(2n) (feature-wise), in percent."""
    n = np.asarray(n_items, dtype=np.float64)
    if n.size == 0:
        return ChanceRates(0.0, 0.0, 0)
    if np.any(n < 1):
        raise InvariantError("item counts must be positive")
    return ChanceRates(float(100.0 * np.mean(1.0 / n)), float(100.0 * np.mean(1.0 / (2.0 * n))), int(n.size))


def chance_from_counts(counts: dict[int, int]) -> ChanceRates:
    """Chance rates from a {number of items: number of samples} histogram."""
    total = sum(counts.values())
    if total == 0:
        return ChanceRates(0.0, 0.0, 0)
    item = sum(c / n for n, c in counts.items()) / total
    return ChanceRates(100.0 * item, 50.0 * item, total)


# --------------------------------------------------------------------------- detection

@dataclass
class Cell:
    correct: int = 0
    count: int = 0

    @property
    def accuracy(self) -> float | None:
        return 100.0 * self.correct / self.count if self.count else None


@dataclass
class DetectionTable:
    types: tuple[str, ...]
    overall: dict[str, Cell]
    by_n: dict[int, dict[str, Cell]]
    by_part: dict[str, dict[str, Cell]]
    chance: ChanceRates
    chance_by_n: dict[int, ChanceRates]
    chance_by_part: dict[str, ChanceRates]
    settings: dict = field(default_factory=dict)

    def accuracy(self, mtype: str) -> float | None:
        return self.overall[mtype].accuracy

    def chance_for(self, mtype: str) -> float:
        return self.chance.item if mtype == "item" else self.chance.feature

    def to_dict(self) -> dict:
        cell = lambda c: {"accuracy": c.accuracy, "correct": c.correct, "count": c.count}
        rate = lambda r: {"item": r.item, "feature": r.feature, "samples": r.n_samples}
        return {
            "settings": self.settings,
            "overall": {t: cell(c) for t, c in self.overall.items()},
            "chance": rate(self.chance),
            "by_n_items": {str(n): {"chance": rate(self.chance_by_n[n]), **{t: cell(c) for t, c in row.items()}}
                           for n, row in self.by_n.items()},
            "by_part": {p: {"chance": rate(self.chance_by_part[p]), **{t: cell(c) for t, c in row.items()}}
                        for p, row in self.by_part.items()},
        }


def evaluate_detection(model: GraderModel, run: ProtocolRun, target: str = DEFAULT_TARGET,
                       feature_granularity: str = "pair", item_rule: str = "pair",
                       T: float | None = None, n_range=range(3, 9)) -> DetectionTable:
    """IFIV flaw prediction for every mod sample, aggregated overall, by item count and by part.

    Feature-typed samples need both part and feature right when
    ``feature_granularity == "pair"``; item-typed samples only need the part.
    """
    if feature_granularity not in ("pair", "item"):
        raise InvariantError(f"unknown granularity {feature_granularity!r}")
    types = run.types
    lookup = run.base_lookup()
    mods = run.mods
    overall = {t: Cell() for t in types}
    by_n = {n: {t: Cell() for t in types} for n in n_range}
    by_part = {p: {t: Cell() for t in types} for p in PARTS}
    if mods:
        outfits = [m.outfit(lookup[m.base_id]) for m in mods]
        batch = stack_outfits(outfits, model.config.edge_dim, model.config.color_dim)
        res = ifiv_batch(model, batch, target, T)
        part_idx, feat_idx = predict_batch(res, item_rule)
        for m, pi, fi in zip(mods, part_idx, feat_idx):
            hit = PARTS[pi] == m.part
            if m.mtype != "item" and feature_granularity == "pair":
                hit = hit and FEATURES[fi] == m.mtype
            for cell in (overall[m.mtype], by_n.setdefault(m.n_items, {t: Cell() for t in types})[m.mtype],
                         by_part[m.part][m.mtype]):
                cell.count += 1
                cell.correct += int(hit)
    n_all = [m.n_items for m in mods]
    chance_by_n = {n: chance_rates([k for k in n_all if k == n]) for n in by_n}
    chance_by_part = {p: chance_rates([m.n_items for m in mods if m.part == p]) for p in PARTS}
    settings = {"target": target, "feature_granularity": feature_granularity, "item_rule": item_rule,
                "temperature": float(model.temperature if T is None else T), "samples": len(mods)}
    return DetectionTable(types, overall, dict(sorted(by_n.items())), by_part, chance_rates(n_all),
                          chance_by_n, chance_by_part, settings)


def _acc(c: Cell) -> str:
    return "" if c.accuracy is None else f"{c.accuracy:.4f}"


def write_detection_tables(table: DetectionTable, out_dir) -> dict[str, Path]:
    """CSV files laid out like the overall / by-item-count / by-part tables, plus a JSON mirror."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {k: out_dir / f"detection_{k}.csv" for k in ("overall", "by_n_items", "by_part")}
    with paths["overall"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "sample_type", "accuracy", "correct", "count"])
        w.writerow(["random", "item-wise", f"{table.chance.item:.4f}", "", table.chance.n_samples])
        w.writerow(["random", "feature-wise", f"{table.chance.feature:.4f}", "", table.chance.n_samples])
        for t in table.types:
            c = table.overall[t]
            w.writerow(["ifiv", f"{t}-wise", _acc(c), c.correct, c.count])
    for key, rows, chance, label in (("by_n_items", table.by_n, table.chance_by_n, "n_items"),
                                     ("by_part", table.by_part, table.chance_by_part, "part")):
        with paths[key].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([label, "chance_feature"] + [f"{t}_accuracy" for t in table.types]
                       + [f"{t}_count" for t in table.types])
            for k, row in rows.items():
                ch = chance[k]
                w.writerow([k, f"{ch.feature:.4f}" if ch.n_samples else ""] + [_acc(row[t]) for t in table.types]
                           + [row[t].count for t in table.types])
    paths["json"] = out_dir / "detection.json"
    paths["json"].write_text(json.dumps(table.to_dict(), indent=1, sort_keys=True))
    return paths
