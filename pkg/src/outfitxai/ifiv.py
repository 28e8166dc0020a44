"""Item-Feature Influence Values.

For a target logit ``s_c`` the influence of the encoding ``x_{i,f}`` of
feature ``f`` of the item at part ``i`` is ``sum_k x_{i,f,k} * d(s_c/T)/dx_{i,f,k}``;
an item's influence is the sum over its two features. The most negative
pair is reported as the flaw.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .grader import LABELS, GraderModel, _as_batch, forward
from .mathcore import POS, Tape, softmax_probability
from .outfit import FEATURES, PARTS, Outfit

DEFAULT_TARGET = "pos"


@dataclass
class IFIVBatch:
    pairs: np.ndarray   # (B, 8, 2) IFIV_{i,f}; zero where the part is absent
    mask: np.ndarray    # (B, 8)
    logits: np.ndarray  # (B, 2)
    target: str
    temperature: float

    @property
    def items(self) -> np.ndarray:
        return self.pairs[..., 0] + self.pairs[..., 1]


def _check_args(target: str, T: float) -> int:
    if target not in LABELS:
        raise InvariantError(f"target class must be 'pos' or 'neg', got {target!r}")
    if not T > 0:
        raise InvariantError(f"temperature must be positive, got {T}")
    return LABELS[target]


def ifiv_batch(model: GraderModel, outfits, target: str = DEFAULT_TARGET, T: float | None = None,
               chunk: int = 256) -> IFIVBatch:
    """IFIVs for many outfits; one backward pass per chunk (samples are independent in eval mode)."""
    T = model.temperature if T is None else T
    c = _check_args(target, T)
    batch = _as_batch(model, outfits)
    n = len(batch)
    pairs = np.zeros((n, len(PARTS), len(FEATURES)))
    logits = np.zeros((n, 2))
    for lo in range(0, n, chunk):
        sub = batch.subset(slice(lo, lo + chunk))
        tape = Tape()
        trace = forward(model, sub, tape, watch_encodings=True)
        seed = np.zeros_like(trace.logits.data)
        seed[:, c] = 1.0 / T
        tape.backward(trace.logits, seed)
        for i, part in enumerate(PARTS):
            for j, feat in enumerate(FEATURES):
                x = trace.encodings[(part, feat)]
                pairs[lo:lo + len(sub), i, j] = (x.data * tape.grad(x)).sum(axis=1)
        logits[lo:lo + len(sub)] = trace.logits.data
    pairs *= batch.mask[..., None]
    return IFIVBatch(pairs, batch.mask.copy(), logits, target, float(T))


@dataclass
class IFIVReport:
    target: str
    temperature: float
    logits: tuple[float, float]
    pairs: dict[tuple[str, str], float]
    items: dict[str, float]
    ranking: list[tuple[str, str, float]]

    @property
    def prediction(self) -> tuple[str, str]:
        part, feat, _ = self.ranking[0]
        return part, feat

    @property
    def score(self) -> float:
        return float(100.0 * softmax_probability(np.array(self.logits), self.temperature)[POS])

    def to_dict(self) -> dict:
        part, feat = self.prediction
        return {
            "target_class": self.target,
            "temperature": self.temperature,
            "logits": {"pos": self.logits[0], "neg": self.logits[1]},
            "score": self.score,
            "pairs": [{"part": p, "feature": f, "ifiv": v} for (p, f), v in self.pairs.items()],
            "items": dict(self.items),
            "ranking": [{"part": p, "feature": f, "ifiv": v} for p, f, v in self.ranking],
            "prediction": {"part": part, "feature": feat},
        }


def _rank(pairs: dict[tuple[str, str], float]) -> list[tuple[str, str, float]]:
    key = lambda kv: (kv[1], PARTS.index(kv[0][0]), FEATURES.index(kv[0][1]))
    return [(p, f, v) for (p, f), v in sorted(pairs.items(), key=key)]


def report_from_batch(b: IFIVBatch, k: int) -> IFIVReport:
    pairs, items = {}, {}
    for i, part in enumerate(PARTS):
        if not b.mask[k, i]:
            continue
        for j, feat in enumerate(FEATURES):
            pairs[(part, feat)] = float(b.pairs[k, i, j])
        items[part] = float(b.pairs[k, i, 0] + b.pairs[k, i, 1])
    return IFIVReport(b.target, b.temperature, (float(b.logits[k, 0]), float(b.logits[k, 1])),
                      pairs, items, _rank(pairs))


def compute_ifiv(model: GraderModel, outfit: Outfit, target: str = DEFAULT_TARGET,
                 T: float | None = None) -> IFIVReport:
    return report_from_batch(ifiv_batch(model, outfit, target, T), 0)


def detect_flaw(report: IFIVReport, granularity: str = "pair", item_rule: str = "pair"):
    """Predicted flaw: ``(part, feature)`` in pair mode, ``part`` in item mode.

    In item mode the default takes the part of the winning pair; ``item_rule="sum"``
    uses the most negative per-item IFIV instead.
    """
    if not report.ranking:
        raise InvariantError("empty IFIV report")
    if granularity == "pair":
        return report.prediction
    if granularity != "item":
        raise InvariantError(f"unknown granularity {granularity!r}")
    if item_rule == "pair":
        return report.prediction[0]
    if item_rule == "sum":
        return min(report.items, key=lambda p: (report.items[p], PARTS.index(p)))
    raise InvariantError(f"unknown item rule {item_rule!r}")


def predict_batch(b: IFIVBatch, item_rule: str = "pair") -> tuple[np.ndarray, np.ndarray]:
    """Vectorized detect_flaw: (part index, feature index) per sample, same tie-break."""
    flat = np.where(np.repeat(b.mask, 2, axis=1) > 0, b.pairs.reshape(len(b.pairs), -1), np.inf)
    win = flat.argmin(axis=1)
    part, feat = win // 2, win % 2
    if item_rule == "sum":
        part = np.where(b.mask > 0, b.items, np.inf).argmin(axis=1)
    elif item_rule != "pair":
        raise InvariantError(f"unknown item rule {item_rule!r}")
    return part, feat


CSV_COLUMNS = ["outfit_id", "target", "pred_part", "pred_feature"] + [
    f"ifiv_{p}_{f}" for p in PARTS for f in FEATURES]


def csv_row(outfit_id: str, report: IFIVReport) -> list:
    part, feat = report.prediction
    vals = [repr(report.pairs[(p, f)]) if (p, f) in report.pairs else "" for p in PARTS for f in FEATURES]
    return [outfit_id, report.target, part, feat] + vals


def reports_to_csv(rows: list[tuple[str, IFIVReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for oid, rep in rows:
        w.writerow(csv_row(oid, rep))
    return buf.getvalue()
