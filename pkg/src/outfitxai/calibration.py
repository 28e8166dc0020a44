"""Temperature scaling, expected calibration error and reliability-diagram data.

Confidence defaults to the positive-class probability, with empirical
"accuracy" per bin being the fraction of positive outfits. ``mode="max"``
switches to the usual max-probability confidence and fraction-correct.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvariantError
from .mathcore import POS, softmax_probability

N_BINS = 10
GRID = np.round(np.arange(1, 201) * 0.1, 10)  # 0.1, 0.2, ..., 20.0
_INVPHI = (math.sqrt(5) - 1) / 2


def bin_index(conf: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-width bins on [0, 1]; a value on an edge goes to the lower bin, 0 to the first."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.searchsorted(edges, np.asarray(conf, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def _confidence_and_hits(p_pos: np.ndarray, is_positive: np.ndarray, mode: str):
    p_pos = np.asarray(p_pos, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    if p_pos.shape != is_positive.shape:
        raise InvariantError(f"{p_pos.shape[0]} scores but {is_positive.shape[0]} labels")
    if p_pos.size == 0:
        raise InvariantError("calibration metrics need at least one sample")
    if mode == "positive":
        return p_pos, is_positive.astype(np.float64)
    if mode == "max":
        pred_pos = p_pos >= 0.5
        return np.where(pred_pos, p_pos, 1.0 - p_pos), (pred_pos == is_positive).astype(np.float64)
    raise InvariantError(f"unknown confidence mode {mode!r}")


@dataclass
class BinStat:
    lo: float
    hi: float
    avg_conf: float  # nan for an empty bin
    accuracy: float  # nan for an empty bin
    count: int

    @property
    def gap(self) -> float:
        return 0.0 if self.count == 0 else abs(self.avg_conf - self.accuracy)


def reliability_bins(p_pos, is_positive, n_bins: int = N_BINS, mode: str = "positive") -> list[BinStat]:
    conf, hits = _confidence_and_hits(p_pos, is_positive, mode)
    idx = bin_index(conf, n_bins)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    out = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        avg = float(conf[sel].mean()) if n else float("nan")
        acc = float(hits[sel].mean()) if n else float("nan")
        out.append(BinStat(float(edges[b]), float(edges[b + 1]), avg, acc, n))
    return out


def ece(p_pos, is_positive, n_bins: int = N_BINS, mode: str = "positive") -> float:
    """Count-weighted mean of per-bin |average confidence - empirical accuracy|."""
    bins = reliability_bins(p_pos, is_positive, n_bins, mode)
    total = sum(b.count for b in bins)
    return float(sum(b.count * b.gap for b in bins) / total)


def nll(logits: np.ndarray, is_positive, T: float) -> float:
    p = softmax_probability(logits, T)
    y = np.where(np.asarray(is_positive, dtype=bool), POS, 1 - POS)
    return float(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-12)).mean())


def _objective(logits, is_positive, objective: str, mode: str, n_bins: int):
    if objective == "ece":
        return lambda T: ece(softmax_probability(logits, T)[:, POS], is_positive, n_bins, mode)
    if objective == "nll":
        return lambda T: nll(logits, is_positive, T)
    raise InvariantError(f"unknown calibration objective {objective!r}")


def golden_section(f, lo: float, hi: float, tol: float = 1e-3) -> float:
    a, b = lo, hi
    c, d = b - _INVPHI * (b - a), a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (a + b) / 2


@dataclass
class TemperatureFit:
    temperature: float
    before: float  # objective at T = 1
    after: float
    objective: str


def fit_temperature(logits: np.ndarray, is_positive, objective: str = "ece", mode: str = "positive",
                    n_bins: int = N_BINS, grid: Sequence[float] = GRID, tol: float = 1e-3) -> TemperatureFit:
    """Coarse grid search over T, then golden-section refinement inside the best cell.

    T = 1 is always a candidate, so the objective can never get worse than
    the uncalibrated model's.
    """
    logits = np.asarray(logits, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    if logits.ndim != 2 or logits.shape[1] != 2 or len(logits) != len(is_positive):
        raise InvariantError(f"expected (N, 2) logits matching {len(is_positive)} labels, got {logits.shape}")
    if len(is_positive) == 0 or is_positive.all() or not is_positive.any():
        raise InvariantError("validation set must be non-empty and contain both labels")
    f = _objective(logits, is_positive, objective, mode, n_bins)
    grid = np.asarray(grid, dtype=np.float64)
    values = np.array([f(T) for T in grid])
    k = int(np.argmin(values))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    refined = golden_section(f, lo, hi, tol)
    candidates = [1.0, float(grid[k]), refined]
    scores = [f(T) for T in candidates]
    best = int(np.argmin(scores))
    return TemperatureFit(candidates[best], scores[0], scores[best], objective)


@dataclass
class CalibrationReport:
    temperature: float
    ece_before: float
    ece_after: float
    bins: list[BinStat]
    score_hist: list[tuple[float, float, int, int]] = field(default_factory=list)  # (lo, hi, pos, neg)
    n_samples: int = 0
    mode: str = "positive"


def score_histogram(scores, is_positive, n_bins: int = N_BINS) -> list[tuple[float, float, int, int]]:
    """Counts of positive and negative outfits per equal-width score bin on [0, 100]."""
    scores = np.asarray(scores, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    idx = bin_index(scores / 100.0, n_bins)
    width = 100.0 / n_bins
    return [(b * width, (b + 1) * width, int(np.sum((idx == b) & is_positive)),
             int(np.sum((idx == b) & ~is_positive))) for b in range(n_bins)]


def reliability_from_logits(logits: np.ndarray, is_positive, T: float, n_bins: int = N_BINS,
                            mode: str = "positive") -> CalibrationReport:
    logits = np.asarray(logits, dtype=np.float64)
    p_after = softmax_probability(logits, T)[:, POS]
    p_before = softmax_probability(logits, 1.0)[:, POS]
    return CalibrationReport(
        temperature=float(T),
        ece_before=ece(p_before, is_positive, n_bins, mode),
        ece_after=ece(p_after, is_positive, n_bins, mode),
        bins=reliability_bins(p_after, is_positive, n_bins, mode),
        score_hist=score_histogram(100.0 * p_after, is_positive, n_bins),
        n_samples=len(p_after),
        mode=mode,
    )


def reliability_data(model, outfits, is_positive, T: float | None = None, mode: str = "positive") -> CalibrationReport:
    from .grader import logits as grader_logits

    T = model.temperature if T is None else T
    return reliability_from_logits(grader_logits(model, outfits), is_positive, T, mode=mode)


def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_reliability_csv(report: CalibrationReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "avg_conf", "accuracy", "count"])
        for b in report.bins:
            w.writerow([_fmt(b.lo), _fmt(b.hi), _fmt(b.avg_conf), _fmt(b.accuracy), b.count])


def write_histogram_csv(report: CalibrationReport, path) -> None:
    """Rows ``score_bin, pos_count, neg_count``; ``score_bin`` is the bin's lower edge in percent."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score_bin", "pos_count", "neg_count"])
        for lo, _hi, pos, neg in report.score_hist:
            w.writerow([_fmt(lo), pos, neg])


def read_reliability_csv(path) -> list[BinStat]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            nan = float("nan")
            out.append(BinStat(float(row["bin_lo"]), float(row["bin_hi"]),
                               float(row["avg_conf"]) if row["avg_conf"] else nan,
                               float(row["accuracy"]) if row["accuracy"] else nan, int(row["count"])))
    return out
