"""Segmentation and inpainting metrics, clinical measurements, and Wilcoxon ranking.

Undefined results (empty masks, zero references, all-zero differences) are
reported as ``None`` rather than NaN or 0 so that callers must handle them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensorcore import ShapeError

EXACT_MAX_N = 25


class IncompleteGridError(LookupError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing grid cells: " + ", ".join(map(str, self.missing)))


def dice_coeff(pred, gt) -> float:
    """2|P & G| / (|P| + |G|) for binary masks; 1.0 when both are empty."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ShapeError(f"dice: shapes {p.shape} and {g.shape} differ")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def per_class_dice(probs, gt, threshold: float = 0.5) -> np.ndarray:
    """Dice per class for one H x W x C probability map against binary masks."""
    probs = np.asarray(probs)
    gt = np.asarray(gt)
    if probs.shape != gt.shape:
        raise ShapeError(f"dice: shapes {probs.shape} and {gt.shape} differ")
    pred = probs > threshold
    return np.array([dice_coeff(pred[..., c], gt[..., c] > 0.5) for c in range(probs.shape[-1])])


def inpaint_l2(pred, gt) -> float:
    """Squared error of one H x W x C image summed over pixels, averaged over channels."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"inpaint_l2: shapes {p.shape} and {g.shape} differ")
    if p.ndim == 2:
        p, g = p[..., None], g[..., None]
    return float(((p - g) ** 2).sum() / p.shape[-1])


def tissue_area(mask, pixel_area: float = 1.0) -> float:
    return float(np.count_nonzero(mask)) * pixel_area


def tissue_volume(masks, voxel_volume: float = 1.0) -> float:
    return float(np.count_nonzero(masks)) * voxel_volume


def mean_intensity(raw, mask) -> Optional[float]:
    raw = np.asarray(raw, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if raw.shape != m.shape:
        raise ShapeError(f"mean_intensity: map {raw.shape} vs mask {m.shape}")
    if not m.any():
        return None
    return float(raw[m].mean())


def percent_error(pred_value, gt_value) -> Optional[float]:
    if pred_value is None or gt_value is None or gt_value == 0:
        return None
    return 100.0 * abs(pred_value - gt_value) / abs(gt_value)


# --------------------------------------------------------------------------
# Wilcoxon signed-rank, one-sided (H1: a > b)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_statistic(a, b):
    """(W+, ranks) over the non-zero paired differences, or (None, None) if there are none."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        return None, None
    ranks = _midranks(np.abs(d))
    return float(ranks[d > 0].sum()), ranks


def _exact_upper_tail(w_plus: float, ranks: np.ndarray) -> float:
    # distribution of the positive-rank sum over all 2^n sign patterns, counted
    # with doubled (integer) mid-ranks
    r2 = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in r2:
        counts[r:top + r + 1] = counts[r:top + r + 1] + counts[:top + 1]
        top += r
    w2 = int(round(2 * w_plus))
    tail = int(sum(counts[w2:]))
    return tail / 2 ** len(ranks)


def _normal_upper_tail(w_plus: float, ranks: np.ndarray) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    if var <= 0:
        return 1.0 if w_plus <= mean else 0.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_one_sided(a, b, method: str = "auto") -> Optional[float]:
    """p-value of the one-sided signed-rank test of H1: ``a`` tends to exceed ``b``.

    Zero differences are dropped and tied magnitudes get mid-ranks.  ``auto``
    uses the exact null distribution up to 25 non-zero pairs and the normal
    approximation (tie and continuity corrected) above.  Returns ``None`` when
    every difference is zero.
    """
    w_plus, ranks = signed_rank_statistic(a, b)
    if w_plus is None:
        return None
    n = len(ranks)
    if n < 5:
        raise ValueError(f"need at least 5 non-zero paired differences, got {n}")
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        return _exact_upper_tail(w_plus, ranks)
    if method == "approx":
        return _normal_upper_tail(w_plus, ranks)
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# strategy ranking


@dataclass
class StrategyRanking:
    dataset: str
    rows: list = field(default_factory=list)   # (strategy tuple, p or None), ascending p

    @property
    def order(self) -> list:
        return [s for s, _ in self.rows]


@dataclass
class RankingResult:
    rankings: dict          # dataset -> StrategyRanking
    optimal: Optional[tuple]
    candidates: list        # strategies in every dataset's top-k
    no_intersection: bool


def _rank_key(row):
    strategy, p = row
    return (p is None, p if p is not None else 0.0, strategy)


def rank_strategies(ssl: dict, supervised: dict, strategies: Optional[Sequence] = None,
                    top_k: int = 3) -> RankingResult:
    """Rank pretraining strategies per dataset by one-sided Wilcoxon p-value.

    ``ssl[dataset][strategy]`` and ``supervised[dataset]`` are paired score
    vectors (pooled over label fractions).  The optimal strategy is the one in
    every dataset's top ``top_k`` with the lowest rank sum, ties broken by the
    strategy tuple.
    """
    datasets = sorted(supervised)
    if strategies is None:
        strategies = sorted({s for d in datasets for s in ssl.get(d, {})})
    strategies = [tuple(s) for s in strategies]
    missing = [(d, s) for d in datasets for s in strategies if s not in ssl.get(d, {})]
    if missing:
        raise IncompleteGridError(missing)
    rankings = {}
    for d in datasets:
        rows = [(s, wilcoxon_one_sided(ssl[d][s], supervised[d])) for s in strategies]
        rows.sort(key=_rank_key)
        rankings[d] = StrategyRanking(d, rows)
    tops = [set(rankings[d].order[:top_k]) for d in datasets]
    common = set.intersection(*tops) if tops else set()
    if not common:
        return RankingResult(rankings, None, [], True)
    def rank_sum(s):
        return sum(rankings[d].order.index(s) for d in datasets)
    cands = sorted(common, key=lambda s: (rank_sum(s), s))
    return RankingResult(rankings, cands[0], cands, False)
