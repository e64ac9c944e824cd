"""Region-quality metrics: threshold IoU curves, NRA, EPG, Hit Rate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError

DEFAULT_GRID = tuple(range(1, 101))


@dataclass
class ThresholdCurve:
    thresholds: list[float]  # percent
    ious: list[float]
    auc: float


@dataclass
class RegionEvalResult:
    epg: float
    auc: float
    auc_high: float
    auc_low: float
    nra: float
    hit: bool
    layer_index: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check(region, mask):
    region = np.asarray(region, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if region.shape != mask.shape:
        raise ValueError(f"region {region.shape} and mask {mask.shape} differ in shape")
    if not mask.any():
        raise UndefinedMetricError("mask is empty")
    return region, mask


def _selection_count(n: float, total: int) -> int:
    if not 0 < n <= 100:
        raise ValueError(f"threshold percent {n} outside (0, 100]")
    # guard against 7/100*100 -> 7.000000000000001
    return min(total, math.ceil(n * total / 100.0 - 1e-9))


def _ranked_mask(region, mask):
    # stable sort of negated values: ties keep row-major order
    order = np.argsort(-region.ravel(), kind="stable")
    return mask.ravel()[order]


def iou_at_threshold(region, mask, n: float) -> float:
    region, mask = _check(region, mask)
    k = _selection_count(n, region.size)
    inter = int(_ranked_mask(region, mask)[:k].sum())
    return inter / (k + int(mask.sum()) - inter)


def _integrate(x: np.ndarray, y: np.ndarray) -> float:
    """Trapezoid over [0, 1].

    An empty selection has IoU 0, so the curve starts at the origin; past the
    last grid point the final value is held.
    """
    xs = np.concatenate([[0.0], x, [1.0]])
    ys = np.concatenate([[0.0], y, [y[-1]]])
    return float(np.trapezoid(ys, xs))


def _grid(grid) -> np.ndarray:
    g = np.asarray(list(grid), dtype=np.float64)
    if g.size == 0 or np.any(np.diff(g) <= 0) or g[0] <= 0 or g[-1] > 100:
        raise ValueError("threshold grid must be strictly increasing within (0, 100]")
    return g


def threshold_curve(region, mask, grid: Sequence[float] = DEFAULT_GRID) -> ThresholdCurve:
    region, mask = _check(region, mask)
    g = _grid(grid)
    hits = np.cumsum(_ranked_mask(region, mask))
    m = int(mask.sum())
    ious = []
    for n in g:
        k = _selection_count(n, region.size)
        inter = int(hits[k - 1])
        ious.append(inter / (k + m - inter))
    return ThresholdCurve(g.tolist(), ious, _integrate(g / 100.0, np.asarray(ious)))


def random_iou(a, m):
    """Expected-overlap IoU of a uniformly random selection of fraction ``a``."""
    a = np.asarray(a, dtype=np.float64)
    return a * m / (a + m - a * m)


def reference_aucs(mask_fraction: float, grid: Sequence[float] = DEFAULT_GRID) -> tuple[float, float]:
    """``(auc_high, auc_low)`` for a mask covering ``mask_fraction`` of the image."""
    m = float(mask_fraction)
    if not 0 < m <= 1:
        raise UndefinedMetricError(f"mask fraction {m} outside (0, 1]")
    auc_high = m / 2 - m * math.log(m)
    x = _grid(grid) / 100.0
    return auc_high, _integrate(x, random_iou(x, m))


def nra(auc: float, auc_high: float, auc_low: float) -> float:
    if not auc_high > auc_low:
        raise UndefinedMetricError(f"auc_high {auc_high} does not exceed auc_low {auc_low}")
    return (auc - auc_low) / (auc_high - auc_low)


def epg(region, mask) -> float:
    region, mask = _check(region, mask)
    if np.any(region < 0):
        raise ValueError("region map must be nonnegative")
    total = region.sum()
    if total <= 0:
        raise UndefinedMetricError("region map is all zero")
    return float(region[mask].sum() / total)


def evaluate_region(region, mask, grid: Sequence[float] = DEFAULT_GRID, layer_index=None) -> RegionEvalResult:
    region, mask = _check(region, mask)
    e = epg(region, mask)
    curve = threshold_curve(region, mask, grid)
    high, low = reference_aucs(mask.mean(), grid)
    value = nra(curve.auc, high, low)
    return RegionEvalResult(e, curve.auc, high, low, value, value > 0.5, layer_index)


def failed_result(mask, grid: Sequence[float] = DEFAULT_GRID, layer_index=None) -> RegionEvalResult:
    """Result recorded for a sample whose map could not be scored (counts as a miss)."""
    high, low = reference_aucs(np.asarray(mask).astype(bool).mean(), grid)
    return RegionEvalResult(0.0, low, high, low, 0.0, False, layer_index)


def hit_rate(results: Sequence[RegionEvalResult]) -> float:
    if not results:
        raise ValueError("no results")
    return sum(r.nra > 0.5 for r in results) / len(results)


def evaluate_candidates(candidates, mask, mode: str = "best_nra_of_top_k", k: int = 4,
                        grid: Sequence[float] = DEFAULT_GRID) -> RegionEvalResult:
    """Score region candidates (objects with ``association_score`` and a map).

    ``best_nra_of_top_k`` keeps the ``k`` best-associated candidates and reports
    the one with the highest NRA; ``top1_by_association`` scores only the best.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        raise ValueError("no candidates")
    # stable: equal association scores keep candidate (layer) order
    ranked = sorted(candidates, key=lambda c: -c.association_score)
    if mode == "top1_by_association":
        ranked = ranked[:1]
    elif mode == "best_nra_of_top_k":
        ranked = ranked[:k]
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    best = None
    for c in ranked:
        region = c.upsampled if getattr(c, "upsampled", None) is not None else c.map
        region = np.asarray(region)
        try:
            r = evaluate_region(region, mask, grid, getattr(c, "layer_index", None))
        except UndefinedMetricError:
            if not np.asarray(mask).any():
                raise
            r = failed_result(mask, grid, getattr(c, "layer_index", None))
        if best is None or r.nra > best.nra:
            best = r
    return best


def category_average(values_by_category: dict[str, Sequence[float]]) -> tuple[dict[str, float], float]:
    """Per-category means and the mean of those means."""
    means = {c: float(np.mean(v)) for c, v in values_by_category.items() if len(v)}
    overall = float(np.mean(list(means.values()))) if means else float("nan")
    return means, overall
