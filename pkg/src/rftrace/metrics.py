"""Segmentation quality metrics over (instance, click) mask collections.

The headline aggregate is a ratio of sums: total intersection area over
total union area across every (instance, click) record.  This is NOT the
mean of per-record IoUs; the two disagree whenever record unions differ in
size, so the mean is also reported as a secondary diagnostic.  The tap
accuracy metric divides passing clicks by total ground-truth area, which
treats instances of different sizes equally under the exhaustive protocol
where every ground-truth pixel is used as a click once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

BinaryMask = np.ndarray


@dataclass(frozen=True)
class EvalRecord:
    instance_id: str
    click_index: int
    pred: BinaryMask
    gt: BinaryMask
    category: str | None = None
    band: int | None = None

    def __post_init__(self):
        if self.pred.shape != self.gt.shape:
            raise ShapeError(
                f"pred {self.pred.shape} and gt {self.gt.shape} dimensions differ "
                f"for instance {self.instance_id!r}"
            )


@dataclass(frozen=True)
class MetricsConfig:
    beta: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ShapeError(f"beta must lie in (0,1), got {self.beta}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"iou of masks with different dims {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def _areas(records: list[EvalRecord]) -> tuple[int, int]:
    inter = 0
    union = 0
    for r in records:
        p = np.asarray(r.pred, dtype=bool)
        g = np.asarray(r.gt, dtype=bool)
        inter += int(np.count_nonzero(p & g))
        union += int(np.count_nonzero(p | g))
    return inter, union


def miou_t(records: list[EvalRecord]) -> float:
    """Sum of intersections over sum of unions across all records."""
    if not records:
        raise ShapeError("miou_t of empty record list")
    inter, union = _areas(records)
    if union == 0:
        raise ShapeError("miou_t undefined: every prediction and ground truth is empty")
    return inter / union


def miou_t_mean(records: list[EvalRecord]) -> float:
    """Mean of per-record IoUs (diagnostic variant)."""
    if not records:
        raise ShapeError("miou_t_mean of empty record list")
    return float(np.mean([iou(r.pred, r.gt) for r in records]))


def mta(records: list[EvalRecord], cfg: MetricsConfig = MetricsConfig(), sampled: bool = False) -> float:
    """Tap accuracy: passing clicks per ground-truth pixel.

    Exhaustive mode assumes one click per ground-truth pixel, so the raw
    indicator sum over clicks is divided by total ground-truth area.  With
    sampled clicks the per-instance indicator sum is rescaled by
    area / n_clicks first, keeping the denominator convention meaningful.
    """
    if not records:
        raise ShapeError("mta of empty record list")
    by_instance: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_instance.setdefault(r.instance_id, []).append(r)

    numer = 0.0
    denom = 0
    for _iid, recs in by_instance.items():
        area = int(np.count_nonzero(np.asarray(recs[0].gt, dtype=bool)))
        denom += area
        hits = sum(1 for r in recs if iou(r.pred, r.gt) >= cfg.beta)
        if sampled:
            numer += hits * (area / len(recs))
        else:
            numer += hits
    if denom == 0:
        raise ShapeError("mta undefined: zero total ground-truth area")
    return numer / denom


def per_category_report(records: list[EvalRecord]) -> dict[str, float]:
    """miou_t restricted per category plus a totals row over all of them."""
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.category or "unknown", []).append(r)
    report = {cat: miou_t(recs) for cat, recs in sorted(groups.items())}
    report["Category Total"] = miou_t(records)
    return report


def per_band_report(records: list[EvalRecord]) -> dict[str, float]:
    """miou_t per click band, for records that carry band labels."""
    groups: dict[int, list[EvalRecord]] = {}
    for r in records:
        if r.band is not None:
            groups.setdefault(r.band, []).append(r)
    return {f"band{band}": miou_t(recs) for band, recs in sorted(groups.items())}


def merge_area_sums(partials: list[tuple[int, int]]) -> float:
    """Combine (intersection, union) partial sums from parallel workers."""
    inter = sum(p[0] for p in partials)
    union = sum(p[1] for p in partials)
    if union == 0:
        raise ShapeError("merged miou_t undefined: zero union")
    return inter / union


def area_sums(records: list[EvalRecord]) -> tuple[int, int]:
    """Partial sums for one worker's share of the records."""
    return _areas(records)
