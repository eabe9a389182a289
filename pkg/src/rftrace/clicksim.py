"""Morphology-driven click simulation over instance masks.

Clicks are stratified into five concentric bands grown from the instance
centroid by repeated binary dilation with a rectangular structuring element
sized from the instance bounding box (one fifth per step, rounded up to odd
so the anchor is the element's center).  Bands are clipped to the instance
mask, so every simulated click lands inside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

# A binary mask is a 2-d boolean numpy array (rows x cols).
BinaryMask = np.ndarray


@dataclass(frozen=True)
class Click:
    """Image-frame click; x is the column, y is the row."""

    x: int
    y: int


@dataclass(frozen=True)
class BandSet:
    """Five disjoint bands whose union is the instance mask (innermost first)."""

    bands: tuple[BinaryMask, ...]

    def __post_init__(self):
        if len(self.bands) != 5:
            raise ShapeError(f"expected 5 bands, got {len(self.bands)}")


def _check_mask(mask: BinaryMask) -> BinaryMask:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got ndim={mask.ndim}")
    return mask.astype(bool)


def centroid(mask: BinaryMask) -> Click:
    """First image moment rounded to the nearest pixel, snapped into the mask.

    Non-convex shapes can place the raw moment outside the mask (e.g. a
    ring); in that case the nearest mask pixel by Euclidean distance wins,
    with lexicographic (row, col) tie-break.
    """
    mask = _check_mask(mask)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ShapeError("centroid of empty mask")
    row = int(np.floor(ys.mean() + 0.5))
    col = int(np.floor(xs.mean() + 0.5))
    if not mask[row, col]:
        d2 = (ys.astype(np.int64) - row) ** 2 + (xs.astype(np.int64) - col) ** 2
        best = np.lexsort((xs, ys, d2))[0]
        row, col = int(ys[best]), int(xs[best])
    return Click(x=col, y=row)


def dilate(mask: BinaryMask, kernel_h: int, kernel_w: int) -> BinaryMask:
    """Binary dilation with a filled rectangular element anchored at center.

    Separable: a running OR over kernel_h row shifts then kernel_w column
    shifts, O((kh + kw) * H * W).
    """
    mask = _check_mask(mask)
    if kernel_h < 1 or kernel_w < 1 or kernel_h % 2 == 0 or kernel_w % 2 == 0:
        raise ShapeError(f"kernel dims must be odd and >= 1, got {kernel_h}x{kernel_w}")
    rh, rw = kernel_h // 2, kernel_w // 2
    rows = mask.copy()
    for s in range(1, rh + 1):
        rows[s:] |= mask[:-s]
        rows[:-s] |= mask[s:]
    out = rows.copy()
    for s in range(1, rw + 1):
        out[:, s:] |= rows[:, :-s]
        out[:, :-s] |= rows[:, s:]
    return out


def _odd_ceil(value: float) -> int:
    k = max(1, int(np.ceil(value)))
    return k if k % 2 == 1 else k + 1


def make_bands(instance: BinaryMask) -> BandSet:
    """Five concentric bands around the instance centroid.

    The seed is the centroid pixel alone; each dilation step uses a
    (bounding box height / 5) x (width / 5) rectangular kernel rounded up
    to odd.  Band k collects pixels first reached at step k, clipped to the
    instance; band 1 additionally keeps the centroid pixel itself and band 5
    absorbs everything the fourth step never reached.  Only bands 2..5 may
    be empty (tiny masks).
    """
    instance = _check_mask(instance)
    ys, xs = np.nonzero(instance)
    if ys.size == 0:
        raise ShapeError("make_bands of empty instance")
    box_h = int(ys.max() - ys.min() + 1)
    box_w = int(xs.max() - xs.min() + 1)
    kernel = (_odd_ceil(box_h / 5), _odd_ceil(box_w / 5))

    seed = np.zeros_like(instance, dtype=bool)
    c = centroid(instance)
    seed[c.y, c.x] = True

    rings = []
    prev = seed
    for _ in range(4):
        grown = dilate(prev, *kernel)
        rings.append(grown & ~prev)
        prev = grown

    band1 = (rings[0] & instance) | seed
    band2 = rings[1] & instance & ~band1
    band3 = rings[2] & instance & ~band1 & ~band2
    band4 = rings[3] & instance & ~band1 & ~band2 & ~band3
    band5 = instance & ~prev
    return BandSet((band1, band2, band3, band4, band5))


def sample_clicks(bands: BandSet, instance: BinaryMask, per_band: int = 5, seed: int = 0) -> list[tuple[int, Click]]:
    """Draw per_band clicks from each band; returns (band index 1..5, click).

    Bands with fewer pixels than the quota are drawn with replacement; empty
    bands redraw their quota uniformly from the whole instance so every
    simulation yields exactly 5 * per_band clicks inside the mask.
    """
    instance = _check_mask(instance)
    rng = np.random.default_rng(seed)
    out: list[tuple[int, Click]] = []
    inst_ys, inst_xs = np.nonzero(instance)
    if inst_ys.size == 0:
        raise ShapeError("sample_clicks of empty instance")
    for idx, band in enumerate(bands.bands, start=1):
        ys, xs = np.nonzero(band)
        if ys.size == 0:
            ys, xs = inst_ys, inst_xs
        replace = ys.size < per_band
        chosen = rng.choice(ys.size, size=per_band, replace=replace)
        for i in chosen:
            out.append((idx, Click(x=int(xs[i]), y=int(ys[i]))))
    return out
