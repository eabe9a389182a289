"""Receptive-field back-tracing over the computation graph.

Starting from a rectangle on the output feature map, each layer's dependency
geometry is inverted to find which producer rows/cols can influence it.  A
node with several consumers gets the smallest rectangle covering all of their
needs (rectangular hull).  Processing runs in reverse topological order with
pending-consumer counters, which finalizes every region exactly once and
touches every edge exactly once, so the traversal is O(|E| + |N|).

The returned plan memorizes, per edge, the exact consumer need and where it
sits inside the producer's hull, so the executor can crop and zero-pad
feature patches without re-deriving any geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import TraceError
from .graph import GraphSpec, infer_shapes, topo_order
from .tensor import ConvAttrs


@dataclass(frozen=True)
class Rect:
    """Inclusive pixel rectangle in one feature map's coordinate frame.

    May be unclamped (negative / past the map edge) before clamp_rect runs.
    """

    top: int
    left: int
    bottom: int
    right: int

    def __post_init__(self):
        if self.top > self.bottom or self.left > self.right:
            raise TraceError(f"degenerate rect {self}")

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, other: "Rect") -> bool:
        return (
            self.top <= other.top
            and self.left <= other.left
            and self.bottom >= other.bottom
            and self.right >= other.right
        )

    @classmethod
    def pixel(cls, row: int, col: int) -> "Rect":
        return cls(row, col, row, col)

    @classmethod
    def full(cls, height: int, width: int) -> "Rect":
        return cls(0, 0, height - 1, width - 1)


@dataclass(frozen=True)
class EdgeCrop:
    """Memorized crop/pad instructions for one producer -> consumer edge."""

    producer: str
    consumer: str
    slot: int
    needed: Rect  # consumer need in producer coords, before clamping
    crop_in_hull: Rect  # clamped need, relative to the producer's hull rect
    pad: tuple[int, int, int, int]  # (top, left, bottom, right) overhang
    pad_value: float = 0.0


@dataclass
class TraceStats:
    nodes_visited: int = 0
    edges_traversed: int = 0


@dataclass
class TracePlan:
    """Everything the traced executor needs: regions, crops, and stats."""

    regions: dict[str, Rect]
    crops: dict[tuple[str, int], EdgeCrop]  # keyed by (consumer id, input slot)
    stats: TraceStats
    out_rect: Rect


def inverse_map(out_rect: Rect, kind: str, attrs) -> Rect:
    """Input-frame rectangle that an output rectangle depends on (unclamped)."""
    if kind in ("pointwise", "add", "concat"):
        return out_rect
    if kind == "conv":
        a: ConvAttrs = attrs
        return Rect(
            out_rect.top * a.stride_h - a.pad_h,
            out_rect.left * a.stride_w - a.pad_w,
            out_rect.bottom * a.stride_h - a.pad_h + a.dilation_h * (a.kernel_h - 1),
            out_rect.right * a.stride_w - a.pad_w + a.dilation_w * (a.kernel_w - 1),
        )
    if kind == "maxpool":
        k, s = attrs.kernel, attrs.stride
        return Rect(
            out_rect.top * s,
            out_rect.left * s,
            out_rect.bottom * s + k - 1,
            out_rect.right * s + k - 1,
        )
    if kind == "upsample":
        r = attrs.scale
        return Rect(
            math.floor((out_rect.top + 0.5) / r - 0.5),
            math.floor((out_rect.left + 0.5) / r - 0.5),
            math.ceil((out_rect.bottom + 0.5) / r - 0.5),
            math.ceil((out_rect.right + 0.5) / r - 0.5),
        )
    raise TraceError(f"no inverse map for kind {kind!r}")


def clamp_rect(rect: Rect, height: int, width: int) -> tuple[Rect, tuple[int, int, int, int]]:
    """Intersect with [0,H-1]x[0,W-1]; report per-border clipped overhang."""
    if rect.bottom < 0 or rect.top > height - 1 or rect.right < 0 or rect.left > width - 1:
        raise TraceError(f"rect {rect} lies entirely outside {height}x{width} bounds")
    clamped = Rect(
        max(rect.top, 0),
        max(rect.left, 0),
        min(rect.bottom, height - 1),
        min(rect.right, width - 1),
    )
    margins = (
        clamped.top - rect.top,
        clamped.left - rect.left,
        rect.bottom - clamped.bottom,
        rect.right - clamped.right,
    )
    return clamped, margins


def rect_hull(rects: list[Rect]) -> Rect:
    """Smallest rectangle covering every rect in a non-empty list."""
    if not rects:
        raise TraceError("rect_hull of empty list")
    return Rect(
        min(r.top for r in rects),
        min(r.left for r in rects),
        max(r.bottom for r in rects),
        max(r.right for r in rects),
    )


def backtrace(g: GraphSpec, out_rect: Rect) -> TracePlan:
    """Back-trace per-layer receptive-field regions for an output rectangle.

    Only nodes the output depends on participate; each gets a region clamped
    to its own feature-map bounds, finalized after all of its consumers.
    """
    shapes = infer_shapes(g)
    _c, out_h, out_w = shapes[g.output_id]
    if not Rect.full(out_h, out_w).contains(out_rect):
        raise TraceError(f"out_rect {out_rect} exceeds output bounds {out_h}x{out_w}")

    ancestors = g.ancestors_of_output()
    regions: dict[str, Rect] = {g.output_id: out_rect}
    needs: dict[str, list[Rect]] = {}
    crops: dict[tuple[str, int], EdgeCrop] = {}
    stats = TraceStats()

    # Reverse topological order = every consumer is finalized before its
    # producers; equivalent to post-order DFS from the output on the
    # reversed DAG, but iterative and stack-safe for deep graphs.
    for nid in reversed(topo_order(g)):
        if nid not in ancestors:
            continue
        node = g.node(nid)
        if nid != g.output_id:
            pending = needs.pop(nid, [])
            if not pending:
                raise TraceError(f"node {nid!r} has no finalized consumer needs")
            _c, h, w = shapes[nid]
            regions[nid], _ = clamp_rect(rect_hull(pending), h, w)
        stats.nodes_visited += 1

        region = regions[nid]
        for slot, producer in enumerate(node.inputs):
            need = inverse_map(region, node.kind, node.attrs)
            _c, ph, pw = shapes[producer]
            clamped, margins = clamp_rect(need, ph, pw)
            needs.setdefault(producer, []).append(clamped)
            crops[(nid, slot)] = EdgeCrop(
                producer=producer,
                consumer=nid,
                slot=slot,
                needed=need,
                # positioned inside the producer hull once that hull is known;
                # stored relative to full frame here, rebased below
                crop_in_hull=clamped,
                pad=margins,
            )
            stats.edges_traversed += 1

    # Rebase each edge's clamped need to coordinates inside its producer hull.
    rebased = {}
    for key, e in crops.items():
        hull = regions[e.producer]
        c = e.crop_in_hull
        rel = Rect(c.top - hull.top, c.left - hull.left, c.bottom - hull.top, c.right - hull.left)
        if not Rect(0, 0, hull.height - 1, hull.width - 1).contains(rel):
            raise TraceError(f"edge {e.producer}->{e.consumer} crop escapes the producer hull")
        rebased[key] = EdgeCrop(e.producer, e.consumer, e.slot, e.needed, rel, e.pad)

    return TracePlan(regions=regions, crops=rebased, stats=stats, out_rect=out_rect)


def region_report(g: GraphSpec, plan: TracePlan) -> dict:
    """JSON-ready summary: per-node rect, shape and cropped fraction."""
    shapes = infer_shapes(g)
    report = {}
    for nid, rect in plan.regions.items():
        c, h, w = shapes[nid]
        report[nid] = {
            "rect": [rect.top, rect.left, rect.bottom, rect.right],
            "shape": [c, h, w],
            "cropped_fraction": 1.0 - (rect.area / (h * w)),
        }
    return report
