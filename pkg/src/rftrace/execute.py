"""Full and traced forward executors, equivalence checking, FLOPs accounting.

The traced executor materializes one patch per node, covering exactly that
node's receptive-field region, and serves every consumer from it via the
plan's memorized crop/pad instructions.  Running with the full output
rectangle degenerates to full execution: zero crops, zero pads, identical
FLOPs.

Execution covers the nodes the designated output depends on; other nodes
contribute nothing to the output and are skipped by both executors so that
full and traced counts stay comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TraceError
from .graph import GraphSpec, WeightStore, infer_shapes, topo_order
from .tensor import (
    ConvAttrs,
    Tensor,
    add,
    concat,
    conv2d,
    crop,
    maxpool2d,
    pad,
    pointwise,
    upsample_patch,
)
from .trace import Rect, TracePlan, backtrace


@dataclass
class ExecResult:
    output: Tensor
    output_origin: tuple[int, int]
    per_node_output_shapes: dict[str, tuple[int, int, int]]


@dataclass
class FlopsReport:
    per_node: dict[str, int]
    total_full: int
    total_traced: int

    @property
    def savings_ratio(self) -> float:
        if self.total_full == 0:
            return 0.0
        return 1.0 - self.total_traced / self.total_full

    def to_dict(self) -> dict:
        return {
            "per_node": dict(self.per_node),
            "total_full": self.total_full,
            "total_traced": self.total_traced,
            "savings_ratio": self.savings_ratio,
        }


def _node_weights(w: WeightStore, node):
    if node.kind == "conv":
        return w.get(node.id, "weight"), w.get(node.id, "bias")
    if node.kind == "pointwise" and node.attrs.op == "batchnorm-inference":
        return w.get(node.id, "scale"), w.get(node.id, "shift")
    return None


def run_full(g: GraphSpec, w: WeightStore, x: Tensor) -> ExecResult:
    """Execute the graph over full feature maps in topological order."""
    if x.shape != g.input_shape:
        raise ShapeError(f"input shape {x.shape} != graph input_shape {g.input_shape}")
    w.validate_for(g)
    ancestors = g.ancestors_of_output()
    values: dict[str, Tensor] = {}
    for nid in topo_order(g):
        if nid not in ancestors:
            continue
        node = g.node(nid)
        if node.kind == "input":
            values[nid] = x
        elif node.kind == "conv":
            weight, bias = _node_weights(w, node)
            values[nid] = conv2d(values[node.inputs[0]], weight, bias, node.attrs)
        elif node.kind == "pointwise":
            if node.attrs.op == "batchnorm-inference":
                scale, shift = _node_weights(w, node)
                values[nid] = pointwise(values[node.inputs[0]], "batchnorm-inference", scale, shift)
            else:
                values[nid] = pointwise(values[node.inputs[0]], node.attrs.op)
        elif node.kind == "maxpool":
            values[nid] = maxpool2d(values[node.inputs[0]], node.attrs.kernel, node.attrs.stride)
        elif node.kind == "upsample":
            src = values[node.inputs[0]]
            values[nid] = upsample_patch(
                src,
                node.attrs.scale,
                out_rows=(0, src.height * node.attrs.scale - 1),
                out_cols=(0, src.width * node.attrs.scale - 1),
                origin=(0, 0),
                full_hw=(src.height, src.width),
            )
        elif node.kind == "add":
            values[nid] = add(values[node.inputs[0]], values[node.inputs[1]])
        elif node.kind == "concat":
            values[nid] = concat(values[node.inputs[0]], values[node.inputs[1]])
    return ExecResult(
        output=values[g.output_id],
        output_origin=(0, 0),
        per_node_output_shapes={nid: t.shape for nid, t in values.items()},
    )


def _edge_patch(plan: TracePlan, patches: dict[str, Tensor], consumer_id: str, slot: int) -> tuple[Tensor, Rect]:
    """Producer patch cropped to one consumer's need and zero-padded for overhang.

    Returns the prepared patch together with the unclamped needed rect, whose
    top-left is the patch's origin in the producer's full frame.
    """
    e = plan.crops[(consumer_id, slot)]
    c = e.crop_in_hull
    part = crop(patches[e.producer], c.top, c.left, c.bottom, c.right)
    if any(e.pad):
        part = pad(part, e.pad, e.pad_value)
    return part, e.needed


def run_traced(
    g: GraphSpec,
    w: WeightStore,
    x: Tensor,
    out_rect: Rect,
    plan: TracePlan | None = None,
    input_region: Rect | None = None,
) -> ExecResult:
    """Execute only receptive-field regions, reproducing run_full inside out_rect.

    `x` is normally the full input; alternatively pass `input_region` to feed
    a pre-cropped patch that covers exactly that region of the input frame
    (used when chaining traced stages).
    """
    if plan is None:
        plan = backtrace(g, out_rect)
    w.validate_for(g)
    shapes = infer_shapes(g)

    input_id = g.input_id
    if input_region is None:
        if x.shape != g.input_shape:
            raise ShapeError(f"input shape {x.shape} != graph input_shape {g.input_shape}")
        r = plan.regions[input_id]
        input_patch = crop(x, r.top, r.left, r.bottom, r.right)
    else:
        r = plan.regions[input_id]
        if (r.height, r.width) != (x.height, x.width) or input_region != r:
            raise TraceError(
                f"input patch covers {input_region}, trace needs {r}"
            )
        input_patch = x

    patches: dict[str, Tensor] = {}
    for nid in topo_order(g):
        if nid not in plan.regions:
            continue
        node = g.node(nid)
        region = plan.regions[nid]
        if node.kind == "input":
            patches[nid] = input_patch
        elif node.kind == "conv":
            part, _needed = _edge_patch(plan, patches, nid, 0)
            weight, bias = _node_weights(w, node)
            # crop+pad already realized the conv's zero padding
            attrs = node.attrs
            local = ConvAttrs(
                attrs.in_channels,
                attrs.out_channels,
                attrs.kernel_h,
                attrs.kernel_w,
                attrs.stride_h,
                attrs.stride_w,
                0,
                0,
                attrs.dilation_h,
                attrs.dilation_w,
            )
            patches[nid] = conv2d(part, weight, bias, local)
        elif node.kind == "pointwise":
            part, _needed = _edge_patch(plan, patches, nid, 0)
            if node.attrs.op == "batchnorm-inference":
                scale, shift = _node_weights(w, node)
                patches[nid] = pointwise(part, "batchnorm-inference", scale, shift)
            else:
                patches[nid] = pointwise(part, node.attrs.op)
        elif node.kind == "maxpool":
            part, _needed = _edge_patch(plan, patches, nid, 0)
            patches[nid] = maxpool2d(part, node.attrs.kernel, node.attrs.stride)
        elif node.kind == "upsample":
            part, needed = _edge_patch(plan, patches, nid, 0)
            _c, full_h, full_w = shapes[node.inputs[0]]
            patches[nid] = upsample_patch(
                part,
                node.attrs.scale,
                out_rows=(region.top, region.bottom),
                out_cols=(region.left, region.right),
                origin=(needed.top, needed.left),
                full_hw=(full_h, full_w),
            )
        elif node.kind == "add":
            a_part, _ = _edge_patch(plan, patches, nid, 0)
            b_part, _ = _edge_patch(plan, patches, nid, 1)
            patches[nid] = add(a_part, b_part)
        elif node.kind == "concat":
            a_part, _ = _edge_patch(plan, patches, nid, 0)
            b_part, _ = _edge_patch(plan, patches, nid, 1)
            patches[nid] = concat(a_part, b_part)

        got = patches[nid]
        if (got.height, got.width) != (region.height, region.width):
            raise TraceError(
                f"node {nid!r} produced {got.height}x{got.width}, region wants "
                f"{region.height}x{region.width}"
            )

    out = patches[g.output_id]
    return ExecResult(
        output=out,
        output_origin=(out_rect.top, out_rect.left),
        per_node_output_shapes={nid: t.shape for nid, t in patches.items()},
    )


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_abs_diff <= self.tolerance


def verify_equivalence(
    g: GraphSpec, w: WeightStore, x: Tensor, out_rect: Rect, tolerance: float = 1e-4
) -> EquivalenceReport:
    """Run both executors and compare the out_rect patch of their outputs."""
    full = run_full(g, w, x)
    traced = run_traced(g, w, x, out_rect)
    reference = full.output.data[:, out_rect.top : out_rect.bottom + 1, out_rect.left : out_rect.right + 1]
    diff = float(np.max(np.abs(reference - traced.output.data)))
    return EquivalenceReport(max_abs_diff=diff, tolerance=tolerance)


# --------------------------------------------------------------------------
# FLOPs accounting
#
# Conventions (multiply-accumulate counted as 2 operations, bias ignored):
#   conv        2 * kh * kw * C_in * C_out * H_out * W_out
#   relu        H * W * C
#   sigmoid     2 * H * W * C
#   batchnorm   2 * H * W * C
#   maxpool     k^2 * H_out * W_out * C
#   upsample    4 * H_out * W_out * C
#   add         H * W * C
#   concat      0
#   input       0


def _node_flops(node, out_shape: tuple[int, int, int]) -> int:
    c, h, w = out_shape
    area = h * w
    if node.kind == "conv":
        a: ConvAttrs = node.attrs
        return 2 * a.kernel_h * a.kernel_w * a.in_channels * a.out_channels * area
    if node.kind == "pointwise":
        return area * c if node.attrs.op == "relu" else 2 * area * c
    if node.kind == "maxpool":
        return node.attrs.kernel * node.attrs.kernel * area * c
    if node.kind == "upsample":
        return 4 * area * c
    if node.kind == "add":
        return area * c
    return 0  # input, concat


def count_flops(g: GraphSpec, regions: dict[str, Rect] | None = None) -> FlopsReport:
    """Static FLOPs over the output's ancestor subgraph.

    With `regions` (a traced RegionMap), per-node counts use each node's
    region size and the report carries both totals; without, the traced
    total equals the full one (degenerate trace).
    """
    shapes = infer_shapes(g)
    ancestors = g.ancestors_of_output()
    full_total = 0
    per_node: dict[str, int] = {}
    traced_total = 0
    for nid in topo_order(g):
        if nid not in ancestors:
            continue
        node = g.node(nid)
        full_n = _node_flops(node, shapes[nid])
        full_total += full_n
        if regions is None:
            per_node[nid] = full_n
        else:
            rect = regions[nid]
            c = shapes[nid][0]
            traced_n = _node_flops(node, (c, rect.height, rect.width))
            per_node[nid] = traced_n
            traced_total += traced_n
    if regions is None:
        traced_total = full_total
    return FlopsReport(per_node=per_node, total_full=full_total, total_traced=traced_total)
