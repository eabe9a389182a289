"""Receptive-field-traced ConvNet inference and evaluation toolkit."""

__version__ = "0.1.0"

from .errors import GraphError, RFTraceError, ShapeError, TraceError, WeightError
from .graph import GraphSpec, NodeSpec, WeightStore, infer_shapes, parse_graph, topo_order
from .tensor import ConvAttrs, Tensor
from .trace import Rect, TracePlan, backtrace, clamp_rect, inverse_map, rect_hull
from .execute import count_flops, run_full, run_traced, verify_equivalence

__all__ = [
    "ConvAttrs",
    "GraphError",
    "GraphSpec",
    "NodeSpec",
    "RFTraceError",
    "Rect",
    "ShapeError",
    "Tensor",
    "TraceError",
    "TracePlan",
    "WeightError",
    "WeightStore",
    "backtrace",
    "clamp_rect",
    "count_flops",
    "infer_shapes",
    "inverse_map",
    "parse_graph",
    "rect_hull",
    "run_full",
    "run_traced",
    "topo_order",
    "verify_equivalence",
]
