"""Computation-graph data model: JSON schema, validation, ordering, shapes.

A graph is a DAG of layer nodes over a single input feature map.  The JSON
schema deliberately mirrors a strict ONNX subset:

    {
      "input_shape": [C, H, W],
      "output": "<node id>",
      "nodes": [
        {"id": "x",  "kind": "input",    "inputs": [],    "attrs": {}},
        {"id": "c1", "kind": "conv",     "inputs": ["x"], "attrs": {...}},
        {"id": "r1", "kind": "pointwise","inputs": ["c1"],"attrs": {"op": "relu"}},
        ...
      ]
    }

Attribute keys per kind are fixed; unknown kinds or keys are rejected.
Weights travel separately as a JSON manifest plus a little-endian float32
blob, with a bit-exact round trip.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, WeightError
from .tensor import ConvAttrs

KINDS = ("input", "conv", "pointwise", "maxpool", "upsample", "add", "concat")

# producer arity per kind
_ARITY = {"input": 0, "conv": 1, "pointwise": 1, "maxpool": 1, "upsample": 1, "add": 2, "concat": 2}

_CONV_KEYS = {
    "in_channels": None,
    "out_channels": None,
    "kernel_h": None,
    "kernel_w": None,
    "stride_h": 1,
    "stride_w": 1,
    "pad_h": 0,
    "pad_w": 0,
    "dilation_h": 1,
    "dilation_w": 1,
}


@dataclass(frozen=True)
class PoolAttrs:
    kernel: int
    stride: int


@dataclass(frozen=True)
class UpsampleAttrs:
    scale: int


@dataclass(frozen=True)
class PointwiseAttrs:
    op: str


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    inputs: tuple[str, ...]
    attrs: object = None


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple[NodeSpec, ...]
    output_id: str
    input_shape: tuple[int, int, int]
    by_id: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "by_id", {n.id: n for n in self.nodes})

    def node(self, node_id: str) -> NodeSpec:
        return self.by_id[node_id]

    @property
    def input_id(self) -> str:
        for n in self.nodes:
            if n.kind == "input":
                return n.id
        raise GraphError("graph has no input node")

    def consumers(self) -> dict[str, list[tuple[str, int]]]:
        """Map producer id -> [(consumer id, input slot)] in node order."""
        out: dict[str, list[tuple[str, int]]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for slot, producer in enumerate(n.inputs):
                out[producer].append((n.id, slot))
        return out

    def ancestors_of_output(self) -> set[str]:
        """Node ids the designated output transitively depends on (inclusive)."""
        seen = {self.output_id}
        stack = [self.output_id]
        while stack:
            for producer in self.by_id[stack.pop()].inputs:
                if producer not in seen:
                    seen.add(producer)
                    stack.append(producer)
        return seen


def _parse_attrs(kind: str, raw: dict, node_id: str):
    if kind in ("input", "add", "concat"):
        if raw:
            raise GraphError(f"kind {kind!r} takes no attrs", node_id, sorted(raw)[0])
        return None
    if kind == "conv":
        unknown = set(raw) - set(_CONV_KEYS)
        if unknown:
            raise GraphError("unknown conv attr", node_id, sorted(unknown)[0])
        vals = {}
        for key, default in _CONV_KEYS.items():
            if key in raw:
                vals[key] = _int_field(raw[key], node_id, key)
            elif default is None:
                raise GraphError("missing required conv attr", node_id, key)
            else:
                vals[key] = default
        try:
            return ConvAttrs(**vals)
        except Exception as exc:
            raise GraphError(f"bad conv attrs: {exc}", node_id) from exc
    if kind == "maxpool":
        unknown = set(raw) - {"kernel", "stride"}
        if unknown:
            raise GraphError("unknown maxpool attr", node_id, sorted(unknown)[0])
        if "kernel" not in raw:
            raise GraphError("missing required maxpool attr", node_id, "kernel")
        kernel = _int_field(raw["kernel"], node_id, "kernel")
        stride = _int_field(raw.get("stride", kernel), node_id, "stride")
        if kernel < 1 or stride < 1:
            raise GraphError("maxpool kernel/stride must be >= 1", node_id)
        return PoolAttrs(kernel, stride)
    if kind == "upsample":
        unknown = set(raw) - {"scale"}
        if unknown:
            raise GraphError("unknown upsample attr", node_id, sorted(unknown)[0])
        scale = _int_field(raw.get("scale"), node_id, "scale")
        if scale not in (2, 4):
            raise GraphError(f"upsample scale must be 2 or 4, got {scale}", node_id, "scale")
        return UpsampleAttrs(scale)
    if kind == "pointwise":
        unknown = set(raw) - {"op"}
        if unknown:
            raise GraphError("unknown pointwise attr", node_id, sorted(unknown)[0])
        op = raw.get("op")
        if op not in ("relu", "sigmoid", "batchnorm-inference"):
            raise GraphError(f"unknown pointwise op {op!r}", node_id, "op")
        return PointwiseAttrs(op)
    raise GraphError(f"unknown node kind {kind!r}", node_id, "kind")


def _int_field(value, node_id, key) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise GraphError(f"attr must be an integer, got {value!r}", node_id, key)
    return value


def parse_graph(json_text: str) -> GraphSpec:
    """Parse and fully validate a JSON graph spec."""
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"invalid JSON: {exc}") from exc
    return graph_from_dict(doc)


def graph_from_dict(doc: dict) -> GraphSpec:
    if not isinstance(doc, dict):
        raise GraphError("graph spec must be a JSON object")
    unknown = set(doc) - {"input_shape", "output", "nodes"}
    if unknown:
        raise GraphError("unknown top-level field", field=sorted(unknown)[0])
    for required in ("input_shape", "output", "nodes"):
        if required not in doc:
            raise GraphError("missing top-level field", field=required)

    shape = doc["input_shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or any(not isinstance(v, int) or v < 1 for v in shape)
    ):
        raise GraphError(f"input_shape must be [C,H,W] positive ints, got {shape!r}", field="input_shape")

    nodes = []
    seen = set()
    for raw in doc["nodes"]:
        if not isinstance(raw, dict):
            raise GraphError("node entry must be an object")
        unknown = set(raw) - {"id", "kind", "inputs", "attrs"}
        if unknown:
            raise GraphError("unknown node field", raw.get("id"), sorted(unknown)[0])
        node_id = raw.get("id")
        if not isinstance(node_id, str) or not node_id:
            raise GraphError(f"node id must be a non-empty string, got {node_id!r}")
        if node_id in seen:
            raise GraphError("duplicate node id", node_id)
        seen.add(node_id)
        kind = raw.get("kind")
        if kind not in KINDS:
            raise GraphError(f"unknown kind {kind!r}", node_id, "kind")
        inputs = raw.get("inputs", [])
        if not isinstance(inputs, list) or any(not isinstance(x, str) for x in inputs):
            raise GraphError("inputs must be a list of node ids", node_id, "inputs")
        attrs = _parse_attrs(kind, raw.get("attrs", {}) or {}, node_id)
        nodes.append(NodeSpec(node_id, kind, tuple(inputs), attrs))

    output_id = doc["output"]
    if output_id not in seen:
        raise GraphError(f"output node {output_id!r} does not exist", field="output")

    g = GraphSpec(tuple(nodes), output_id, tuple(shape))
    validate_graph(g)
    return g


def validate_graph(g: GraphSpec) -> None:
    n_inputs = 0
    for n in g.nodes:
        if len(n.inputs) != _ARITY[n.kind]:
            raise GraphError(
                f"kind {n.kind!r} takes {_ARITY[n.kind]} producer(s), got {len(n.inputs)}",
                n.id,
                "inputs",
            )
        for producer in n.inputs:
            if producer not in g.by_id:
                raise GraphError(f"unknown producer id {producer!r}", n.id, "inputs")
        if n.kind == "input":
            n_inputs += 1
    if n_inputs != 1:
        raise GraphError(f"graph must have exactly one input node, got {n_inputs}")
    topo_order(g)  # raises on cycles


def topo_order(g: GraphSpec) -> list[str]:
    """Topological order with deterministic lexicographic tie-break."""
    indegree = {n.id: len(n.inputs) for n in g.nodes}
    consumers = g.consumers()
    ready = [nid for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for consumer, _slot in consumers[nid]:
            indegree[consumer] -= 1
            if indegree[consumer] == 0:
                heapq.heappush(ready, consumer)
    if len(order) != len(g.nodes):
        stuck = sorted(nid for nid, deg in indegree.items() if deg > 0)
        raise GraphError(f"cycle detected involving nodes {stuck}")
    return order


def infer_shapes(g: GraphSpec) -> dict[str, tuple[int, int, int]]:
    """Per-node output shapes, by the same formulas the kernels use."""
    shapes: dict[str, tuple[int, int, int]] = {}
    for nid in topo_order(g):
        n = g.node(nid)
        if n.kind == "input":
            shapes[nid] = g.input_shape
            continue
        src = [shapes[p] for p in n.inputs]
        if n.kind == "conv":
            a: ConvAttrs = n.attrs
            c, h, w = src[0]
            if c != a.in_channels:
                raise GraphError(
                    f"conv expects {a.in_channels} input channels, producer yields {c}", nid
                )
            try:
                oh, ow = a.out_size(h, w)
            except Exception as exc:
                raise GraphError(f"bad conv geometry: {exc}", nid) from exc
            shapes[nid] = (a.out_channels, oh, ow)
        elif n.kind == "pointwise":
            shapes[nid] = src[0]
        elif n.kind == "maxpool":
            c, h, w = src[0]
            k, s = n.attrs.kernel, n.attrs.stride
            if k > h or k > w:
                raise GraphError(f"pool kernel {k} larger than input {h}x{w}", nid)
            shapes[nid] = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif n.kind == "upsample":
            c, h, w = src[0]
            shapes[nid] = (c, h * n.attrs.scale, w * n.attrs.scale)
        elif n.kind == "add":
            if src[0] != src[1]:
                raise GraphError(f"add branches disagree: {src[0]} vs {src[1]}", nid)
            shapes[nid] = src[0]
        elif n.kind == "concat":
            if src[0][1:] != src[1][1:]:
                raise GraphError(f"concat spatial dims disagree: {src[0]} vs {src[1]}", nid)
            shapes[nid] = (src[0][0] + src[1][0], src[0][1], src[0][2])
    return shapes


def graph_to_dict(g: GraphSpec) -> dict:
    """Inverse of graph_from_dict; emits only non-default conv attrs."""
    nodes = []
    for n in g.nodes:
        attrs = {}
        if n.kind == "conv":
            a = n.attrs
            for key, default in _CONV_KEYS.items():
                val = getattr(a, key)
                if default is None or val != default:
                    attrs[key] = val
        elif n.kind == "maxpool":
            attrs = {"kernel": n.attrs.kernel, "stride": n.attrs.stride}
        elif n.kind == "upsample":
            attrs = {"scale": n.attrs.scale}
        elif n.kind == "pointwise":
            attrs = {"op": n.attrs.op}
        nodes.append({"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "attrs": attrs})
    return {"input_shape": list(g.input_shape), "output": g.output_id, "nodes": nodes}


# --------------------------------------------------------------------------
# Weight store


class WeightStore:
    """Map from node id to named float32 arrays (weight/bias/scale/shift)."""

    TENSOR_NAMES = ("weight", "bias", "scale", "shift")

    def __init__(self):
        self._entries: dict[str, dict[str, np.ndarray]] = {}

    def put(self, node_id: str, tensor: str, array) -> None:
        if tensor not in self.TENSOR_NAMES:
            raise WeightError(f"unknown tensor name {tensor!r}")
        self._entries.setdefault(node_id, {})[tensor] = np.asarray(array, dtype=np.float32)

    def get(self, node_id: str, tensor: str) -> np.ndarray:
        try:
            return self._entries[node_id][tensor]
        except KeyError:
            raise WeightError(f"missing weights entry {node_id!r}/{tensor}") from None

    def has(self, node_id: str, tensor: str) -> bool:
        return tensor in self._entries.get(node_id, {})

    def node_ids(self) -> list[str]:
        return sorted(self._entries)

    def validate_for(self, g: GraphSpec) -> None:
        """Check that every conv / batchnorm node has matching entries."""
        shapes = None
        for n in g.nodes:
            if n.kind == "conv":
                a = n.attrs
                w = self.get(n.id, "weight")
                expect = (a.out_channels, a.in_channels, a.kernel_h, a.kernel_w)
                if w.shape != expect:
                    raise WeightError(f"weight shape {w.shape} != {expect} for node {n.id!r}")
                b = self.get(n.id, "bias")
                if b.shape != (a.out_channels,):
                    raise WeightError(f"bias shape {b.shape} != ({a.out_channels},) for node {n.id!r}")
            elif n.kind == "pointwise" and n.attrs.op == "batchnorm-inference":
                if shapes is None:
                    shapes = infer_shapes(g)
                channels = shapes[n.inputs[0]][0]
                for tensor in ("scale", "shift"):
                    arr = self.get(n.id, tensor)
                    if arr.shape != (channels,):
                        raise WeightError(
                            f"{tensor} shape {arr.shape} != ({channels},) for node {n.id!r}"
                        )

    def save(self, manifest_path, blob_path) -> None:
        """Write the JSON manifest and little-endian float32 blob."""
        entries = []
        chunks = []
        offset = 0
        for node_id in sorted(self._entries):
            for tensor in self.TENSOR_NAMES:
                if tensor not in self._entries[node_id]:
                    continue
                arr = np.ascontiguousarray(self._entries[node_id][tensor], dtype="<f4")
                entries.append(
                    {
                        "id": node_id,
                        "tensor": tensor,
                        "shape": list(arr.shape),
                        "offset": offset,
                        "len": int(arr.size),
                    }
                )
                chunks.append(arr.tobytes())
                offset += arr.size * 4
        with open(manifest_path, "w") as fh:
            json.dump({"entries": entries}, fh, indent=1)
            fh.write("\n")
        with open(blob_path, "wb") as fh:
            fh.write(b"".join(chunks))

    @classmethod
    def load(cls, manifest_path, blob_path) -> "WeightStore":
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        with open(blob_path, "rb") as fh:
            blob = fh.read()
        store = cls()
        for e in manifest["entries"]:
            start = e["offset"]
            count = e["len"]
            raw = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
            arr = raw.reshape(e["shape"]).copy()
            expected = int(np.prod(e["shape"])) if e["shape"] else 1
            if expected != count:
                raise WeightError(f"manifest entry {e['id']}/{e['tensor']} shape/len mismatch")
            store.put(e["id"], e["tensor"], arr)
        return store
