"""Graph fixtures for the CLI and benchmarks: conv chains, a diamond, and a
bottleneck-residual pyramid backbone sized to ResNet-50-FPN scale.

The big fixture ("r50-fpn-approx") follows the standard bottleneck layout
(stem, 3/4/6/3 blocks, five pyramid levels) at 0.75x channel width, which
puts its static cost at a 1024x768 input in the ~86 GFLOP range of a full
R-50-FPN under the 2-ops-per-MAC convention.  The stem pool uses a 2x2/2
window so every stage keeps power-of-two alignment with padding 0.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError
from .graph import (
    GraphSpec,
    NodeSpec,
    PointwiseAttrs,
    PoolAttrs,
    UpsampleAttrs,
    WeightStore,
    validate_graph,
)
from .tensor import ConvAttrs


class GraphBuilder:
    """Append-only node list with convenience emitters for common layers."""

    def __init__(self):
        self.nodes: list[NodeSpec] = []

    def input(self, nid: str) -> str:
        self.nodes.append(NodeSpec(nid, "input", (), None))
        return nid

    def conv(self, nid, src, cin, cout, k, stride=1, pad=None, dilation=1) -> str:
        if pad is None:
            pad = (k - 1) // 2
        attrs = ConvAttrs(cin, cout, k, k, stride, stride, pad, pad, dilation, dilation)
        self.nodes.append(NodeSpec(nid, "conv", (src,), attrs))
        return nid

    def bn(self, nid, src) -> str:
        self.nodes.append(NodeSpec(nid, "pointwise", (src,), PointwiseAttrs("batchnorm-inference")))
        return nid

    def relu(self, nid, src) -> str:
        self.nodes.append(NodeSpec(nid, "pointwise", (src,), PointwiseAttrs("relu")))
        return nid

    def sigmoid(self, nid, src) -> str:
        self.nodes.append(NodeSpec(nid, "pointwise", (src,), PointwiseAttrs("sigmoid")))
        return nid

    def maxpool(self, nid, src, kernel, stride) -> str:
        self.nodes.append(NodeSpec(nid, "maxpool", (src,), PoolAttrs(kernel, stride)))
        return nid

    def upsample(self, nid, src, scale) -> str:
        self.nodes.append(NodeSpec(nid, "upsample", (src,), UpsampleAttrs(scale)))
        return nid

    def add(self, nid, a, b) -> str:
        self.nodes.append(NodeSpec(nid, "add", (a, b), None))
        return nid

    def concat(self, nid, a, b) -> str:
        self.nodes.append(NodeSpec(nid, "concat", (a, b), None))
        return nid

    def conv_bn_relu(self, prefix, src, cin, cout, k, stride=1) -> str:
        c = self.conv(f"{prefix}.conv", src, cin, cout, k, stride)
        b = self.bn(f"{prefix}.bn", c)
        return self.relu(f"{prefix}.relu", b)

    def graph(self, output_id: str, input_shape) -> GraphSpec:
        g = GraphSpec(tuple(self.nodes), output_id, tuple(input_shape))
        validate_graph(g)
        return g


def random_weights(graphs, seed: int) -> WeightStore:
    """Seeded Gaussian init for every conv/batchnorm node across graphs.

    Nodes are visited in sorted id order so the result depends only on the
    seed and the node set, not on builder insertion order.
    """
    rng = np.random.default_rng(seed)
    store = WeightStore()
    seen: dict[str, NodeSpec] = {}
    for g in graphs:
        for n in g.nodes:
            seen.setdefault(n.id, n)
    for nid in sorted(seen):
        n = seen[nid]
        if n.kind == "conv":
            a: ConvAttrs = n.attrs
            fan_in = a.in_channels * a.kernel_h * a.kernel_w
            store.put(
                nid,
                "weight",
                rng.normal(0.0, 1.0 / np.sqrt(fan_in), (a.out_channels, a.in_channels, a.kernel_h, a.kernel_w)).astype(np.float32),
            )
            store.put(nid, "bias", rng.normal(0.0, 0.02, a.out_channels).astype(np.float32))
        elif n.kind == "pointwise" and n.attrs.op == "batchnorm-inference":
            # channel count comes from the conv feeding the bn
            producer = seen[n.inputs[0]]
            channels = producer.attrs.out_channels if producer.kind == "conv" else None
            if channels is None:
                raise GraphError("batchnorm must follow a conv in generated models", n.id)
            store.put(nid, "scale", rng.normal(1.0, 0.05, channels).astype(np.float32))
            store.put(nid, "shift", rng.normal(0.0, 0.05, channels).astype(np.float32))
    return store


def chain(n_layers: int, input_shape=(3, 256, 256), channels: int = 8) -> GraphSpec:
    """n_layers of 3x3 stride-1 same-padding convolutions."""
    if n_layers < 1:
        raise GraphError("chain needs at least one layer")
    b = GraphBuilder()
    prev = b.input("a.in")
    cin = input_shape[0]
    for i in range(n_layers):
        prev = b.conv(f"c{i:02d}", prev, cin, channels, 3)
        cin = channels
    return b.graph(prev, input_shape)


def diamond(input_shape=(3, 64, 64), channels: int = 8) -> GraphSpec:
    """A stem feeding a 3x3 branch and a 1x1 branch, merged by add."""
    b = GraphBuilder()
    x = b.input("a.in")
    stem = b.conv("stem", x, input_shape[0], channels, 3)
    left = b.conv("left3x3", stem, channels, channels, 3)
    right = b.conv("right1x1", stem, channels, channels, 1)
    merged = b.add("merge", left, right)
    out = b.relu("out", merged)
    return b.graph(out, input_shape)


def _bottleneck(b: GraphBuilder, prefix: str, src: str, cin: int, mid: int, cout: int, stride: int) -> str:
    r1 = b.conv_bn_relu(f"{prefix}.a", src, cin, mid, 1)
    r2 = b.conv_bn_relu(f"{prefix}.b", r1, mid, mid, 3, stride)
    c3 = b.conv(f"{prefix}.c.conv", r2, mid, cout, 1)
    main = b.bn(f"{prefix}.c.bn", c3)
    if cin != cout or stride != 1:
        proj = b.conv(f"{prefix}.proj.conv", src, cin, cout, 1, stride, pad=0)
        shortcut = b.bn(f"{prefix}.proj.bn", proj)
    else:
        shortcut = src
    merged = b.add(f"{prefix}.add", main, shortcut)
    return b.relu(f"{prefix}.out", merged)


def r50_fpn_approx(input_shape=(3, 768, 1024), width: float = 0.75):
    """Five pyramid-level graphs over a bottleneck backbone at reduced width.

    Returns ({level name: GraphSpec}, node list) where the five specs share
    one node list and differ only in the designated output.
    """
    c_h, c_w = input_shape[1], input_shape[2]
    if c_h % 32 or c_w % 32 or min(c_h, c_w) < 128:
        raise GraphError("input dims must be multiples of 32 and at least 128")

    def ch(v):
        return max(1, int(round(v * width)))

    stem = ch(64)
    mids = [ch(64), ch(128), ch(256), ch(512)]
    outs = [m * 4 for m in mids]
    fpn = ch(256)
    blocks = [3, 4, 6, 3]

    b = GraphBuilder()
    x = b.input("image")
    cur = b.conv_bn_relu("bb.stem", x, input_shape[0], stem, 7, stride=2)
    cur = b.maxpool("bb.stem.pool", cur, 2, 2)

    cin = stem
    stage_outputs = []
    for s_idx, (mid, cout, n_blocks) in enumerate(zip(mids, outs, blocks), start=2):
        for blk in range(n_blocks):
            stride = 2 if (blk == 0 and s_idx > 2) else 1
            cur = _bottleneck(b, f"bb.s{s_idx}.b{blk}", cur, cin, mid, cout, stride)
            cin = cout
        stage_outputs.append(cur)

    c3, c4, c5 = stage_outputs[1], stage_outputs[2], stage_outputs[3]
    lat5 = b.conv("fpn.lat5", c5, outs[3], fpn, 1)
    lat4 = b.conv("fpn.lat4", c4, outs[2], fpn, 1)
    lat3 = b.conv("fpn.lat3", c3, outs[1], fpn, 1)
    m5 = lat5
    m4 = b.add("fpn.m4", lat4, b.upsample("fpn.up5", m5, 2))
    m3 = b.add("fpn.m3", lat3, b.upsample("fpn.up4", m4, 2))
    p3 = b.conv("fpn.p3", m3, fpn, fpn, 3)
    p4 = b.conv("fpn.p4", m4, fpn, fpn, 3)
    p5 = b.conv("fpn.p5", m5, fpn, fpn, 3)
    p6 = b.conv("fpn.p6", p5, fpn, fpn, 3, stride=2)
    p7 = b.conv("fpn.p7", b.relu("fpn.p6.relu", p6), fpn, fpn, 3, stride=2)

    levels = {}
    for name, out in (("P3", p3), ("P4", p4), ("P5", p5), ("P6", p6), ("P7", p7)):
        levels[name] = b.graph(out, input_shape)
    return levels


def fixture_graphs(model: str, input_shape=None) -> dict[str, GraphSpec]:
    """Named fixture lookup used by the CLI; chain-N parses the layer count."""
    if model.startswith("chain-"):
        try:
            n = int(model.split("-", 1)[1])
        except ValueError:
            raise GraphError(f"bad chain model name {model!r}") from None
        return {"main": chain(n, input_shape or (3, 256, 256))}
    if model == "diamond":
        return {"main": diamond(input_shape or (3, 64, 64))}
    if model == "r50-fpn-approx":
        return r50_fpn_approx(input_shape or (3, 768, 1024))
    raise GraphError(f"unknown model {model!r}")
