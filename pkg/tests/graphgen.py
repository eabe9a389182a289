"""Seeded random graph/weight generators shared by the equivalence suites.

Graphs are grown segment by segment while tracking the running shape, so
every emitted spec is valid by construction.  Segment kinds cover plain
convs (strided, dilated, even kernels), pointwise ops, pooling, upsampling,
residual diamonds and concat merges.
"""

import numpy as np

from rftrace.graph import GraphSpec, NodeSpec, PointwiseAttrs, PoolAttrs, UpsampleAttrs, WeightStore, validate_graph
from rftrace.tensor import ConvAttrs, Tensor


class _Builder:
    def __init__(self):
        self.nodes = []
        self.counter = 0

    def fresh(self, prefix):
        self.counter += 1
        return f"{prefix}{self.counter:03d}"

    def emit(self, kind, inputs, attrs=None, prefix=None):
        nid = self.fresh(prefix or kind[0])
        self.nodes.append(NodeSpec(nid, kind, tuple(inputs), attrs))
        return nid


def _conv_attrs(rng, cin, h, w, allow_stride=True):
    for _ in range(40):
        k = int(rng.choice([1, 2, 3, 5]))
        s = int(rng.choice([1, 2])) if allow_stride else 1
        d = int(rng.choice([1, 2])) if k > 1 else 1
        # pad <= dilated kernel span - 1, so no output pixel sees padding only
        p = int(rng.integers(0, min(2, d * (k - 1)) + 1))
        cout = int(rng.integers(1, 7))
        attrs = ConvAttrs(cin, cout, k, k, s, s, p, p, d, d)
        span_h = d * (k - 1) + 1
        if h + 2 * p >= span_h and w + 2 * p >= span_h:
            oh = (h + 2 * p - span_h) // s + 1
            ow = (w + 2 * p - span_h) // s + 1
            if oh >= 2 and ow >= 2:
                return attrs, (cout, oh, ow)
    # fallback that always fits
    attrs = ConvAttrs(cin, 2, 1, 1)
    return attrs, (2, h, w)


def random_graph(seed, min_nodes=6, max_nodes=30, want_diamond=False, want_upsample=False, want_concat=False, plain=False):
    """Build a random valid graph plus matching weights and input tensor.

    `plain` disables branching so the result is a pure single-path chain.
    """
    rng = np.random.default_rng(seed)
    b = _Builder()
    c = int(rng.integers(1, 4))
    h = int(rng.integers(10, 29))
    w = int(rng.integers(10, 29))
    input_shape = (c, h, w)
    cur = b.emit("input", [], prefix="a")
    shape = input_shape

    weights: list[tuple[str, str, np.ndarray]] = []

    def add_conv(cur, shape, allow_stride=True):
        attrs, out_shape = _conv_attrs(rng, shape[0], shape[1], shape[2], allow_stride)
        nid = b.emit("conv", [cur], attrs)
        fan_in = attrs.in_channels * attrs.kernel_h * attrs.kernel_w
        weights.append((nid, "weight", rng.normal(0, 1 / np.sqrt(fan_in), (attrs.out_channels, attrs.in_channels, attrs.kernel_h, attrs.kernel_w)).astype(np.float32)))
        weights.append((nid, "bias", rng.normal(0, 0.1, attrs.out_channels).astype(np.float32)))
        return nid, out_shape

    def add_pointwise(cur, shape):
        op = str(rng.choice(["relu", "sigmoid", "batchnorm-inference"]))
        nid = b.emit("pointwise", [cur], PointwiseAttrs(op))
        if op == "batchnorm-inference":
            weights.append((nid, "scale", rng.normal(1, 0.2, shape[0]).astype(np.float32)))
            weights.append((nid, "shift", rng.normal(0, 0.2, shape[0]).astype(np.float32)))
        return nid, shape

    def add_branch(cur, shape, steps):
        """Shape-preserving chain used inside diamonds."""
        for _ in range(steps):
            roll = rng.random()
            if roll < 0.5:
                k = int(rng.choice([1, 3]))
                attrs = ConvAttrs(shape[0], shape[0], k, k, 1, 1, k // 2, k // 2)
                nid = b.emit("conv", [cur], attrs)
                fan_in = shape[0] * k * k
                weights.append((nid, "weight", rng.normal(0, 1 / np.sqrt(fan_in), (shape[0], shape[0], k, k)).astype(np.float32)))
                weights.append((nid, "bias", rng.normal(0, 0.1, shape[0]).astype(np.float32)))
                cur = nid
            else:
                cur, shape = add_pointwise(cur, shape)
        return cur

    target = int(rng.integers(min_nodes, max_nodes + 1))
    did_diamond = did_upsample = did_concat = False

    while len(b.nodes) < target - 4:
        roll = rng.random()
        if plain:
            roll = max(roll, 0.30)  # skip the diamond/concat branches below
        if (not plain and want_diamond and not did_diamond) or (roll < 0.18 and len(b.nodes) < target - 6):
            left = add_branch(cur, shape, int(rng.integers(1, 3)))
            right = add_branch(cur, shape, int(rng.integers(1, 3)))
            cur = b.emit("add", [left, right])
            did_diamond = True
        elif (want_concat and not did_concat) or (roll < 0.28 and len(b.nodes) < target - 6):
            left = add_branch(cur, shape, 1)
            right = add_branch(cur, shape, 1)
            cur = b.emit("concat", [left, right])
            shape = (shape[0] * 2, shape[1], shape[2])
            did_concat = True
        elif (want_upsample and not did_upsample) or (roll < 0.40 and shape[1] <= 32 and shape[2] <= 32):
            scale = 4 if (shape[1] <= 10 and shape[2] <= 10 and rng.random() < 0.3) else 2
            cur = b.emit("upsample", [cur], UpsampleAttrs(scale))
            shape = (shape[0], shape[1] * scale, shape[2] * scale)
            did_upsample = True
        elif roll < 0.55 and shape[1] >= 6 and shape[2] >= 6:
            k = int(rng.choice([2, 3]))
            s = int(rng.choice([1, 2]))
            nid = b.emit("maxpool", [cur], PoolAttrs(k, s))
            cur = nid
            shape = (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
        elif roll < 0.75:
            cur, shape = add_pointwise(cur, shape)
        else:
            cur, shape = add_conv(cur, shape)

    cur, shape = add_conv(cur, shape, allow_stride=False)

    g = GraphSpec(tuple(b.nodes), cur, input_shape)
    validate_graph(g)

    store = WeightStore()
    for nid, name, arr in weights:
        store.put(nid, name, arr)
    x = Tensor(rng.normal(0, 1, input_shape).astype(np.float32))
    return g, store, x


def random_out_rect(rng, out_shape, max_side=8):
    """Single pixel or a small rectangle inside the output map."""
    _c, h, w = out_shape
    if rng.random() < 0.5:
        return int(rng.integers(0, h)), int(rng.integers(0, w)), 1, 1
    rh = int(rng.integers(1, min(max_side, h) + 1))
    rw = int(rng.integers(1, min(max_side, w) + 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return top, left, rh, rw
