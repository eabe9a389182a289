"""Click-driven single-instance segmentation over a traced pyramid ConvNet.

The model is a small residual backbone with a five-level feature pyramid.
Each level carries a shared conv tower with three sibling heads: a
controller emitting the 169 parameters of a per-instance mask head, a box
regressor (4 distances, exponentiated), and a centerness score (sigmoid).

Inference runs in two traced phases:

  1. The click is mapped to one cell per pyramid level; each level's head
     stack is evaluated only on the receptive-field patch of that cell.
     The best-scoring level supplies mask-head parameters and a box.
  2. The predicted box (grown 10% per side, always including the click's
     own cell) bounds a region on the stride-8 level; the mask branch is
     traced to that region, the dynamic 1x1 head plus relative-coordinate
     conditioning runs on the patch, and the sigmoid output is upsampled
     4x into a stride-2 mask that is placed into the full image frame.

No training happens anywhere: weights come from a seeded Gaussian init, and
all guarantees are structural (traced values equal full-pass values).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .execute import count_flops, run_traced
from .graph import GraphSpec, WeightStore, graph_from_dict, graph_to_dict, infer_shapes
from .models import GraphBuilder, random_weights
from .tensor import Tensor, upsample_patch
from .trace import Rect, backtrace
from .clicksim import Click

THETA_LEN = 169
# layer1 8x10 weights + 8 bias, layer2 8x8 + 8, layer3 1x8 + 1
_SPLITS = (80, 8, 64, 8, 8, 1)


@dataclass(frozen=True)
class PyramidConfig:
    levels: tuple[tuple[str, int], ...] = (("P3", 8), ("P4", 16), ("P5", 32), ("P6", 64), ("P7", 128))
    stem_channels: int = 16
    stage_channels: tuple[int, int, int, int] = (16, 24, 32, 48)
    fpn_channels: int = 32
    tower_channels: int = 64
    tower_depth: int = 4
    mask_mid_channels: int = 32
    mask_out_channels: int = 8
    rel_coord_norm: float = 64.0

    def __post_init__(self):
        strides = [s for _n, s in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ShapeError("pyramid strides must be strictly increasing")
        if any(s & (s - 1) for s in strides):
            raise ShapeError("pyramid strides must be powers of two")

    @property
    def base_stride(self) -> int:
        return self.levels[0][1]


@dataclass(frozen=True)
class MaskHeadParams:
    """Unpacked per-instance mask head: three 1x1 conv layers (10->8->8->1)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


@dataclass(frozen=True)
class BoxPrediction:
    """Distances from the click-mapped location to the four box sides."""

    l: float
    t: float
    r: float
    b: float
    score: float


def click_to_location(c: Click, stride: int, level_w: int, level_h: int) -> tuple[int, int]:
    """Feature-cell (a, b) whose image-mapped center is nearest the click.

    Inverts the center mapping (stride//2 + a*stride); halves round down for
    determinism, and borders clamp into the level grid.
    """
    a = math.ceil((c.x - stride // 2) / stride - 0.5)
    b = math.ceil((c.y - stride // 2) / stride - 0.5)
    return min(max(a, 0), level_w - 1), min(max(b, 0), level_h - 1)


def pack_mask_params(p: MaskHeadParams) -> np.ndarray:
    return np.concatenate(
        [
            p.w1.reshape(-1),
            p.b1.reshape(-1),
            p.w2.reshape(-1),
            p.b2.reshape(-1),
            p.w3.reshape(-1),
            p.b3.reshape(-1),
        ]
    ).astype(np.float32)


def unpack_mask_params(theta) -> MaskHeadParams:
    theta = np.asarray(theta, dtype=np.float32).reshape(-1)
    if theta.size != THETA_LEN:
        raise ShapeError(f"mask head parameter vector must have length {THETA_LEN}, got {theta.size}")
    parts = np.split(theta, np.cumsum(_SPLITS)[:-1])
    return MaskHeadParams(
        w1=parts[0].reshape(8, 10),
        b1=parts[1],
        w2=parts[2].reshape(8, 8),
        b2=parts[3],
        w3=parts[4].reshape(1, 8),
        b3=parts[5],
    )


def rel_coord_map(level_h: int, level_w: int, loc: tuple[int, int], norm: float = 64.0) -> Tensor:
    """Two-channel map of (col - a)/norm and (row - b)/norm in grid units."""
    a, b = loc
    cols = (np.arange(level_w, dtype=np.float32) - a) / norm
    rows = (np.arange(level_h, dtype=np.float32) - b) / norm
    ch0 = np.broadcast_to(cols[None, :], (level_h, level_w))
    ch1 = np.broadcast_to(rows[:, None], (level_h, level_w))
    return Tensor(np.stack([ch0, ch1]).astype(np.float32))


def mask_forward(
    features: Tensor,
    coords: Tensor,
    params: MaskHeadParams,
    frame: tuple[Rect, tuple[int, int], tuple[int, int]] | None = None,
    threshold: float = 0.5,
) -> tuple[Tensor, np.ndarray]:
    """Dynamic mask head: concat, three 1x1 convs, sigmoid, 4x upsample.

    Standalone calls upsample the whole patch (output dims = input dims * 4).
    When `frame` = (core rect, patch origin, full level dims) is given, the
    patch is treated as a window of the full level map and the output covers
    exactly the 4x core rect of the full-frame upsample, so traced patches
    reproduce full-map values bit for bit.
    """
    if features.shape[1:] != coords.shape[1:]:
        raise ShapeError(f"features {features.shape} and coords {coords.shape} spatial dims differ")
    if features.channels + coords.channels != 10:
        raise ShapeError(
            f"mask head wants 10 input channels, got {features.channels}+{coords.channels}"
        )
    stacked = np.concatenate([features.data, coords.data], axis=0)
    h, w = stacked.shape[1:]
    flat = stacked.reshape(10, h * w)
    x1 = np.maximum(params.w1 @ flat + params.b1[:, None], np.float32(0.0))
    x2 = np.maximum(params.w2 @ x1 + params.b2[:, None], np.float32(0.0))
    x3 = params.w3 @ x2 + params.b3[:, None]
    probs_lowres = Tensor((1.0 / (1.0 + np.exp(-x3))).reshape(1, h, w).astype(np.float32))

    if frame is None:
        probs = upsample_patch(
            probs_lowres, 4, (0, 4 * h - 1), (0, 4 * w - 1), origin=(0, 0), full_hw=(h, w)
        )
    else:
        core, origin, full_hw = frame
        probs = upsample_patch(
            probs_lowres,
            4,
            (4 * core.top, 4 * core.bottom + 3),
            (4 * core.left, 4 * core.right + 3),
            origin=origin,
            full_hw=full_hw,
        )
    return probs, probs.data[0] >= threshold


def head_forward(
    head_graph: GraphSpec,
    weights: WeightStore,
    patch: Tensor,
    loc: tuple[int, int],
    plan=None,
) -> tuple[np.ndarray, BoxPrediction]:
    """Run the tower + heads on a level-feature patch and read one cell.

    The patch must cover the trace of the head stack at cell (a, b) (obtain
    it by back-tracing the head graph and executing the level graph to the
    input region).  Returns the raw 169-float controller vector plus the box
    distances (exponentiated) and the centerness score (sigmoid).
    """
    a, b = loc
    rect = Rect.pixel(b, a)
    if plan is None:
        plan = backtrace(head_graph, rect)
    region = plan.regions[head_graph.input_id]
    result = run_traced(head_graph, weights, patch, rect, plan=plan, input_region=region)
    raw = result.output.data[:, 0, 0]
    if raw.size != THETA_LEN + 5:
        raise ShapeError(f"head stack must emit {THETA_LEN + 5} channels, got {raw.size}")
    theta = raw[:THETA_LEN].copy()
    box_raw = raw[THETA_LEN : THETA_LEN + 4].astype(np.float64)
    score = float(1.0 / (1.0 + np.exp(-float(raw[THETA_LEN + 4]))))
    box = BoxPrediction(*(float(v) for v in np.exp(box_raw)), score=score)
    return theta, box


def select_level(scores: dict[str, float], cfg: PyramidConfig, override: str | None = None) -> str:
    """Centerness argmax with lowest-stride tie-break; override wins outright."""
    names = [name for name, _s in cfg.levels]
    if override is not None:
        if override not in names:
            raise ShapeError(f"unknown level {override!r}")
        return override
    best = names[0]
    for name in names[1:]:
        if scores[name] > scores[best]:
            best = name
    return best


# --------------------------------------------------------------------------
# Model construction


def build_backbone(cfg: PyramidConfig, input_shape) -> dict[str, GraphSpec]:
    """Residual backbone + top-down pyramid; one graph per level."""
    c_h, c_w = input_shape[1], input_shape[2]
    deepest = cfg.levels[-1][1]
    if min(c_h, c_w) < deepest:
        raise GraphError(f"input {c_h}x{c_w} smaller than the deepest stride {deepest}")
    if c_h % 32 or c_w % 32:
        raise GraphError("input dims must be multiples of 32 for aligned pyramid merges")

    b = GraphBuilder()
    x = b.input("image")
    cur = b.conv_bn_relu("bb.stem", x, input_shape[0], cfg.stem_channels, 3, stride=2)
    cur = b.maxpool("bb.stem.pool", cur, 2, 2)

    def basic_block(prefix, src, cin, cout, stride):
        r1 = b.conv_bn_relu(f"{prefix}.a", src, cin, cout, 3, stride)
        c2 = b.conv(f"{prefix}.b.conv", r1, cout, cout, 3)
        main = b.bn(f"{prefix}.b.bn", c2)
        if cin != cout or stride != 1:
            proj = b.conv(f"{prefix}.proj.conv", src, cin, cout, 1, stride, pad=0)
            shortcut = b.bn(f"{prefix}.proj.bn", proj)
        else:
            shortcut = src
        return b.relu(f"{prefix}.out", b.add(f"{prefix}.add", main, shortcut))

    ch = cfg.stage_channels
    c2 = basic_block("bb.s2.b0", cur, cfg.stem_channels, ch[0], 1)
    c3 = basic_block("bb.s3.b0", c2, ch[0], ch[1], 2)
    c4 = basic_block("bb.s4.b0", c3, ch[1], ch[2], 2)
    c5 = basic_block("bb.s5.b0", c4, ch[2], ch[3], 2)

    fpn = cfg.fpn_channels
    lat5 = b.conv("fpn.lat5", c5, ch[3], fpn, 1)
    lat4 = b.conv("fpn.lat4", c4, ch[2], fpn, 1)
    lat3 = b.conv("fpn.lat3", c3, ch[1], fpn, 1)
    m5 = lat5
    m4 = b.add("fpn.m4", lat4, b.upsample("fpn.up5", m5, 2))
    m3 = b.add("fpn.m3", lat3, b.upsample("fpn.up4", m4, 2))
    p3 = b.conv("fpn.p3", m3, fpn, fpn, 3)
    p4 = b.conv("fpn.p4", m4, fpn, fpn, 3)
    p5 = b.conv("fpn.p5", m5, fpn, fpn, 3)
    p6 = b.conv("fpn.p6", p5, fpn, fpn, 3, stride=2)
    p7 = b.conv("fpn.p7", b.relu("fpn.p6.relu", p6), fpn, fpn, 3, stride=2)

    # mask branch rides on the stride-8 level
    mb1 = b.conv_bn_relu("mask.l1", p3, fpn, cfg.mask_mid_channels, 3)
    mb2 = b.conv("mask.l2.conv", mb1, cfg.mask_mid_channels, cfg.mask_out_channels, 3)
    mask_out = b.relu("mask.l2.relu", mb2)

    outputs = dict(zip(("P3", "P4", "P5", "P6", "P7"), (p3, p4, p5, p6, p7)))
    graphs = {name: b.graph(outputs[name], input_shape) for name, _stride in cfg.levels}
    graphs["mask"] = b.graph(mask_out, input_shape)
    return graphs


def build_head_graph(cfg: PyramidConfig, level_shape) -> GraphSpec:
    """Shared tower + controller/box/centerness heads over level features.

    Output is a 174-channel map: 169 controller channels, 4 raw box
    channels, 1 raw centerness channel, concatenated so one trace serves
    all three heads.
    """
    b = GraphBuilder()
    cur = b.input("tower.in")
    cin = cfg.fpn_channels
    for i in range(cfg.tower_depth):
        cur = b.conv_bn_relu(f"tower.t{i}", cur, cin, cfg.tower_channels, 3)
        cin = cfg.tower_channels
    ctrl = b.conv("head.ctrl", cur, cin, THETA_LEN, 3)
    box = b.conv("head.box", cur, cin, 4, 3)
    ctr = b.conv("head.ctr", cur, cin, 1, 3)
    cat1 = b.concat("head.cat1", ctrl, box)
    out = b.concat("head.out", cat1, ctr)
    return b.graph(out, level_shape)


@dataclass
class ModelBundle:
    config: PyramidConfig
    input_shape: tuple[int, int, int]
    level_graphs: dict[str, GraphSpec]
    head_graphs: dict[str, GraphSpec]
    mask_graph: GraphSpec
    weights: WeightStore

    def save(self, directory) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        written = []

        def emit(name, doc):
            path = os.path.join(directory, name)
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=1)
                fh.write("\n")
            written.append(name)

        index = {
            "input_shape": list(self.input_shape),
            "levels": [{"name": n, "stride": s} for n, s in self.config.levels],
            "config": {
                "stem_channels": self.config.stem_channels,
                "stage_channels": list(self.config.stage_channels),
                "fpn_channels": self.config.fpn_channels,
                "tower_channels": self.config.tower_channels,
                "tower_depth": self.config.tower_depth,
                "mask_mid_channels": self.config.mask_mid_channels,
                "mask_out_channels": self.config.mask_out_channels,
                "rel_coord_norm": self.config.rel_coord_norm,
            },
            "files": {
                "level_graphs": {n: f"{n}.level.json" for n in self.level_graphs},
                "head_graphs": {n: f"{n}.head.json" for n in self.head_graphs},
                "mask_graph": "mask.graph.json",
                "weights_manifest": "weights.json",
                "weights_blob": "weights.bin",
            },
        }
        emit("bundle.json", index)
        for name, g in self.level_graphs.items():
            emit(f"{name}.level.json", graph_to_dict(g))
        for name, g in self.head_graphs.items():
            emit(f"{name}.head.json", graph_to_dict(g))
        emit("mask.graph.json", graph_to_dict(self.mask_graph))
        self.weights.save(os.path.join(directory, "weights.json"), os.path.join(directory, "weights.bin"))
        written += ["weights.json", "weights.bin"]
        return written

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        with open(os.path.join(directory, "bundle.json")) as fh:
            index = json.load(fh)
        cfg = PyramidConfig(
            levels=tuple((lv["name"], lv["stride"]) for lv in index["levels"]),
            stem_channels=index["config"]["stem_channels"],
            stage_channels=tuple(index["config"]["stage_channels"]),
            fpn_channels=index["config"]["fpn_channels"],
            tower_channels=index["config"]["tower_channels"],
            tower_depth=index["config"]["tower_depth"],
            mask_mid_channels=index["config"]["mask_mid_channels"],
            mask_out_channels=index["config"]["mask_out_channels"],
            rel_coord_norm=index["config"]["rel_coord_norm"],
        )

        def load_graph(name):
            with open(os.path.join(directory, name)) as fh:
                return graph_from_dict(json.load(fh))

        files = index["files"]
        return cls(
            config=cfg,
            input_shape=tuple(index["input_shape"]),
            level_graphs={n: load_graph(f) for n, f in files["level_graphs"].items()},
            head_graphs={n: load_graph(f) for n, f in files["head_graphs"].items()},
            mask_graph=load_graph(files["mask_graph"]),
            weights=WeightStore.load(
                os.path.join(directory, files["weights_manifest"]),
                os.path.join(directory, files["weights_blob"]),
            ),
        )


def build_model(cfg: PyramidConfig, input_shape, seed: int) -> ModelBundle:
    """Assemble backbone, heads and mask branch with seeded random weights."""
    graphs = build_backbone(cfg, input_shape)
    mask_graph = graphs.pop("mask")
    shapes = {name: infer_shapes(g)[g.output_id] for name, g in graphs.items()}
    head_graphs = {name: build_head_graph(cfg, shapes[name]) for name, _s in cfg.levels}
    weights = random_weights(list(graphs.values()) + [mask_graph] + list(head_graphs.values()), seed)
    return ModelBundle(
        config=cfg,
        input_shape=tuple(input_shape),
        level_graphs=graphs,
        head_graphs=head_graphs,
        mask_graph=mask_graph,
        weights=weights,
    )


# --------------------------------------------------------------------------
# Two-phase traced inference


def _mask_head_flops(patch_h: int, patch_w: int, out_h: int, out_w: int) -> int:
    # three 1x1 convs (2*10*8, 2*8*8, 2*8*1) + two relus + sigmoid, then
    # 4 FLOPs per upsampled output pixel
    per_px = 160 + 8 + 128 + 8 + 16 + 2
    return per_px * patch_h * patch_w + 4 * out_h * out_w


@dataclass
class SegmentDiagnostics:
    chosen_level: str
    box: BoxPrediction
    scores: dict[str, float]
    total_traced: int
    total_full: int
    fallback_box: bool = False

    @property
    def savings_ratio(self) -> float:
        return 1.0 - self.total_traced / self.total_full if self.total_full else 0.0

    def to_dict(self) -> dict:
        return {
            "chosen_level": self.chosen_level,
            "box": {"l": self.box.l, "t": self.box.t, "r": self.box.r, "b": self.box.b, "score": self.box.score},
            "scores": dict(self.scores),
            "flops": {
                "total_traced": self.total_traced,
                "total_full": self.total_full,
                "savings_ratio": self.savings_ratio,
            },
            "fallback_box": self.fallback_box,
        }


class Segmenter:
    """Binds a model bundle and serves segment(image, click) queries."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle

    def segment(self, image: Tensor, click: Click, level_override: str | None = None):
        bundle = self.bundle
        cfg = bundle.config
        if image.shape != bundle.input_shape:
            raise ShapeError(f"image shape {image.shape} != model input {bundle.input_shape}")
        if not (0 <= click.x < image.width and 0 <= click.y < image.height):
            raise ShapeError(f"click {click} outside {image.height}x{image.width} image")

        traced_flops = 0
        full_flops = 0
        thetas: dict[str, np.ndarray] = {}
        boxes: dict[str, BoxPrediction] = {}
        locs: dict[str, tuple[int, int]] = {}

        # phase 1: traced head pass at the click cell of every level
        for name, stride in cfg.levels:
            level_g = bundle.level_graphs[name]
            head_g = bundle.head_graphs[name]
            _c, lh, lw = infer_shapes(level_g)[level_g.output_id]
            loc = click_to_location(click, stride, lw, lh)
            locs[name] = loc
            head_plan = backtrace(head_g, Rect.pixel(loc[1], loc[0]))
            need = head_plan.regions[head_g.input_id]

            level_plan = backtrace(level_g, need)
            level_patch = run_traced(level_g, bundle.weights, image, need, plan=level_plan)
            theta, box = head_forward(head_g, bundle.weights, level_patch.output, loc, plan=head_plan)
            thetas[name] = theta
            boxes[name] = box

            traced_flops += count_flops(level_g, level_plan.regions).total_traced
            traced_flops += count_flops(head_g, head_plan.regions).total_traced
            full_flops += count_flops(level_g).total_full
            full_flops += count_flops(head_g).total_full

        scores = {name: boxes[name].score for name, _s in cfg.levels}
        chosen = select_level(scores, cfg, override=level_override)
        params = unpack_mask_params(thetas[chosen])
        box = boxes[chosen]

        # phase 2: box-bounded traced mask branch on the stride-8 level
        mask_g = bundle.mask_graph
        _mc, m_h, m_w = infer_shapes(mask_g)[mask_g.output_id]
        s = cfg.base_stride
        core, fallback = self._box_to_base_rect(click, chosen, locs[chosen], box, m_h, m_w)

        grown = _clamped_grow(core, m_h, m_w)
        mask_plan = backtrace(mask_g, grown)
        branch = run_traced(mask_g, bundle.weights, image, grown, plan=mask_plan)

        base_loc = click_to_location(click, s, m_w, m_h)
        coords_full = rel_coord_map(m_h, m_w, base_loc, cfg.rel_coord_norm)
        coords_patch = Tensor(
            coords_full.data[:, grown.top : grown.bottom + 1, grown.left : grown.right + 1].copy()
        )
        probs, binary = mask_forward(
            branch.output,
            coords_patch,
            params,
            frame=(core, (grown.top, grown.left), (m_h, m_w)),
        )

        traced_flops += count_flops(mask_g, mask_plan.regions).total_traced
        traced_flops += _mask_head_flops(grown.height, grown.width, probs.height, probs.width)
        full_flops += count_flops(mask_g).total_full
        full_flops += _mask_head_flops(m_h, m_w, 4 * m_h, 4 * m_w)

        mask = self._place_mask(binary, core, image.height, image.width)
        diag = SegmentDiagnostics(
            chosen_level=chosen,
            box=box,
            scores=scores,
            total_traced=traced_flops,
            total_full=full_flops,
            fallback_box=fallback,
        )
        return mask, diag

    def _box_to_base_rect(self, click, level_name, loc, box, m_h, m_w):
        """Predicted box -> stride-8 cell rect (10% margin, click cell kept)."""
        cfg = self.bundle.config
        stride = dict(cfg.levels)[level_name]
        s = cfg.base_stride
        a, b = loc
        px = stride // 2 + a * stride
        py = stride // 2 + b * stride
        # distances beyond the image extent behave like the extent itself
        # (and exp() on wild weights may return inf)
        cap = 2.0 * max(m_h, m_w) * s
        x0, x1 = px - min(box.l, cap), px + min(box.r, cap)
        y0, y1 = py - min(box.t, cap), py + min(box.b, cap)
        grow_x = 0.1 * (x1 - x0)
        grow_y = 0.1 * (y1 - y0)
        x0, x1 = x0 - grow_x, x1 + grow_x
        y0, y1 = y0 - grow_y, y1 + grow_y

        fallback = False
        col0 = math.floor((x0 - s // 2) / s)
        col1 = math.ceil((x1 - s // 2) / s)
        row0 = math.floor((y0 - s // 2) / s)
        row1 = math.ceil((y1 - s // 2) / s)
        if col1 < 0 or col0 > m_w - 1 or row1 < 0 or row0 > m_h - 1:
            # degenerate after clamping: fixed 64x64-pixel window at the click
            fallback = True
            half = 32
            col0 = math.floor((click.x - half - s // 2) / s)
            col1 = math.ceil((click.x + half - s // 2) / s)
            row0 = math.floor((click.y - half - s // 2) / s)
            row1 = math.ceil((click.y + half - s // 2) / s)
        col0, col1 = max(col0, 0), min(col1, m_w - 1)
        row0, row1 = max(row0, 0), min(row1, m_h - 1)

        # the click's own cell is always part of the traced region
        c_col = min(click.x // s, m_w - 1)
        c_row = min(click.y // s, m_h - 1)
        return (
            Rect(min(row0, c_row), min(col0, c_col), max(row1, c_row), max(col1, c_col)),
            fallback,
        )

    @staticmethod
    def _place_mask(binary: np.ndarray, core: Rect, img_h: int, img_w: int) -> np.ndarray:
        """Place the stride-2 patch into the image frame by nearest neighbor."""
        mask = np.zeros((img_h, img_w), dtype=bool)
        # patch pixel (i, j) is stride-2 cell (4*core.top + i, 4*core.left + j)
        top2, left2 = 4 * core.top, 4 * core.left
        expanded = np.repeat(np.repeat(binary, 2, axis=0), 2, axis=1)
        y0 = 2 * top2
        x0 = 2 * left2
        y1 = min(y0 + expanded.shape[0], img_h)
        x1 = min(x0 + expanded.shape[1], img_w)
        mask[y0:y1, x0:x1] = expanded[: y1 - y0, : x1 - x0]
        return mask


def _clamped_grow(rect: Rect, h: int, w: int) -> Rect:
    """Grow by one cell per side inside bounds (upsample halo for exactness)."""
    return Rect(max(rect.top - 1, 0), max(rect.left - 1, 0), min(rect.bottom + 1, h - 1), min(rect.right + 1, w - 1))
