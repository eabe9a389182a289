"""Dense single-image tensors and the layer kernels every module executes.

A tensor is a rank-3 feature map (channels x height x width) backed by a
row-major float32 numpy array.  There is no batch dimension: the whole
toolkit operates on one image and one click at a time.

All kernels are pure: inputs are never mutated and outputs are freshly
allocated, so concurrent calls from evaluation workers are safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

POINTWISE_OPS = ("relu", "sigmoid", "batchnorm-inference")


@dataclass(frozen=True)
class Tensor:
    """A channels x height x width float32 feature map."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"tensor must be rank 3 (C,H,W), got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"tensor dimensions must all be >= 1, got {self.data.shape}")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if not self.data.flags["C_CONTIGUOUS"]:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        return cls(np.asarray(arr, dtype=np.float32))

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Tensor":
        return cls(np.zeros((channels, height, width), dtype=np.float32))


@dataclass(frozen=True)
class ConvAttrs:
    """Static parameters of a 2-d convolution layer."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    dilation_h: int = 1
    dilation_w: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride_h < 1 or self.stride_w < 1:
            raise ShapeError("stride must be >= 1")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("padding must be >= 0")
        if self.dilation_h < 1 or self.dilation_w < 1:
            raise ShapeError("dilation must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")

    def out_size(self, in_h: int, in_w: int) -> tuple[int, int]:
        """Output spatial dims by the standard convolution size formula."""
        oh = (in_h + 2 * self.pad_h - self.dilation_h * (self.kernel_h - 1) - 1) // self.stride_h + 1
        ow = (in_w + 2 * self.pad_w - self.dilation_w * (self.kernel_w - 1) - 1) // self.stride_w + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"convolution of {in_h}x{in_w} input with {self} yields non-positive output {oh}x{ow}"
            )
        return oh, ow


def conv2d(x: Tensor, weight: np.ndarray, bias: np.ndarray | None, attrs: ConvAttrs) -> Tensor:
    """Zero-padded 2-d convolution (cross-correlation, the ConvNet convention).

    weight has shape (out_channels, in_channels, kernel_h, kernel_w); bias is
    per-output-channel or None.  Gathers the kernel_h x kernel_w shifted slices
    of the padded input and contracts them against the flattened weights with
    one float32 matmul.
    """
    if x.channels != attrs.in_channels:
        raise ShapeError(f"conv input has {x.channels} channels, attrs declare {attrs.in_channels}")
    w = np.asarray(weight, dtype=np.float32)
    expect = (attrs.out_channels, attrs.in_channels, attrs.kernel_h, attrs.kernel_w)
    if w.shape != expect:
        raise ShapeError(f"conv weight shape {w.shape} does not match attrs {expect}")
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32)
        if bias.shape != (attrs.out_channels,):
            raise ShapeError(f"conv bias shape {bias.shape} != ({attrs.out_channels},)")

    oh, ow = attrs.out_size(x.height, x.width)
    src = x.data
    if attrs.pad_h or attrs.pad_w:
        src = np.pad(src, ((0, 0), (attrs.pad_h, attrs.pad_h), (attrs.pad_w, attrs.pad_w)))

    sh, sw = attrs.stride_h, attrs.stride_w
    dh, dw = attrs.dilation_h, attrs.dilation_w
    cols = np.empty((attrs.in_channels, attrs.kernel_h, attrs.kernel_w, oh, ow), dtype=np.float32)
    for i in range(attrs.kernel_h):
        r0 = i * dh
        for j in range(attrs.kernel_w):
            c0 = j * dw
            cols[:, i, j] = src[:, r0 : r0 + (oh - 1) * sh + 1 : sh, c0 : c0 + (ow - 1) * sw + 1 : sw]

    flat = cols.reshape(attrs.in_channels * attrs.kernel_h * attrs.kernel_w, oh * ow)
    out = w.reshape(attrs.out_channels, -1) @ flat
    if bias is not None:
        out += bias[:, None]
    return Tensor(out.reshape(attrs.out_channels, oh, ow))


def pointwise(x: Tensor, kind: str, scale: np.ndarray | None = None, shift: np.ndarray | None = None) -> Tensor:
    """Shape-preserving channel-local op: relu, sigmoid or folded batchnorm."""
    if kind == "relu":
        return Tensor(np.maximum(x.data, np.float32(0.0)))
    if kind == "sigmoid":
        return Tensor(np.float32(1.0) / (np.float32(1.0) + np.exp(-x.data)))
    if kind == "batchnorm-inference":
        scale = np.asarray(scale, dtype=np.float32)
        shift = np.asarray(shift, dtype=np.float32)
        if scale.shape != (x.channels,) or shift.shape != (x.channels,):
            raise ShapeError(
                f"batchnorm scale/shift must have length {x.channels}, "
                f"got {scale.shape} and {shift.shape}"
            )
        return Tensor(x.data * scale[:, None, None] + shift[:, None, None])
    raise ShapeError(f"unknown pointwise kind {kind!r}")


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Channelwise max over kernel x kernel windows; padding is always 0."""
    if kernel < 1 or stride < 1:
        raise ShapeError("pool kernel and stride must be >= 1")
    if kernel > x.height or kernel > x.width:
        raise ShapeError(f"pool kernel {kernel} larger than input {x.height}x{x.width}")
    oh = (x.height - kernel) // stride + 1
    ow = (x.width - kernel) // stride + 1
    out = None
    for i in range(kernel):
        for j in range(kernel):
            window = x.data[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride]
            out = window.copy() if out is None else np.maximum(out, window)
    return Tensor(out)


def _source_taps(out_lo: int, out_hi: int, scale: int, full: int):
    """Half-pixel source rows/cols and blend weights for one axis.

    Destination index R maps to src = (R + 0.5)/scale - 0.5, clamped to the
    feature map's true bounds `full`.  Returns integer tap pairs (i0, i1) and
    the fractional weight on i1; when the weight is 0 the second tap collapses
    onto the first so callers never read past the needed region.
    """
    dst = np.arange(out_lo, out_hi + 1, dtype=np.float64)
    src = np.clip((dst + 0.5) / scale - 0.5, 0.0, float(full - 1))
    i0 = np.floor(src).astype(np.int64)
    frac = (src - i0).astype(np.float32)
    i1 = i0 + (frac > 0)
    return i0, i1, frac


def bilinear_upsample(x: Tensor, scale: int) -> Tensor:
    """Bilinear x2 / x4 upsampling with half-pixel source alignment."""
    if scale not in (2, 4):
        raise ShapeError(f"upsample scale must be 2 or 4, got {scale}")
    return upsample_patch(
        x,
        scale,
        out_rows=(0, x.height * scale - 1),
        out_cols=(0, x.width * scale - 1),
        origin=(0, 0),
        full_hw=(x.height, x.width),
    )


def upsample_patch(
    x: Tensor,
    scale: int,
    out_rows: tuple[int, int],
    out_cols: tuple[int, int],
    origin: tuple[int, int],
    full_hw: tuple[int, int],
) -> Tensor:
    """Bilinear upsample evaluated on an output window in full-frame coordinates.

    `x` holds source rows/cols starting at `origin` within a feature map whose
    true extent is `full_hw`; source coordinates are clamped against the true
    extent, so border behaviour is identical whether `x` is the whole map or a
    traced patch that covers the needed region.
    """
    r0, r1, fr = _source_taps(out_rows[0], out_rows[1], scale, full_hw[0])
    c0, c1, fc = _source_taps(out_cols[0], out_cols[1], scale, full_hw[1])
    r0 -= origin[0]
    r1 -= origin[0]
    c0 -= origin[1]
    c1 -= origin[1]
    for idx, name in ((r0, "row"), (r1, "row"), (c0, "col"), (c1, "col")):
        if idx.min() < 0 or idx.max() >= x.data.shape[1 if name == "row" else 2]:
            raise ShapeError("upsample patch does not cover the needed source region")

    top = x.data[:, r0, :]
    bot = x.data[:, r1, :]
    rows = top * (1.0 - fr)[None, :, None] + bot * fr[None, :, None]
    left = rows[:, :, c0]
    right = rows[:, :, c1]
    out = left * (1.0 - fc)[None, None, :] + right * fc[None, None, :]
    return Tensor(out.astype(np.float32))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} and {b.shape}")
    return Tensor(a.data + b.data)


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat requires identical spatial dims, got {a.shape} and {b.shape}")
    return Tensor(np.concatenate([a.data, b.data], axis=0))


def crop(x: Tensor, top: int, left: int, bottom: int, right: int) -> Tensor:
    """Sub-tensor copy over an inclusive rectangle."""
    if not (0 <= top <= bottom < x.height and 0 <= left <= right < x.width):
        raise ShapeError(
            f"crop rect ({top},{left},{bottom},{right}) out of bounds for {x.height}x{x.width}"
        )
    return Tensor(x.data[:, top : bottom + 1, left : right + 1].copy())


def pad(x: Tensor, margins: tuple[int, int, int, int], value: float = 0.0) -> Tensor:
    """Border extension by (top, left, bottom, right) widths filled with value."""
    t, l, b, r = margins
    if min(t, l, b, r) < 0:
        raise ShapeError(f"pad margins must be >= 0, got {margins}")
    if t == l == b == r == 0:
        return Tensor(x.data.copy())
    return Tensor(
        np.pad(x.data, ((0, 0), (t, b), (l, r)), constant_values=np.float32(value))
    )
