"""Convolution, RoIAlign and deformable sampling on single feature maps.

Coordinates follow one convention throughout: a feature map of shape
``(C, H, W)`` has cell ``(r, c)`` centred at continuous point
``(r + 0.5, c + 0.5)``; ``x`` is the row axis and pairs with the kernel
height ``h``, ``y`` is the column axis and pairs with the kernel width ``w``.
Boxes are in image pixels and are divided by the map stride ``S`` to reach
grid units.

Convolution here is always stride 1 with "same" zero padding of
``h // 2`` rows before and ``h - 1 - h // 2`` after (the asymmetric split is
what even kernels need for the tap positions below), so the tap ``(i, j)`` of
output ``(X, Y)`` sits at::

    (X - h // 2 + i + 0.5,  Y - w // 2 + j + 0.5)

Bilinear sampling reads zero outside the map, which makes a sample at an
out-of-range cell centre agree with the zero padding of the convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .boxes import Box
from .tensor import ShapeError, gemm

__all__ = [
    "ConvSpec",
    "FeatureMap",
    "OffsetField",
    "SamplePoint",
    "im2col",
    "col2im",
    "conv_forward",
    "conv_backward",
    "bilinear_sample",
    "bilinear_grads",
    "roialign",
    "roialign_points",
    "implicit_roi",
    "conv_sampling_points",
    "roiconv_offsets",
    "deform_sampling_points",
    "deform_conv_forward",
    "deform_conv_backward",
    "flop_count",
    "OFFSET_GEN_MACS",
]


@dataclass(frozen=True)
class ConvSpec:
    """Kernel geometry plus parameters of one convolution layer.

    ``weights`` has shape ``(out_channels, in_channels * kernel_h * kernel_w)``
    with the column index ``c * h * w + i * w + j`` for channel ``c`` and tap
    ``(i, j)``.
    """

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels) < 1:
            raise ValueError("kernel dims and channel counts must be positive")
        want = (self.out_channels, self.in_channels * self.kernel_h * self.kernel_w)
        if np.shape(self.weights) != want:
            raise ShapeError(f"weights shape {np.shape(self.weights)} != {want}")
        if np.shape(self.bias) != (self.out_channels,):
            raise ShapeError(f"bias shape {np.shape(self.bias)} != ({self.out_channels},)")

    @classmethod
    def from_weights(cls, weights, bias=None, kernel=(3, 3)) -> "ConvSpec":
        weights = np.asarray(weights)
        h, w = kernel
        cout, k = weights.shape
        if k % (h * w):
            raise ShapeError(f"weights width {k} is not a multiple of {h}x{w}")
        if bias is None:
            bias = np.zeros(cout, dtype=weights.dtype)
        return cls(h, w, k // (h * w), cout, weights, np.asarray(bias))

    @classmethod
    def random(cls, rng, in_channels, out_channels, kernel_h, kernel_w,
               std=None, dtype=np.float64) -> "ConvSpec":
        """Gaussian weights (He scale unless ``std`` is given) and bias."""
        fan_in = in_channels * kernel_h * kernel_w
        std = np.sqrt(2.0 / fan_in) if std is None else std
        weights = rng.normal(0.0, std, size=(out_channels, fan_in)).astype(dtype)
        bias = rng.normal(0.0, std, size=(out_channels,)).astype(dtype)
        return cls(kernel_h, kernel_w, in_channels, out_channels, weights, bias)

    @property
    def taps(self) -> int:
        return self.kernel_h * self.kernel_w


@dataclass(frozen=True)
class FeatureMap:
    tensor: np.ndarray
    stride: float = 1

    def __post_init__(self):
        if np.ndim(self.tensor) != 3:
            raise ShapeError(f"feature map must be (C, H, W), got {np.shape(self.tensor)}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def shape(self):
        return self.tensor.shape


@dataclass(frozen=True)
class OffsetField:
    """Per-location tap deviations, shape ``(2 * h * w, H, W)`` in grid units.

    Channel ``2 * (i * w + j)`` is the row deviation of tap ``(i, j)`` and
    the following channel its column deviation.
    """

    tensor: np.ndarray

    @property
    def dx(self) -> np.ndarray:
        return self.tensor[0::2]

    @property
    def dy(self) -> np.ndarray:
        return self.tensor[1::2]

    def check(self, spec: ConvSpec, H: int, W: int) -> None:
        want = (2 * spec.taps, H, W)
        if self.tensor.shape != want:
            raise ShapeError(f"offset field shape {self.tensor.shape} != {want}")


@dataclass(frozen=True)
class SamplePoint:
    x: float
    y: float


def _as_array(f) -> np.ndarray:
    return f.tensor if isinstance(f, FeatureMap) else np.asarray(f)


def _kernel_dims(kernel) -> tuple[int, int]:
    if isinstance(kernel, ConvSpec):
        return kernel.kernel_h, kernel.kernel_w
    h, w = kernel
    return int(h), int(w)


# -- im2col / convolution ---------------------------------------------------

def _check_kernel(h, w, H, W):
    if h > 2 * H + 1 or w > 2 * W + 1:
        raise ShapeError(f"{h}x{w} kernel too large for a {H}x{W} map")


def im2col(f, spec) -> np.ndarray:
    """Unfold a ``(C, H, W)`` map into ``(C * h * w, H * W)`` tap columns."""
    x = _as_array(f)
    C, H, W = x.shape
    h, w = _kernel_dims(spec)
    _check_kernel(h, w, H, W)
    if isinstance(spec, ConvSpec) and spec.in_channels != C:
        raise ShapeError(f"map has {C} channels, spec expects {spec.in_channels}")
    padded = np.pad(x, ((0, 0), (h // 2, h - 1 - h // 2), (w // 2, w - 1 - w // 2)))
    win = sliding_window_view(padded, (h, w), axis=(1, 2))  # (C, H, W, h, w)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * h * w, H * W)


def col2im(cols: np.ndarray, f_shape, spec) -> np.ndarray:
    """Scatter-add adjoint of :func:`im2col`."""
    C, H, W = f_shape
    h, w = _kernel_dims(spec)
    _check_kernel(h, w, H, W)
    if cols.shape != (C * h * w, H * W):
        raise ShapeError(f"cols shape {cols.shape} != {(C * h * w, H * W)}")
    cols = cols.reshape(C, h, w, H, W)
    padded = np.zeros((C, H + h - 1, W + w - 1), dtype=cols.dtype)
    for i in range(h):
        for j in range(w):
            padded[:, i:i + H, j:j + W] += cols[:, i, j]
    return padded[:, h // 2:h // 2 + H, w // 2:w // 2 + W].copy()


def _check_channels(x, spec):
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"map has {x.shape[0]} channels, spec expects {spec.in_channels}")


def conv_forward(f, spec: ConvSpec) -> np.ndarray:
    x = _as_array(f)
    _check_channels(x, spec)
    _, H, W = x.shape
    out = gemm(spec.weights, im2col(x, spec)) + spec.bias[:, None]
    return out.reshape(spec.out_channels, H, W)


def conv_backward(f, spec: ConvSpec, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv_forward`."""
    x = _as_array(f)
    _check_channels(x, spec)
    _, H, W = x.shape
    if grad_out.shape != (spec.out_channels, H, W):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(spec.out_channels, H, W)}")
    g = grad_out.reshape(spec.out_channels, H * W)
    cols = im2col(x, spec)
    grad_w = gemm(g, cols.T)
    grad_in = col2im(gemm(spec.weights.T, g), x.shape, spec)
    return grad_in, grad_w, g.sum(axis=1)


# -- bilinear sampling ------------------------------------------------------

def _corners(xs, ys, H, W):
    """Bracketing cells and weights for arrays of sample points.

    Returns the fractional parts ``(a, b)`` and four ``(flat_index, mask)``
    pairs in the order (r0,c0), (r0,c0+1), (r0+1,c0), (r0+1,c0+1). On a
    cell-centre gridline ``a`` (or ``b``) is 0 and the lower cell is r0.
    """
    u = np.asarray(xs, dtype=np.float64) - 0.5
    v = np.asarray(ys, dtype=np.float64) - 0.5
    r0 = np.floor(u)
    c0 = np.floor(v)
    a = u - r0
    b = v - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    out = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        r = r0 + dr
        c = c0 + dc
        mask = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        out.append((np.where(mask, r * W + c, 0), mask))
    return a, b, out


def _gather(x2d, corners):
    """Corner values ``(4, C, N)``, zero where the corner is outside the map."""
    vals = np.empty((4, x2d.shape[0], corners[0][0].size), dtype=x2d.dtype)
    for k, (idx, mask) in enumerate(corners):
        np.take(x2d, idx.ravel(), axis=1, out=vals[k])
        vals[k] *= mask.ravel()
    return vals


def _interpolate(vals, a, b):
    # weights follow the map's precision so float32 maps stay float32
    a = a.ravel().astype(vals.dtype, copy=False)
    b = b.ravel().astype(vals.dtype, copy=False)
    return ((1 - a) * (1 - b) * vals[0] + (1 - a) * b * vals[1]
            + a * (1 - b) * vals[2] + a * b * vals[3])


def bilinear_sample(f, p, channel: int = 0) -> float:
    x = _as_array(f)
    _, H, W = x.shape
    px, py = (p.x, p.y) if isinstance(p, SamplePoint) else p
    a, b, corners = _corners(np.array([px]), np.array([py]), H, W)
    vals = _gather(x[channel].reshape(1, -1), corners)
    return float(_interpolate(vals, a, b)[0, 0])


def bilinear_grads(f, p, channel: int = 0, upstream: float = 1.0):
    """Partials of ``upstream * bilinear_sample(f, p, channel)``.

    Returns ``(grad_cells, grad_p)`` where ``grad_cells`` lists
    ``((row, col), value)`` for the in-map bracketing cells and ``grad_p`` is
    ``(d/dx, d/dy)``. Exactly on a cell-centre line the lower-cell side is
    used.
    """
    x = _as_array(f)
    _, H, W = x.shape
    px, py = (p.x, p.y) if isinstance(p, SamplePoint) else p
    a, b, corners = _corners(np.array([px]), np.array([py]), H, W)
    v = _gather(x[channel].reshape(1, -1), corners)[:, 0, 0]
    a = float(a[0])
    b = float(b[0])
    weights = ((1 - a) * (1 - b), (1 - a) * b, a * (1 - b), a * b)
    grad_cells = []
    for (idx, mask), wgt in zip(corners, weights):
        if mask[0]:
            grad_cells.append((divmod(int(idx[0]), W), upstream * wgt))
    gx = (1 - b) * (v[2] - v[0]) + b * (v[3] - v[1])
    gy = (1 - a) * (v[1] - v[0]) + a * (v[3] - v[2])
    return grad_cells, (upstream * gx, upstream * gy)


def _sample_grid(x, xs, ys):
    """Bilinear samples of every channel at arrays of points: ``(C, *xs.shape)``."""
    C, H, W = x.shape
    a, b, corners = _corners(xs, ys, H, W)
    vals = _gather(x.reshape(C, H * W), corners)
    return _interpolate(vals, a, b).reshape((C,) + np.shape(xs))


# -- RoIAlign and implicit RoIs -------------------------------------------

def _box_coords(box):
    x1, y1, x2, y2 = (float(v) for v in box)
    return x1, y1, x2, y2


def roialign_points(roi, out_h: int, out_w: int, stride: float):
    """Bin-centre sample coordinates (grid units) of a RoI, one per axis."""
    x1, y1, x2, y2 = _box_coords(roi)
    if x2 < x1 or y2 < y1:
        raise ValueError(f"RoI has negative extent: {roi}")
    i = np.arange(out_h) + 0.5
    j = np.arange(out_w) + 0.5
    xs = (out_h * x1 + (x2 - x1) * i) / (out_h * stride)
    ys = (out_w * y1 + (y2 - y1) * j) / (out_w * stride)
    return xs, ys


def roialign(f: FeatureMap, roi, out_h: int, out_w: int) -> np.ndarray:
    """RoIAlign with sampling ratio 1: one bilinear sample per bin centre."""
    xs, ys = roialign_points(roi, out_h, out_w, f.stride)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return _sample_grid(f.tensor, gx, gy)


def implicit_roi(X, Y, kernel, stride) -> Box:
    """Image-space box whose RoIAlign samples coincide with the conv taps at (X, Y)."""
    h, w = _kernel_dims(kernel)
    x1 = (X - h // 2) * stride
    y1 = (Y - w // 2) * stride
    return Box(x1, y1, (X - h // 2 + h) * stride, (Y - w // 2 + w) * stride)


def conv_sampling_points(kernel, H: int, W: int):
    """Regular tap positions for every output cell: two ``(h * w, H, W)`` arrays."""
    h, w = _kernel_dims(kernel)
    i, j, X, Y = np.meshgrid(np.arange(h), np.arange(w), np.arange(H), np.arange(W),
                             indexing="ij")
    xs = (X - h // 2 + i + 0.5).astype(np.float64).reshape(h * w, H, W)
    ys = (Y - w // 2 + j + 0.5).astype(np.float64).reshape(h * w, H, W)
    return xs, ys


# -- RoIConv offsets --------------------------------------------------------

# multiply-adds per offset scalar: x1/S - X + k + (x2/(hS) - x1/(hS) - 1)(i + .5)
# is affine in (x1, x2, X) with three products and three additions
OFFSET_GEN_MACS = 6


def roiconv_offsets(anchors, kernel, stride) -> OffsetField:
    """Offsets that move the conv taps at each location onto its anchor's bins.

    ``anchors`` is an ``(H, W, 4)`` array (or nested sequence) of
    ``(x1, y1, x2, y2)`` boxes in image pixels, one per output location.
    """
    h, w = _kernel_dims(kernel)
    a = np.asarray([[tuple(b) for b in row] for row in anchors], dtype=np.float64) \
        if not isinstance(anchors, np.ndarray) else np.asarray(anchors, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 4:
        raise ShapeError(f"anchors must be (H, W, 4), got {a.shape}")
    x1, y1, x2, y2 = np.moveaxis(a, 2, 0)
    if np.any(x2 < x1) or np.any(y2 < y1):
        raise ValueError("anchor with negative extent")
    H, W = x1.shape
    X = np.arange(H, dtype=np.float64)[:, None]
    Y = np.arange(W, dtype=np.float64)[None, :]
    i = (np.arange(h) + 0.5)[:, None, None]
    j = (np.arange(w) + 0.5)[:, None, None]
    ox = x1 / stride - X + h // 2 + ((x2 - x1) / (h * stride) - 1) * i  # (h, H, W)
    oy = y1 / stride - Y + w // 2 + ((y2 - y1) / (w * stride) - 1) * j  # (w, H, W)
    out = np.empty((h, w, 2, H, W), dtype=np.float64)
    out[:, :, 0] = ox[:, None]
    out[:, :, 1] = oy[None, :]
    return OffsetField(out.reshape(2 * h * w, H, W))


# -- deformable convolution -------------------------------------------------

def deform_sampling_points(kernel, offsets: OffsetField):
    """Regular tap positions displaced by ``offsets``: two ``(h * w, H, W)`` arrays."""
    _, H, W = offsets.tensor.shape
    xs, ys = conv_sampling_points(kernel, H, W)
    return xs + offsets.dx, ys + offsets.dy


def _deform_cols(x, spec, offsets):
    C, H, W = x.shape
    xs, ys = deform_sampling_points(spec, offsets)
    a, b, corners = _corners(xs, ys, H, W)
    vals = _gather(x.reshape(C, H * W), corners)  # (4, C, T*N)
    cols = _interpolate(vals, a, b).reshape(C * spec.taps, H * W)
    return cols, (a, b, corners, vals)


def _check_deform(x, spec, offsets):
    _check_channels(x, spec)
    _check_kernel(spec.kernel_h, spec.kernel_w, x.shape[1], x.shape[2])
    offsets.check(spec, x.shape[1], x.shape[2])


def deform_conv_forward(f, spec: ConvSpec, offsets: OffsetField) -> np.ndarray:
    """Convolution whose taps are displaced per location by ``offsets``."""
    x = _as_array(f)
    _check_deform(x, spec, offsets)
    _, H, W = x.shape
    cols, _ = _deform_cols(x, spec, offsets)
    out = gemm(spec.weights, cols) + spec.bias[:, None]
    return out.reshape(spec.out_channels, H, W)


def deform_conv_backward(f, spec: ConvSpec, offsets: OffsetField, grad_out,
                         offsets_trainable: bool = True):
    """Return ``(grad_input, grad_weights, grad_bias, grad_offsets)``.

    ``grad_offsets`` is None when ``offsets_trainable`` is False, which is how
    RoIConv treats its analytically generated offsets.
    """
    x = _as_array(f)
    _check_deform(x, spec, offsets)
    C, H, W = x.shape
    if grad_out.shape != (spec.out_channels, H, W):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(spec.out_channels, H, W)}")
    T, N = spec.taps, H * W
    cols, (a, b, corners, vals) = _deform_cols(x, spec, offsets)
    g = grad_out.reshape(spec.out_channels, N)
    grad_w = gemm(g, cols.T)
    gcols = gemm(spec.weights.T, g).reshape(C, T * N)

    a = a.ravel()
    b = b.ravel()
    grad_in = np.zeros((H * W, C), dtype=gcols.dtype)
    for (idx, mask), wgt in zip(corners, ((1 - a) * (1 - b), (1 - a) * b,
                                          a * (1 - b), a * b)):
        keep = mask.ravel()
        np.add.at(grad_in, idx.ravel()[keep], (gcols[:, keep] * wgt[keep]).T)
    grad_in = grad_in.T.reshape(C, H, W)

    grad_off = None
    if offsets_trainable:
        dvdx = (1 - b) * (vals[2] - vals[0]) + b * (vals[3] - vals[1])
        dvdy = (1 - a) * (vals[1] - vals[0]) + a * (vals[3] - vals[2])
        grad_off = np.empty((T, 2, N), dtype=gcols.dtype)
        grad_off[:, 0] = (gcols * dvdx).sum(axis=0).reshape(T, N)
        grad_off[:, 1] = (gcols * dvdy).sum(axis=0).reshape(T, N)
        grad_off = grad_off.reshape(2 * T, H, W)
    return grad_in, grad_w, g.sum(axis=1), grad_off


# -- cost model -------------------------------------------------------------

def flop_count(op_kind: str, spec, H: int, W: int,
               with_offset_generation: bool = False) -> int:
    """Multiply-add count of one forward pass.

    The sampling-and-accumulate part is ``Cout * Cin * h * w * H * W`` for
    every kind; the bias seeds the accumulator and costs nothing, and
    interpolation weights are excluded for all kinds alike. With
    ``with_offset_generation`` RoIConv adds the affine offset map
    (``OFFSET_GEN_MACS`` per offset scalar) and learned deformable
    convolution adds its 1x1 offset convolution.
    """
    taps = spec.kernel_h * spec.kernel_w
    macs = spec.out_channels * spec.in_channels * taps * H * W
    if op_kind == "conv":
        return macs
    if op_kind == "deform_conv":
        if with_offset_generation:
            macs += 2 * taps * spec.in_channels * H * W
        return macs
    if op_kind == "roiconv":
        if with_offset_generation:
            macs += 2 * taps * OFFSET_GEN_MACS * H * W
        return macs
    raise ValueError(f"unknown op kind {op_kind!r}")
