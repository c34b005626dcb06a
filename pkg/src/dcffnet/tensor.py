"""Dense tensor ops on C x H x W numpy arrays.

Tensors are plain ``numpy.ndarray`` of float32 or float64. All ops use
cross-correlation semantics (no kernel flip) and zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for k in (self.kernel_h, self.kernel_w):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel extents must be odd and positive, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv {self} on {h}x{w} input gives empty output {ho}x{wo}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def as_tensor(a, dtype=None) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.dtype.type not in DTYPES:
        arr = arr.astype(np.float64)
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def _check_same_dtype(*arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise TypeError(f"dtype mismatch: {dt} vs {a.dtype}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def conv2d(input, weight, bias, spec: ConvSpec) -> np.ndarray:
    """Strided, zero-padded 2-D cross-correlation plus per-channel bias."""
    x, w, b = as_tensor(input), as_tensor(weight), as_tensor(bias)
    _check_same_dtype(x, w, b)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and O x C x kh x kw weight, got {x.shape} and {w.shape}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} disagrees with {spec}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"input {x.shape} has {x.shape[0]} channels but weight {w.shape} expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias {b.shape} does not match weight {w.shape}")
    ho, wo = spec.out_extent(x.shape[1], x.shape[2])
    out = np.zeros((w.shape[0], ho, wo), dtype=x.dtype)
    return kernels.conv2d_forward(_pad(x, spec.padding), w, b, spec.stride, out)


def conv2d_grads(gout, input, weight, spec: ConvSpec):
    """Gradients of conv2d with respect to input, weight and bias."""
    x = as_tensor(input)
    xpad = _pad(x, spec.padding)
    gxpad = np.zeros_like(xpad)
    kernels.conv2d_backward_input(gout, weight, spec.stride, gxpad)
    p = spec.padding
    gx = gxpad[:, p:p + x.shape[1], p:p + x.shape[2]].copy() if p else gxpad
    gw = kernels.conv2d_backward_weight(gout, xpad, spec.stride, np.zeros_like(weight))
    gb = gout.sum(axis=(1, 2))
    return gx, gw, gb


def depthwise_xcorr(search, template) -> np.ndarray:
    """Per-channel valid cross-correlation of ``search`` with ``template``."""
    s, t = as_tensor(search), as_tensor(template)
    _check_same_dtype(s, t)
    if s.ndim != 3 or t.ndim != 3:
        raise ShapeError(f"depthwise_xcorr expects 3-D tensors, got {s.shape} and {t.shape}")
    if s.shape[0] != t.shape[0]:
        raise ShapeError(f"channel mismatch: search {s.shape} vs template {t.shape}")
    if t.shape[1] > s.shape[1] or t.shape[2] > s.shape[2]:
        raise ShapeError(f"template {t.shape} larger than search {s.shape}")
    out = np.zeros((s.shape[0], s.shape[1] - t.shape[1] + 1, s.shape[2] - t.shape[2] + 1), dtype=s.dtype)
    return kernels.xcorr_forward(s, t, out)


def depthwise_xcorr_grads(gout, search, template):
    gs = np.zeros_like(search)
    gt = np.zeros_like(template)
    kernels.xcorr_backward(gout, search, template, gs, gt)
    return gs, gt


def _axis_weights(n_in: int, n_out: int, dtype):
    # align-corners: source = i * (n_in - 1) / (n_out - 1); a single output samples index 0
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, (1 - frac).astype(dtype), frac


def _resize_tables(in_shape, out_shape, dtype):
    tables = []
    for n_in, n_out in zip(in_shape, out_shape):
        tables.extend(_axis_weights(n_in, n_out, dtype))
    return tables


def resize_trilinear(input, target_shape) -> np.ndarray:
    """Align-corners linear interpolation along channel, row and column axes."""
    x = as_tensor(input)
    target_shape = tuple(int(n) for n in target_shape)
    if x.ndim != 3 or len(target_shape) != 3:
        raise ShapeError(f"resize_trilinear expects 3-D input and target, got {x.shape} -> {target_shape}")
    if any(n < 1 for n in target_shape):
        raise ShapeError(f"target extents must be >= 1, got {target_shape}")
    if target_shape == x.shape:
        return x.copy()
    out = np.zeros(target_shape, dtype=x.dtype)
    return kernels.resize_forward(x, *_resize_tables(x.shape, target_shape, x.dtype), out)


def resize_trilinear_grad(gout, in_shape) -> np.ndarray:
    if tuple(in_shape) == gout.shape:
        return gout.copy()
    gx = np.zeros(in_shape, dtype=gout.dtype)
    return kernels.resize_backward(gout, *_resize_tables(in_shape, gout.shape, gout.dtype), gx)


def pointwise(kind: str, a, b=None):
    """Elementwise ``add``, ``relu`` or per-channel ``scale_shift``.

    For ``scale_shift`` pass ``b=(gamma, beta)``; the result is
    ``gamma[c] * x + beta[c]`` (inference-form batch norm).
    """
    a = as_tensor(a)
    if kind == "add":
        b = as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
        _check_same_dtype(a, b)
        return a + b
    if kind == "relu":
        # maximum (not a > 0 masking) so NaN propagates and divergence stays visible
        return np.maximum(a, np.zeros((), dtype=a.dtype))
    if kind == "scale_shift":
        gamma, beta = (as_tensor(v) for v in b)
        if gamma.shape != (a.shape[0],) or beta.shape != (a.shape[0],):
            raise ShapeError(f"gamma/beta {gamma.shape}/{beta.shape} must have length {a.shape[0]}")
        expand = (slice(None),) + (None,) * (a.ndim - 1)
        return gamma[expand] * a + beta[expand]
    raise ValueError(f"unknown pointwise kind {kind!r}")
