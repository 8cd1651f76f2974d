"""Differentiable neural-network operators on NCHW tensors.

Convolutions use a strided im2col view and ``tensordot``; the backward pass
scatters column gradients back one kernel tap at a time, which keeps memory
at one input-sized buffer regardless of kernel size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Parameter, Tensor, add, make_result, mul
from .errors import BinTooSmall, DegenerateBatch, EmptyOutput, ShapeMismatch


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if min(self.kernel + self.stride + self.dilation) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid convolution spec {self}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if ho < 1 or wo < 1:
            raise EmptyOutput(f"input {h}x{w} too small for {self}")
        return ho, wo

    def transposed_output_size(self, h: int, w: int, output_padding=0) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        oh, ow = _pair(output_padding)
        if not (0 <= oh < max(sh, dh) and 0 <= ow < max(sw, dw)):
            raise ValueError(f"output_padding {output_padding} must be below stride or dilation")
        ho = (h - 1) * sh - 2 * ph + dh * (kh - 1) + 1 + oh
        wo = (w - 1) * sw - 2 * pw + dw * (kw - 1) + 1 + ow
        if ho < 1 or wo < 1:
            raise EmptyOutput(f"transposed output empty for input {h}x{w} and {self}")
        return ho, wo


def _windows(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Read-only view of shape (N, C, Ho, Wo, kh, kw)."""
    n, c = xp.shape[:2]
    s_n, s_c, s_h, s_w = xp.strides
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s_n, s_c, s_h * sh, s_w * sw, s_h * dh, s_w * dw),
        writeable=False,
    )


def _pad(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ho, wo = spec.output_size(*x.shape[2:])
    cols = _windows(_pad(x, spec), spec, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_grad_weight(x: np.ndarray, g: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ho, wo = g.shape[2:]
    cols = _windows(_pad(x, spec), spec, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape: tuple, spec: ConvSpec) -> np.ndarray:
    n, c, h, wd = x_shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = spec.kernel, spec.stride, spec.padding, spec.dilation
    ho, wo = g.shape[2:]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dh, j * dw
            dxp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dxp[:, :, ph : ph + h, pw : pw + wd]


def _spec_for(weight_shape, stride, padding, dilation, spec) -> ConvSpec:
    if spec is not None:
        if tuple(spec.kernel) != tuple(weight_shape[2:]):
            raise ShapeMismatch(f"spec kernel {spec.kernel} != weight kernel {weight_shape[2:]}")
        return spec
    return ConvSpec(tuple(weight_shape[2:]), stride, padding, dilation)


def _add_bias(out: Tensor, bias: Tensor | None, channels: int) -> Tensor:
    if bias is None:
        return out
    if bias.shape != (channels,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({channels},)")
    return add(out, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1,
           spec: ConvSpec | None = None) -> Tensor:
    """Zero-padded, dilated 2D cross-correlation.

    ``weight`` has shape (Cout, Cin, kh, kw). The kernel size of ``spec`` (if
    given) must agree with the weight.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    spec = _spec_for(weight.shape, stride, padding, dilation, spec)
    xd, wd = x.data, weight.data
    out = _conv_forward(xd, wd, spec)

    def bw(g):
        gx = _conv_grad_input(g, wd, xd.shape, spec) if x.requires_grad else None
        gw = _conv_grad_weight(xd, g, spec) if weight.requires_grad else None
        return gx, gw

    res = make_result(out, "conv2d", (x, weight), bw, ctx={"spec": spec})
    return _add_bias(res, bias, weight.shape[0])


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1,
                     spec: ConvSpec | None = None, output_padding=0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same weight and geometry.

    ``weight`` has shape (Cin, Cout, kh, kw), i.e. the conv2d weight that
    maps Cout channels to Cin. Several conv2d input sizes share one output
    size when the stride does not divide evenly; ``output_padding`` adds the
    trailing rows/columns that pick the larger ones.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv_transpose2d expects 4D tensors, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    spec = _spec_for(weight.shape, stride, padding, dilation, spec)
    ho, wo = spec.transposed_output_size(*x.shape[2:], output_padding)
    xd, wd = x.data, weight.data
    out_shape = (x.shape[0], weight.shape[1], ho, wo)
    out = _conv_grad_input(xd, wd, out_shape, spec)

    def bw(g):
        gx = _conv_forward(g, wd, spec) if x.requires_grad else None
        gw = _conv_grad_weight(g, xd, spec) if weight.requires_grad else None
        return gx, gw

    res = make_result(np.ascontiguousarray(out), "conv_transpose2d", (x, weight), bw, ctx={"spec": spec})
    return _add_bias(res, bias, weight.shape[1])


def _pool_geometry(x: Tensor, kernel, stride):
    kernel = _pair(kernel)
    stride = _pair(stride if stride is not None else kernel)
    spec = ConvSpec(kernel, stride)
    return spec, spec.output_size(*x.shape[2:])


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    spec, (ho, wo) = _pool_geometry(x, kernel, stride)
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    out = _windows(x.data, spec, ho, wo).mean(axis=(4, 5))
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        gs = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gs
        return (dx,)

    return make_result(out, "avg_pool2d", (x,), bw)


def max_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Window maximum; ties route the gradient to the first element in row-major order."""
    spec, (ho, wo) = _pool_geometry(x, kernel, stride)
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    n, c = x.shape[:2]
    win = _windows(x.data, spec, ho, wo).reshape(n, c, ho, wo, kh * kw)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += g * (idx == i * kw + j)
        return (dx,)

    return make_result(out, "max_pool2d", (x,), bw)


def adaptive_bins(size: int, k: int) -> list[tuple[int, int]]:
    """Contiguous bins [floor(i*size/k), floor((i+1)*size/k)) partitioning an axis."""
    if k < 1 or k > size:
        raise BinTooSmall(f"cannot split an axis of {size} into {k} bins")
    return [((i * size) // k, ((i + 1) * size) // k) for i in range(k)]


def adaptive_avg_pool2d(x: Tensor, out) -> Tensor:
    kh, kw = _pair(out)
    h, w = x.shape[2:]
    rows, cols = adaptive_bins(h, kh), adaptive_bins(w, kw)
    xd = x.data
    res = np.empty(x.shape[:2] + (kh, kw), dtype=x.dtype)
    for a, (r0, r1) in enumerate(rows):
        for b, (c0, c1) in enumerate(cols):
            res[:, :, a, b] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        for a, (r0, r1) in enumerate(rows):
            for b, (c0, c1) in enumerate(cols):
                dx[:, :, r0:r1, c0:c1] += (g[:, :, a, b] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (dx,)

    return make_result(res, "adaptive_avg_pool2d", (x,), bw, ctx={"out": (kh, kw)})


class BatchNormState:
    """Learnable scale/shift plus running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum {momentum} outside (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.scale = Parameter(np.ones(channels, dtype=dtype))
        self.shift = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def batch_norm_normalize(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel standardization without the affine step."""
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeMismatch(f"batch norm over {state.channels} channels got input {x.shape}")
    xd = x.data
    axes = (0, 2, 3)
    count = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if state.mode == "train":
        if count < 2:
            raise DegenerateBatch(f"batch norm needs >= 2 samples per channel, got {count}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * var * (count / (count - 1))
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    xhat = xhat.astype(xd.dtype, copy=False)
    istd = inv_std.reshape(1, -1, 1, 1)

    if state.mode == "train":
        def bw(g):
            gsum = g.sum(axis=axes, keepdims=True)
            gxsum = (g * xhat).sum(axis=axes, keepdims=True)
            return ((istd / count) * (count * g - gsum - xhat * gxsum),)
    else:
        def bw(g):
            return (g * istd,)

    return make_result(xhat, "batch_norm", (x,), bw, ctx={"mode": state.mode})


def batch_norm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization followed by the per-channel affine transform."""
    return add(mul(batch_norm_normalize(x, state), state.scale), state.shift)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Half-pixel bilinear weights: src = (i + 0.5) * n_in / n_out - 0.5, clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), "bilinear_upsample", (x,), lambda g: (g,))
    ah = _interp_matrix(h, out_h, x.dtype)
    aw = _interp_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T
    return make_result(out, "bilinear_upsample", (x,), lambda g: (ah.T @ g @ aw,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ShapeMismatch(f"cannot concat {t.shape} with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(a, b)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return make_result(out, "concat", tuple(tensors), bw)


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[:, start:stop] = g
        return (dx,)

    return make_result(x.data[:, start:stop].copy(), "take_channels", (x,), bw)


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeMismatch(f"split sizes {list(sizes)} do not add up to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(take_channels(x, start, start + s))
        start += s
    return out


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, "softmax", (x,), bw)
