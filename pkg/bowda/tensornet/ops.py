"""
Differentiable primitives on (batch, channels, depth, height, width) tensors.

Each op computes its forward with numpy, then registers a backward
closure through ``record``. Convolutions gather windows with
``sliding_window_view`` and contract them with ``tensordot``; the
input-gradient scatter runs over kernel offsets in a fixed order.
"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeMismatchError
from .tensor import Tensor, record

Triple = Tuple[int, int, int]


def _triple(v: Union[int, Sequence[int]]) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3  # type: ignore[return-value]
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or 3 values, got {v}")
    return v  # type: ignore[return-value]


def _check_5d(x: Tensor, op: str) -> None:
    if x.ndim != 5:
        raise ShapeMismatchError(f"{op} expects (N, C, D, H, W), got shape {x.shape}")


def _pad(x: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return x
    pd, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple) -> np.ndarray:
    """(N, C, D', H', W', kd, kh, kw) view of strided kernel windows."""
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    sd, sh, sw = stride
    return win[:, :, ::sd, ::sh, ::sw]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: Triple, padding: Triple) -> np.ndarray:
    kernel = w.shape[2:]
    xp = _pad(x, padding)
    for axis in range(3):
        if xp.shape[2 + axis] < kernel[axis]:
            raise ShapeMismatchError(f"kernel {kernel} larger than padded input {xp.shape[2:]}")
    win = _windows(xp, kernel, stride)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, kernel: Triple, stride: Triple,
                      padding: Triple) -> np.ndarray:
    """d<conv(x, w), g>/dw for output-gradient g."""
    xp = _pad(x, padding)
    win = _windows(xp, kernel, stride)
    od, oh, ow = g.shape[2:]
    win = win[:, :, :od, :oh, :ow]
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: Triple, padding: Triple,
                     in_spatial: Sequence[int]) -> np.ndarray:
    """
    d<conv(x, w), g>/dx, i.e. the adjoint of convolution applied to g.

    Columns are scattered back kernel offset by kernel offset, always in
    the same (a, b, c) order.
    """
    n = g.shape[0]
    c_in = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    pd, ph, pw = padding
    od, oh, ow = g.shape[2:]
    padded = [s + 2 * p for s, p in zip(in_spatial, padding)]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, D', H', W', C, kd, kh, kw)
    cols = cols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
    gx = np.zeros((n, c_in, *padded), dtype=np.result_type(g, w))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                gx[:, :, a:a + sd * od:sd, b:b + sh * oh:sh, c:c + sw * ow:sw] += cols[..., a, b, c]
    return gx[:, :, pd:pd + in_spatial[0], ph:ph + in_spatial[1], pw:pw + in_spatial[2]]


# ══════════════════════════════════════════════════════════════════
# Convolutions and pooling
# ══════════════════════════════════════════════════════════════════

def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: Union[int, Sequence[int]] = 1, padding: Union[int, Sequence[int], str] = 0) -> Tensor:
    """
    3D cross-correlation.

    ``w`` has shape (C_out, C_in, kd, kh, kw); ``padding="same"`` pads
    (k - 1) / 2 per side for odd kernels.
    """
    _check_5d(x, "conv3d")
    if w.ndim != 5:
        raise ShapeMismatchError(f"conv3d kernel must be 5D, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv3d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    stride = _triple(stride)
    kernel = w.shape[2:]
    if padding == "same":
        if any(k % 2 == 0 for k in kernel):
            raise ValueError(f"'same' padding needs odd kernels, got {kernel}")
        padding = tuple(k // 2 for k in kernel)
    padding = _triple(padding)

    out = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1, 1)
    in_spatial = x.shape[2:]
    x_data, w_data = x.data, w.data

    def backward(g):
        gx = _conv_input_grad(g, w_data, stride, padding, in_spatial) if x.requires_grad else None
        gw = _conv_kernel_grad(x_data, g, kernel, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv3d", inputs, out.astype(x.dtype, copy=False), backward)


def transposed_output_shape(in_spatial: Sequence[int], kernel: Sequence[int], stride: Triple,
                            padding: Triple) -> Triple:
    return tuple((i - 1) * s - 2 * p + k for i, k, s, p in zip(in_spatial, kernel, stride, padding))  # type: ignore


def transposed_conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                      stride: Union[int, Sequence[int]] = 2, padding: Union[int, Sequence[int]] = 0,
                      output_shape: Optional[Sequence[int]] = None) -> Tensor:
    """
    Transposed convolution: the adjoint of ``conv3d`` with the same kernel.

    ``w`` keeps the convolution layout (C_in_of_conv, C_out_of_conv, k, k, k),
    so the input here has w.shape[0] channels and the output w.shape[1].
    Output size defaults to (in - 1) * stride - 2 * padding + k; a larger
    ``output_shape`` (by less than one stride) is allowed.
    """
    _check_5d(x, "transposed_conv3d")
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(
            f"transposed_conv3d: input has {x.shape[1]} channels, kernel expects {w.shape[0]}"
        )
    stride = _triple(stride)
    padding = _triple(padding)
    kernel = w.shape[2:]
    base = transposed_output_shape(x.shape[2:], kernel, stride, padding)
    out_spatial = base if output_shape is None else _triple(output_shape)
    for o, lo, s in zip(out_spatial, base, stride):
        if not (lo <= o < lo + s):
            raise ShapeMismatchError(f"output_shape {out_spatial} incompatible with minimum {base} and stride {stride}")

    out = _conv_input_grad(x.data, w.data, stride, padding, out_spatial)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1, 1)
    x_data, w_data = x.data, w.data

    def backward(g):
        gx = _conv_forward(g, w_data, stride, padding) if x.requires_grad else None
        gw = _conv_kernel_grad(g, x_data, kernel, stride, padding) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("transposed_conv3d", inputs, np.ascontiguousarray(out, dtype=x.dtype), backward)


def avgpool3d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping mean pooling (window == stride)."""
    _check_5d(x, "avgpool3d")
    stride = window if stride is None else stride
    if stride != window:
        raise ValueError(f"avgpool3d supports window == stride only, got {window} / {stride}")
    n, c, d, h, w = x.shape
    if d % window or h % window or w % window:
        raise ShapeMismatchError(f"avgpool3d: spatial dims {x.shape[2:]} not divisible by {window}")
    k = window
    out = x.data.reshape(n, c, d // k, k, h // k, k, w // k, k).mean(axis=(3, 5, 7))
    shape = x.shape

    def backward(g):
        spread = np.broadcast_to(
            g[:, :, :, None, :, None, :, None] / (k ** 3),
            (n, c, d // k, k, h // k, k, w // k, k),
        )
        return (spread.reshape(shape),)

    return record("avgpool3d", (x,), out.astype(x.dtype, copy=False), backward)


# ══════════════════════════════════════════════════════════════════
# Activations
# ══════════════════════════════════════════════════════════════════

def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, 0).astype(x.dtype, copy=False)
    return record("relu", (x,), out, lambda g: (g * positive,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    factor = np.where(positive, 1.0, slope).astype(x.dtype)
    return record("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data).astype(x.dtype, copy=False)
    return record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation '{kind}'")


# ══════════════════════════════════════════════════════════════════
# Normalization, dropout, structure
# ══════════════════════════════════════════════════════════════════

BN_EPS = 1e-5


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = BN_EPS) -> Tensor:
    """
    Per-channel batch normalization.

    Training mode normalizes with the batch statistics over (N, D, H, W)
    and updates the running buffers in place:
    ``running = (1 - momentum) * running + momentum * batch`` with the
    population variance. Evaluation mode uses the running buffers.
    """
    _check_5d(x, "batchnorm")
    axes = (0, 2, 3, 4)
    gamma = scale.data.reshape(1, -1, 1, 1, 1)
    beta = shift.data.reshape(1, -1, 1, 1, 1)

    if training:
        mean = x.data.mean(axis=axes, keepdims=True, dtype=np.float64)
        var = x.data.var(axis=axes, keepdims=True, dtype=np.float64)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean.reshape(-1)
        running_var *= (1 - momentum)
        running_var += momentum * var.reshape(-1)
    else:
        mean = running_mean.reshape(1, -1, 1, 1, 1).astype(np.float64)
        var = running_var.reshape(1, -1, 1, 1, 1).astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.astype(x.dtype)) * inv_std
    out = gamma * xhat + beta
    m = x.data.size // x.shape[1]

    def backward(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * gamma
        if training:
            gx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv_std
        return gx, gscale, gshift

    return record("batchnorm", (x, scale, shift), out.astype(x.dtype, copy=False), backward)


def dropout_mask(shape: Sequence[int], rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1 / (1 - rate)."""
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Inverted dropout; identity for rate 0 or in evaluation mode.

    The mask comes from ``rng`` unless given explicitly (frozen-mask
    gradient checks).
    """
    if not (0 <= rate < 1):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = dropout_mask(x.shape, rate, rng, x.dtype)
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def concat(tensors: List[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tensors, out, backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Inverse of ``concat``: consecutive pieces of ``x`` along ``axis``."""
    if sum(sizes) != x.shape[axis] or any(s < 1 for s in sizes):
        raise ShapeMismatchError(f"split: sizes {list(sizes)} do not partition axis {axis} of {x.shape}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            gx = np.zeros_like(x.data)
            gx[index] = g
            return (gx,)

        pieces.append(record("split", (x,), x.data[index].copy(), backward))
        start += size
    return pieces


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes differ {a.shape} vs {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def identity(x: Tensor) -> Tensor:
    return record("identity", (x,), x.data.copy(), lambda g: (g,))
