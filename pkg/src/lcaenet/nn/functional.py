"""Differentiable operations on ``(N, C, H, W)`` feature maps.

Each op accepts :class:`Tensor` or plain arrays, computes its result with
numpy and, when a :class:`~lcaenet.nn.tape.Tape` is active and an input needs
a gradient, records its vector-Jacobian product. Ops are dtype-preserving:
float64 inputs stay float64 (used by the gradient checks), float32 stays
float32 (used for training).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import DimensionError
from .tape import Tensor, as_tensor, count, current_tape


def _result(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x, other=None) -> tuple:
    if isinstance(x, Tensor):
        return x, x.data
    if isinstance(x, (int, float)) and other is not None:
        # a Python scalar takes the dtype of the array it meets
        dtype = other.data.dtype if isinstance(other, Tensor) else np.asarray(other).dtype
        if dtype.kind == "f":
            arr = np.asarray(x, dtype=dtype)
            return arr, arr
    arr = np.asarray(x)
    return arr, arr


# elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, av = _operand(a, b)
    b, bv = _operand(b, a)
    out = av + bv
    count("add", out.size)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    a, av = _operand(a, b)
    b, bv = _operand(b, a)
    out = av - bv
    count("add", out.size)
    return _result(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Tensor:
    a, av = _operand(a, b)
    b, bv = _operand(b, a)
    out = av * bv
    count("mul", out.size)

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if isinstance(a, Tensor) and a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if isinstance(b, Tensor) and b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, av = _operand(a, b)
    b, bv = _operand(b, a)
    out = av / bv
    count("div", out.size)

    def vjp(g):
        ga = _unbroadcast(g / bv, av.shape)
        gb = _unbroadcast(-g * av / (bv * bv), bv.shape)
        return ga, gb

    return _result(out, (a, b), vjp)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(out), (x,), vjp)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, key) -> Tensor:
    """Basic (slice / integer) indexing."""
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[key]), (x,), vjp)


# activations -----------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    count("relu", x.data.size)
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def prelu(x, slope) -> Tensor:
    """``max(0, x) + slope * min(0, x)`` with one scalar slope per layer."""
    x = as_tensor(x)
    slope, sv = _operand(slope)
    a = np.asarray(sv).reshape(())
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data).astype(x.dtype, copy=False)
    count("prelu", x.data.size)

    def vjp(g):
        gx = np.where(pos, g, a * g).astype(g.dtype, copy=False)
        gs = np.sum(np.where(pos, 0, g * x.data)).reshape(np.shape(sv)).astype(g.dtype)
        return gx, gs

    return _result(out, (x, slope), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    count("sigmoid", x.data.size)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    count("softmax", 3 * x.data.size)
    return _result(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


# convolutions ----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xn: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # channels-last patches, column order (kh, kw, C)
    n, c = xn.shape[0], xn.shape[3]
    if kh == 1 and kw == 1:
        sub_x = xn[:, ::stride, ::stride][:, :ho, :wo] if stride != 1 else xn[:, :ho, :wo]
        return np.ascontiguousarray(sub_x).reshape(n * ho * wo, c)
    win = sliding_window_view(xn, (kh, kw), axis=(1, 2))
    if stride != 1:
        win = win[:, ::stride, ::stride]
    return win[:, :ho, :wo].transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x (N, Cin, H, W)`` with ``weight (Cout, Cin, K, K)``.

    Zero padding. Patches are gathered channels-last and reduced with one
    matrix multiply per call, so the accumulation order is fixed for a given
    shape. The input gradient is computed as a correlation of the dilated
    output gradient with the flipped kernel.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects a 4-D input and a 4-D kernel")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"kernel expects {wcin} input channels, input has {cin}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xn = x.data.transpose(0, 2, 3, 1)
    if padding:
        xn = np.pad(xn, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xn.shape[1:3]
    cols = _im2col(xn, kh, kw, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    count("conv", 2 * n * cout * cin * kh * kw * ho * wo + (n * cout * ho * wo if bias is not None else 0))

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dxn = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            if kh == 1 and kw == 1:
                dxn[:, :(ho - 1) * stride + 1:stride, :(wo - 1) * stride + 1:stride] = \
                    (g2 @ wmat).reshape(n, ho, wo, cin)
            else:
                hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
                gd = np.zeros((n, hd + 2 * (kh - 1), wd + 2 * (kw - 1), cout), dtype=g.dtype)
                gd[:, kh - 1:kh - 1 + hd:stride, kw - 1:kw - 1 + wd:stride] = g2.reshape(n, ho, wo, cout)
                hf, wf = hd + kh - 1, wd + kw - 1
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, kh * kw * cout)
                full = _im2col(gd, kh, kw, 1, hf, wf) @ flipped.T
                dxn[:, :hf, :wf] = full.reshape(n, hf, wf, cin)
            gx = np.ascontiguousarray(dxn[:, padding:padding + h, padding:padding + w].transpose(0, 3, 1, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, vjp)


def depthwise_conv2d(x, weight, padding: int | None = None) -> Tensor:
    """Per-channel convolution: channel ``c`` only sees kernel ``weight[c]`` (``C, K, K``)."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    n, c, h, w = x.shape
    if weight.ndim != 3 or weight.shape[0] != c:
        raise DimensionError(f"need one kernel per channel ({c}), got kernel array {weight.shape}")
    k = weight.shape[1]
    if padding is None:
        padding = (k - 1) // 2
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError("depthwise kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(weight.shape[2]):
            out += wd[None, :, i, j, None, None] * xp[:, :, i:i + ho, j:j + wo]
    count("conv", 2 * n * c * k * weight.shape[2] * ho * wo)

    def vjp(g):
        gw = np.zeros_like(wd) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(k):
            for j in range(weight.shape[2]):
                if gw is not None:
                    gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + ho, j:j + wo])
                if gxp is not None:
                    gxp[:, :, i:i + ho, j:j + wo] += wd[None, :, i, j, None, None] * g
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return _result(out, (x, weight), vjp)


def conv1d_channels(v, kernel) -> Tensor:
    """Bias-free 1-D cross-correlation along the channel axis of ``v (N, C)``.

    The ends are zero padded so the output keeps length ``C``.
    """
    v = as_tensor(v)
    kernel = as_tensor(kernel)
    k = kernel.shape[0]
    if k % 2 != 1:
        raise DimensionError("channel kernel length must be odd")
    p = k // 2
    n, c = v.shape
    vp = np.pad(v.data, ((0, 0), (p, p)))
    kd = kernel.data
    out = np.zeros((n, c), dtype=np.result_type(v.dtype, kernel.dtype))
    for j in range(k):
        out += kd[j] * vp[:, j:j + c]
    count("conv", 2 * n * c * k)

    def vjp(g):
        gk = np.array([np.sum(g * vp[:, j:j + c]) for j in range(k)], dtype=g.dtype)
        gvp = np.zeros(vp.shape, dtype=g.dtype)
        for j in range(k):
            gvp[:, j:j + c] += kd[j] * g
        return gvp[:, p:p + c], gk

    return _result(out, (v, kernel), vjp)


# normalisation and pooling ---------------------------------------------------

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as at inference time); in eval mode the
    running buffers are used and left untouched.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    xd = x.data
    c = xd.shape[1]
    shape = (1, c, 1, 1)
    count("batch_norm", 2 * xd.size)
    if training:
        m = xd.size // c
        if m <= 1:
            raise DimensionError("batch norm in training mode needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(shape)
        var = np.mean(centered * centered, axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(shape)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
        gd = gamma.data.reshape(shape)
        out = xhat * gd + beta.data.reshape(shape)

        def vjp(g):
            gg = np.sum(g * xhat, axis=(0, 2, 3)).astype(g.dtype)
            gb = np.sum(g, axis=(0, 2, 3)).astype(g.dtype)
            dxhat = g * gd
            gx = (inv_std.reshape(shape) / m) * (
                m * dxhat
                - np.sum(dxhat, axis=(0, 2, 3)).reshape(shape)
                - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3)).reshape(shape)
            )
            return gx.astype(g.dtype, copy=False), gg, gb
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(shape).astype(xd.dtype)) * inv_std.reshape(shape)
        scale = gamma.data.reshape(shape) * inv_std.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def vjp(g):
            return (g * scale,
                    np.sum(g * xhat, axis=(0, 2, 3)).astype(g.dtype),
                    np.sum(g, axis=(0, 2, 3)).astype(g.dtype))

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: ``(N, C, H, W) -> (N, C)``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    count("pool", x.data.size)
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,), lambda g: (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),))


# resampling ------------------------------------------------------------------

def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel aligned x2 interpolation, clamped at the borders
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(n):
        m[2 * i, max(i - 1, 0)] += 0.25
        m[2 * i, i] += 0.75
        m[2 * i + 1, i] += 0.75
        m[2 * i + 1, min(i + 1, n - 1)] += 0.25
    return m


_UP_CACHE: dict = {}


def _upsample_matrix_cached(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    if key not in _UP_CACHE:
        _UP_CACHE[key] = _upsample_matrix(n, dtype)
    return _UP_CACHE[key]


def upsample_bilinear2x(x) -> Tensor:
    """Bilinear x2 upsampling with half-pixel alignment (``align_corners=False``)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    uh = _upsample_matrix_cached(h, x.dtype)
    uw = _upsample_matrix_cached(w, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    count("upsample", 4 * out.size)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))
