"""Differentiable primitives over NHWC arrays.

Every primitive keeps its backward rule in a module-level ``*_backward``
function, looked up at call time, so rules can be swapped out in tests.
Image tensors are laid out (batch, height, width, channels); convolution
kernels are (kh, kw, in_channels, out_channels).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor

# --------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data / b.data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward, "concat")


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def index(x: Tensor, key) -> Tensor:
    basic = _is_basic(key)

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[key] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, key, g)
        return (out,)

    return Tensor.from_op(x.data[key], (x,), backward, "index")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps`` > 0 the argument is clamped to [eps, 1 - eps]."""
    if eps > 0:
        xc = np.clip(x.data, eps, 1.0 - eps)
        live = (x.data >= eps) & (x.data <= 1.0 - eps)
    else:
        xc, live = x.data, None

    def backward(g):
        d = g / xc
        return (d if live is None else d * live,)

    return Tensor.from_op(np.log(xc), (x,), backward, "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# --------------------------------------------------------------------------
# activations


def relu_backward(g, x):
    return g * (x > 0)


def relu(x: Tensor) -> Tensor:
    return Tensor.from_op(
        np.maximum(x.data, 0), (x,), lambda g: (relu_backward(g, x.data),), "relu"
    )


def sigmoid_backward(g, y):
    return g * y * (1.0 - y)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    return Tensor.from_op(y, (x,), lambda g: (sigmoid_backward(g, y),), "sigmoid")


# --------------------------------------------------------------------------
# softmax family


def _softmax(z: np.ndarray, axis) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(g, y, axis):
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over all spatial positions, independently per sample and channel."""
    axes = (1, 2)
    y = _softmax(x.data, axes)
    return Tensor.from_op(y, (x,), lambda g: (softmax_backward(g, y, axes),), "spatial_softmax")


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax across the trailing channel axis at each pixel."""
    y = _softmax(x.data, -1)
    return Tensor.from_op(y, (x,), lambda g: (softmax_backward(g, y, -1),), "channel_softmax")


# --------------------------------------------------------------------------
# convolution


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    if kh == 1 and kw == 1:
        cols = x[:, ::stride, ::stride, :][:, :ho, :wo, :]
        return np.ascontiguousarray(cols).reshape(n * ho * wo, c), ho, wo
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (n, ho, wo, c, kh, kw) -> (n, ho, wo, kh, kw, c)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add (n, ho, wo, kh, kw, c) patches back into an (n, h, w, c) image."""
    n, h, w, c = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w, :]
    return out


def conv2d_backward(g, x, kernel, cols, stride, pad, need_x, need_k):
    kh, kw, cin, cout = kernel.shape
    g2 = g.reshape(-1, cout)
    gk = (cols.T @ g2).reshape(kernel.shape) if need_k else None
    gx = None
    if need_x:
        if stride == 1 and kh - 1 - pad >= 0 and kw - 1 - pad >= 0 and kh == kw:
            # full correlation of g with the flipped kernel; avoids the col2im scatter
            flipped = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(-1, cin)
            gcols, _, _ = _im2col(g, kh, kw, 1, kh - 1 - pad)
            gx = (gcols @ flipped).reshape(x.shape)
        else:
            dcols = g2 @ kernel.reshape(-1, cout).T
            gx = _col2im(dcols, x.shape, kh, kw, stride, pad)
    return gx, gk


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; output size floor((in + 2*pad - k) / stride) + 1."""
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    out = (cols @ kernel.data.reshape(-1, cout)).reshape(x.shape[0], ho, wo, cout)
    parents: tuple = (x, kernel)
    if bias is not None:
        out = out + bias.data
        parents = (x, kernel, bias)

    def backward(g):
        gx, gk = conv2d_backward(g, x.data, kernel.data, cols, stride, padding,
                                 x.requires_grad, kernel.requires_grad)
        if bias is None:
            return gx, gk
        return gx, gk, _colsum(g)

    return Tensor.from_op(out, parents, backward, "conv2d")


def deconv2d_backward(g, x, kernel, stride, pad, need_x, need_k):
    kh, kw, cout, cin = kernel.shape
    # g is (n, H, W, cout): its patches line up with input pixels
    gcols, _, _ = _im2col(g, kh, kw, stride, pad)
    gx = (gcols @ kernel.reshape(-1, cin)).reshape(x.shape) if need_x else None
    gk = (gcols.T @ x.reshape(-1, cin)).reshape(kernel.shape) if need_k else None
    return gx, gk


def deconv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same kernel.

    ``kernel`` is (kh, kw, out_channels, in_channels); output size is
    (in - 1) * stride - 2 * pad + k.
    """
    kh, kw, cout, cin = kernel.shape
    if x.shape[-1] != cin:
        raise ValueError(f"deconv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    n, h, w, _ = x.shape
    ho = deconv_out_size(h, kh, stride, padding)
    wo = deconv_out_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError("deconv2d: non-positive output size")
    cols = x.data.reshape(-1, cin) @ kernel.data.reshape(-1, cin).T
    out = _col2im(cols, (n, ho, wo, cout), kh, kw, stride, padding)
    parents: tuple = (x, kernel)
    if bias is not None:
        out = out + bias.data
        parents = (x, kernel, bias)

    def backward(g):
        gx, gk = deconv2d_backward(g, x.data, kernel.data, stride, padding,
                                   x.requires_grad, kernel.requires_grad)
        if bias is None:
            return gx, gk
        return gx, gk, _colsum(g)

    return Tensor.from_op(out, parents, backward, "deconv2d")


# --------------------------------------------------------------------------
# pooling


def maxpool2_backward(g, arg, in_shape):
    n, h2, w2, c = g.shape
    win = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    win = win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    full = win.reshape(n, 2 * h2, 2 * w2, c)
    h, w = in_shape[1], in_shape[2]
    if full.shape[1] != h:
        full[:, h - 1, :, :] += full[:, h, :, :]
        full = full[:, :h]
    if full.shape[2] != w:
        full[:, :, w - 1, :] += full[:, :, w, :]
        full = full[:, :, :w]
    return full


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Odd sizes are padded by edge replication.

    Gradient goes to the first maximal entry of each window in row-major order.
    """
    a = x.data
    n, h, w, c = a.shape
    if h % 2 or w % 2:
        a = np.pad(a, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    hh, ww = a.shape[1] // 2, a.shape[2] // 2
    win = a.reshape(n, hh, 2, ww, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, hh, ww, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return Tensor.from_op(out, (x,), lambda g: (maxpool2_backward(g, arg, x.shape),), "maxpool2")


# --------------------------------------------------------------------------
# dense layers and normalization


def fully_connected_backward(g, x, weights, need_x, need_w):
    gx = g @ weights.T if need_x else None
    gw = x.T @ g if need_w else None
    return gx, gw, _colsum(g)


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias``; x is (batch, in), weights (in, out)."""
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(f"fully_connected: input width {x.shape[-1]} != weight rows {weights.shape[0]}")
    out = x.data @ weights.data + bias.data

    def backward(g):
        return fully_connected_backward(g, x.data, weights.data, x.requires_grad, weights.requires_grad)

    return Tensor.from_op(out, (x, weights, bias), backward, "fully_connected")


def _colsum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last, via a matrix-vector product (much faster than ufunc.reduce)."""
    a2 = a.reshape(-1, a.shape[-1])
    return np.ones(a2.shape[0], dtype=a.dtype) @ a2


def batchnorm_backward(g, xhat, inv_std, scale, axes):
    m = int(np.prod([g.shape[a] for a in axes]))
    gscale = _colsum(g * xhat)
    gshift = _colsum(g)
    gx = (scale * inv_std / m) * (m * g - gshift - xhat * gscale)
    return gx, gscale, gshift


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over every axis but the last.

    In training mode the batch statistics are used and the running buffers are
    updated in place: ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.ndim - 1))
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv_std
        out = xhat * scale.data + shift.data

        def backward_eval(g):
            return g * scale.data * inv_std, _colsum(g * xhat), _colsum(g)

        return Tensor.from_op(out, (x, scale, shift), backward_eval, "batchnorm")

    m = int(np.prod([x.shape[a] for a in axes]))
    if m < 2:
        raise ValueError("batchnorm: training mode needs at least two values per channel")
    mu = _colsum(x.data) / m
    centered = x.data - mu
    var = _colsum(centered * centered) / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * scale.data + shift.data
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var

    def backward(g):
        return batchnorm_backward(g, xhat, inv_std, scale.data, axes)

    return Tensor.from_op(out, (x, scale, shift), backward, "batchnorm")
