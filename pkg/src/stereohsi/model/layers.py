"""Tensor kernels with hand-derived gradients.

Activations use the layout ``(N, H, W, L, C)``: batch, two spatial axes, the
spectral axis and channels innermost.  Convolution weights are stored as
``(C_out, C_in, kH, kW, kL)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

# samples per im2col block; bounds the temporary column buffer
_CHUNK_ELEMS = 24_000_000


def _cols(x, kernel):
    """im2col view -> (N*P, kH*kW*kL*C) matrix, channel innermost."""
    kh, kw, kl = kernel
    win = sliding_window_view(x, (kh, kw, kl), axis=(1, 2, 3))   # N,Ho,Wo,Lo,C,kh,kw,kl
    win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    n, ho, wo, lo = win.shape[:4]
    return win.reshape(n * ho * wo * lo, -1), (ho, wo, lo)


def _chunks(n, per_sample):
    step = max(1, _CHUNK_ELEMS // max(per_sample, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _check_extent(x, kernel, where="conv3d"):
    if x.ndim != 5:
        raise ShapeError(f"{where}: expected (N, H, W, L, C) input, got shape {x.shape}")
    spatial = x.shape[1:4]
    if any(s < k for s, k in zip(spatial, kernel)):
        raise ShapeError(f"{where}: input extents {spatial} smaller than kernel {tuple(kernel)}")


def conv3d_forward(x, weight, bias, accumulate=None):
    """Valid (unpadded, stride 1) 3-D convolution.

    ``out[n,h,w,l,o] = bias[o] + sum_{i,j,k,c} x[n,h+i,w+j,l+k,c] * weight[o,c,i,j,k]``

    ``accumulate`` selects the dtype of the matrix products (defaults to the
    input dtype); the result is cast back to the input dtype.
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    o, c, kh, kw, kl = weight.shape
    _check_extent(x, (kh, kw, kl))
    if x.shape[4] != c:
        raise ShapeError(f"conv3d: input has {x.shape[4]} channels, weight expects {c}")
    acc = np.dtype(accumulate or np.result_type(x, weight))
    wmat = weight.transpose(2, 3, 4, 1, 0).reshape(-1, o).astype(acc)
    n = x.shape[0]
    ho, wo, lo = (x.shape[1] - kh + 1, x.shape[2] - kw + 1, x.shape[3] - kl + 1)
    out = np.empty((n, ho, wo, lo, o), dtype=x.dtype)
    per_sample = ho * wo * lo * wmat.shape[0]
    for sl in _chunks(n, per_sample):
        cols, _ = _cols(x[sl].astype(acc, copy=False), (kh, kw, kl))
        y = cols @ wmat
        y += bias.astype(acc)
        out[sl] = y.reshape(-1, ho, wo, lo, o)
    return out


def conv3d_backward(x, weight, grad_out, need_input_grad=True):
    """Gradients of a valid 3-D convolution.

    Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_x`` is a full
    correlation of the padded output gradient with the flipped kernel.
    """
    o, c, kh, kw, kl = weight.shape
    dtype = np.result_type(x, weight, grad_out)
    n = x.shape[0]
    ho, wo, lo = grad_out.shape[1:4]
    gw = np.zeros((kh * kw * kl * c, o), dtype=dtype)
    per_sample = ho * wo * lo * kh * kw * kl * c
    for sl in _chunks(n, per_sample):
        cols, _ = _cols(x[sl], (kh, kw, kl))
        gw += cols.T @ grad_out[sl].reshape(-1, o)
    grad_weight = gw.reshape(kh, kw, kl, c, o).transpose(4, 3, 0, 1, 2)
    grad_bias = grad_out.sum(axis=(0, 1, 2, 3))
    grad_x = None
    if need_input_grad:
        padded = np.pad(grad_out, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1),
                                   (kl - 1, kl - 1), (0, 0)))
        flipped = weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        grad_x = conv3d_forward(padded, flipped, np.zeros(c, dtype=dtype))
    return grad_x, grad_weight.astype(dtype), grad_bias.astype(dtype)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def maxpool3d_forward(x, size=2):
    """Non-overlapping max pooling; trailing rows that do not fill a window are dropped.

    Returns the pooled tensor and the flat in-window argmax (first maximum
    wins) needed by the backward pass.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d: expected (N, H, W, L, C), got {x.shape}")
    n, h, w, l, c = x.shape
    ho, wo, lo = h // size, w // size, l // size
    if min(ho, wo, lo) == 0:
        raise ShapeError(f"maxpool3d: input extents {(h, w, l)} smaller than pool {size}")
    v = x[:, :ho * size, :wo * size, :lo * size].reshape(n, ho, size, wo, size, lo, size, c)
    v = v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, ho, wo, lo, c, size ** 3)
    arg = v.argmax(axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool3d_backward(grad_out, arg, input_shape, size=2):
    n, h, w, l, c = input_shape
    ho, wo, lo = grad_out.shape[1:4]
    routed = np.zeros(grad_out.shape + (size ** 3,), dtype=grad_out.dtype)
    np.put_along_axis(routed, arg[..., None], grad_out[..., None], axis=-1)
    routed = routed.reshape(n, ho, wo, lo, c, size, size, size).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    grad_x[:, :ho * size, :wo * size, :lo * size] = routed.reshape(
        n, ho * size, wo * size, lo * size, c)
    return grad_x


def dense_forward(x, weight, bias):
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    return x @ weight.T + bias


def dense_backward(x, weight, grad_out):
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood and its gradient ``(p - onehot) / N``.

    ``targets`` are 0-based class indices.
    """
    logits = np.asarray(logits)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -log_p[np.arange(n), targets].mean(dtype=np.float64)
    grad = np.exp(log_p)
    grad[np.arange(n), targets] -= 1
    return float(loss), grad / n
