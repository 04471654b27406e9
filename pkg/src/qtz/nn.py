"""NHWC layer primitives (float64) with hand-written backward passes.

Convolution weights are laid out ``[Kh, Kw, Cin, Cout]``; depthwise weights
``[Kh, Kw, C, multiplier]``. Padding follows the usual SAME/VALID convention.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "SAME":
        return -(-size // stride)
    if padding == "VALID":
        return (size - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def pad_amounts(size: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "VALID":
        return 0, 0
    out = conv_out_size(size, k, stride, padding)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: str, pad_value=0):
    """Return patches ``[N, Ho, Wo, kh, kw, C]`` (a view when no padding is needed)."""
    n, h, w, c = x.shape
    pt, pb = pad_amounts(h, kh, stride, padding)
    pl, pr = pad_amounts(w, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: [N, Ho, Wo, C, kh, kw]
    return win.transpose(0, 1, 2, 4, 5, 3)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: str):
    """Adjoint of :func:`im2col` (scatter-add of patch gradients)."""
    n, h, w, c = x_shape
    pt, pb = pad_amounts(h, kh, stride, padding)
    pl, pr = pad_amounts(w, kw, stride, padding)
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return out[:, pt:pt + h, pl:pl + w, :]


def conv2d(x, w, b=None, stride: int = 1, padding: str = "SAME"):
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, weights expect {cin}")
    cols = im2col(x, kh, kw, stride, padding)
    n, ho, wo = cols.shape[:3]
    y = cols.reshape(n * ho * wo, -1) @ w.reshape(-1, cout)
    y = y.reshape(n, ho, wo, cout)
    if b is not None:
        y = y + b
    return y


def conv2d_backward(x, w, gy, stride: int = 1, padding: str = "SAME"):
    """Return ``(gx, gw, gb)`` for ``y = conv2d(x, w, b)``."""
    kh, kw, cin, cout = w.shape
    cols = im2col(x, kh, kw, stride, padding)
    n, ho, wo = cols.shape[:3]
    g2 = gy.reshape(-1, cout)
    gw = (cols.reshape(n * ho * wo, -1).T @ g2).reshape(w.shape)
    gcols = (g2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    gx = col2im(gcols, x.shape, kh, kw, stride, padding)
    return gx, gw, g2.sum(axis=0)


def depthwise_conv2d(x, w, b=None, stride: int = 1, padding: str = "SAME"):
    kh, kw, c, mult = w.shape
    if x.shape[-1] != c:
        raise ValueError(f"depthwise: input has {x.shape[-1]} channels, weights expect {c}")
    cols = im2col(x, kh, kw, stride, padding)
    y = np.einsum("nhwijc,ijcm->nhwcm", cols, w, optimize=True)
    y = y.reshape(*y.shape[:3], c * mult)
    if b is not None:
        y = y + b
    return y


def dense(x, w, b=None):
    y = x.reshape(x.shape[0], -1) @ w
    if b is not None:
        y = y + b
    return y


def avgpool(x, k: int, stride: int | None = None):
    stride = stride or k
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.mean(axis=(-2, -1))


def avgpool_backward(x_shape, gy, k: int, stride: int | None = None):
    stride = stride or k
    n, h, w, c = x_shape
    ho, wo = gy.shape[1:3]
    gx = np.zeros(x_shape, dtype=gy.dtype)
    share = gy / (k * k)
    for i in range(k):
        for j in range(k):
            gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += share
    return gx


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n
