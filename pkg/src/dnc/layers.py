"""Plain-numpy neural net primitives with hand-written backward passes.

Activations are NCHW (or (N, D) for dense layers). Every forward returns
``(out, cache)``; the matching backward consumes ``cache`` and the upstream
gradient and returns gradients for its inputs and parameters. Caches are
plain tuples, cheap to hold for one step and discarded afterwards.

Batch norm keeps running statistics outside the parameter set; in training
mode the forward updates them in place (biased batch variance, standard
exponential moving average).
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Convolution (im2col + GEMM)
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 1):
    """x: (N, C, H, W), w: (F, C, kh, kw). No bias; norm layers follow."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, OH, OW, kh, kw)
    oh, ow = windows.shape[2], windows.shape[3]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw
    )
    out = cols @ w.reshape(f, -1).T
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    cache = (cols, w, x.shape, stride, pad, (oh, ow))
    return np.ascontiguousarray(out), cache


def conv2d_backward(dy: np.ndarray, cache):
    cols, w, x_shape, stride, pad, (oh, ow) = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    dyr = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
    dw = (dyr.T @ cols).reshape(w.shape)
    # Scatter column gradients back onto the padded canvas, one tap at a time.
    dcols = (dyr @ w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0)
    return out, (x > 0)


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """x: (N, D_in), w: (D_in, D_out). Bias is optional; layers feeding a
    batch norm omit it because the normalizer cancels it exactly."""
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dy: np.ndarray, cache):
    x, w, has_bias = cache
    db = dy.sum(axis=0) if has_bias else None
    return dy @ w.T, x.T @ dy, db


def global_avg_pool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    return x.mean(axis=(2, 3)), (n, c, h, w)


def global_avg_pool_backward(dy: np.ndarray, cache):
    n, c, h, w = cache
    return np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w)).astype(dy.dtype)


# ---------------------------------------------------------------------------
# Batch norm (2d over (N, H, W); 1d over N)
# ---------------------------------------------------------------------------


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Normalizes over all axes except channels. In training mode the running
    buffers are updated in place with the biased batch statistics."""
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * istd.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    m = x.size // x.shape[1]
    cache = (xhat, gamma, istd, training, axes, shape, m)
    return out.astype(x.dtype), cache


def batchnorm_backward(dy: np.ndarray, cache):
    xhat, gamma, istd, training, axes, shape, m = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if training:
        dx = (gamma * istd).reshape(shape) / m * (
            m * dy - dbeta.reshape(shape) - xhat * dgamma.reshape(shape)
        )
    else:
        dx = dy * (gamma * istd).reshape(shape)
    return dx.astype(dy.dtype), dgamma, dbeta
