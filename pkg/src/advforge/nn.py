"""Layer primitives and loss functions with forward and backward rules.

Layers operate on NCHW activations. Convolution kernels are OIHW. All
backward rules are exercised against central finite differences in the
test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _wrap, grads_live, relu

__all__ = ["conv2d", "batch_norm", "relu", "max_pool2d", "global_avg_pool",
           "dense", "channel_standardize", "softmax", "cross_entropy_loss",
           "kl_divergence"]

LOG_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold NCHW into (N, C*kh*kw, OH*OW) patch columns."""
    n, c, h, w = x.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch columns back onto the (padded) input grid."""
    n, c, h, w = x_shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernel, no bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d needs NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {ci}")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive output extent {oh}x{ow} for input {h}x{w}")

    def fwd(xd, kd):
        cols = _im2col(xd, kh, kw, stride, padding)
        w2 = kd.reshape(o, c * kh * kw)
        out = np.matmul(w2, cols)  # (N, O, OH*OW)
        return np.ascontiguousarray(out.reshape(n, o, oh, ow))

    cols = _im2col(x.data, kh, kw, stride, padding)
    w2 = kernel.data.reshape(o, c * kh * kw)
    out = np.ascontiguousarray(np.matmul(w2, cols).reshape(n, o, oh, ow))
    x_shape = x.shape

    def bwd(g, needs):
        g2 = g.reshape(n, o, oh * ow)
        gk = gx = None
        if needs[1]:
            gk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if needs[0]:
            gcols = np.matmul(w2.T, g2)  # (N, C*kh*kw, OH*OW)
            gx = _col2im(gcols, x_shape, kh, kw, stride, padding)
        return (gx, gk)

    return _wrap("conv2d", (x, kernel), out, bwd, fwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
               update_stats: bool = True) -> Tensor:
    """Per-channel normalization over NCHW; train mode updates running stats in place.

    ``update_stats=False`` keeps train-mode batch statistics but leaves the
    running estimates untouched (used for auxiliary forward passes).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    dtype = x.dtype

    if train:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        msq = np.multiply(x.data, x.data).mean(axis=axes, dtype=np.float64)
        var = np.maximum(msq - mean * mean, 0.0)
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean.astype(running_mean.dtype)
            running_var *= momentum
            running_var += (1.0 - momentum) * var.astype(running_var.dtype)
        mean32 = mean.astype(dtype)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    else:
        mean32 = running_mean.astype(dtype)
        inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(dtype)

    mean_b = mean32.reshape(1, c, 1, 1)
    inv_b = inv_std.reshape(1, c, 1, 1)
    xhat = (x.data - mean_b) * inv_b
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    m = x.data.size // c  # elements per channel
    gamma_b = gamma.data.reshape(1, c, 1, 1)

    def bwd(g, needs):
        gx = ggamma = gbeta = None
        if needs[2]:
            gbeta = g.sum(axis=axes, dtype=np.float64).astype(dtype)
        if needs[1]:
            ggamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(dtype)
        if needs[0]:
            gxhat = g * gamma_b
            if train:
                # batch statistics participate in the graph
                s1 = gxhat.mean(axis=axes, dtype=np.float64).astype(dtype).reshape(1, c, 1, 1)
                s2 = (gxhat * xhat).mean(axis=axes, dtype=np.float64).astype(dtype).reshape(1, c, 1, 1)
                gx = inv_b * (gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_b
        return (gx, ggamma, gbeta)

    def fwd(xd, gd, bd):
        if train:
            mu = xd.mean(axis=axes, dtype=np.float64)
            v = np.maximum(np.multiply(xd, xd).mean(axis=axes, dtype=np.float64) - mu * mu, 0.0)
            mu32 = mu.astype(dtype)
            iv = (1.0 / np.sqrt(v + eps)).astype(dtype)
        else:
            mu32, iv = mean32, inv_std
        xh = (xd - mu32.reshape(1, c, 1, 1)) * iv.reshape(1, c, 1, 1)
        return xh * gd.reshape(1, c, 1, 1) + bd.reshape(1, c, 1, 1)

    return _wrap("batch_norm", (x, gamma, beta), out, bwd, fwd)


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; trailing odd rows/columns are dropped.

    The backward rule splits the gradient evenly across tied maxima inside
    a window (a valid subgradient; identical to single routing when the
    maximum is unique).
    """
    if k != 2 or stride != 2:
        raise ShapeError("only k=2, stride=2 pooling is supported")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{w} too small to pool")

    def fwd(xd):
        win = xd[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2)
        return np.ascontiguousarray(win.max(axis=(3, 5)))

    win = x.data[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2)
    out = np.ascontiguousarray(win.max(axis=(3, 5)))
    if not grads_live(x):
        return _wrap("max_pool2d", (x,), out, lambda g, needs: (None,), fwd)
    x_shape = x.shape

    def bwd(g, needs):
        out_b = out[:, :, :, None, :, None]
        mask = (win == out_b).astype(g.dtype)
        count = mask.sum(axis=(3, 5), keepdims=True)
        gwin = mask * (g[:, :, :, None, :, None] / count)
        gx = np.zeros(x_shape, dtype=g.dtype)
        gx[:, :, :oh * 2, :ow * 2] = gwin.reshape(n, c, oh * 2, ow * 2)
        return (gx,)

    return _wrap("max_pool2d", (x,), out, bwd, fwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial dims: NCHW -> NC."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def bwd(g, needs):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).astype(g.dtype)
        return (gx.copy(),)

    return _wrap("global_avg_pool", (x,), out, bwd,
                 lambda xd: xd.mean(axis=(2, 3), dtype=np.float64).astype(xd.dtype))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map y = x @ W^T + b with W of shape (out, in)."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense expects a 2-d batch, got {x.shape}")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"weight {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data
    xd, wd = x.data, weight.data

    def bwd(g, needs):
        gx = g @ wd if needs[0] else None
        gw = g.T @ xd if needs[1] else None
        gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if needs[2] else None
        return (gx, gw, gb)

    return _wrap("dense", (x, weight, bias), out, bwd,
                 lambda a, w, b: a @ w.T + b)


def channel_standardize(x: Tensor, mean: np.ndarray, std: np.ndarray) -> Tensor:
    """Fixed per-channel (x - mean) / std; constants carry no gradient."""
    c = x.shape[1]
    mean = np.asarray(mean, dtype=x.dtype).reshape(1, c, 1, 1)
    inv = (1.0 / np.asarray(std, dtype=np.float64)).astype(x.dtype).reshape(1, c, 1, 1)
    out = (x.data - mean) * inv

    def bwd(g, needs):
        return (g * inv,)

    return _wrap("standardize", (x,), out, bwd, lambda xd: (xd - mean) * inv)


def _softmax_array(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction."""
    out = _softmax_array(x.data)
    p = out

    def bwd(g, needs):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return ((g - inner) * p,)

    return _wrap("softmax", (x,), out, bwd, _softmax_array)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over a batch of logits.

    ``reduction="sum"`` keeps per-example terms independent, which makes
    batched per-image input gradients exact.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    rows = np.arange(b)

    def nll(z):
        shifted = z - z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        return logsumexp - shifted[rows, labels]

    per = nll(logits.data)
    total = per.sum(dtype=np.float64)
    out = np.asarray(total / b if reduction == "mean" else total, dtype=logits.dtype)
    p = _softmax_array(logits.data)
    denom = b if reduction == "mean" else 1

    def bwd(g, needs):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        gz *= g / denom
        return (gz,)

    def fwd(z):
        t = nll(z).sum(dtype=np.float64)
        return np.asarray(t / b if reduction == "mean" else t, dtype=z.dtype)

    return _wrap("cross_entropy", (logits,), out, bwd, fwd)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) = sum_i p_i ln(p_i / q_i), with 0 ln 0 := 0.

    1-d inputs give the divergence of one distribution pair; 2-d inputs are
    treated as a batch and the mean divergence is returned. Values inside
    the logs are floored at 1e-12.
    """
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {q.shape}")
    batched = p.data.ndim == 2
    nb = p.shape[0] if batched else 1

    def kl(pd, qd):
        lp = np.log(np.maximum(pd, LOG_FLOOR))
        lq = np.log(np.maximum(qd, LOG_FLOOR))
        terms = np.where(pd > 0, pd * (lp - lq), 0.0)
        return np.asarray(terms.sum(dtype=np.float64) / nb, dtype=pd.dtype)

    out = kl(p.data, q.data)
    pd, qd = p.data, q.data

    def bwd(g, needs):
        gp = gq = None
        coeff = g / nb
        if needs[0]:
            lp = np.log(np.maximum(pd, LOG_FLOOR))
            lq = np.log(np.maximum(qd, LOG_FLOOR))
            gp = ((lp - lq + 1.0) * coeff).astype(pd.dtype)
        if needs[1]:
            gq = np.where(qd > LOG_FLOOR, -pd / np.maximum(qd, LOG_FLOOR), 0.0)
            gq = (gq * coeff).astype(qd.dtype)
        return (gp, gq)

    return _wrap("kl_divergence", (p, q), out, bwd, kl)
