"""Forward/backward kernels for the 3D encoder-decoder.

Tensors are numpy arrays shaped (batch, channels, x, y, z). Every op computes
in the dtype of its inputs, so the same code serves float32 training and
float64 gradient checks.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError

# above this many im2col elements, convolutions accumulate per kernel offset
IM2COL_LIMIT = 1 << 25

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check5(x, name="x"):
    if x.ndim != 5:
        raise ShapeError(f"{name} must be 5D (batch, channels, x, y, z), got shape {x.shape}")


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def im2col(xp: np.ndarray, k: int, out_dims) -> np.ndarray:
    """Gather (C * k**3, B * X * Y * Z) patches from a padded input."""
    B, C = xp.shape[:2]
    sx, sy, sz = out_dims
    cols = np.empty((C, k ** 3, B, sx, sy, sz), dtype=xp.dtype)
    o = 0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, o] = xp[:, :, i:i + sx, j:j + sy, l:l + sz].transpose(1, 0, 2, 3, 4)
                o += 1
    return cols.reshape(C * k ** 3, B * sx * sy * sz)


def _correlate(xp: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Valid cross-correlation of padded input xp with w (O, C, k, k, k)."""
    B, C = xp.shape[:2]
    O, _, k = w.shape[:3]
    sx, sy, sz = (n - k + 1 for n in xp.shape[2:])
    if k == 1:
        out = np.tensordot(w[:, :, 0, 0, 0], xp, axes=([1], [1]))  # O, B, ...
    elif cols is not None or C * k ** 3 * B * sx * sy * sz <= IM2COL_LIMIT:
        if cols is None:
            cols = im2col(xp, k, (sx, sy, sz))
        out = (w.reshape(O, -1) @ cols).reshape(O, B, sx, sy, sz)
    else:
        out = np.zeros((O, B, sx, sy, sz), dtype=np.result_type(xp, w))
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    out += np.tensordot(w[:, :, i, j, l], xp[:, :, i:i + sx, j:j + sy, l:l + sz], axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def conv3d_forward(x, weight, bias=None, pad=1, return_cols=False):
    """Same-padded cross-correlation; ``weight`` is (out_c, in_c, k, k, k).

    With ``return_cols`` the im2col matrix is returned as well so a training
    pass can hand it to :func:`conv3d_backward`.
    """
    _check5(x)
    if weight.ndim != 5 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"weight {weight.shape} does not match input channels {x.shape[1]}")
    k = weight.shape[2]
    xp = _pad(x, pad)
    cols = None
    if return_cols and k > 1:
        cols = im2col(xp, k, tuple(n - k + 1 for n in xp.shape[2:]))
    out = _correlate(xp, weight, cols)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return (out, cols) if return_cols else out


def conv3d_backward(x, weight, grad_out, pad=1, cols=None):
    """Returns (grad_x, grad_w, grad_b)."""
    _check5(x)
    _check5(grad_out, "grad_out")
    if weight.shape[1] != x.shape[1] or weight.shape[0] != grad_out.shape[1]:
        raise ShapeError("weight shape inconsistent with x / grad_out")
    k = weight.shape[2]
    O = weight.shape[0]
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    if k == 1:
        grad_w = np.tensordot(grad_out, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))[:, :, None, None, None]
    else:
        g2 = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3, 4)).reshape(O, -1)
        if cols is None and x.shape[1] * k ** 3 * g2.shape[1] > IM2COL_LIMIT:
            xp = _pad(x, pad)
            sx, sy, sz = grad_out.shape[2:]
            grad_w = np.empty_like(weight)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        grad_w[:, :, i, j, l] = np.tensordot(
                            grad_out, xp[:, :, i:i + sx, j:j + sy, l:l + sz], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        else:
            if cols is None:
                cols = im2col(_pad(x, pad), k, grad_out.shape[2:])
            grad_w = (g2 @ cols.T).reshape(weight.shape)
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    grad_x = _correlate(_pad(grad_out, k - 1 - pad), flipped)
    return grad_x, grad_w.astype(weight.dtype, copy=False), grad_b


def _blocks(x):
    """View (B, C, X/2, Y/2, Z/2, 8) with block-local order (dz, dy, dx)."""
    B, C, X, Y, Z = x.shape
    v = x.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2)
    return v.transpose(0, 1, 2, 4, 6, 7, 5, 3).reshape(B, C, X // 2, Y // 2, Z // 2, 8)


def maxpool3d(x):
    """2x2x2 max pooling. Returns (pooled, argmax) with ties going to the
    lowest x-fastest linear index inside each block."""
    _check5(x)
    if any(n % 2 for n in x.shape[2:]):
        raise ShapeError(f"max pooling needs even spatial dims, got {x.shape[2:]}")
    blk = _blocks(x)
    idx = blk.argmax(axis=-1)
    out = np.take_along_axis(blk, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool3d_backward(grad_out, indices):
    B, C, X, Y, Z = grad_out.shape
    blk = np.zeros((B, C, X, Y, Z, 8), dtype=grad_out.dtype)
    np.put_along_axis(blk, indices[..., None], grad_out[..., None], axis=-1)
    # undo _blocks: local axis order (dz, dy, dx) -> (x, dx, y, dy, z, dz)
    v = blk.reshape(B, C, X, Y, Z, 2, 2, 2).transpose(0, 1, 2, 7, 3, 6, 4, 5)
    return np.ascontiguousarray(v.reshape(B, C, 2 * X, 2 * Y, 2 * Z))


def convtranspose3d_forward(x, weight, bias=None):
    """Stride-2 transposed convolution with a 2x2x2 kernel; ``weight`` is (in_c, out_c, 2, 2, 2)."""
    _check5(x)
    if weight.ndim != 5 or weight.shape[0] != x.shape[1] or weight.shape[2:] != (2, 2, 2):
        raise ShapeError(f"weight {weight.shape} incompatible with input {x.shape}")
    B, _, X, Y, Z = x.shape
    O = weight.shape[1]
    t = np.tensordot(x, weight, axes=([1], [0]))  # B, X, Y, Z, O, 2, 2, 2
    out = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, O, 2 * X, 2 * Y, 2 * Z)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


def conv_downsample(y, weight):
    """Stride-2 2x2x2 correlation with the same weight: the adjoint of
    ``convtranspose3d_forward`` (without bias)."""
    _check5(y, "y")
    B, O, X2, Y2, Z2 = y.shape
    if any(n % 2 for n in (X2, Y2, Z2)) or weight.shape[1] != O:
        raise ShapeError(f"y {y.shape} incompatible with weight {weight.shape}")
    g = y.reshape(B, O, X2 // 2, 2, Y2 // 2, 2, Z2 // 2, 2)
    out = np.tensordot(g, weight, axes=([1, 3, 5, 7], [1, 2, 3, 4]))  # B, X, Y, Z, C
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def convtranspose3d_backward(x, weight, grad_out):
    """Returns (grad_x, grad_w, grad_b)."""
    B, O, X2, Y2, Z2 = grad_out.shape
    grad_x = conv_downsample(grad_out, weight)
    g = grad_out.reshape(B, O, X2 // 2, 2, Y2 // 2, 2, Z2 // 2, 2)
    grad_w = np.tensordot(x, g, axes=([0, 2, 3, 4], [0, 2, 4, 6]))
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    return grad_x, grad_w, grad_b


def batchnorm3d_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Returns (y, cache). In train mode running stats are updated in place."""
    _check5(x)
    shape = (1, -1, 1, 1, 1)
    if train:
        n = x.shape[0] * x[0, 0].size
        if n < 2:
            raise ShapeError("batch norm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3, 4), dtype=np.float64)
        var = x.var(axis=(0, 2, 3, 4), dtype=np.float64)
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * n / (n - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + BN_EPS)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return y, (xhat, inv_std)


def batchnorm3d_backward(grad_out, gamma, cache):
    """Train-mode backward. Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std = cache
    shape = (1, -1, 1, 1, 1)
    axes = (0, 2, 3, 4)
    n = grad_out.shape[0] * grad_out[0, 0].size
    grad_beta = grad_out.sum(axis=axes, dtype=np.float64)
    grad_gamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64)
    dxhat = grad_out * gamma.reshape(shape)
    s1 = dxhat.sum(axis=axes, dtype=np.float64).astype(grad_out.dtype).reshape(shape)
    s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).astype(grad_out.dtype).reshape(shape)
    grad_x = (inv_std.reshape(shape) / n) * (n * dxhat - s1 - xhat * s2)
    dt = gamma.dtype
    return grad_x, grad_gamma.astype(dt), grad_beta.astype(dt)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def mse_loss(pred, target):
    """Mean squared error; returns (loss as float, gradient w.r.t. pred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff
