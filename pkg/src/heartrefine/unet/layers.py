"""Forward and backward kernels for the 3-D U-Net.

Feature grids are ``(batch, channels, z, y, x)`` arrays.  Every function works
in whatever float dtype it is given, so the same code runs in float32 for
training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "conv3d",
    "conv3d_backward",
    "maxpool3d",
    "maxpool3d_backward",
    "deconv3d",
    "deconv3d_backward",
    "conv3d_stride2",
    "relu",
    "relu_backward",
    "softmax",
    "softmax_cross_entropy",
]

# cap on the im2col buffer; large volumes are processed in z-slabs
_COL_BYTES = 64 * 2**20


def _slab(c: int, y: int, x: int, itemsize: int) -> int:
    per_slice = c * 27 * y * x * itemsize
    return max(1, _COL_BYTES // max(per_slice, 1))


def _cols(xp: np.ndarray, z0: int, z1: int) -> np.ndarray:
    """im2col for one padded sample, output rows ``z0:z1``: shape (C*27, N)."""
    c = xp.shape[0]
    win = sliding_window_view(xp[:, z0 : z1 + 2], (3, 3, 3), axis=(1, 2, 3))
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * 27, -1)


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """3x3x3 convolution (cross-correlation) with zero same-padding.

    ``w`` has shape (out, in, 3, 3, 3).
    """
    n, c, z, y, xx = x.shape
    o = w.shape[0]
    if w.shape[1:] != (c, 3, 3, 3):
        raise ValueError(f"kernel {w.shape} does not match {c} input channels")
    dtype = np.result_type(x, w)
    wmat = w.reshape(o, c * 27).astype(dtype, copy=False)
    out = np.empty((n, o, z, y, xx), dtype=dtype)
    step = _slab(c, y, xx, dtype.itemsize)
    for i in range(n):
        xp = np.pad(x[i], ((0, 0), (1, 1), (1, 1), (1, 1)))
        for z0 in range(0, z, step):
            z1 = min(z, z0 + step)
            out[i, :, z0:z1] = (wmat @ _cols(xp, z0, z1)).reshape(o, z1 - z0, y, xx)
    if b is not None:
        out += b.reshape(1, o, 1, 1, 1)
    return out


def conv3d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool = True):
    """Gradients of :func:`conv3d` with respect to input, kernel and bias."""
    n, c, z, y, xx = x.shape
    o = w.shape[0]
    dtype = np.result_type(dout, x, w)
    db = dout.sum(axis=(0, 2, 3, 4))
    dw = np.zeros((o, c * 27), dtype=dtype)
    step = _slab(c, y, xx, dtype.itemsize)
    for i in range(n):
        xp = np.pad(x[i], ((0, 0), (1, 1), (1, 1), (1, 1)))
        for z0 in range(0, z, step):
            z1 = min(z, z0 + step)
            g = dout[i, :, z0:z1].reshape(o, -1)
            dw += g @ _cols(xp, z0, z1).T
    dx = None
    if need_dx:
        # full correlation with the flipped, channel-transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx = conv3d(dout, wt)
    return dx, dw.reshape(w.shape), db


def maxpool3d(x: np.ndarray):
    """2x2x2 max pooling, stride 2.  Returns output and in-block argmax (0..7)."""
    n, c, z, y, xx = x.shape
    if z % 2 or y % 2 or xx % 2:
        raise ValueError(f"maxpool3d needs even spatial dims, got {(z, y, xx)}")
    blocks = (
        x.reshape(n, c, z // 2, 2, y // 2, 2, xx // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, z // 2, y // 2, xx // 2, 8)
    )
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool3d_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, z, y, xx = dout.shape
    blocks = np.zeros((n, c, z, y, xx, 8), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return (
        blocks.reshape(n, c, z, y, xx, 2, 2, 2)
        .transpose(0, 1, 2, 5, 3, 6, 4, 7)
        .reshape(n, c, 2 * z, 2 * y, 2 * xx)
    )


def deconv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Transposed convolution, kernel 2x2x2, stride 2: doubles every spatial dim.

    ``w`` has shape (in, out, 2, 2, 2).  Output blocks do not overlap, so each
    input voxel paints its own 2x2x2 patch.
    """
    n, c, z, y, xx = x.shape
    if w.shape[0] != c or w.shape[2:] != (2, 2, 2):
        raise ValueError(f"kernel {w.shape} does not match {c} input channels")
    o = w.shape[1]
    wmat = w.reshape(c, o * 8).T
    out = np.empty((n, o, 2 * z, 2 * y, 2 * xx), dtype=np.result_type(x, w))
    for i in range(n):
        t = (wmat @ x[i].reshape(c, -1)).reshape(o, 2, 2, 2, z, y, xx)
        out[i] = t.transpose(0, 4, 1, 5, 2, 6, 3).reshape(o, 2 * z, 2 * y, 2 * xx)
    if b is not None:
        out += b.reshape(1, o, 1, 1, 1)
    return out


def _unblock(g: np.ndarray) -> np.ndarray:
    """(O, 2Z, 2Y, 2X) -> (O*8, Z*Y*X) grouped by in-block offset."""
    o, z2, y2, x2 = g.shape
    return (
        g.reshape(o, z2 // 2, 2, y2 // 2, 2, x2 // 2, 2)
        .transpose(0, 2, 4, 6, 1, 3, 5)
        .reshape(o * 8, -1)
    )


def deconv3d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    n, c, z, y, xx = x.shape
    o = w.shape[1]
    wmat = w.reshape(c, o * 8)
    dx = np.empty_like(x, dtype=np.result_type(dout, w))
    dw = np.zeros((c, o * 8), dtype=np.result_type(dout, x))
    for i in range(n):
        g = _unblock(dout[i])
        dx[i] = (wmat @ g).reshape(c, z, y, xx)
        dw += x[i].reshape(c, -1) @ g.T
    db = dout.sum(axis=(0, 2, 3, 4))
    return dx, dw.reshape(w.shape), db


def conv3d_stride2(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Strided 2x2x2 correlation, the adjoint of :func:`deconv3d` without bias.

    ``w`` uses the deconvolution layout (in, out, 2, 2, 2); input has ``out``
    channels and the result has ``in`` channels at half resolution.
    """
    n, o, z2, y2, x2 = y.shape
    blocks = y.reshape(n, o, z2 // 2, 2, y2 // 2, 2, x2 // 2, 2)
    return np.einsum("nazibjck,daijk->ndzbc", blocks, w, optimize=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * (out > 0)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray, class_weights=None):
    """Mean voxel-wise cross-entropy and its gradient w.r.t. ``logits``.

    ``target`` holds class indices with shape ``logits.shape`` minus the
    channel axis.  With ``class_weights`` the mean is weighted by the weight of
    each voxel's true class.
    """
    nch = logits.shape[1]
    target = np.asarray(target)
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= nch):
        raise ValueError(f"target labels outside channel range 0..{nch - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    t = target[:, None].astype(np.intp)
    nll = -np.take_along_axis(log_p, t, axis=1)[:, 0]

    grad = np.exp(log_p)
    np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1, axis=1)
    if class_weights is None:
        count = nll.size
        loss = nll.sum() / count
        grad /= count
    else:
        cw = np.asarray(class_weights, dtype=logits.dtype)
        wv = cw[target]
        total = wv.sum()
        loss = (wv * nll).sum() / total
        grad *= (wv / total)[:, None]
    return float(loss), grad
