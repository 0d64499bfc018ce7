"""Array kernels (forward and backward) for the DS-CNN layer kinds.

All kernels take NCHW activations and follow the dtype of their inputs, so
the same code runs the float32 trainable suffix, float64 gradient checks and
the integer-valued frozen backbone (exact in float64 below 2**53).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5


def same_padding(size, kernel, stride):
    """TensorFlow-style SAME padding: (before, after, output size)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def conv_geometry(in_hw, kernel, stride, padding):
    """((pad_top, pad_bottom, pad_left, pad_right), (out_h, out_w))."""
    if padding == "SAME":
        pt, pb, oh = same_padding(in_hw[0], kernel[0], stride[0])
        pl, pr, ow = same_padding(in_hw[1], kernel[1], stride[1])
        return (pt, pb, pl, pr), (oh, ow)
    oh = (in_hw[0] - kernel[0]) // stride[0] + 1
    ow = (in_hw[1] - kernel[1]) // stride[1] + 1
    return (0, 0, 0, 0), (oh, ow)


def _pad(x, pads):
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _unpad(g, pads):
    pt, pb, pl, pr = pads
    return g[:, :, pt : g.shape[2] - pb, pl : g.shape[3] - pr]


# --- dense conv (im2col) --------------------------------------------------

def conv2d_forward(x, w, stride, pads):
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    xp = _pad(x, pads)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :: stride[0], :: stride[1]]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    # stacked matmul runs one GEMM per sample, so a row never depends on its batch neighbours
    out = np.matmul(cols, w.reshape(o, -1).T)
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols.reshape(n * oh * ow, -1), x.shape, xp.shape)


def conv2d_backward(dout, w, stride, pads, cache, need_input_grad=True):
    cols, x_shape, xp_shape = cache
    n, o, oh, ow = dout.shape
    _, c, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    if not need_input_grad:
        return None, dw
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    sh, sw = stride
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return _unpad(dxp, pads), dw


# --- depthwise -------------------------------------------------------------

def depthwise_forward(x, w, stride, pads):
    c, _, kh, kw = w.shape
    xp = _pad(x, pads)
    sh, sw = stride
    oh = (xp.shape[2] - kh) // sh + 1
    ow = (xp.shape[3] - kw) // sw + 1
    out = np.zeros((x.shape[0], c, oh, ow), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] * w[None, :, 0, i, j, None, None]
    return out, (xp,)


def depthwise_backward(dout, w, stride, pads, cache, need_input_grad=True):
    (xp,) = cache
    _, _, kh, kw = w.shape
    _, _, oh, ow = dout.shape
    sh, sw = stride
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_input_grad else None
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + sh * oh, sh), slice(j, j + sw * ow, sw))
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dout, xp[sl])
            if need_input_grad:
                dxp[sl] += dout * w[None, :, 0, i, j, None, None]
    return (_unpad(dxp, pads) if need_input_grad else None), dw


# --- pointwise -------------------------------------------------------------

def pointwise_forward(x, w):
    n, c, h, wd = x.shape
    out = np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd)).reshape(n, -1, h, wd)
    return out, (x,)


def pointwise_backward(dout, w, cache, need_input_grad=True):
    (x,) = cache
    dw = np.tensordot(dout, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    if not need_input_grad:
        return None, dw
    dx = np.tensordot(w[:, :, 0, 0], dout, axes=([0], [1])).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw


# --- batch norm ------------------------------------------------------------

def bn_affine(gamma, beta, mean, var):
    """Per-channel (scale, shift) equivalent of inference-mode batch norm."""
    a = gamma / np.sqrt(var + BN_EPS)
    return a, beta - mean * a


def batchnorm_forward(x, gamma, beta, mean, var, training):
    """Returns (out, cache, batch_mean, batch_var); batch stats are None in affine mode."""
    if training:
        mu = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3))
    else:
        mu, v = mean, var
    inv_std = 1.0 / np.sqrt(v + BN_EPS)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, training), (mu if training else None), (v if training else None)


def batchnorm_backward(dout, gamma, cache):
    xhat, inv_std, training = cache
    dgamma = np.einsum("nchw,nchw->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 2, 3))
    g = gamma * inv_std
    if not training:
        return dout * g[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (g[None, :, None, None] / m) * (
        m * dout - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None]
    )
    return dx, dgamma, dbeta


# --- the rest --------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), (x > 0,)


def relu_backward(dout, cache):
    (mask,) = cache
    return dout * mask


def avgpool_forward(x):
    return x.mean(axis=(2, 3)), (x.shape,)


def avgpool_backward(dout, cache):
    (shape,) = cache
    scale = 1.0 / (shape[2] * shape[3])
    return np.broadcast_to((dout * scale)[:, :, None, None], shape).copy()


def linear_forward(x, w, b):
    return np.matmul(x[:, None, :], w)[:, 0, :] + b, (x,)


def linear_backward(dout, w, cache, need_input_grad=True):
    (x,) = cache
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ w.T if need_input_grad else None
    return dx, dw, db
