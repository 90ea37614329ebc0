"""Numpy layer primitives with explicit backward passes.

Feature maps use NHWC layout.  Every ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward`` consumes that cache.
"""
from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# convolution, 3x3 kernel, stride 1, zero padding 1

# The padded input is flattened to rows of (B * (H+2) * (W+2), C).  On that
# grid every kernel tap is a constant row offset, so each tap is one matmul on
# a contiguous slice and no im2col buffer is built.  Border rows of the output
# are computed and dropped.

def _taps(Wd):
    return [(dy, dx, (dy - 1) * (Wd + 2) + (dx - 1)) for dy in range(3) for dx in range(3)]


def conv3x3_forward(x, W, b):
    B, H, Wd, C = x.shape
    O = W.shape[0]
    n = B * (H + 2) * (Wd + 2)
    m = Wd + 3  # largest tap offset
    xe = np.zeros((n + 2 * m, C), dtype=x.dtype)
    xe[m:m + n].reshape(B, H + 2, Wd + 2, C)[:, 1:-1, 1:-1] = x
    y = np.zeros((n, O), dtype=np.result_type(x, W))
    Wt = np.ascontiguousarray(W.transpose(2, 3, 1, 0))  # (3, 3, C, O)
    for dy, dx, off in _taps(Wd):
        y += xe[m + off:m + off + n] @ Wt[dy, dx]
    out = y.reshape(B, H + 2, Wd + 2, O)[:, 1:-1, 1:-1] + b
    return out, (x.shape, xe, W)


def conv3x3_backward(dout, cache, need_dx=True):
    (B, H, Wd, C), xe, W = cache
    O = W.shape[0]
    n = B * (H + 2) * (Wd + 2)
    m = Wd + 3
    dy_full = np.zeros((n, O), dtype=dout.dtype)
    dy_full.reshape(B, H + 2, Wd + 2, O)[:, 1:-1, 1:-1] = dout
    dW = np.empty((3, 3, C, O), dtype=W.dtype)
    Wk = np.ascontiguousarray(W.transpose(2, 3, 0, 1))  # (3, 3, O, C)
    dxe = np.zeros_like(xe) if need_dx else None
    for dy, dx, off in _taps(Wd):
        rows = slice(m + off, m + off + n)
        dW[dy, dx] = xe[rows].T @ dy_full
        if need_dx:
            dxe[rows] += dy_full @ Wk[dy, dx]
    dW = dW.transpose(3, 2, 0, 1)
    db = dout.sum(axis=(0, 1, 2))
    if not need_dx:
        return None, dW, db
    return dxe[m:m + n].reshape(B, H + 2, Wd + 2, C)[:, 1:-1, 1:-1], dW, db


# --------------------------------------------------------------------------
# batch normalisation over every axis except the trailing channel axis

def batchnorm_train(x, gamma, beta, running_mean, running_var, momentum, eps):
    """Normalise with batch statistics; updates the running buffers in place."""
    axes = tuple(range(x.ndim - 1))
    n = x.size // x.shape[-1]
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (n / max(n - 1, 1))
    return gamma * xhat + beta, (xhat, inv_std, gamma, True)


def batchnorm_train_running(x, gamma, beta, running_mean, running_var, momentum, eps):
    """Normalise with the running statistics held constant, then fold the batch
    moments into them.

    The output equals :func:`batchnorm_eval` on the pre-update buffers, so a
    model trained this way computes the same function at inference.
    """
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean) * inv_std
    axes = tuple(range(x.ndim - 1))
    n = x.size // x.shape[-1]
    var = x.var(axis=axes)
    running_mean *= 1.0 - momentum
    running_mean += momentum * x.mean(axis=axes)
    running_var *= 1.0 - momentum
    running_var += momentum * var * (n / max(n - 1, 1))
    return gamma * xhat + beta, (xhat, inv_std, gamma, False)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps):
    # same operation order as batchnorm_train_running so the two agree bitwise
    return gamma * ((x - running_mean) * (1.0 / np.sqrt(running_var + eps))) + beta


def batchnorm_backward(dout, cache):
    """Backward for either training variant; constant statistics make it affine."""
    xhat, inv_std, gamma, batch_stats = cache
    axes = tuple(range(dout.ndim - 1))
    n = dout.size // dout.shape[-1]
    dgamma = np.sum(dout * xhat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    dxhat = dout * gamma
    if not batch_stats:
        return dxhat * inv_std, dgamma, dbeta
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# 2x2 max pooling, floor mode (odd trailing row/column dropped)

def maxpool2_forward(x, idx=None):
    """Pool with argmax selection, or with the given selection ``idx``."""
    B, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    win = (x[:, :2 * H2, :2 * W2, :]
           .reshape(B, H2, 2, W2, 2, C)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(B, H2, W2, C, 4))
    if idx is None:
        idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    (B, H, W, C), idx = cache
    H2, W2 = H // 2, W // 2
    dwin = np.zeros((B, H2, W2, C, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros((B, H, W, C), dtype=dout.dtype)
    dx[:, :2 * H2, :2 * W2, :] = (dwin.reshape(B, H2, W2, C, 2, 2)
                                  .transpose(0, 1, 4, 2, 5, 3)
                                  .reshape(B, 2 * H2, 2 * W2, C))
    return dx


# --------------------------------------------------------------------------
# single-direction LSTM, gate order (input, forget, cell, output)

def lstm_forward(x, Wx, Wh, b, reverse=False):
    """Run one LSTM direction over ``x`` of shape (N, in) from zero state.

    Returns hidden states (N, H) indexed by input time step, so the reverse
    direction's output at ``t`` has seen ``x[t:]``.
    """
    N = x.shape[0]
    H = Wh.shape[0]
    zx = x @ Wx + b
    hs = np.empty((N, H), dtype=zx.dtype)
    h_prev = np.empty((N, H), dtype=zx.dtype)
    c_prev = np.empty((N, H), dtype=zx.dtype)
    cs = np.empty((N, H), dtype=zx.dtype)
    acts = np.empty((N, 4 * H), dtype=zx.dtype)
    h = np.zeros(H, dtype=zx.dtype)
    c = np.zeros(H, dtype=zx.dtype)
    order = range(N - 1, -1, -1) if reverse else range(N)
    for t in order:
        z = zx[t] + h @ Wh
        a = np.empty_like(z)
        a[:2 * H] = sigmoid(z[:2 * H])
        a[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
        a[3 * H:] = sigmoid(z[3 * H:])
        h_prev[t] = h
        c_prev[t] = c
        c = a[H:2 * H] * c + a[:H] * a[2 * H:3 * H]
        h = a[3 * H:] * np.tanh(c)
        hs[t] = h
        cs[t] = c
        acts[t] = a
    return hs, (x, Wx, Wh, reverse, acts, h_prev, c_prev, cs)


def lstm_backward(dhs, cache):
    """Backpropagation through time.  Returns (dx, dWx, dWh, db)."""
    x, Wx, Wh, reverse, acts, h_prev, c_prev, cs = cache
    N, H = dhs.shape
    dz = np.empty((N, 4 * H), dtype=dhs.dtype)
    dh_next = np.zeros(H, dtype=dhs.dtype)
    dc_next = np.zeros(H, dtype=dhs.dtype)
    order = range(N) if reverse else range(N - 1, -1, -1)
    for t in order:
        a = acts[t]
        i, f, g, o = a[:H], a[H:2 * H], a[2 * H:3 * H], a[3 * H:]
        dh = dhs[t] + dh_next
        tc = np.tanh(cs[t])
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz[t, :H] = dc * g * i * (1.0 - i)
        dz[t, H:2 * H] = dc * c_prev[t] * f * (1.0 - f)
        dz[t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[t, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz[t] @ Wh.T
    return dz @ Wx.T, x.T @ dz, h_prev.T @ dz, dz.sum(axis=0)


def init_lstm(rng, prefix, n_in, hidden, dtype):
    """Glorot weights, zero biases except forget gate = 1."""
    out = {}
    for d in ("fwd", "bwd"):
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = 1.0
        out[f"{prefix}.{d}.Wx"] = glorot_uniform(rng, (n_in, 4 * hidden), n_in, 4 * hidden, dtype)
        out[f"{prefix}.{d}.Wh"] = glorot_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype)
        out[f"{prefix}.{d}.b"] = b
    return out


def bilstm_forward(x, params, prefix):
    """Bidirectional LSTM; output columns are [forward | backward]."""
    hf, cf = lstm_forward(x, params[f"{prefix}.fwd.Wx"], params[f"{prefix}.fwd.Wh"], params[f"{prefix}.fwd.b"])
    hb, cb = lstm_forward(x, params[f"{prefix}.bwd.Wx"], params[f"{prefix}.bwd.Wh"], params[f"{prefix}.bwd.b"],
                          reverse=True)
    return np.concatenate([hf, hb], axis=1), (cf, cb)


def bilstm_backward(dout, cache, grads, prefix):
    cf, cb = cache
    H = dout.shape[1] // 2
    dx = np.zeros_like(cf[0], dtype=dout.dtype)
    for d, c, dh in (("fwd", cf, dout[:, :H]), ("bwd", cb, dout[:, H:])):
        ddx, dWx, dWh, db = lstm_backward(np.ascontiguousarray(dh), c)
        dx += ddx
        grads[f"{prefix}.{d}.Wx"] += dWx
        grads[f"{prefix}.{d}.Wh"] += dWh
        grads[f"{prefix}.{d}.b"] += db
    return dx
