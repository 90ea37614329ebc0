"""Feature fusion, second BiLSTM, time pooling and the MOS output layer."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .errors import ShapeError, StateError

MEAN = "mean"
ATTENTION = "attention"


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 120
    hidden: int = 256
    pooling: str = MEAN

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def to_dict(self):
        return asdict(self)


def init_head_params(cfg: HeadConfig, rng, dtype=np.float64):
    params = layers.init_lstm(rng, "head.lstm", cfg.in_dim, cfg.hidden, dtype)
    width = cfg.out_dim
    params["head.attn.w"] = layers.glorot_uniform(rng, (width,), width, 1, dtype)
    params["head.attn.b"] = np.zeros((), dtype=dtype)
    params["head.out.W"] = layers.glorot_uniform(rng, (2 * width,), 2 * width, 1, dtype)
    # start near the middle of the MOS scale
    params["head.out.b"] = np.asarray(3.0, dtype=dtype)
    return params


def fuse(f_deg, f_ref_aligned) -> np.ndarray:
    """concat(deg, aligned ref, deg - aligned ref) along the feature axis."""
    f_deg = np.asarray(getattr(f_deg, "features", f_deg))
    f_ref = np.asarray(getattr(f_ref_aligned, "features", f_ref_aligned))
    if f_deg.shape != f_ref.shape or f_deg.ndim != 2:
        raise ShapeError(f"cannot fuse {f_deg.shape} with {f_ref.shape}")
    return np.concatenate([f_deg, f_ref, f_deg - f_ref], axis=1)


def fuse_backward(d_fused, width):
    """Split the fused gradient into (d_deg, d_ref_aligned)."""
    a, b, d = d_fused[:, :width], d_fused[:, width:2 * width], d_fused[:, 2 * width:]
    return a + d, b - d


def bilstm2_forward(fused, params):
    fused = np.asarray(fused)
    if fused.ndim != 2 or fused.shape[0] < 1 or fused.shape[1] != params["head.lstm.fwd.Wx"].shape[0]:
        raise ShapeError(f"head input has shape {fused.shape}")
    return layers.bilstm_forward(fused, params, "head.lstm")


def softmax(k):
    e = np.exp(k - np.max(k))
    return e / e.sum()


def attention_pool(G, params):
    """Linear-attention pooling.

    Scores ``k = G @ w + b`` are softmax-normalised into weights ``a``; the
    pooled vector is ``concat(G[-1], a @ G)``.  Returns ``(g_a, a)``.
    """
    G = np.asarray(G)
    if G.ndim != 2 or G.shape[0] < 1:
        raise ShapeError(f"pooling input has shape {G.shape}")
    a = softmax(G @ params["head.attn.w"] + params["head.attn.b"])
    return np.concatenate([G[-1], a @ G]), a


def mean_pool(G):
    """Baseline pooling: concat(G[-1], mean over time steps)."""
    G = np.asarray(G)
    if G.ndim != 2 or G.shape[0] < 1:
        raise ShapeError(f"pooling input has shape {G.shape}")
    return np.concatenate([G[-1], G.mean(axis=0)])


def predict_mos(g_a, params, clamp=True):
    """Affine output layer; clamped to [1, 5] unless ``clamp`` is False."""
    raw = float(np.asarray(g_a) @ params["head.out.W"] + params["head.out.b"])
    return min(5.0, max(1.0, raw)) if clamp else raw


def head_forward(fused, params, cfg: HeadConfig, train=False):
    """Fused features -> raw MOS, with optional cache for :func:`head_backward`."""
    G, c_lstm = bilstm2_forward(fused, params)
    if cfg.pooling == ATTENTION:
        g_a, a = attention_pool(G, params)
    elif cfg.pooling == MEAN:
        g_a, a = mean_pool(G), np.full(G.shape[0], 1.0 / G.shape[0], dtype=G.dtype)
    else:
        raise ValueError(f"unknown pooling {cfg.pooling!r}")
    mos = predict_mos(g_a, params, clamp=False)
    cache = (c_lstm, G, g_a, a) if train else None
    return mos, a, cache


def head_backward(d_mos, cache, params, grads, cfg: HeadConfig):
    """Accumulate head gradients for upstream ``d_mos``; return d(fused)."""
    if cache is None:
        raise StateError("head_backward needs a cached train-mode forward pass")
    c_lstm, G, g_a, a = cache
    width = G.shape[1]
    grads["head.out.W"] += d_mos * g_a
    grads["head.out.b"] += d_mos
    dg_a = d_mos * params["head.out.W"]
    dG = np.zeros_like(G)
    dG[-1] += dg_a[:width]
    dg_w = dg_a[width:]
    dG += a[:, None] * dg_w[None, :]
    if cfg.pooling == ATTENTION:
        da = G @ dg_w
        dk = a * (da - a @ da)
        grads["head.attn.w"] += G.T @ dk
        grads["head.attn.b"] += dk.sum()
        dG += dk[:, None] * params["head.attn.w"][None, :]
    return layers.bilstm_backward(dG, c_lstm, grads, "head.lstm")
