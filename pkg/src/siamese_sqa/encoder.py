"""Siamese CNN + BiLSTM feature extractor.

One parameter set is applied to both the reference and the degraded signal.
Each 48x15 log-mel segment becomes a 20-dim vector through six 3x3
conv/batch-norm/ReLU blocks (2x2 max pooling after blocks 2, 4 and 6) and a
fully connected layer; a bidirectional LSTM with 20 units per direction then
turns the sequence of segment vectors into 40-dim features per 10 ms step.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers
from .audio_io import AudioSignal
from .dsp import DspConfig, segments_for
from .errors import NotInitialized, ShapeError, StateError


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 48
    seg_len: int = 15
    channels: tuple = (16, 16, 32, 32, 64, 64)
    pool_after: tuple = (1, 3, 5)  # zero-based block indices
    fc_dim: int = 20
    lstm_hidden: int = 20
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # True: classic per-batch statistics in train mode.  With one utterance
    # per step that amounts to per-utterance normalisation, which the eval
    # path (running statistics) cannot reproduce.
    bn_batch_stats: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "pool_after", tuple(self.pool_after))

    @property
    def feature_dim(self) -> int:
        return 2 * self.lstm_hidden

    @property
    def cnn_out_shape(self) -> tuple:
        h, w = self.n_mels, self.seg_len
        for i in range(len(self.channels)):
            if i in self.pool_after:
                h, w = h // 2, w // 2
        return h, w, self.channels[-1]

    @property
    def fc_in(self) -> int:
        h, w, c = self.cnn_out_shape
        return h * w * c

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class FeatureSequence:
    """Per-step encoder outputs, shape (N, H)."""

    features: np.ndarray
    cache: object = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return self.features.shape[0]


def init_encoder_params(cfg: EncoderConfig, rng, dtype=np.float64):
    """Return ``(params, buffers)`` dicts for the encoder."""
    params, buffers = {}, {}
    c_in = 1
    for i, c_out in enumerate(cfg.channels):
        params[f"enc.conv{i}.W"] = layers.glorot_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9, dtype)
        params[f"enc.conv{i}.b"] = np.zeros(c_out, dtype=dtype)
        params[f"enc.bn{i}.gamma"] = np.ones(c_out, dtype=dtype)
        params[f"enc.bn{i}.beta"] = np.zeros(c_out, dtype=dtype)
        buffers[f"enc.bn{i}.running_mean"] = np.zeros(c_out, dtype=dtype)
        buffers[f"enc.bn{i}.running_var"] = np.ones(c_out, dtype=dtype)
        c_in = c_out
    params["enc.fc.W"] = layers.glorot_uniform(rng, (cfg.fc_in, cfg.fc_dim), cfg.fc_in, cfg.fc_dim, dtype)
    params["enc.fc.b"] = np.zeros(cfg.fc_dim, dtype=dtype)
    params.update(layers.init_lstm(rng, "enc.lstm", cfg.fc_dim, cfg.lstm_hidden, dtype))
    return params, buffers


def _check_params(params, cfg):
    if params is None or "enc.fc.W" not in params or f"enc.conv{len(cfg.channels) - 1}.W" not in params:
        raise NotInitialized("encoder parameters are missing")


def cnn_forward(segments, params, buffers, cfg: EncoderConfig, mode="eval", gates=None):
    """Map segments (B, n_mels, seg_len) -> (B, fc_dim).

    A single (n_mels, seg_len) segment gives a single ``fc_dim`` vector.  In
    ``train`` mode the running batch-norm buffers are updated and a cache for
    :func:`cnn_backward` is returned; ``eval`` mode returns ``None`` for the
    cache.  Unless ``cfg.bn_batch_stats`` is set, both modes normalise with
    the running statistics (pre-update in train mode).

    ``gates`` replays the ReLU masks and pooling selections of an earlier
    pass (see :func:`cnn_gates`), which makes the output smooth in the
    parameters around that pass.
    """
    _check_params(params, cfg)
    segments = np.asarray(segments)
    single = segments.ndim == 2
    if single:
        segments = segments[None]
    if segments.shape[1:] != (cfg.n_mels, cfg.seg_len):
        raise ShapeError(f"segment shape {segments.shape[1:]} != {(cfg.n_mels, cfg.seg_len)}")
    dtype = params["enc.fc.W"].dtype
    x = segments.astype(dtype, copy=False)[..., None]
    train = mode == "train"
    caches = []
    for i in range(len(cfg.channels)):
        x, c_conv = layers.conv3x3_forward(x, params[f"enc.conv{i}.W"], params[f"enc.conv{i}.b"])
        g, b = params[f"enc.bn{i}.gamma"], params[f"enc.bn{i}.beta"]
        rm, rv = buffers[f"enc.bn{i}.running_mean"], buffers[f"enc.bn{i}.running_var"]
        if train:
            bn = layers.batchnorm_train if cfg.bn_batch_stats else layers.batchnorm_train_running
            x, c_bn = bn(x, g, b, rm, rv, cfg.bn_momentum, cfg.bn_eps)
        else:
            x, c_bn = layers.batchnorm_eval(x, g, b, rm, rv, cfg.bn_eps), None
        mask = x > 0 if gates is None else gates[i][0]
        x = x * mask
        c_pool = None
        if i in cfg.pool_after:
            x, c_pool = layers.maxpool2_forward(x, None if gates is None else gates[i][1])
        caches.append((c_conv, c_bn, mask, c_pool))
    flat = x.reshape(x.shape[0], -1)
    out = flat @ params["enc.fc.W"] + params["enc.fc.b"]
    cache = (caches, flat, x.shape) if train else None
    if single:
        out = out[0]
    return out, cache


def cnn_gates(cache):
    """ReLU masks and pooling indices recorded in a train-mode cache."""
    caches = cache[0]
    return [(mask, None if c_pool is None else c_pool[1]) for _, _, mask, c_pool in caches]


def cnn_backward(dout, cache, params, grads, cfg: EncoderConfig):
    """Accumulate CNN parameter gradients into ``grads``.

    The gradient with respect to the input segments is not needed anywhere
    and is not computed; ``None`` is returned.
    """
    if cache is None:
        raise StateError("cnn_backward needs a cached train-mode forward pass")
    caches, flat, shape = cache
    dout = np.atleast_2d(dout)
    grads["enc.fc.W"] += flat.T @ dout
    grads["enc.fc.b"] += dout.sum(axis=0)
    dx = (dout @ params["enc.fc.W"].T).reshape(shape)
    for i in range(len(cfg.channels) - 1, -1, -1):
        c_conv, c_bn, mask, c_pool = caches[i]
        if c_pool is not None:
            dx = layers.maxpool2_backward(dx, c_pool)
        dx = dx * mask
        dx, dgamma, dbeta = layers.batchnorm_backward(dx, c_bn)
        grads[f"enc.bn{i}.gamma"] += dgamma
        grads[f"enc.bn{i}.beta"] += dbeta
        dx, dW, db = layers.conv3x3_backward(dx, c_conv, need_dx=i > 0)
        grads[f"enc.conv{i}.W"] += dW
        grads[f"enc.conv{i}.b"] += db
    return None


def bilstm_forward(seq, params, cfg: EncoderConfig = EncoderConfig()):
    """(N, fc_dim) -> (FeatureSequence of shape (N, 2*lstm_hidden), cache)."""
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] < 1 or seq.shape[1] != cfg.fc_dim:
        raise ShapeError(f"expected (N>=1, {cfg.fc_dim}) input, got {seq.shape}")
    out, cache = layers.bilstm_forward(seq, params, "enc.lstm")
    return FeatureSequence(out), cache


def encode_segments(segments, params, buffers, cfg: EncoderConfig, mode="eval", gates=None) -> FeatureSequence:
    """Encoder forward from precomputed segments; caches kept only in train mode."""
    z, c_cnn = cnn_forward(segments, params, buffers, cfg, mode, gates)
    seq, c_lstm = bilstm_forward(z, params, cfg)
    if mode == "train":
        seq.cache = (c_cnn, c_lstm)
    return seq


def encode(signal: AudioSignal, params, buffers, cfg: EncoderConfig,
           dsp_cfg: DspConfig = DspConfig(), mode="eval") -> FeatureSequence:
    """Full encoder: log-mel segments -> CNN -> BiLSTM."""
    return encode_segments(segments_for(signal, dsp_cfg), params, buffers, cfg, mode)


def encoder_backward(grad_out, features: FeatureSequence, params, grads, cfg: EncoderConfig):
    """Backpropagate ``grad_out`` (N, H) through one encoder path.

    Gradients are *added* to ``grads`` so calling this once per siamese path
    accumulates both contributions in the shared buffers.  Returns the
    gradient with respect to the input segments.
    """
    if features.cache is None:
        raise StateError("encoder_backward needs a cached train-mode forward pass")
    c_cnn, c_lstm = features.cache
    dz = layers.bilstm_backward(np.asarray(grad_out, dtype=features.features.dtype), c_lstm, grads, "enc.lstm")
    return cnn_backward(dz, c_cnn, params, grads, cfg)
