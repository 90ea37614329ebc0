"""End-to-end model assembly, training loop and gradient checking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import alignment as align_mod
from . import encoder as enc_mod
from . import fusion_head as head_mod
from .audio_io import AudioSignal, load_wav
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig, TrainConfig
from .dsp import MelSpectrogram, log_mel, normalize, segment
from .errors import StateError, TrainingError

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ModelParams:
    """All trainable tensors plus batch-norm running statistics."""

    config: ModelConfig
    params: dict
    buffers: dict
    step: int = 0
    run_config: RunConfig | None = None

    @classmethod
    def initialize(cls, config: ModelConfig, run_config: RunConfig | None = None) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype)
        params, buffers = enc_mod.init_encoder_params(config.encoder, rng, dtype)
        params.update(head_mod.init_head_params(config.head, rng, dtype))
        return cls(config, params, buffers, 0, run_config)

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self, dtype=None) -> "ModelParams":
        dtype = np.dtype(dtype or self.config.dtype)
        cfg = replace(self.config, dtype=dtype.name)
        return ModelParams(cfg, {k: v.astype(dtype, copy=True) for k, v in self.params.items()},
                           {k: v.astype(dtype, copy=True) for k, v in self.buffers.items()},
                           self.step, self.run_config)

    @property
    def config_hash(self) -> str:
        return self._run_config().hash()

    def _run_config(self) -> RunConfig:
        if self.run_config is not None and self.run_config.model == self.config:
            return self.run_config
        return RunConfig(model=self.config)

    def save(self, path):
        rc = self._run_config()
        save_checkpoint(path, rc.to_dict(), rc.hash(), self.step, self.params, self.buffers)

    @classmethod
    def load(cls, path) -> "ModelParams":
        header, params, buffers = load_checkpoint(path)
        run_config = RunConfig.from_dict(header["config"])
        if run_config.hash() != header["config_hash"]:
            log.warning("checkpoint %s: stored config hash does not match its config", path)
        cfg = run_config.model
        dtype = np.dtype(cfg.dtype)
        return cls(cfg, {k: v.astype(dtype) for k, v in params.items()},
                   {k: v.astype(dtype) for k, v in buffers.items()}, header["step"], run_config)


# --------------------------------------------------------------------------
# inputs

def signal_segments(x, cfg: ModelConfig) -> np.ndarray:
    """Accept an AudioSignal, a normalised log-mel matrix or ready segments."""
    if isinstance(x, AudioSignal):
        spec = log_mel(x, cfg.dsp)
        x = normalize(spec.values, cfg.dsp)
    x = np.asarray(x)
    if x.ndim == 2:
        x = segment(MelSpectrogram(x, cfg.dsp.hop_s), cfg.dsp.seg_len).segments
    return x


@dataclass(eq=False)
class ForwardResult:
    mos: float  # raw, unclamped
    deg: enc_mod.FeatureSequence
    ref: enc_mod.FeatureSequence | None
    alignment: align_mod.AlignmentResult | None
    fused: np.ndarray
    attention: np.ndarray
    head_cache: object = field(default=None, repr=False)

    @property
    def mos_clamped(self) -> float:
        return min(5.0, max(1.0, self.mos))


def forward_full(ref, deg, model: ModelParams, mode="eval", fixed_path=None, gates=None) -> ForwardResult:
    """Reference + degraded -> MOS through encoder, alignment, fusion and head.

    ``ref`` is ignored by single-ended variants.  ``fixed_path`` overrides the
    hard-attention selection and ``gates`` (a ``(deg, ref)`` pair from
    :func:`frozen_gates`) the CNN's ReLU/pooling selections; both serve to
    hold every discrete choice constant while perturbing parameters.
    """
    cfg = model.config
    train = mode == "train"
    p = model.params
    # both paths see the same running statistics; their updates are averaged
    b_deg = {k: v.copy() for k, v in model.buffers.items()} if train else model.buffers
    b_ref = {k: v.copy() for k, v in model.buffers.items()} if train else model.buffers
    g_deg, g_ref = gates if gates is not None else (None, None)
    f_deg = enc_mod.encode_segments(signal_segments(deg, cfg), p, b_deg, cfg.encoder, mode, g_deg)
    f_ref = result = None
    if cfg.single_ended:
        fused = f_deg.features
        if train:
            model.buffers.update(b_deg)
    else:
        f_ref = enc_mod.encode_segments(signal_segments(ref, cfg), p, b_ref, cfg.encoder, mode, g_ref)
        if train:
            for k in model.buffers:
                model.buffers[k][...] = 0.5 * (b_deg[k] + b_ref[k])
        if fixed_path is None:
            result, aligned = align_mod.align_hard(f_deg, f_ref, cfg.score_method)
        else:
            path = np.asarray(fixed_path)
            result = align_mod.AlignmentResult(np.empty((0, 0)), path, cfg.score_method, f_ref.steps)
            aligned = align_mod.gather(f_ref, path)
        fused = head_mod.fuse(f_deg, aligned)
    mos, attn, hcache = head_mod.head_forward(fused, p, cfg.head, train)
    return ForwardResult(mos, f_deg, f_ref, result, fused, attn, hcache)


def frozen_gates(fwd: ForwardResult):
    """Discrete CNN selections of a train-mode pass, for :func:`forward_full`."""
    ref = None if fwd.ref is None else enc_mod.cnn_gates(fwd.ref.cache[0])
    return enc_mod.cnn_gates(fwd.deg.cache[0]), ref


def backward_full(d_mos, fwd: ForwardResult, model: ModelParams, grads=None) -> dict:
    """Gradients of ``d_mos * mos`` with respect to every parameter."""
    if fwd.head_cache is None:
        raise StateError("backward_full needs a train-mode forward pass")
    cfg = model.config
    grads = model.zero_grads() if grads is None else grads
    d_fused = head_mod.head_backward(d_mos, fwd.head_cache, model.params, grads, cfg.head)
    if cfg.single_ended:
        d_deg = d_fused
    else:
        d_deg, d_aligned = head_mod.fuse_backward(d_fused, cfg.encoder.feature_dim)
        d_ref = align_mod.alignment_backward(d_aligned, fwd.alignment, fwd.ref.steps)
        enc_mod.encoder_backward(d_ref, fwd.ref, model.params, grads, cfg.encoder)
    enc_mod.encoder_backward(d_deg, fwd.deg, model.params, grads, cfg.encoder)
    return grads


def loss(mos_hat, mos_target) -> float:
    """Squared error on the raw prediction."""
    return float((mos_hat - mos_target) ** 2)


def loss_grad(mos_hat, mos_target) -> float:
    return 2.0 * (mos_hat - mos_target)


def loss_and_grads(model, ref, deg, target, fixed_path=None):
    fwd = forward_full(ref, deg, model, "train", fixed_path)
    return loss(fwd.mos, target), backward_full(loss_grad(fwd.mos, target), fwd, model), fwd


def predict(ref, deg, model: ModelParams) -> float:
    """Eval-mode MOS prediction clamped to [1, 5]."""
    return forward_full(ref, deg, model, "eval").mos_clamped


# --------------------------------------------------------------------------
# optimisation

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def update(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grads(grads, max_norm):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class Sample:
    id: str
    ref: object  # normalised log-mel matrix or None
    deg: object
    mos: float


def load_samples(rows, cfg: ModelConfig):
    """Precompute normalised log-mel matrices for manifest rows."""
    out = []
    dtype = np.dtype(cfg.dtype)
    for row in rows:
        deg = normalize(log_mel(load_wav(row.deg_path), cfg.dsp).values, cfg.dsp).astype(dtype)
        ref = None
        if not cfg.single_ended:
            ref = normalize(log_mel(load_wav(row.ref_path), cfg.dsp).values, cfg.dsp).astype(dtype)
        out.append(Sample(str(row.deg_path), ref, deg, float(row.mos)))
    return out


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_grad_norm: float
    max_grad_norm: float
    n_samples: int


def train_step(model: ModelParams, sample: Sample, optimizer: Adam, cfg: TrainConfig, lr=None):
    value, grads, _ = loss_and_grads(model, sample.ref, sample.deg, sample.mos)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} on sample {sample.id} at step {model.step}")
    norm = clip_grads(grads, cfg.grad_clip_norm)
    optimizer.update(model.params, grads, lr)
    model.step += 1
    return value, norm


def train_epoch(samples, model: ModelParams, cfg: TrainConfig, optimizer: Adam | None = None,
                epoch=0, lr=None, progress=None) -> EpochStats:
    """One pass over ``samples`` in a seed-determined order, one update per sample.

    ``lr`` is a fixed rate, a callable of the position within the epoch, or
    ``None`` for the optimizer's own rate.  ``progress`` (optional) is called
    with ``(step, loss, grad_norm)`` after every update.
    """
    if not samples:
        raise TrainingError("empty training set")
    if optimizer is None:
        optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
    losses, norms = [], []
    for i, idx in enumerate(order):
        value, norm = train_step(model, samples[idx], optimizer, cfg, lr(i) if callable(lr) else lr)
        losses.append(value)
        norms.append(norm)
        if progress is not None:
            progress(model.step, value, norm)
    return EpochStats(epoch, float(np.mean(losses)), float(np.mean(norms)), float(np.max(norms)), len(samples))


def pretrain_rate(cfg: TrainConfig, step, total):
    """Learning rate at ``step`` of ``total`` pretraining updates.

    ``cosine`` falls from ``learning_rate`` to ``finetune_learning_rate`` over
    the pretraining phase so that it hands over smoothly to fine-tuning.
    """
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    if cfg.lr_schedule != "cosine":
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    lo = min(cfg.finetune_learning_rate, cfg.learning_rate)
    return lo + (cfg.learning_rate - lo) * 0.5 * (1.0 + np.cos(np.pi * step / (total - 1)))


def two_phase_train(model: ModelParams, pretrain, finetune, cfg: TrainConfig, progress=None):
    """Pretrain on ``pretrain`` then fine-tune on ``finetune`` (either may be empty)."""
    stats = []
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    total = cfg.epochs * len(pretrain)
    for e in range(cfg.epochs if pretrain else 0):
        lr = lambda i, e=e: pretrain_rate(cfg, e * len(pretrain) + i, total)  # noqa: E731
        stats.append(train_epoch(pretrain, model, cfg, opt, epoch=e, lr=lr, progress=progress))
        log.info("pretrain epoch %d: loss %.4f", e, stats[-1].mean_loss)
    for e in range(cfg.finetune_epochs if finetune else 0):
        stats.append(train_epoch(finetune, model, cfg, opt, epoch=1000 + e,
                                 lr=cfg.finetune_learning_rate, progress=progress))
        log.info("finetune epoch %d: loss %.4f", e, stats[-1].mean_loss)
    return stats


# --------------------------------------------------------------------------
# gradient checking

def relative_error(a, b, floor=1e-6):
    """|a - b| / max(|a|, |b|, floor); the floor treats |g| < 1e-6 as zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(model: ModelParams, ref, deg, target=1.0, eps=1e-4, max_entries=None, seed=0):
    """Compare backprop gradients with central finite differences.

    Runs in float64 on a copy of ``model``.  Every discrete selection of the
    unperturbed pass (alignment path, ReLU masks, max-pool winners) is held
    fixed for the perturbed passes, so the differences measure the same
    smooth branch that backprop differentiates.  Returns ``{tensor name: max
    relative error}``; ``max_entries`` caps the number of randomly chosen
    entries checked per tensor.
    """
    m = model.copy(np.float64)
    ref = None if ref is None else signal_segments(ref, m.config).astype(np.float64)
    deg = signal_segments(deg, m.config).astype(np.float64)
    buffers = {k: v.copy() for k, v in m.buffers.items()}
    _, grads, fwd = loss_and_grads(m, ref, deg, target)
    path = None if fwd.alignment is None else fwd.alignment.path.copy()
    gates = frozen_gates(fwd)
    rng = np.random.default_rng(seed)

    def f():
        # every pass starts from the running statistics of the base pass
        m.buffers = {k: v.copy() for k, v in buffers.items()}
        return loss(forward_full(ref, deg, m, "train", fixed_path=path, gates=gates).mos, target)

    report = {}
    for name in sorted(m.params):
        p = m.params[name]
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = rng.choice(p.size, size=max_entries, replace=False)
        worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            old = p[idx]
            p[idx] = old + eps
            lp = f()
            p[idx] = old - eps
            lm = f()
            p[idx] = old
            worst = max(worst, float(relative_error((lp - lm) / (2 * eps), grads[name][idx])))
        report[name] = worst
    return report
