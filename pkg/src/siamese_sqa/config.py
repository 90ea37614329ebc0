"""Run configuration: model, training and metric settings in one tree.

Config files are JSON or TOML with the sections ``model`` (including
``dsp`` and ``encoder``), ``train`` and ``metrics``; omitted keys take the
defaults below.  The canonical JSON form is hashed into every checkpoint and
report.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dsp import DspConfig
from .encoder import EncoderConfig
from .fusion_head import HeadConfig

CONFIG_ENV = "SIAMESE_SQA_CONFIG"

# variant -> (alignment score method or None for single-ended, pooling)
VARIANTS = {
    "LM": ("l1", "mean"),
    "LL": ("l1", "attention"),
    "DM": ("dot", "mean"),
    "DL": ("dot", "attention"),
    "SM": (None, "mean"),
    "SL": (None, "attention"),
}


@dataclass(frozen=True)
class ModelConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head_hidden: int = 256
    variant: str = "LM"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if (self.dsp.n_mels, self.dsp.seg_len) != (self.encoder.n_mels, self.encoder.seg_len):
            raise ValueError("dsp and encoder disagree on the segment shape")

    @property
    def score_method(self):
        return VARIANTS[self.variant][0]

    @property
    def single_ended(self) -> bool:
        return self.score_method is None

    @property
    def head(self) -> HeadConfig:
        width = self.encoder.feature_dim
        return HeadConfig(in_dim=width if self.single_ended else 3 * width,
                          hidden=self.head_hidden, pooling=VARIANTS[self.variant][1])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 6
    lr_schedule: str = "cosine"  # or "constant"; shape of the pretraining rate
    finetune_learning_rate: float = 1e-4
    finetune_epochs: int = 2
    seed: int = 0
    grad_clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass(frozen=True)
class MetricsConfig:
    default_ci95: float = 0.15
    per_group_mapping: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return run_config_from_dict(d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d) -> str:
    text = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _build(cls, d):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def model_config_from_dict(d) -> ModelConfig:
    d = dict(d or {})
    dsp = _build(DspConfig, d.pop("dsp", None))
    enc = dict(d.pop("encoder", None) or {})
    enc.setdefault("n_mels", dsp.n_mels)
    enc.setdefault("seg_len", dsp.seg_len)
    return _build(ModelConfig, {**d, "dsp": dsp, "encoder": _build(EncoderConfig, enc)})


def run_config_from_dict(d) -> RunConfig:
    d = dict(d or {})
    return RunConfig(
        model=model_config_from_dict(d.pop("model", None)),
        train=_build(TrainConfig, d.pop("train", None)),
        metrics=_build(MetricsConfig, d.pop("metrics", None)),
        **d,
    )


def load_config(path=None) -> RunConfig:
    """Load a JSON/TOML run config; falls back to ``$SIAMESE_SQA_CONFIG``, then defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib
        return run_config_from_dict(tomllib.loads(text))
    return run_config_from_dict(json.loads(text))


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply ``section__key=value`` overrides, skipping ``None`` values."""
    sections = {"model": {}, "train": {}, "metrics": {}}
    for key, value in overrides.items():
        if value is None:
            continue
        section, name = key.split("__", 1)
        sections[section][name] = value
    return RunConfig(
        model=replace(cfg.model, **sections["model"]),
        train=replace(cfg.train, **sections["train"]),
        metrics=replace(cfg.metrics, **sections["metrics"]),
    )


def tiny_model_config(variant="LL", seed=0) -> ModelConfig:
    """Reduced dimensions for finite-difference gradient checks."""
    dsp = DspConfig(n_mels=8, seg_len=5)
    enc = EncoderConfig(n_mels=8, seg_len=5, channels=(3, 4), pool_after=(1,), fc_dim=4, lstm_hidden=3)
    return ModelConfig(dsp=dsp, encoder=enc, head_hidden=4, variant=variant, dtype="float64", seed=seed)
