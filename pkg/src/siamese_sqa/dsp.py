"""Log-mel spectrograms and the fixed-size segments fed to the CNN."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .audio_io import CANONICAL_RATE, AudioSignal
from .errors import InvalidSignal, TooShort


@dataclass(frozen=True)
class DspConfig:
    window_s: float = 0.020
    hop_s: float = 0.010
    n_fft: int = 1024
    n_mels: int = 48
    fmin: float = 0.0
    fmax: float = 16000.0
    log_floor: float = 1e-7
    norm_offset: float = -4.0
    norm_scale: float = 2.0
    seg_len: int = 15
    sample_rate: int = CANONICAL_RATE

    @property
    def win_len(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def hop_len(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, T), log10 energies
    frame_hop_s: float

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class SegmentBatch:
    segments: np.ndarray  # (count, n_mels, seg_len)

    @property
    def count(self) -> int:
        return self.segments.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(cfg: DspConfig = DspConfig()) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters with unit peak (HTK style)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, cfg: DspConfig = DspConfig()) -> int:
    if n_samples < cfg.win_len:
        return 0
    return (n_samples - cfg.win_len) // cfg.hop_len + 1


def power_frames(samples: np.ndarray, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """(T, n_fft//2+1) Hann-windowed power spectra normalised by the window energy."""
    win = np.hanning(cfg.win_len + 2)[1:-1]  # symmetric Hann without the zero endpoints
    T = frame_count(samples.shape[0], cfg)
    idx = np.arange(cfg.win_len)[None, :] + cfg.hop_len * np.arange(T)[:, None]
    spec = np.fft.rfft(samples[idx] * win, n=cfg.n_fft, axis=1)
    return (spec.real ** 2 + spec.imag ** 2) / np.sum(win ** 2)


def log_mel(signal: AudioSignal, cfg: DspConfig = DspConfig()) -> MelSpectrogram:
    """Compute the ``n_mels`` x T log10 mel-energy matrix of ``signal``.

    No padding is applied, so T = floor((len - win_len) / hop_len) + 1.
    """
    if signal.sample_rate != cfg.sample_rate:
        raise InvalidSignal(f"sample rate {signal.sample_rate} != {cfg.sample_rate}")
    samples = signal.samples
    if not np.all(np.isfinite(samples)):
        raise InvalidSignal("signal contains NaN or Inf")
    min_len = max(cfg.win_len, cfg.seg_len * cfg.hop_len)
    if samples.shape[0] < min_len:
        raise TooShort(f"{samples.shape[0]} samples, need at least {min_len}")
    energies = power_frames(samples, cfg) @ mel_filterbank(cfg).T
    values = np.log10(np.maximum(energies, cfg.log_floor)).T
    return MelSpectrogram(np.ascontiguousarray(values), cfg.hop_s)


def normalize(values: np.ndarray, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Fixed global rescaling of log-mel values to roughly unit range."""
    return (values - cfg.norm_offset) / cfg.norm_scale


def segment(spec: MelSpectrogram, seg_len: int = 15) -> SegmentBatch:
    """Slide a ``seg_len``-frame window with a one-frame hop over ``spec``."""
    T = spec.frames
    if T < seg_len:
        raise TooShort(f"{T} frames < segment length {seg_len}")
    view = np.lib.stride_tricks.sliding_window_view(spec.values, seg_len, axis=1)
    return SegmentBatch(np.ascontiguousarray(view.transpose(1, 0, 2)))


def segments_for(signal: AudioSignal, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Normalised CNN input segments for ``signal``: (count, n_mels, seg_len)."""
    spec = log_mel(signal, cfg)
    return segment(MelSpectrogram(normalize(spec.values, cfg), spec.frame_hop_s), cfg.seg_len).segments


def active_steps(signal: AudioSignal, cfg: DspConfig = DspConfig(), threshold_db: float = 35.0) -> np.ndarray:
    """Boolean mask over segments whose center frame carries speech energy.

    A frame is active when its mean power lies within ``threshold_db`` of the
    loudest frame of the signal.
    """
    frames = power_frames(signal.samples, cfg).mean(axis=1)
    peak = frames.max() if frames.size else 0.0
    if peak <= 0:
        return np.zeros(max(frames.size - cfg.seg_len + 1, 0), dtype=bool)
    active = frames > peak * 10.0 ** (-threshold_db / 10.0)
    center = cfg.seg_len // 2
    return active[center:frames.size - cfg.seg_len + 1 + center]
