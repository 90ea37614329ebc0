"""Synthetic speech, parameterised degradations and the pseudo-MOS label oracle.

The label oracle is multiplicative over per-degradation quality factors::

    mos = 1 + 3.5 * q_noise * q_clip * q_timeclip * q_jitter

Each factor lies in (0, 1] and is non-increasing in its degradation's
intensity, so a clean pair scores 4.5 and heavy combined degradation
approaches 1.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio_io import CANONICAL_RATE, AudioSignal, load_wav, save_wav
from .errors import NoData, SpecError

FRAME_S = 0.010
NOISE_FLOOR = 3e-4  # rms of the recording floor under synthetic speech
MOS_CEILING = 4.5

# 50%-quality points of the individual factors
SNR_HALF_DB = 15.0
CLIP_HALF = 0.02  # fraction of samples beyond the clip level
TIMECLIP_HALF = 0.10  # zeroed fraction of the duration
JITTER_HALF = 40.0  # dropped + repeated 10 ms frames


@dataclass
class DegradationSpec:
    """Degradation recipe.

    ``jitter`` holds ``(position_s, frames)`` events on the reference time
    axis: positive ``frames`` repeats the preceding 10 ms frame that many
    times, negative drops that many frames.  ``timeclip`` spans are
    ``(start_s, dur_s)`` on the post-jitter time axis.  ``noise_snr_db`` of
    ``None`` means no noise, ``clip_level`` of 1.0 means no clipping.
    """

    delay_ms: float = 0.0
    jitter: list = field(default_factory=list)
    timeclip: list = field(default_factory=list)
    noise_snr_db: float | None = None
    clip_level: float = 1.0
    seed: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["jitter"] = [[float(p), int(n)] for p, n in self.jitter]
        d["timeclip"] = [[float(a), float(b)] for a, b in self.timeclip]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DegradationSpec":
        d = json.loads(text)
        d["jitter"] = [(float(p), int(n)) for p, n in d.get("jitter", [])]
        d["timeclip"] = [(float(a), float(b)) for a, b in d.get("timeclip", [])]
        return cls(**d)


# --------------------------------------------------------------------------
# clean material

def _resonator(freq, bw, rate):
    r = np.exp(-np.pi * bw / rate)
    theta = 2 * np.pi * freq / rate
    return [1.0 - r], [1.0, -2 * r * np.cos(theta), r * r]


def synth_speech(duration_s=2.0, seed=0, sample_rate=CANONICAL_RATE, peak=0.5,
                 noise_floor=NOISE_FLOOR) -> AudioSignal:
    """Speech-like test signal: formant-filtered pulse-train syllables.

    Syllables of 80-260 ms alternate with pauses of 40-220 ms; the signal
    always opens with a 150-250 ms pause.  Roughly one syllable in five is an
    unvoiced noise burst.  A white recording floor of rms ``noise_floor``
    (about -70 dBFS by default) runs underneath, so pauses are quiet but not
    digital silence; ``noise_floor=0`` gives exact zeros between syllables.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    out = np.zeros(n)
    pos = int(rng.uniform(0.15, 0.25) * sample_rate)
    while True:
        length = int(rng.uniform(0.08, 0.26) * sample_rate)
        if pos + length > n:
            break
        t = np.arange(length) / sample_rate
        if rng.random() < 0.2:
            src = rng.standard_normal(length) * 0.3
            formants = [(rng.uniform(2500, 7000), 1500.0)]
        else:
            f0 = rng.uniform(90, 240) * (1 + rng.uniform(-0.25, 0.25) * t / t[-1])
            phase = np.cumsum(f0) / sample_rate
            src = np.diff(np.floor(phase), prepend=0.0) * 4.0 + rng.standard_normal(length) * 0.01
            formants = [(rng.uniform(300, 900), 80.0), (rng.uniform(900, 2500), 120.0),
                        (rng.uniform(2500, 3800), 200.0)]
        syl = src
        for f, bw in formants:
            b, a = _resonator(f, bw, sample_rate)
            syl = lfilter(b, a, syl)
        ramp = min(length // 4, int(0.015 * sample_rate))
        env = np.ones(length)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[length - ramp:] = np.linspace(1, 0, ramp)
        syl = syl * env * rng.uniform(0.4, 1.0) / (np.max(np.abs(syl)) + 1e-12)
        out[pos:pos + length] = syl
        pos += length + int(rng.uniform(0.04, 0.22) * sample_rate)
    out *= peak / (np.max(np.abs(out)) + 1e-12)
    if noise_floor > 0:
        # separate stream so the floor leaves the syllables untouched
        out += np.random.default_rng([seed, 1]).standard_normal(n) * noise_floor
        out *= peak / np.max(np.abs(out))
    return AudioSignal(out, sample_rate)


# --------------------------------------------------------------------------
# degradations

def _apply_jitter(x, events, rate):
    frame = int(round(FRAME_S * rate))
    for pos_s, n in sorted(events, key=lambda e: -e[0]):
        p = int(round(pos_s * rate))
        if n > 0:
            if p < frame or p > len(x):
                raise SpecError(f"jitter insert at {pos_s}s has no preceding frame")
            x = np.concatenate([x[:p], np.tile(x[p - frame:p], n), x[p:]])
        elif n < 0:
            if p < 0 or p - n * frame > len(x):
                raise SpecError(f"jitter drop at {pos_s}s runs past the signal end")
            x = np.concatenate([x[:p], x[p - n * frame:]])
    return x


def _timeclip_mask(n, spans, rate):
    mask = np.zeros(n, dtype=bool)
    for start, dur in spans:
        a, b = int(round(start * rate)), int(round((start + dur) * rate))
        if start < 0 or dur < 0 or b > n:
            raise SpecError(f"time-clip span ({start}, {dur}) outside the signal")
        mask[a:b] = True
    return mask


def active_power(x, rate, threshold_db=40.0) -> float:
    """Mean power over 10 ms frames within ``threshold_db`` of the loudest frame."""
    frame = int(round(FRAME_S * rate))
    nf = len(x) // frame
    if nf == 0:
        return float(np.mean(x ** 2)) if len(x) else 0.0
    p = np.mean(x[:nf * frame].reshape(nf, frame) ** 2, axis=1)
    if p.max() <= 0:
        return 0.0
    return float(p[p >= p.max() * 10 ** (-threshold_db / 10)].mean())


def _validate(spec: DegradationSpec):
    if spec.delay_ms < 0:
        raise SpecError("delay_ms must be non-negative")
    if not 0 < spec.clip_level <= 1:
        raise SpecError("clip_level must lie in (0, 1]")
    if spec.noise_snr_db is not None and not np.isfinite(spec.noise_snr_db):
        raise SpecError("noise_snr_db must be finite")


def apply_degradation(ref: AudioSignal, spec: DegradationSpec) -> AudioSignal:
    """Degrade ``ref``: noise, jitter, time clipping, amplitude clipping, delay.

    Noise is acoustic background, so it comes first: white Gaussian scaled to
    ``noise_snr_db`` relative to the active power of ``ref``.  The remaining
    steps model the transmission channel, which is why time-clipped spans are
    digital silence even in noisy conditions.  The output is not range-limited.
    """
    _validate(spec)
    rate = ref.sample_rate
    x = np.array(ref.samples)
    if spec.noise_snr_db is not None:
        rng = np.random.default_rng(spec.seed)
        p = active_power(x, rate)
        x = x + rng.standard_normal(len(x)) * np.sqrt(p / 10 ** (spec.noise_snr_db / 10))
    x = _apply_jitter(x, spec.jitter, rate)
    x[_timeclip_mask(len(x), spec.timeclip, rate)] = 0.0
    if spec.clip_level < 1.0:
        x = np.clip(x, -spec.clip_level, spec.clip_level)
    if spec.delay_ms > 0:
        x = np.concatenate([np.zeros(int(round(spec.delay_ms * 1e-3 * rate))), x])
    return AudioSignal(x, rate)


# --------------------------------------------------------------------------
# label oracle

def quality_factors(ref: AudioSignal, spec: DegradationSpec) -> dict:
    """Per-degradation quality factors, each in (0, 1].

    Every factor depends on ``ref`` and its own spec field only, which makes
    the product monotone along each axis with the others held fixed.  The
    clipping factor uses the fraction of reference samples whose magnitude
    exceeds the clip level; the time-clip factor uses the zeroed fraction of
    the reference duration, with spans clamped to its length.
    """
    _validate(spec)
    x = ref.samples
    n = max(len(x), 1)
    mask = np.zeros(len(x), dtype=bool)
    for start, dur in spec.timeclip:
        mask[max(0, int(round(start * ref.sample_rate))):max(0, int(round((start + dur) * ref.sample_rate)))] = True
    zeroed = float(np.sum(mask)) / n
    clipped = float(np.sum(np.abs(x) > spec.clip_level)) / n
    if spec.noise_snr_db is None:
        q_noise = 1.0
    else:
        snr, half = 10 ** (spec.noise_snr_db / 10), 10 ** (SNR_HALF_DB / 10)
        q_noise = snr / (snr + half)
    n_jitter = sum(abs(int(k)) for _, k in spec.jitter)
    return {
        "noise": q_noise,
        "clip": 1.0 / (1.0 + clipped / CLIP_HALF),
        "timeclip": 1.0 / (1.0 + zeroed / TIMECLIP_HALF),
        "jitter": 1.0 / (1.0 + n_jitter / JITTER_HALF),
    }


def pseudo_mos(ref: AudioSignal, deg: AudioSignal | None, spec: DegradationSpec) -> float:
    """Analytic stand-in for a subjective MOS, in [1, 4.5].

    Depends only on ``ref`` and ``spec``; ``deg`` is accepted so that the
    oracle can be called on a pair.  Constant delay carries no penalty.
    """
    q = quality_factors(ref, spec)
    return 1.0 + (MOS_CEILING - 1.0) * float(np.prod(list(q.values())))


# --------------------------------------------------------------------------
# corpora

def random_spec(rng, duration_s, sample_rate=CANONICAL_RATE) -> DegradationSpec:
    """Draw a random mixture of degradations for a reference of ``duration_s``."""
    spec = DegradationSpec(seed=int(rng.integers(2 ** 31)))
    if rng.random() < 0.5:
        spec.delay_ms = float(np.round(rng.uniform(0, 300)))
    if rng.random() < 0.3:
        margin = min(0.3, 0.25 * duration_s)
        spec.jitter = [(round(float(rng.uniform(margin, duration_s - margin)), 2),
                        int(rng.choice([-1, 1]) * rng.integers(1, 6)))
                       for _ in range(int(rng.integers(1, 4)))]
        spec.jitter = sorted(spec.jitter)
    length = duration_s + sum(n for _, n in spec.jitter) * FRAME_S
    if rng.random() < 0.45:
        spans = []
        for _ in range(int(rng.integers(1, 4))):
            dur = round(float(rng.uniform(0.02, 0.25)), 3)
            start = round(float(rng.uniform(0.0, max(length - dur - 0.05, 0.0))), 3)
            spans.append((start, dur))
        spec.timeclip = spans
    if rng.random() < 0.6:
        spec.noise_snr_db = round(float(rng.uniform(-5, 45)), 1)
    if rng.random() < 0.35:
        spec.clip_level = round(float(rng.uniform(0.03, 0.5)), 3)
    return spec


def write_clean_corpus(out_dir, n_files, seed=0, duration_s=2.0):
    """Write ``n_files`` synthetic clean WAVs; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_files):
        p = out_dir / f"clean_{i:04d}.wav"
        save_wav(synth_speech(duration_s, seed=seed * 100003 + i), p)
        paths.append(p)
    return paths


MANIFEST_FIELDS = ["ref_path", "deg_path", "pseudo_mos", "spec"]


def build_corpus(clean_dir, n_conditions, seed, out_dir=None, group=None):
    """Degrade the clean WAVs in ``clean_dir`` and write a manifest CSV.

    Condition ``i`` uses clean file ``i mod n_files`` and a random spec drawn
    from ``seed``.  Paths in the manifest are relative to ``out_dir``.
    Returns the manifest path.
    """
    clean_dir = Path(clean_dir)
    out_dir = Path(out_dir) if out_dir is not None else clean_dir.parent / "degraded"
    files = sorted(p for p in clean_dir.glob("*.wav"))
    if not files:
        raise NoData(f"no WAV files in {clean_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_conditions):
        ref_path = files[i % len(files)]
        ref = load_wav(ref_path)
        spec = random_spec(rng, ref.duration, ref.sample_rate)
        deg = apply_degradation(ref, spec)
        deg = AudioSignal(np.clip(deg.samples, -1.0, 1.0), deg.sample_rate)
        deg_path = out_dir / f"deg_{i:05d}.wav"
        save_wav(deg, deg_path)
        row = {
            "ref_path": os.path.relpath(ref_path, out_dir),
            "deg_path": deg_path.name,
            "pseudo_mos": f"{pseudo_mos(ref, deg, spec):.6f}",
            "spec": spec.to_json(),
        }
        if group is not None:
            row["group"] = group
        rows.append(row)
    fields = MANIFEST_FIELDS + (["group"] if group is not None else [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    manifest = out_dir / "manifest.csv"
    manifest.write_text(buf.getvalue())
    return manifest
