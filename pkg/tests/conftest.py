import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from siamese_sqa import degrade  # noqa: E402
from siamese_sqa.audio_io import AudioSignal  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def speech_2s():
    return degrade.synth_speech(2.0, seed=3)


@pytest.fixture(scope="session")
def short_pair():
    """0.4 s reference plus a delayed noisy copy."""
    clean = degrade.synth_speech(0.4, seed=0)
    ref = degrade.apply_degradation(clean, degrade.DegradationSpec(noise_snr_db=30.0, seed=0))
    deg = degrade.apply_degradation(ref, degrade.DegradationSpec(delay_ms=30.0, noise_snr_db=10.0, seed=1))
    return ref, deg


def sine(freq, duration_s, amp=0.5, rate=48000):
    t = np.arange(int(round(duration_s * rate))) / rate
    return AudioSignal(amp * np.sin(2 * np.pi * freq * t), rate)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
