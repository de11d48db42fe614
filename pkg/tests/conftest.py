import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metasep.sepmodel import ModelConfig
from metasep.signal import Waveform, mix_at_snr

settings.register_profile(
    "metasep", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("metasep")

RATE = 8000


def tiny_config(**kw):
    base = dict(num_sources=2, window_len=8, hop_len=4, basis_dim=4, separator_hidden=6, separator_layers=2, seed=1)
    base.update(kw)
    return ModelConfig(**base).validate()


def random_mixture(rng, length=64, c=2, ids=None):
    raw = [Waveform(rng.standard_normal(length), RATE) for _ in range(c)]
    offsets = [0.0] + list(rng.uniform(-5, 5, c - 1))
    ids = ids or [f"u{rng.integers(1 << 30)}_{k}" for k in range(c)]
    return mix_at_snr(raw, offsets, ids)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_corpus(seed=0, n_utts=4, length=4000, domains=2):
    """Speakers confined to disjoint bands: one low, one high per domain."""
    from metasep.tasks import SpeakerCorpus, Utterance

    rng = np.random.default_rng(seed)
    t = np.arange(length) / RATE
    utts = {}
    for dom in range(domains):
        for band, (lo, hi) in (("low", (100, 600)), ("high", (2000, 3200))):
            spk = f"d{dom}_{band}"
            for u in range(n_utts):
                f0 = rng.uniform(lo, lo * 1.3)
                x = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 6.3)) / k for k in range(1, 6) if k * f0 < hi)
                x = x * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 4) * t + rng.uniform(0, 6.3)) ** 2)
                utts[f"{spk}_u{u}"] = Utterance(Waveform(0.9 * x / np.max(np.abs(x)), RATE), spk, f"d{dom}")
    return SpeakerCorpus(utts)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance verdict; printed in the terminal summary."""
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
