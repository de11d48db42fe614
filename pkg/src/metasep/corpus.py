"""Speaker corpora: deterministic synthetic "accent" families and PCM WAV ingestion.

Synthetic speakers are harmonic generators (fundamental, spectral tilt,
formant bumps, syllable-rate amplitude envelope). A domain applies a shared
shift of the tilt, formant positions and pitch range whose size is
``domain_shift``, so domain similarity is a known scalar.
"""

from __future__ import annotations

import csv
import logging
import wave
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IoError
from .signal import Waveform
from .tasks import UTTERANCES_PER_SPEAKER, SpeakerCorpus, Utterance

log = logging.getLogger(__name__)

PEAK = 0.9
PCM_MAX = 32767
MANIFEST_HEADER = ("utt_id", "speaker_id", "domain_label", "relative_path")

_F0_RANGE_HZ = (90.0, 330.0)
_F0_MIN_SPACING_HZ = 12.0
_VIBRATO_HZ = 0.5  # fixed excursion, so rendered fundamentals keep the grid spacing
_FORMANTS_HZ = (550.0, 1500.0, 2500.0)
_BASE_TILT = 1.0


@dataclass(frozen=True)
class SynthSpec:
    num_domains: int = 4
    speakers_per_domain: int = 4
    utterances_per_speaker: int = 3
    utterance_len_s: float = 1.0
    domain_shift: float = 0.0
    seed: int = 0
    sample_rate_hz: int = 8000
    label_prefix: str = "dom"

    def validate(self) -> "SynthSpec":
        if self.num_domains < 1 or self.speakers_per_domain < 1:
            raise ConfigError("num_domains and speakers_per_domain must be positive")
        if self.utterances_per_speaker < UTTERANCES_PER_SPEAKER:
            raise ConfigError(f"utterances_per_speaker must be at least {UTTERANCES_PER_SPEAKER}")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ConfigError("domain_shift must lie in [0, 1]")
        if self.utterance_len_s <= 0 or self.sample_rate_hz <= 0:
            raise ConfigError("utterance length and sample rate must be positive")
        span = (_F0_RANGE_HZ[1] - _F0_RANGE_HZ[0]) * 2.0 ** -self.domain_shift
        if span / _F0_MIN_SPACING_HZ < self.speakers_per_domain:
            raise ConfigError(f"at most {int(span // _F0_MIN_SPACING_HZ)} speakers fit in one domain")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        return cls(**data).validate()


def normalize_pcm(pcm: np.ndarray) -> np.ndarray:
    """Integer PCM samples -> float waveform with peak amplitude ``PEAK``."""
    peak = np.max(np.abs(pcm))
    if peak == 0:
        raise FormatError("silent audio cannot be peak-normalized")
    return pcm.astype(np.float64) * (PEAK / float(peak))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Quantize to int16 with the peak mapped to full scale."""
    peak = np.max(np.abs(samples))
    if peak == 0:
        raise FormatError("silent audio cannot be quantized")
    return np.round(samples * (PCM_MAX / peak)).astype(np.int16)


def _domain_profile(spec: SynthSpec, d: int):
    rng = np.random.default_rng([spec.seed, 1, d])
    signs = rng.choice([-1.0, 1.0], 3)
    mags = rng.uniform(0.5, 1.0, 3)
    s = spec.domain_shift
    return {
        "tilt": _BASE_TILT + 1.2 * s * signs[0] * mags[0],
        "formant_scale": 2.0 ** (0.6 * s * signs[1] * mags[1]),
        "f0_scale": 2.0 ** (s * signs[2] * mags[2]),
    }


def _speaker_f0s(spec: SynthSpec, profile, rng):
    lo = _F0_RANGE_HZ[0] * profile["f0_scale"]
    span = (_F0_RANGE_HZ[1] - _F0_RANGE_HZ[0]) * profile["f0_scale"]
    slots = int(span // _F0_MIN_SPACING_HZ)
    picks = np.sort(rng.choice(slots, spec.speakers_per_domain, replace=False))
    return lo + _F0_MIN_SPACING_HZ * picks


def _speaker_params(spec, profile, f0, rng):
    return {
        "f0": float(f0),
        "tilt": profile["tilt"] + rng.uniform(-0.15, 0.15),
        "formants": [f * profile["formant_scale"] * rng.uniform(0.9, 1.1) for f in _FORMANTS_HZ],
        "bandwidth": rng.uniform(150.0, 300.0),
        "am_rate": rng.uniform(2.5, 5.0),
        "harmonic_jitter_db": rng.uniform(-3.0, 3.0, 64),
    }


def _render(params, spec: SynthSpec, rng) -> np.ndarray:
    fs = spec.sample_rate_hz
    n = int(round(spec.utterance_len_s * fs))
    t = np.arange(n) / fs
    f0_track = params["f0"] + _VIBRATO_HZ * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0_track) / fs
    n_harm = min(64, int(0.45 * fs // (params["f0"] + _VIBRATO_HZ)))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        fk = k * params["f0"]
        gain = k ** (-params["tilt"])
        gain *= 1.0 + sum(2.0 * np.exp(-0.5 * ((fk - fm) / params["bandwidth"]) ** 2) for fm in params["formants"])
        gain *= 10.0 ** (params["harmonic_jitter_db"][k - 1] / 20.0)
        x += gain * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    am = 0.5 * (1.0 + np.sin(2 * np.pi * params["am_rate"] * rng.uniform(0.85, 1.15) * t + rng.uniform(0, 2 * np.pi)))
    x *= 0.3 + 0.7 * am**1.5
    x += 0.01 * np.std(x) * rng.standard_normal(n)
    return x


def synth_corpus(spec: SynthSpec) -> SpeakerCorpus:
    """Deterministic synthetic corpus; utterances sit on the 16-bit grid at peak ``PEAK``."""
    spec.validate()
    utterances, info = {}, {}
    for d in range(spec.num_domains):
        label = f"{spec.label_prefix}{d}"
        profile = _domain_profile(spec, d)
        f0s = _speaker_f0s(spec, profile, np.random.default_rng([spec.seed, 2, d]))
        for s, f0 in enumerate(f0s):
            spk = f"{label}_spk{s:02d}"
            params = _speaker_params(spec, profile, f0, np.random.default_rng([spec.seed, 3, d, s]))
            info[spk] = {"f0": params["f0"], "domain_shift": spec.domain_shift}
            for u in range(spec.utterances_per_speaker):
                raw = _render(params, spec, np.random.default_rng([spec.seed, 4, d, s, u]))
                samples = normalize_pcm(to_pcm16(raw))
                utterances[f"{spk}_utt{u:02d}"] = Utterance(Waveform(samples, spec.sample_rate_hz), spk, label)
    return SpeakerCorpus(utterances, info)


# -- disk I/O ---------------------------------------------------------------------


def write_wav(path, waveform: Waveform) -> None:
    pcm = to_pcm16(waveform.samples)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate_hz)
        fh.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path, sample_rate_hz: int) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except FileNotFoundError as exc:
        raise IoError(f"audio file not found: {path}", path=str(path)) from exc
    except (OSError, EOFError, wave.Error) as exc:
        raise IoError(f"cannot read audio file {path}: {exc}", path=str(path)) from exc
    if channels != 1 or width != 2:
        raise FormatError(f"{path}: expected 16-bit mono PCM, got {channels} channel(s) of {8 * width} bits")
    if rate != sample_rate_hz:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {sample_rate_hz} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise FormatError(f"{path}: no samples")
    return Waveform(normalize_pcm(pcm), rate)


def write_corpus(corpus: SpeakerCorpus, out_dir) -> Path:
    """Write ``wav/<utt_id>.wav`` files plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for uid in sorted(corpus.utterances):
            utt = corpus.utterances[uid]
            rel = f"wav/{uid}.wav"
            write_wav(out_dir / rel, utt.waveform)
            writer.writerow((uid, utt.speaker_id, utt.domain_label, rel))
    return manifest


def read_manifest(manifest_path):
    """Parse a corpus manifest into ``(utt_id, speaker_id, domain_label, path)`` records."""
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest_path}: {exc}", path=str(manifest_path)) from exc
    if not rows or tuple(c.strip() for c in rows[0]) != MANIFEST_HEADER:
        raise FormatError(f"{manifest_path}: header must be {','.join(MANIFEST_HEADER)}")
    records, seen = [], set()
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"{manifest_path}:{lineno}: expected 4 fields, got {len(row)}")
        uid, spk, dom, rel = (c.strip() for c in row)
        if uid in seen:
            raise FormatError(f"{manifest_path}:{lineno}: duplicate utterance id {uid!r}")
        seen.add(uid)
        records.append((uid, spk, dom, manifest_path.parent / rel))
    return records


def load_corpus(manifest_path, sample_rate_hz: int = 8000) -> SpeakerCorpus:
    """Load every manifest entry, peak-normalized; drop speakers with too few utterances."""
    records = read_manifest(manifest_path)
    counts = {}
    for _, spk, _, _ in records:
        counts[spk] = counts.get(spk, 0) + 1
    short = {s for s, n in counts.items() if n < UTTERANCES_PER_SPEAKER}
    utterances = {}
    for uid, spk, dom, path in records:
        if spk in short:
            continue
        utterances[uid] = Utterance(read_wav(path, sample_rate_hz), spk, dom)
    if short:
        log.warning("dropped %d speaker(s) with fewer than %d utterances", len(short), UTTERANCES_PER_SPEAKER)
    corpus = SpeakerCorpus(utterances)
    corpus.dropped_speakers = len(short)
    return corpus
