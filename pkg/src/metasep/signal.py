"""Waveforms, SNR-controlled mixing, Si-SNR metrics and utterance-level PIT."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateReference, DegenerateSource, InvalidInput, Unsupported

# Relative floor on the residual power, scaled by the estimate's mean power so the
# metric stays exactly scale invariant in the estimate.
SI_SNR_EPS = 1e-8
# Absolute guard so an all-zero estimate yields 0 dB instead of 0/0.
_TINY = 1e-30
MAX_PIT_SOURCES = 6
NO_NOISE = math.inf


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidInput("waveform must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise InvalidInput("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise InvalidInput(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def power(self) -> float:
        """Mean squared amplitude."""
        return float(np.mean(self.samples * self.samples))

    def scaled(self, gain: float) -> "Waveform":
        return Waveform(self.samples * gain, self.sample_rate_hz)

    def trimmed(self, length: int) -> "Waveform":
        return Waveform(self.samples[:length], self.sample_rate_hz)


@dataclass(frozen=True, eq=False)
class MixtureExample:
    """C scaled sources and their mixture.

    ``noise`` is set only for noise-overlaid evaluation copies; the mixture then
    equals the source sum plus the noise.
    """

    sources: list
    mixture: Waveform
    source_utt_ids: list
    snr_offsets_db: list
    noise: Optional[Waveform] = field(default=None)

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def length(self) -> int:
        return len(self.mixture)

    def source_matrix(self) -> np.ndarray:
        return np.stack([s.samples for s in self.sources])


def check_compatible(waves: Sequence[Waveform]) -> None:
    if not waves:
        raise InvalidInput("no waveforms given")
    rate, length = waves[0].sample_rate_hz, len(waves[0])
    for w in waves[1:]:
        if w.sample_rate_hz != rate:
            raise InvalidInput(f"sample rate mismatch: {w.sample_rate_hz} vs {rate}")
        if len(w) != length:
            raise InvalidInput(f"length mismatch: {len(w)} vs {length}")


def mix_at_snr(raw_sources, snr_offsets_db, utt_ids) -> MixtureExample:
    """Scale every non-reference source to sit ``snr_offsets_db[c]`` dB relative
    to the first source, then sum.

    A negative offset makes the source quieter than the reference
    (-6.0206 dB halves its amplitude).
    """
    raw_sources = list(raw_sources)
    offsets = [float(o) for o in snr_offsets_db]
    utt_ids = list(utt_ids)
    if len(raw_sources) < 2:
        raise InvalidInput("a mixture needs at least two sources")
    if not (len(offsets) == len(utt_ids) == len(raw_sources)):
        raise InvalidInput("sources, offsets and utterance ids must have equal counts")
    if offsets[0] != 0.0:
        raise InvalidInput("offset of the reference source must be 0 dB")
    if len(set(utt_ids)) != len(utt_ids):
        raise InvalidInput(f"duplicate utterance ids in mixture: {utt_ids}")
    check_compatible(raw_sources)

    powers = [w.power for w in raw_sources]
    for uid, p in zip(utt_ids, powers):
        if p <= 0.0:
            raise DegenerateSource(f"source {uid!r} has zero power")
    ref_power = powers[0]
    sources = [raw_sources[0]]
    for w, p, off in zip(raw_sources[1:], powers[1:], offsets[1:]):
        gain = math.sqrt(ref_power * 10.0 ** (off / 10.0) / p)
        sources.append(w.scaled(gain))
    mix = np.sum(np.stack([s.samples for s in sources]), axis=0)
    return MixtureExample(
        sources=sources,
        mixture=Waveform(mix, raw_sources[0].sample_rate_hz),
        source_utt_ids=utt_ids,
        snr_offsets_db=offsets,
    )


def add_noise(clean_mixture: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Overlay ``noise`` at a mixture-to-noise power ratio of ``snr_db``.

    ``snr_db = NO_NOISE`` (+inf) returns the input unchanged.
    """
    check_compatible([clean_mixture, noise])
    p_noise = noise.power
    if p_noise <= 0.0:
        raise DegenerateSource("noise has zero power")
    if math.isinf(snr_db) and snr_db > 0:
        return clean_mixture
    gain = math.sqrt(clean_mixture.power / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean_mixture.samples + gain * noise.samples, clean_mixture.sample_rate_hz)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB of ``estimate`` against ``reference``.

    Both signals are mean-removed. The residual power gets a floor of
    ``SI_SNR_EPS`` times the estimate's mean power, which caps a perfect
    estimate at ``80 + 10*log10(T)`` dB.
    """
    est = _as_array(estimate)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise InvalidInput(f"length mismatch: {est.shape} vs {ref.shape}")
    est0 = est - est.mean()
    ref0 = ref - ref.mean()
    ref_energy = float(np.dot(ref0, ref0))
    if ref_energy == 0.0:
        raise DegenerateReference("reference is constant")
    target = (np.dot(est0, ref0) / ref_energy) * ref0
    resid = est0 - target
    target_energy = float(np.dot(target, target))
    resid_energy = float(np.dot(resid, resid))
    eps = SI_SNR_EPS * float(np.dot(est0, est0)) / est0.shape[0]
    return 10.0 * math.log10((target_energy + _TINY) / (resid_energy + eps + _TINY))


def si_snr_improvement(estimate, reference, mixture) -> float:
    return si_snr(estimate, reference) - si_snr(mixture, reference)


def si_snr_cap(length: int) -> float:
    """Value returned by :func:`si_snr` for a perfect estimate of ``length`` samples."""
    return 10.0 * math.log10(length / SI_SNR_EPS)


def upit_loss(estimates, references):
    """Utterance-level PIT loss: min over assignments of mean negative Si-SNR.

    Returns ``(loss, assignment)`` where ``estimates[c]`` is paired with
    ``references[assignment[c]]``. Ties keep the lexicographically smallest
    permutation.
    """
    estimates = list(estimates)
    references = list(references)
    n = len(estimates)
    if n != len(references):
        raise InvalidInput(f"{n} estimates vs {len(references)} references")
    if n == 0:
        raise InvalidInput("no sources")
    if n > MAX_PIT_SOURCES:
        raise Unsupported(f"PIT over {n} sources exceeds the supported {MAX_PIT_SOURCES}")
    table = [[si_snr(e, r) for r in references] for e in estimates]
    best_loss, best_perm = math.inf, None
    for perm in itertools.permutations(range(n)):
        loss = -sum(table[c][perm[c]] for c in range(n)) / n
        if loss < best_loss:
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


def pit_si_snri(estimates, references, mixture):
    """Mean per-source Si-SNRi under the PIT-optimal assignment."""
    _, perm = upit_loss(estimates, references)
    mix = _as_array(mixture)
    gains = [
        si_snr_improvement(estimates[c], references[perm[c]], mix)
        for c in range(len(perm))
    ]
    return float(np.mean(gains)), perm
