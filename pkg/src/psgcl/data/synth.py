"""Synthetic multi-modal recordings with a planted shared latent.

A hidden piecewise-constant state (the stand-in for sleep stage), a set of
slowly drifting continuous factors and sparse "breathing events" drive the
amplitudes of narrowband noise carriers in every modality. The coupling ``kappa``
interpolates between fully shared latents (1.0) and modality-private ones
(0.0).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..modalities import AGE_GROUPS, DEFAULT_SPECS, SEXES, STAGE_NAMES, ModalitySpec, age_group
from .recording import Annotation, RawRecording

STAGE_PREVALENCE = (0.21, 0.07, 0.51, 0.09, 0.12)

# Carriers sit on a geometric grid from 4 to 100 Hz (ratio ~1.28), the same in
# every modality. Every carrier period fits several times into the ~0.95 s
# receptive field of the small desk encoder, and neighbouring carriers differ
# by a constant ratio rather than a constant gap, which short convolution
# kernels separate far more easily than a linear grid. Stage carriers are
# spread about an octave apart so that the coarse spectral shape alone
# reveals the stage; factor carriers fill the gaps.
CARRIER_GRID = tuple(float(f) for f in np.round(4.0 * 25.0 ** (np.arange(14) / 13), 2))
_ROLE_INDEX = dict(stage=(0, 3, 6, 9, 11), factor=(1, 2, 4, 5, 7, 10), event=8, trait=(12, 13))


def _layout(unit):
    f = CARRIER_GRID
    out = {role: tuple(f[i] for i in idx) for role, idx in _ROLE_INDEX.items() if role != "event"}
    return dict(out, event=f[_ROLE_INDEX["event"]], unit=unit)


CARRIERS = {"BAS": _layout(50.0), "ECG": _layout(1.0), "RESP": _layout(10.0)}
EVENT_LABEL = "Obstructive Apnea"
MODALITY_INDEX = {"BAS": 0, "ECG": 1, "RESP": 2}


@dataclass
class SynthParams:
    duration_s: float = 3600.0
    n_states: int = 5
    coupling: float = 0.9  # kappa
    noise_level: float = 0.5
    mean_stage_clips: float = 8.0
    factor_knot_s: float = 15.0
    factor_scale: float = 0.6
    event_amplitude: float = 2.0
    sdb_events_per_hour: float = 6.0
    event_seconds: tuple[float, float] = (10.0, 40.0)
    gain_jitter: float = 0.1
    bandwidth_hz: float = 1.0
    montage_seed: int = 12345
    rates: dict = field(default_factory=lambda: {"BAS": 256.0, "ECG": 256.0, "RESP": 256.0})
    specs: tuple[ModalitySpec, ...] = DEFAULT_SPECS

    def __post_init__(self):
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError(f"coupling must lie in [0, 1], got {self.coupling}")
        if not 1 <= self.n_states <= len(STAGE_NAMES):
            raise ValueError(f"n_states must be in 1..{len(STAGE_NAMES)}")

    def to_dict(self):
        d = asdict(self)
        d["specs"] = [s.to_dict() for s in self.specs]
        d["event_seconds"] = list(self.event_seconds)
        return d


def _stage_sequence(rng, n_clips, n_states, mean_len):
    weights = np.asarray(STAGE_PREVALENCE[:n_states], dtype=float)
    seq = np.empty(n_clips, np.int64)
    k, state = 0, int(rng.choice(n_states, p=weights / weights.sum()))
    while k < n_clips:
        run = int(rng.geometric(1.0 / mean_len))
        seq[k:k + run] = state
        k += run
        if n_states > 1:
            w = weights.copy()
            w[state] = 0.0
            state = int(rng.choice(n_states, p=w / w.sum()))
    return seq


def _events(rng, duration, per_hour, lo_hi):
    n = rng.poisson(per_hour * duration / 3600.0)
    out = []
    for _ in range(n):
        d = rng.uniform(*lo_hi)
        if d >= duration:
            continue
        out.append((float(rng.uniform(0.0, duration - d)), float(d)))
    return sorted(out)


def _indicator(t, events):
    x = np.zeros_like(t)
    for s, d in events:
        x[(t >= s) & (t < s + d)] = 1.0
    return x


def _narrowband(rng, n, fs, f0, bw):
    """Unit-RMS Gaussian noise confined to ``f0 +- bw/2`` Hz."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    band = np.flatnonzero(np.abs(freqs - f0) <= bw / 2)
    spec = np.zeros(len(freqs), complex)
    spec[band] = rng.standard_normal(len(band)) + 1j * rng.standard_normal(len(band))
    x = np.fft.irfft(spec, n)
    return x / max(np.sqrt(np.mean(x ** 2)), 1e-12)


def _stage_profile(n_states):
    return 0.2 + 1.0 * np.eye(n_states)


def synthesize_recording(params: SynthParams | None = None, seed: int = 0,
                         participant_id: str | None = None) -> RawRecording:
    """Generate one recording with stage and SDB annotations.

    Identical ``params`` and ``seed`` give bitwise-identical output.
    """
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    kappa = p.coupling
    clip_s = 30.0
    n_clips = int(np.ceil(p.duration_s / clip_s))
    profile = _stage_profile(p.n_states)

    age = float(rng.uniform(5.0, 80.0))
    sex = int(rng.integers(0, 2))
    trait_amp = (0.3 + 0.25 * age_group(age), 0.4 + 0.5 * sex)

    shared_stage = _stage_sequence(rng, n_clips, p.n_states, p.mean_stage_clips)
    knots = np.arange(0.0, p.duration_s + 2 * p.factor_knot_s, p.factor_knot_s)
    n_factors = len(CARRIERS["BAS"]["factor"])
    shared_z = rng.standard_normal((n_factors, len(knots)))
    shared_events = _events(rng, p.duration_s, p.sdb_events_per_hour, p.event_seconds)

    signals, rates = {}, {}
    for spec in p.specs:
        car = CARRIERS[spec.name]
        fs = float(p.rates[spec.name])
        n = int(round(p.duration_s * fs))
        t = np.arange(n) / fs
        clip_of = np.minimum((t // clip_s).astype(np.int64), n_clips - 1)

        private_stage = _stage_sequence(rng, n_clips, p.n_states, p.mean_stage_clips)
        private_z = rng.standard_normal((n_factors, len(knots)))
        private_events = _events(rng, p.duration_s, p.sdb_events_per_hour, p.event_seconds)

        freqs, amps = [], []
        for b, f in enumerate(car["stage"][: p.n_states]):
            freqs.append(f)
            amps.append(kappa * profile[shared_stage[clip_of], b]
                        + (1 - kappa) * profile[private_stage[clip_of], b])
        for j, f in enumerate(car["factor"]):
            z = kappa * np.interp(t, knots, shared_z[j]) + (1 - kappa) * np.interp(t, knots, private_z[j])
            freqs.append(f)
            amps.append(np.exp(p.factor_scale * z))
        freqs.append(car["event"])
        amps.append(p.event_amplitude * (kappa * _indicator(t, shared_events)
                                         + (1 - kappa) * _indicator(t, private_events)))
        if spec.name == "BAS":
            # participant-level traits live in one modality only, so they cannot
            # serve as a cross-modal matching shortcut
            for f, a in zip(car["trait"], trait_amp):
                freqs.append(f)
                amps.append(np.full(n, a))

        # each source is narrowband noise shared by all channels of the modality
        # (volume conduction keeps it coherent across electrodes); with no stable
        # phase there is no per-participant fingerprint to memorise
        carriers = np.stack([_narrowband(rng, n, fs, f, p.bandwidth_hz) for f in freqs])
        sources = np.asarray(amps) * carriers
        del carriers
        montage = np.random.default_rng([p.montage_seed, MODALITY_INDEX[spec.name]])
        base_gain = montage.uniform(0.5, 1.5, (spec.channel_count, len(freqs)))
        for c, ch in enumerate(spec.channel_names):
            gain = base_gain[c] * (1 + p.gain_jitter * rng.uniform(-1, 1, len(freqs)))
            x = gain @ sources
            x += p.noise_level * rng.standard_normal(n)
            signals[ch] = car["unit"] * x
            rates[ch] = fs

    annotations = []
    k = 0
    while k < n_clips:
        j = k
        while j < n_clips and shared_stage[j] == shared_stage[k]:
            j += 1
        start = k * clip_s
        annotations.append(Annotation(start, min(j * clip_s, p.duration_s) - start,
                                      STAGE_NAMES[shared_stage[k]]))
        k = j
    annotations += [Annotation(s, d, EVENT_LABEL) for s, d in shared_events]
    annotations.sort(key=lambda a: a.start_s)

    pid = participant_id or f"synth{seed:05d}"
    return RawRecording(pid, signals, rates, annotations, tuple(p.specs), age, SEXES[sex])


def decode_stage(clip_data: np.ndarray, modality: str, fs: float = 256.0, n_states: int = 5,
                 bandwidth_hz: float = 1.0) -> np.ndarray:
    """Invert the generator's stage encoding for clips of one modality.

    Sums spectral power inside each stage carrier's band over all channels and
    returns the strongest band. Exact for ``coupling=1`` and ``noise_level=0``.
    """
    x = np.asarray(clip_data, dtype=float)
    freqs = np.fft.rfftfreq(x.shape[-1], 1.0 / fs)
    power = (np.abs(np.fft.rfft(x, axis=-1)) ** 2).sum(axis=1)  # (clips, bins)
    bands = np.stack([np.abs(freqs - f) <= bandwidth_hz / 2 for f in CARRIERS[modality]["stage"][:n_states]])
    return (power @ bands.T).argmax(axis=1)
