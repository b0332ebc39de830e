"""Resampling, normalization, clip segmentation and clip labeling."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import resample_poly

from ..modalities import CLIP_SECONDS, TARGET_HZ, ModalitySpec, age_group
from .recording import Annotation, RawRecording

MAX_POLY_FACTOR = 1000


@dataclass
class ClipBatch:
    """Fixed-length clips of one modality plus identity and label arrays.

    Absent labels are stored as -1.
    """

    modality: ModalitySpec
    data: np.ndarray  # (batch, channels, clip_len)
    participant_ids: np.ndarray
    clip_indices: np.ndarray
    stage_label: np.ndarray = field(default=None)
    sdb_label: np.ndarray = field(default=None)
    age_group: np.ndarray = field(default=None)
    sex: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.data)
        if self.data.ndim != 3 or self.data.shape[1] != self.modality.channel_count:
            raise ValueError(
                f"{self.modality.name}: expected data of shape (batch, "
                f"{self.modality.channel_count}, clip_len), got {self.data.shape}")
        self.participant_ids = np.asarray(self.participant_ids, dtype=object)
        self.clip_indices = np.asarray(self.clip_indices, dtype=np.int64)
        for name in ("stage_label", "sdb_label", "age_group", "sex"):
            value = getattr(self, name)
            setattr(self, name, np.full(n, -1, np.int64) if value is None
                    else np.asarray(value, dtype=np.int64))

    def __len__(self):
        return len(self.data)

    @property
    def clip_len(self) -> int:
        return self.data.shape[-1]


def _rational(ratio: float) -> Fraction | None:
    frac = Fraction(ratio).limit_denominator(MAX_POLY_FACTOR)
    if frac.numerator > MAX_POLY_FACTOR * 10 or abs(float(frac) - ratio) > 1e-9 * ratio:
        return None
    return frac


def resample_signal(x: np.ndarray, rate: float, target_hz: float) -> np.ndarray:
    if rate == target_hz:
        return x
    n_out = int(np.ceil(len(x) * target_hz / rate - 1e-9))
    frac = _rational(target_hz / rate)
    t_in = np.arange(len(x)) / rate
    t_out = np.arange(n_out) / target_hz
    if frac is not None:
        # filter only the residual around the endpoint line, then add the line
        # back at the exact output times: constants and ramps pass unchanged
        x = np.asarray(x, dtype=np.float64)
        slope = (x[-1] - x[0]) / t_in[-1] if len(x) > 1 else 0.0
        resid = x - (x[0] + slope * t_in)
        y = resample_poly(resid, frac.numerator, frac.denominator, padtype="line")
        return y[:n_out] + (x[0] + slope * t_out)
    return np.interp(t_out, t_in, x)


def resample(rec: RawRecording, target_hz: float = TARGET_HZ) -> RawRecording:
    """Bring every channel to ``target_hz``.

    Rational rate ratios use polyphase filtering; anything else falls back to
    linear interpolation. Channels already at the target rate pass through
    untouched.
    """
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    signals = {ch: resample_signal(x, rec.rates[ch], target_hz) for ch, x in rec.signals.items()}
    return rec.replace_signals(signals, {ch: float(target_hz) for ch in signals})


def normalize(rec: RawRecording) -> RawRecording:
    """Z-score each channel over the whole recording. Flat channels become zeros."""
    signals = {}
    for ch, x in rec.signals.items():
        x = np.asarray(x, dtype=np.float64)
        mu, sd = x.mean() if len(x) else 0.0, x.std() if len(x) else 0.0
        signals[ch] = (x - mu) / sd if sd > 0 else x - mu
    return rec.replace_signals(signals, dict(rec.rates))


def segment_clips(rec: RawRecording, clip_seconds: float = CLIP_SECONDS,
                  sex_codes: Mapping[str, int] | None = None) -> dict[str, ClipBatch]:
    """Cut a single-rate recording into consecutive non-overlapping clips.

    The trailing remainder shorter than one clip is dropped, so every modality
    yields ``floor(duration / clip_seconds)`` clips with identical indices.
    """
    rate = rec.single_rate()
    if rate is None:
        raise ValueError("recording must be resampled to a single rate before segmentation")
    clip_len = int(round(clip_seconds * rate))
    n_clips = int(np.floor(rec.duration_s / clip_seconds + 1e-9))
    sex_codes = sex_codes or {"male": 0, "m": 0, "female": 1, "f": 1}
    sex = sex_codes.get(str(rec.sex).lower(), -1) if rec.sex is not None else -1
    out = {}
    for spec in rec.specs:
        arr = rec.modality_array(spec)[:, : n_clips * clip_len]
        data = arr.reshape(spec.channel_count, n_clips, clip_len).transpose(1, 0, 2)
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(data).all():
            raise ValueError(f"{rec.participant_id}/{spec.name}: non-finite samples after preprocessing")
        out[spec.name] = ClipBatch(
            spec, data,
            participant_ids=np.full(n_clips, rec.participant_id, dtype=object),
            clip_indices=np.arange(n_clips),
            age_group=np.full(n_clips, age_group(rec.age)),
            sex=np.full(n_clips, sex),
        )
    return out


# Annotation vocabularies. Keys are lower-cased.
STAGE_LABELS = {
    "wake": 0, "w": 0, "sleep stage w": 0, "stage w": 0,
    "stage 1": 1, "n1": 1, "sleep stage 1": 1, "sleep stage n1": 1, "nrem1": 1,
    "stage 2": 2, "n2": 2, "sleep stage 2": 2, "sleep stage n2": 2, "nrem2": 2,
    "stage 3": 3, "n3": 3, "sleep stage 3": 3, "sleep stage n3": 3, "nrem3": 3,
    "stage 4": 3, "sleep stage 4": 3,
    "rem": 4, "r": 4, "sleep stage r": 4, "stage r": 4,
}
SDB_LABELS = {
    "sdb", "apnea", "obstructive apnea", "central apnea", "mixed apnea", "hypopnea",
    "obs hypopnea", "obstructive hypopnea", "central hypopnea", "obs sdb",
    "resp event", "respiratory event",
}


class UnknownAnnotation(ValueError):
    def __init__(self, labels: Iterable[str]):
        self.labels = sorted(set(labels))
        super().__init__(f"unknown annotation label(s): {', '.join(map(repr, self.labels))}")


def overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def sdb_positive(event_start: float, event_dur: float, clip_start: float, clip_end: float,
                 event_fraction: float = 0.5, min_seconds: float = 5.0) -> bool:
    """A clip counts as SDB-positive when an event covers at least
    ``event_fraction`` of its own duration inside the clip, or at least
    ``min_seconds`` of the clip."""
    ov = overlap(event_start, event_start + event_dur, clip_start, clip_end)
    if ov <= 0:
        return False
    return ov >= event_fraction * event_dur or ov >= min_seconds


def attach_labels(clips: Mapping[str, ClipBatch] | ClipBatch, annotations: Sequence[Annotation],
                  clip_seconds: float = CLIP_SECONDS, ignore: Iterable[str] = (),
                  event_fraction: float = 0.5, min_seconds: float = 5.0):
    """Assign per-clip stage and SDB labels from interval annotations.

    The stage of a clip is the stage annotation overlapping it the most (-1 if
    none). SDB is 0/1 for every clip once annotations are supplied.
    """
    single = isinstance(clips, ClipBatch)
    batches = {"_": clips} if single else dict(clips)
    ignore = {s.lower() for s in ignore}
    stages, events, unknown = [], [], []
    for a in annotations:
        key = a.label.strip().lower()
        if key in STAGE_LABELS:
            stages.append((a.start_s, a.start_s + a.duration_s, STAGE_LABELS[key]))
        elif key in SDB_LABELS:
            events.append((a.start_s, a.duration_s))
        elif key not in ignore:
            unknown.append(a.label)
    if unknown:
        raise UnknownAnnotation(unknown)

    any_batch = next(iter(batches.values()))
    idx = any_batch.clip_indices
    stage = np.full(len(idx), -1, np.int64)
    sdb = np.zeros(len(idx), np.int64)
    for n, k in enumerate(idx):
        c0, c1 = k * clip_seconds, (k + 1) * clip_seconds
        best = 0.0
        for s0, s1, lab in stages:
            ov = overlap(s0, s1, c0, c1)
            if ov > best:
                best, stage[n] = ov, lab
        sdb[n] = int(any(sdb_positive(e0, ed, c0, c1, event_fraction, min_seconds)
                         for e0, ed in events))
    out = {name: replace(b, stage_label=stage.copy(), sdb_label=sdb.copy())
           for name, b in batches.items()}
    return out["_"] if single else out


def preprocess(rec: RawRecording, target_hz: float = TARGET_HZ,
               clip_seconds: float = CLIP_SECONDS, ignore: Iterable[str] = ()) -> dict[str, ClipBatch]:
    """Resample, z-score, segment and label one recording."""
    rec = normalize(resample(rec, target_hz))
    clips = segment_clips(rec, clip_seconds)
    return attach_labels(clips, rec.annotations, clip_seconds, ignore)
