"""Raw recordings and how they are loaded from disk."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ..modalities import DEFAULT_SPECS, ModalitySpec
from .edf import read_edf, read_header

log = logging.getLogger(__name__)

NATIVE_SUFFIX = ".npz"


class MissingChannel(KeyError):
    def __init__(self, channel: str, available: Sequence[str]):
        super().__init__(channel)
        self.channel = channel
        self.available = list(available)

    def __str__(self):
        return f"channel {self.channel!r} not found; available: {', '.join(self.available)}"


class Annotation(NamedTuple):
    start_s: float
    duration_s: float
    label: str


@dataclass
class RawRecording:
    """Per-channel samples of one participant, grouped by modality spec."""

    participant_id: str
    signals: dict[str, np.ndarray]
    rates: dict[str, float]
    annotations: list[Annotation] = field(default_factory=list)
    specs: tuple[ModalitySpec, ...] = DEFAULT_SPECS
    age: float | None = None
    sex: str | None = None

    def __post_init__(self):
        for spec in self.specs:
            for ch in spec.channel_names:
                if ch not in self.signals:
                    raise MissingChannel(ch, list(self.signals))
                if self.rates[ch] <= 0:
                    raise ValueError(f"channel {ch!r} has non-positive sampling rate")

    @property
    def channel_names(self) -> list[str]:
        return [ch for spec in self.specs for ch in spec.channel_names]

    @property
    def duration_s(self) -> float:
        return min(len(self.signals[ch]) / self.rates[ch] for ch in self.channel_names)

    def single_rate(self) -> float | None:
        rates = {self.rates[ch] for ch in self.channel_names}
        return rates.pop() if len(rates) == 1 else None

    def modality_array(self, spec: ModalitySpec) -> np.ndarray:
        """Stack one modality's channels; requires a shared rate and truncates to the shortest."""
        n = min(len(self.signals[ch]) for ch in spec.channel_names)
        return np.stack([self.signals[ch][:n] for ch in spec.channel_names])

    def replace_signals(self, signals, rates) -> "RawRecording":
        return RawRecording(self.participant_id, signals, rates, list(self.annotations),
                            self.specs, self.age, self.sex)


def read_alias_map(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``alias = canonical`` lines; blank lines and ``#`` comments are skipped."""
    aliases = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'alias = canonical', got {line!r}")
        alias, canonical = (s.strip() for s in line.split("=", 1))
        aliases[alias.lower()] = canonical
    return aliases


def resolve_channels(available: Sequence[str], wanted: Sequence[str],
                     aliases: dict[str, str] | None = None) -> dict[str, str | None]:
    """Map each wanted canonical name to an available label (or None).

    Matching is case-insensitive; an available label also matches when the alias
    map sends it to the canonical name.
    """
    aliases = {k.lower(): v for k, v in (aliases or {}).items()}
    out = {}
    for canonical in wanted:
        target = canonical.lower()
        hit = None
        for label in available:
            low = label.lower()
            if low == target or aliases.get(low, "").lower() == target:
                hit = label
                break
        out[canonical] = hit
    return out



def load_recording(path: str | os.PathLike, specs: Sequence[ModalitySpec] = DEFAULT_SPECS,
                   aliases: dict[str, str] | None = None, pad_missing: bool = False,
                   participant_id: str | None = None) -> RawRecording:
    """Load an EDF/EDF+ file or a native ``.npz`` recording.

    With ``pad_missing`` absent channels are zero-filled (at the rate of the
    first resolved channel in the same modality) and a warning is logged;
    otherwise a missing channel raises :class:`MissingChannel`.
    """
    path = Path(path)
    specs = tuple(specs)
    pid = participant_id or path.stem
    if path.suffix.lower() == NATIVE_SUFFIX:
        return _load_native(path, specs, aliases, pad_missing, pid)

    with open(path, "rb") as fh:
        head = fh.read(256)
        try:
            ns = int(head[252:256].decode("ascii").strip())
        except ValueError:
            ns = 0
        head += fh.read(256 * max(ns, 0))
    edf_head, _ = read_header(head)
    available = [s.label for s in edf_head.signals if s.label != "EDF Annotations"]
    wanted = [ch for spec in specs for ch in spec.channel_names]
    resolved = resolve_channels(available, wanted, aliases)
    missing = [ch for ch, hit in resolved.items() if hit is None]
    if missing and not pad_missing:
        raise MissingChannel(missing[0], available)

    edf = read_edf(path, [hit for hit in resolved.values() if hit is not None])
    by_label = {s.label: s for s in edf.signals}
    signals, rates = {}, {}
    for ch, hit in resolved.items():
        if hit is not None:
            signals[ch] = by_label[hit].data
            rates[ch] = by_label[hit].sampling_rate_hz
    duration = edf.n_records * edf.record_duration_s
    _pad(signals, rates, specs, missing, duration, pid)
    annotations = [Annotation(*a) for a in edf.annotations]
    return RawRecording(pid, signals, rates, annotations, specs)


def _pad(signals, rates, specs, missing, duration, pid):
    for spec in specs:
        present = [ch for ch in spec.channel_names if ch in signals]
        fallback = rates[present[0]] if present else (max(rates.values()) if rates else 256.0)
        for ch in spec.channel_names:
            if ch in missing:
                log.warning("%s: channel %r absent, zero-filled", pid, ch)
                rates[ch] = fallback
                signals[ch] = np.zeros(int(round(duration * fallback)))


def save_native_recording(rec: RawRecording, path: str | os.PathLike) -> None:
    """Write a recording in the package's native ``.npz`` layout."""
    meta = {
        "participant_id": rec.participant_id,
        "channels": list(rec.signals),
        "rates": [rec.rates[ch] for ch in rec.signals],
        "annotations": [list(a) for a in rec.annotations],
        "specs": [s.to_dict() for s in rec.specs],
        "age": rec.age,
        "sex": rec.sex,
    }
    arrays = {f"ch{i}": np.asarray(rec.signals[ch], dtype="<f4")
              for i, ch in enumerate(rec.signals)}
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    os.replace(tmp, path)


def _load_native(path, specs, aliases, pad_missing, pid) -> RawRecording:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        stored = {ch: z[f"ch{i}"].astype(np.float64) for i, ch in enumerate(meta["channels"])}
    stored_rates = dict(zip(meta["channels"], meta["rates"]))
    wanted = [ch for spec in specs for ch in spec.channel_names]
    resolved = resolve_channels(list(stored), wanted, aliases)
    missing = [ch for ch, hit in resolved.items() if hit is None]
    if missing and not pad_missing:
        raise MissingChannel(missing[0], list(stored))
    signals = {ch: stored[hit] for ch, hit in resolved.items() if hit is not None}
    rates = {ch: float(stored_rates[hit]) for ch, hit in resolved.items() if hit is not None}
    duration = min(len(stored[c]) / stored_rates[c] for c in stored)
    _pad(signals, rates, specs, missing, duration, pid)
    annotations = [Annotation(float(a[0]), float(a[1]), str(a[2])) for a in meta["annotations"]]
    return RawRecording(meta.get("participant_id") or pid, signals, rates, annotations,
                        specs, meta.get("age"), meta.get("sex"))
