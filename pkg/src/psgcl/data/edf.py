"""Minimal EDF / EDF+ reader.

Only reading is supported. Samples are 16-bit little-endian two's complement
and are converted to physical units with the per-signal calibration in the
header. EDF+ annotation signals are decoded into (onset, duration, label)
triples.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

ANNOTATION_LABEL = "EDF Annotations"


class EdfParseError(ValueError):
    """Malformed EDF content. ``offset`` is the byte position of the bad field."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class EdfSignal:
    label: str
    physical_dimension: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    sampling_rate_hz: float
    data: np.ndarray | None = None


@dataclass
class EdfFile:
    patient: str
    recording: str
    n_records: int
    record_duration_s: float
    signals: list[EdfSignal] = field(default_factory=list)
    annotations: list[tuple[float, float, str]] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.signals]


def _field(buf: bytes, offset: int, width: int) -> str:
    if offset + width > len(buf):
        raise EdfParseError("header truncated", offset)
    raw = buf[offset:offset + width]
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError:
        return raw.decode("latin-1").strip()


def _number(buf: bytes, offset: int, width: int, kind=float, name: str = "field"):
    text = _field(buf, offset, width)
    try:
        return kind(text)
    except ValueError:
        if kind is int:
            try:
                value = float(text)
                if value.is_integer():
                    return int(value)
            except ValueError:
                pass
        raise EdfParseError(f"cannot parse {name} {text!r} as {kind.__name__}", offset) from None


def read_header(buf: bytes) -> tuple[EdfFile, int]:
    """Parse the fixed and per-signal header. Returns the file and the data offset."""
    if len(buf) < 256:
        raise EdfParseError("file shorter than the 256-byte fixed header", len(buf))
    version = _field(buf, 0, 8)
    if version != "0":
        raise EdfParseError(f"unsupported version field {version!r}", 0)
    header_bytes = _number(buf, 184, 8, int, "header size")
    n_records = _number(buf, 236, 8, int, "number of data records")
    record_duration = _number(buf, 244, 8, float, "data record duration")
    ns = _number(buf, 252, 4, int, "number of signals")
    if ns < 1:
        raise EdfParseError(f"number of signals must be positive, got {ns}", 252)
    if header_bytes != 256 * (ns + 1):
        raise EdfParseError(
            f"header size {header_bytes} inconsistent with {ns} signals", 184)

    edf = EdfFile(_field(buf, 8, 80), _field(buf, 88, 80), n_records, record_duration)

    def col(start_width_offset: int, width: int, i: int) -> int:
        return 256 + start_width_offset * ns + width * i

    # per-signal field widths, in header order
    widths = [("label", 16), ("transducer", 80), ("dimension", 8), ("pmin", 8),
              ("pmax", 8), ("dmin", 8), ("dmax", 8), ("prefilter", 80),
              ("nsamp", 8), ("reserved", 32)]
    starts = {}
    acc = 0
    for name, w in widths:
        starts[name] = (acc, w)
        acc += w

    for i in range(ns):
        def off(name):
            s, w = starts[name]
            return col(s, w, i), w
        o, w = off("label")
        label = _field(buf, o, w)
        o, w = off("dimension")
        dim = _field(buf, o, w)
        pmin = _number(buf, *off("pmin"), float, "physical minimum")
        pmax = _number(buf, *off("pmax"), float, "physical maximum")
        dmin = _number(buf, *off("dmin"), int, "digital minimum")
        dmax = _number(buf, *off("dmax"), int, "digital maximum")
        nsamp = _number(buf, *off("nsamp"), int, "samples per record")
        if dmax <= dmin:
            raise EdfParseError(f"signal {label!r}: digital max {dmax} <= digital min {dmin}",
                                off("dmax")[0])
        if nsamp < 1:
            raise EdfParseError(f"signal {label!r}: samples per record must be positive",
                                off("nsamp")[0])
        rate = nsamp / record_duration if record_duration > 0 else 0.0
        edf.signals.append(EdfSignal(label, dim, pmin, pmax, dmin, dmax, nsamp, rate))
    return edf, header_bytes


_TAL = re.compile(rb"([+-]\d+(?:\.\d*)?)(?:\x15(\d+(?:\.\d*)?))?\x14(.*?)\x14\x00", re.S)


def parse_tals(raw: bytes) -> list[tuple[float, float, str]]:
    """Decode time-stamped annotation lists from an EDF+ annotation signal."""
    out = []
    for m in _TAL.finditer(raw):
        onset = float(m.group(1))
        duration = float(m.group(2)) if m.group(2) else 0.0
        for text in m.group(3).split(b"\x14"):
            label = text.decode("utf-8", errors="replace").strip()
            if label:
                out.append((onset, duration, label))
    return out


def read_edf(path: str | os.PathLike, channels: list[str] | None = None) -> EdfFile:
    """Read an EDF/EDF+ file.

    ``channels`` restricts which signals get decoded (by exact header label);
    annotation signals are always decoded.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    edf, data_offset = read_header(buf)
    rec_samples = sum(s.samples_per_record for s in edf.signals)
    rec_bytes = 2 * rec_samples
    available = (len(buf) - data_offset) // rec_bytes
    n_records = edf.n_records
    if n_records < 0:
        n_records = available
    elif n_records > available:
        raise EdfParseError(
            f"header declares {n_records} data records but only {available} are present",
            data_offset + available * rec_bytes)
    edf.n_records = n_records

    raw = np.frombuffer(buf, dtype="<i2", count=n_records * rec_samples, offset=data_offset)
    raw = raw.reshape(n_records, rec_samples)
    wanted = None if channels is None else set(channels)
    start = 0
    for sig in edf.signals:
        stop = start + sig.samples_per_record
        if sig.label == ANNOTATION_LABEL:
            block = raw[:, start:stop].astype("<i2").tobytes()
            edf.annotations.extend(parse_tals(block))
        elif wanted is None or sig.label in wanted:
            digital = raw[:, start:stop].reshape(-1).astype(np.float64)
            scale = (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min)
            sig.data = (digital - sig.digital_min) * scale + sig.physical_min
        start = stop
    # timekeeping TALs carry no text and were dropped by parse_tals
    edf.annotations.sort(key=lambda a: a[0])
    return edf
