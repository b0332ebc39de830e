"""Modality definitions: which recorded channels feed which encoder."""
from __future__ import annotations

from dataclasses import dataclass, field

MODALITY_NAMES = ("BAS", "ECG", "RESP")

STAGE_NAMES = ("Wake", "Stage 1", "Stage 2", "Stage 3", "REM")
AGE_GROUPS = ("0-18", "18-35", "35-50", "50+")
SEXES = ("male", "female")

CLIP_SECONDS = 30.0
TARGET_HZ = 256.0
CLIP_LEN = int(CLIP_SECONDS * TARGET_HZ)  # 7680


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channel_names: tuple[str, ...]
    channel_count: int = field(default=-1)

    def __post_init__(self):
        if self.name not in MODALITY_NAMES:
            raise ValueError(f"unknown modality {self.name!r}; expected one of {MODALITY_NAMES}")
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if self.channel_count == -1:
            object.__setattr__(self, "channel_count", len(self.channel_names))
        if self.channel_count != len(self.channel_names) or self.channel_count < 1:
            raise ValueError(
                f"{self.name}: channel_count={self.channel_count} but "
                f"{len(self.channel_names)} channel names given"
            )

    def to_dict(self) -> dict:
        return {"name": self.name, "channel_names": list(self.channel_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModalitySpec":
        return cls(d["name"], tuple(d["channel_names"]))


BAS = ModalitySpec(
    "BAS",
    ("C3-M2", "C4-M1", "F3-M2", "F4-M1", "O1-M2", "O2-M1",
     "E1-M2", "E2-M1", "Chin1-Chin2", "Chin2-Chin3"),
)
ECG = ModalitySpec("ECG", ("ECG1", "ECG2"))
RESP = ModalitySpec(
    "RESP",
    ("Chest", "Abdomen", "Pulse", "Nasal Pressure", "Oral Airflow", "Snore", "SpO2"),
)

DEFAULT_SPECS = (BAS, ECG, RESP)


def spec_by_name(name: str, specs=DEFAULT_SPECS) -> ModalitySpec:
    for s in specs:
        if s.name == name:
            return s
    raise KeyError(f"no modality named {name!r}")


def age_group(age: float | None) -> int:
    """Map an age in years to the index of its group, -1 when unknown."""
    if age is None or age != age:
        return -1
    if age < 18:
        return 0
    if age < 35:
        return 1
    if age < 50:
        return 2
    return 3
