"""Ground-truth labelled samples and their manifest records."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from .records import read_jsonl, write_jsonl

CAREGIVER = "caregiver"
PATIENT = "patient"
IDENTITIES = (CAREGIVER, PATIENT)

ANGRY = "angry"
NOT_ANGRY = "not_angry"

CLEAN = "clean"
DEAMP_NOISE = "deamp_noise"
REVERB = "reverb"
ALL_THREE = "all_three"
FIELD = "field"
CONDITIONS = (CLEAN, DEAMP_NOISE, REVERB, ALL_THREE, FIELD)
PROTOCOL_CONDITIONS = (CLEAN, DEAMP_NOISE, REVERB, ALL_THREE)


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    path: str = ""
    is_speech: bool = False
    speakers: frozenset[str] = field(default_factory=frozenset)
    emotion: str = NOT_ANGRY
    conflict: bool = False
    condition: str = CLEAN
    home_id: str = "home1"

    def __post_init__(self) -> None:
        object.__setattr__(self, "speakers", frozenset(self.speakers))
        unknown = self.speakers - set(IDENTITIES)
        if unknown:
            raise ValueError(f"{self.sample_id}: unknown speaker identities {sorted(unknown)}")
        if self.speakers and not self.is_speech:
            raise ValueError(f"{self.sample_id}: labelled speakers but not speech")
        if self.emotion not in (ANGRY, NOT_ANGRY):
            raise ValueError(f"{self.sample_id}: bad emotion label {self.emotion!r}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"{self.sample_id}: bad condition {self.condition!r}")

    def relabel(self, **changes: Any) -> "LabeledSample":
        return replace(self, **changes)

    def to_record(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "path": self.path,
            "is_speech": self.is_speech,
            "speakers": sorted(self.speakers),
            "emotion": self.emotion,
            "conflict": self.conflict,
            "condition": self.condition,
            "home_id": self.home_id,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "LabeledSample":
        return cls(
            sample_id=str(rec["sample_id"]),
            path=str(rec.get("path", "")),
            is_speech=bool(rec.get("is_speech", False)),
            speakers=frozenset(rec.get("speakers", ())),
            emotion=rec.get("emotion", NOT_ANGRY),
            conflict=bool(rec.get("conflict", False)),
            condition=rec.get("condition", CLEAN),
            home_id=str(rec.get("home_id", "home1")),
        )


def read_labels(path: str | Path) -> list[LabeledSample]:
    return [LabeledSample.from_record(r) for r in read_jsonl(path)]


def write_labels(path: str | Path, samples: Iterable[LabeledSample]) -> int:
    return write_jsonl(path, (s.to_record() for s in samples))


def resolve(sample: LabeledSample, base: str | Path) -> Path:
    p = Path(sample.path)
    return p if p.is_absolute() else Path(base) / p
