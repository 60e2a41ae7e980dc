"""The gated four-stage pipeline: VAD -> SID -> (emotion, conflict).

A window that VAD rejects never reaches SID; a window with no registered
speaker never reaches the emotion or conflict detectors. Emotion and conflict
see the same clip and never each other's output.
"""

from __future__ import annotations

import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from .audio import DEFAULT_WINDOW_SECONDS, AudioClip
from .records import dumps, read_jsonl

DISCARDED_VAD = "discarded_vad"
DISCARDED_SID = "discarded_sid"
SCORED = "scored"
FAILED = "failed"
STAGES = ("vad", "sid", "emotion", "conflict")


class PipelineError(Exception):
    pass


class DetectorFailure(PipelineError):
    def __init__(self, stage: str, cause: BaseException | str, partial: dict | None = None):
        self.stage = stage
        self.cause = cause
        self.partial = partial or {}
        super().__init__(f"{stage} detector failed: {cause}")


class SinkFailure(PipelineError):
    def __init__(self, summary: "RunSummary", cause: BaseException):
        self.summary = summary
        self.cause = cause
        super().__init__(f"decision sink failed after {summary.windows_in} windows: {cause}")


class WindowLengthError(PipelineError, ValueError):
    pass


def _check_score(name: str, score: float, lo: float = 0.0) -> float:
    score = float(score)
    if not lo <= score <= 1.0:
        raise ValueError(f"{name} score {score} outside [{lo}, 1]")
    return score


@dataclass(frozen=True)
class VadVerdict:
    is_speech: bool
    score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "is_speech", bool(self.is_speech))
        object.__setattr__(self, "score", _check_score("vad", self.score))


@dataclass(frozen=True)
class SidVerdict:
    """``scores`` holds one similarity per enrolled identity, in [-1, 1]."""

    speakers: frozenset[str]
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "speakers", frozenset(self.speakers))
        object.__setattr__(
            self, "scores", {k: _check_score(f"sid[{k}]", v, -1.0) for k, v in self.scores.items()}
        )


@dataclass(frozen=True)
class EmotionVerdict:
    label: str
    score: float

    def __post_init__(self) -> None:
        if self.label not in ("angry", "not_angry"):
            raise ValueError(f"bad emotion label {self.label!r}")
        object.__setattr__(self, "score", _check_score("emotion", self.score))


@dataclass(frozen=True)
class ConflictVerdict:
    in_conflict: bool
    score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "in_conflict", bool(self.in_conflict))
        object.__setattr__(self, "score", _check_score("conflict", self.score))


@dataclass(frozen=True)
class DetectorContract:
    """Pluggable detectors. Each must be a pure function of its arguments."""

    vad: Callable[[AudioClip], VadVerdict]
    sid: Callable[[AudioClip, Sequence[Any]], SidVerdict]
    emotion: Callable[[AudioClip], EmotionVerdict]
    conflict: Callable[[AudioClip], ConflictVerdict]


@dataclass(frozen=True)
class PipelineDecision:
    window_id: str
    stage_reached: str
    timestamp: float
    vad: Optional[VadVerdict] = None
    sid: Optional[SidVerdict] = None
    emotion: Optional[EmotionVerdict] = None
    conflict: Optional[ConflictVerdict] = None
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    def __post_init__(self) -> None:
        scored = self.stage_reached == SCORED
        has_downstream = self.emotion is not None or self.conflict is not None
        if scored != (self.emotion is not None and self.conflict is not None) or (
            not scored and has_downstream
        ):
            raise ValueError(f"{self.window_id}: emotion/conflict presence violates gating")
        if scored and not (self.vad and self.vad.is_speech and self.sid and self.sid.speakers):
            raise ValueError(f"{self.window_id}: scored without speech and a registered speaker")

    @property
    def registered(self) -> frozenset[str]:
        return self.sid.speakers if self.sid is not None else frozenset()

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "window_id": self.window_id,
            "stage_reached": self.stage_reached,
            "timestamp": self.timestamp,
        }
        if self.vad is not None:
            rec["vad"] = {"is_speech": self.vad.is_speech, "score": round(self.vad.score, 6)}
        if self.sid is not None:
            rec["sid"] = {
                "speakers": sorted(self.sid.speakers),
                "scores": {k: round(v, 6) for k, v in sorted(self.sid.scores.items())},
            }
        if self.emotion is not None:
            rec["emotion"] = {"label": self.emotion.label, "score": round(self.emotion.score, 6)}
        if self.conflict is not None:
            rec["conflict"] = {
                "in_conflict": self.conflict.in_conflict,
                "score": round(self.conflict.score, 6),
            }
        if self.failed_stage is not None:
            rec["failed_stage"] = self.failed_stage
            rec["error"] = self.error
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "PipelineDecision":
        vad = rec.get("vad")
        sid = rec.get("sid")
        emo = rec.get("emotion")
        con = rec.get("conflict")
        return cls(
            window_id=rec["window_id"],
            stage_reached=rec["stage_reached"],
            timestamp=float(rec.get("timestamp", 0.0)),
            vad=None if vad is None else VadVerdict(vad["is_speech"], vad["score"]),
            sid=None if sid is None else SidVerdict(frozenset(sid["speakers"]), sid.get("scores", {})),
            emotion=None if emo is None else EmotionVerdict(emo["label"], emo["score"]),
            conflict=None if con is None else ConflictVerdict(con["in_conflict"], con["score"]),
            failed_stage=rec.get("failed_stage"),
            error=rec.get("error"),
        )


def enrolled_identities(enrolled: Iterable[Any]) -> frozenset[str]:
    """Identities of enrolled profiles (objects with ``identity``) or plain strings."""
    return frozenset(getattr(e, "identity", e) for e in enrolled)


def _call(stage: str, fn: Callable, expected: type, *args, partial: dict) -> Any:
    try:
        out = fn(*args)
    except Exception as exc:
        raise DetectorFailure(stage, exc, partial) from exc
    if not isinstance(out, expected):
        raise DetectorFailure(stage, f"returned {type(out).__name__}, expected {expected.__name__}",
                              partial)
    return out


def process_window(
    clip: AudioClip,
    detectors: DetectorContract,
    enrolled: Sequence[Any],
    window_seconds: float | Fraction = DEFAULT_WINDOW_SECONDS,
    timestamp: float | None = None,
) -> PipelineDecision:
    expected = Fraction(window_seconds) * clip.sample_rate
    if len(clip) != expected:
        raise WindowLengthError(
            f"{clip.id}: {len(clip)} samples, expected {expected} for a {window_seconds} s window"
        )
    ts = time.time() if timestamp is None else timestamp
    partial: dict[str, Any] = {}
    vad = _call("vad", detectors.vad, VadVerdict, clip, partial=partial)
    partial["vad"] = vad
    if not vad.is_speech:
        return PipelineDecision(clip.id, DISCARDED_VAD, ts, vad=vad)

    sid = _call("sid", detectors.sid, SidVerdict, clip, enrolled, partial=partial)
    allowed = enrolled_identities(enrolled)
    if not sid.speakers <= allowed:
        raise DetectorFailure(
            "sid", f"returned unenrolled identities {sorted(sid.speakers - allowed)}", partial
        )
    partial["sid"] = sid
    if not sid.speakers:
        return PipelineDecision(clip.id, DISCARDED_SID, ts, vad=vad, sid=sid)

    emotion = _call("emotion", detectors.emotion, EmotionVerdict, clip, partial=partial)
    conflict = _call("conflict", detectors.conflict, ConflictVerdict, clip, partial=partial)
    return PipelineDecision(clip.id, SCORED, ts, vad=vad, sid=sid, emotion=emotion, conflict=conflict)


@dataclass
class RunSummary:
    windows_in: int = 0
    discarded_vad: int = 0
    discarded_sid: int = 0
    scored: int = 0
    failed: int = 0

    def count(self, decision: PipelineDecision) -> None:
        self.windows_in += 1
        attr = {DISCARDED_VAD: "discarded_vad", DISCARDED_SID: "discarded_sid",
                SCORED: "scored", FAILED: "failed"}[decision.stage_reached]
        setattr(self, attr, getattr(self, attr) + 1)

    def is_partition(self) -> bool:
        return self.windows_in == self.discarded_vad + self.discarded_sid + self.scored + self.failed

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def _safe_process(clip, detectors, enrolled, window_seconds, ts) -> PipelineDecision:
    try:
        return process_window(clip, detectors, enrolled, window_seconds, ts)
    except DetectorFailure as exc:
        ts = time.time() if ts is None else ts
        return PipelineDecision(
            clip.id, FAILED, ts, vad=exc.partial.get("vad"), sid=exc.partial.get("sid"),
            failed_stage=exc.stage, error=str(exc.cause),
        )


def run_stream(
    source: Iterable[AudioClip],
    detectors: DetectorContract,
    enrolled: Sequence[Any],
    sink: Callable[[PipelineDecision], None],
    window_seconds: float | Fraction = DEFAULT_WINDOW_SECONDS,
    jobs: int = 1,
    max_in_flight: int | None = None,
    timestamps: Callable[[int, AudioClip], float] | None = None,
) -> RunSummary:
    """Push every window through the pipeline and hand decisions to ``sink`` in order.

    With ``jobs > 1`` windows are processed on a thread pool, at most
    ``max_in_flight`` at a time (default ``2 * jobs``); decisions are still
    delivered in source order. A detector failure marks the window failed and
    the stream continues; a sink failure aborts with :class:`SinkFailure`.
    """
    summary = RunSummary()

    def emit(decision: PipelineDecision) -> None:
        try:
            sink(decision)
        except Exception as exc:
            raise SinkFailure(summary, exc) from exc
        summary.count(decision)

    def ts_for(i: int, clip: AudioClip) -> float | None:
        return None if timestamps is None else timestamps(i, clip)

    if jobs <= 1:
        for i, clip in enumerate(source):
            emit(_safe_process(clip, detectors, enrolled, window_seconds, ts_for(i, clip)))
        return summary

    limit = max_in_flight or 2 * jobs
    pending: deque[Future] = deque()
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        try:
            for i, clip in enumerate(source):
                pending.append(pool.submit(
                    _safe_process, clip, detectors, enrolled, window_seconds, ts_for(i, clip)
                ))
                while len(pending) >= limit:
                    emit(pending.popleft().result())
            while pending:
                emit(pending.popleft().result())
        finally:
            for fut in pending:
                fut.cancel()
    return summary


class DecisionLog:
    """Append-only line-delimited decision sink."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    def __call__(self, decision: PipelineDecision) -> None:
        self._fh.write(dumps(decision.to_record()) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "DecisionLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_decisions(path: str | Path) -> list[PipelineDecision]:
    return [PipelineDecision.from_record(r) for r in read_jsonl(path)]
