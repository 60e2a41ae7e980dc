"""Privacy runtime: active-hours gating, registered-only retention, audit export.

Store layout (one directory)::

    features.jsonl   one prosody record per retained window
    raw/<id>.wav     raw windows, only in raw_clips mode
    audit.jsonl      one record per heard window and per store mutation
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, time as dtime, timezone, tzinfo
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

import numpy as np

from .audio import SILENCE_DBFS, AudioClip, load_wav, rms_dbfs, save_wav
from .detectors import DEFAULT_CONFIG, FeatureConfig, active_mask, frame_db, frames, pitch_track
from .pipeline import PipelineDecision
from .records import append_jsonl, read_jsonl, sig6
from .samples import IDENTITIES
from .watch import FileWatcher

LISTEN = "listen"
OFF = "off"

PROSODY_ONLY = "prosody_only"
RAW_CLIPS = "raw_clips"
RETENTION_MODES = (PROSODY_ONLY, RAW_CLIPS)

WINDOW_HEARD = "window_heard"
WINDOW_DISCARDED_UNREGISTERED = "window_discarded_unregistered"
FEATURES_PERSISTED = "features_persisted"
RAW_PERSISTED = "raw_persisted"
GATED_OFF = "gated_off"
SETTINGS_CHANGED = "settings_changed"
AUDIT_ACTIONS = (WINDOW_HEARD, WINDOW_DISCARDED_UNREGISTERED, FEATURES_PERSISTED,
                 RAW_PERSISTED, GATED_OFF, SETTINGS_CHANGED)

ENVELOPE_BIN_S = 0.1

# Closed vocabulary of what a store may contain; anything else is "unknown".
CONTENT_TYPES = ("prosody_features", "raw_audio", "audit_log", "transcript", "unknown")
TRANSCRIPT_SUFFIXES = (".txt", ".vtt", ".srt", ".json", ".csv")


class PrivacyError(Exception):
    pass


class StoreFailure(PrivacyError, OSError):
    pass


class SettingsError(PrivacyError, ValueError):
    pass


class AuditOrderError(PrivacyError, ValueError):
    pass


def _parse_time(value: str | dtime) -> dtime:
    if isinstance(value, dtime):
        return value
    try:
        return dtime.fromisoformat(value.strip())
    except ValueError:
        raise SettingsError(f"bad time of day {value!r}; expected HH:MM") from None


def _parse_bool(value: str | bool) -> bool:
    if isinstance(value, bool):
        return value
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise SettingsError(f"bad boolean {value!r}")


@dataclass(frozen=True)
class PrivacySettings:
    day_start: dtime = dtime(8, 0)
    day_end: dtime = dtime(20, 0)
    enabled: bool = True
    retention_mode: str = PROSODY_ONLY
    registered: frozenset[str] = frozenset(IDENTITIES)

    def __post_init__(self) -> None:
        object.__setattr__(self, "day_start", _parse_time(self.day_start))
        object.__setattr__(self, "day_end", _parse_time(self.day_end))
        object.__setattr__(self, "registered", frozenset(self.registered))
        if self.day_start == self.day_end:
            raise SettingsError("day_start and day_end must differ")
        if self.retention_mode not in RETENTION_MODES:
            raise SettingsError(f"unknown retention mode {self.retention_mode!r}")
        unknown = self.registered - set(IDENTITIES)
        if unknown:
            raise SettingsError(f"unknown registered identities {sorted(unknown)}")

    def to_mapping(self) -> dict[str, str]:
        return {
            "day_start": self.day_start.strftime("%H:%M"),
            "day_end": self.day_end.strftime("%H:%M"),
            "enabled": "true" if self.enabled else "false",
            "retention_mode": self.retention_mode,
            "registered": ",".join(sorted(self.registered)),
        }

    @classmethod
    def from_mapping(cls, m: dict[str, str]) -> "PrivacySettings":
        known = {f.name for f in fields(cls)}
        extra = set(m) - known
        if extra:
            raise SettingsError(f"unknown settings keys {sorted(extra)}")
        kw: dict[str, Any] = {}
        if "day_start" in m:
            kw["day_start"] = _parse_time(m["day_start"])
        if "day_end" in m:
            kw["day_end"] = _parse_time(m["day_end"])
        if "enabled" in m:
            kw["enabled"] = _parse_bool(m["enabled"])
        if "retention_mode" in m:
            kw["retention_mode"] = m["retention_mode"].strip()
        if "registered" in m:
            kw["registered"] = frozenset(x.strip() for x in m["registered"].split(",") if x.strip())
        return cls(**kw)


def load_settings(path: str | Path) -> PrivacySettings:
    """Flat ``key = value`` file; ``#`` starts a comment line."""
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SettingsError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return PrivacySettings.from_mapping(values)


def save_settings(path: str | Path, settings: PrivacySettings) -> None:
    text = "".join(f"{k} = {v}\n" for k, v in settings.to_mapping().items())
    Path(path).write_text(text, encoding="utf-8")


def gate(now: datetime | dtime, settings: PrivacySettings) -> str:
    """``listen`` iff enabled and ``now`` falls in [day_start, day_end), wrapping midnight."""
    if not settings.enabled:
        return OFF
    t = now.time() if isinstance(now, datetime) else now
    start, end = settings.day_start, settings.day_end
    inside = start <= t < end if start < end else (t >= start or t < end)
    return LISTEN if inside else OFF


# -- prosody --------------------------------------------------------------------


@dataclass(frozen=True)
class ProsodyFeatures:
    pitch_mean_hz: float
    pitch_var_hz2: float
    voiced_fraction: float
    rms_dbfs: float
    energy_var_db2: float
    peak_count: int

    def to_record(self) -> dict[str, float]:
        return {k: (v if isinstance(v, int) else sig6(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ProsodyFeatures":
        return cls(**{f.name: rec[f.name] for f in fields(cls)})


def extract_prosody(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> ProsodyFeatures:
    fr = frames(clip.samples, clip.sample_rate, cfg.frame_ms, cfg.hop_ms)
    db = frame_db(fr)
    active = active_mask(db, cfg)
    pitch = pitch_track(clip, cfg)
    n_pitch_frames = max(1, int((len(clip) / clip.sample_rate * 1000 - cfg.pitch_frame_ms)
                                // cfg.hop_ms) + 1)
    # energy peaks: onsets of active bursts, a syllable-rate proxy
    onsets = int(np.count_nonzero(np.diff(active.astype(np.int8), prepend=0) == 1))
    return ProsodyFeatures(
        pitch_mean_hz=float(np.mean(pitch)) if len(pitch) else 0.0,
        pitch_var_hz2=float(np.var(pitch)) if len(pitch) > 1 else 0.0,
        voiced_fraction=min(1.0, len(pitch) / n_pitch_frames),
        rms_dbfs=rms_dbfs(clip),
        energy_var_db2=float(np.var(db[active])) if active.any() else 0.0,
        peak_count=onsets,
    )


# -- store ------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    timestamp: float
    action: str
    window_id: Optional[str] = None
    detail: Optional[str] = None

    def __post_init__(self) -> None:
        if self.action not in AUDIT_ACTIONS:
            raise ValueError(f"unknown audit action {self.action!r}")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"timestamp": self.timestamp, "action": self.action}
        if self.window_id is not None:
            rec["window_id"] = self.window_id
        if self.detail is not None:
            rec["detail"] = self.detail
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "AuditRecord":
        return cls(float(rec["timestamp"]), rec["action"], rec.get("window_id"), rec.get("detail"))


class Store:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.features_path = self.root / "features.jsonl"
        self.audit_path = self.root / "audit.jsonl"
        self.raw_dir = self.root / "raw"
        self._lock = threading.Lock()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreFailure(f"cannot create store {self.root}: {exc}") from exc
        self._last_ts = max((r.timestamp for r in self.audit_records()), default=-math.inf)

    def audit(self, rec: AuditRecord) -> AuditRecord:
        with self._lock:
            if rec.timestamp < self._last_ts:
                raise AuditOrderError(
                    f"audit timestamp {rec.timestamp} precedes previous {self._last_ts}"
                )
            try:
                append_jsonl(self.audit_path, rec.to_record())
            except OSError as exc:
                raise StoreFailure(f"audit write failed: {exc}") from exc
            self._last_ts = rec.timestamp
        return rec

    def write_features(self, window_id: str, timestamp: float, feats: ProsodyFeatures) -> None:
        try:
            append_jsonl(self.features_path,
                         {"window_id": window_id, "timestamp": timestamp, **feats.to_record()})
        except OSError as exc:
            raise StoreFailure(f"feature write failed: {exc}") from exc

    def raw_path(self, window_id: str) -> Path:
        safe = "".join(ch if ch.isalnum() or ch in "-_.#" else "_" for ch in window_id)
        return self.raw_dir / f"{safe}.wav"

    def write_raw(self, window_id: str, clip: AudioClip) -> Path:
        try:
            self.raw_dir.mkdir(exist_ok=True)
            p = self.raw_path(window_id)
            save_wav(clip, p)
        except OSError as exc:
            raise StoreFailure(f"raw write failed: {exc}") from exc
        return p

    def audit_records(self) -> list[AuditRecord]:
        if not self.audit_path.exists():
            return []
        return [AuditRecord.from_record(r) for r in read_jsonl(self.audit_path)]

    def feature_records(self) -> list[dict[str, Any]]:
        if not self.features_path.exists():
            return []
        return list(read_jsonl(self.features_path))

    def artifact_files(self) -> list[Path]:
        """Every file in the store except the audit log."""
        return sorted(p for p in self.root.rglob("*") if p.is_file() and p != self.audit_path)


def _registered(decision: PipelineDecision, settings: PrivacySettings) -> frozenset[str]:
    return decision.registered & settings.registered


def persist_decision(
    decision: PipelineDecision,
    clip: AudioClip,
    settings: PrivacySettings,
    store: Store,
    timestamp: float | None = None,
    cfg: FeatureConfig = DEFAULT_CONFIG,
) -> list[AuditRecord]:
    ts = decision.timestamp if timestamp is None else timestamp
    wid = decision.window_id
    if not _registered(decision, settings):
        return [store.audit(AuditRecord(ts, WINDOW_DISCARDED_UNREGISTERED, wid))]
    out = []
    store.write_features(wid, ts, extract_prosody(clip, cfg))
    out.append(store.audit(AuditRecord(ts, FEATURES_PERSISTED, wid)))
    if settings.retention_mode == RAW_CLIPS:
        store.write_raw(wid, clip)
        out.append(store.audit(AuditRecord(ts, RAW_PERSISTED, wid)))
    return out


class PrivacyRuntime:
    """Drives windows through the gate, the pipeline and the store.

    Settings updates are queued and applied at the start of the next window.
    """

    def __init__(
        self,
        settings: PrivacySettings,
        store: Store,
        decide: Callable[[AudioClip, float], PipelineDecision],
        tz: tzinfo = timezone.utc,
        cfg: FeatureConfig = DEFAULT_CONFIG,
    ):
        self._settings = settings
        self._pending: Optional[tuple[PrivacySettings, str]] = None
        self._lock = threading.Lock()
        self.store = store
        self.decide = decide
        self.tz = tz
        self.cfg = cfg
        self._gated = False

    @property
    def settings(self) -> PrivacySettings:
        return self._settings

    def update_settings(self, settings: PrivacySettings, reason: str = "update") -> None:
        with self._lock:
            self._pending = (settings, reason)

    def _apply_pending(self, ts: float) -> None:
        with self._lock:
            pending, self._pending = self._pending, None
        if pending is None or pending[0] == self._settings:
            return
        new, reason = pending
        changed = sorted(k for k, v in new.to_mapping().items() if self._settings.to_mapping()[k] != v)
        self._settings = new
        self.store.audit(AuditRecord(ts, SETTINGS_CHANGED, detail=f"{reason}: {','.join(changed)}"))

    def on_window(self, clip: AudioClip, timestamp: float) -> Optional[PipelineDecision]:
        self._apply_pending(timestamp)
        local = datetime.fromtimestamp(timestamp, self.tz)
        if gate(local, self._settings) == OFF:
            if not self._gated:
                self.store.audit(AuditRecord(timestamp, GATED_OFF))
                self._gated = True
            return None
        self._gated = False
        self.store.audit(AuditRecord(timestamp, WINDOW_HEARD, clip.id))
        decision = self.decide(clip, timestamp)
        persist_decision(decision, clip, self._settings, self.store, timestamp, self.cfg)
        return decision

    def replay(self, windows: Iterable[tuple[AudioClip, float]]) -> list[Optional[PipelineDecision]]:
        return [self.on_window(clip, ts) for clip, ts in windows]


class SettingsWatcher(FileWatcher):
    """Feeds edits of a settings file into a runtime; bad edits are kept out."""

    def __init__(self, path: str | Path, runtime: PrivacyRuntime):
        self.runtime = runtime
        self.errors: list[str] = []
        super().__init__(path, self._reload)

    def _reload(self, path: Path) -> None:
        try:
            self.runtime.update_settings(load_settings(path), reason=f"file {path.name}")
        except (SettingsError, OSError) as exc:
            self.errors.append(str(exc))


# -- audit export -----------------------------------------------------------------


@dataclass
class AuditBundle:
    timestamps: list[tuple[float, str]] = field(default_factory=list)
    envelopes: dict[str, tuple[float, list[float], bool]] = field(default_factory=dict)
    content_types: dict[str, int] = field(default_factory=dict)
    transcripts_present: bool = False
    unknown_files: list[str] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.timestamps


def classify(path: Path, store: Store) -> str:
    if path == store.features_path:
        return "prosody_features"
    if path == store.audit_path:
        return "audit_log"
    if path.parent == store.raw_dir and path.suffix == ".wav":
        return "raw_audio"
    if path.suffix.lower() in TRANSCRIPT_SUFFIXES:
        return "transcript"
    return "unknown"


def _rms_bins(clip: AudioClip, bin_s: float) -> list[float]:
    n = int(round(bin_s * clip.sample_rate))
    k = len(clip) // n
    x = clip.samples[: k * n].reshape(k, n)
    return [sig6(v) for v in np.sqrt(np.mean(x * x, axis=1))]


def export_audit(store: Store, start: float = -math.inf, end: float = math.inf) -> AuditBundle:
    """Everything here is recomputed from persisted artifacts only."""
    if end < start:
        raise ValueError("audit range end precedes start")
    bundle = AuditBundle()
    for f in store.feature_records():
        ts = float(f["timestamp"])
        if not start <= ts < end:
            continue
        wid = f["window_id"]
        bundle.timestamps.append((ts, wid))
        raw = store.raw_path(wid)
        if raw.exists():
            bundle.envelopes[wid] = (ENVELOPE_BIN_S, _rms_bins(load_wav(raw), ENVELOPE_BIN_S), False)
        else:
            level = float(f["rms_dbfs"])
            amp = 0.0 if level <= SILENCE_DBFS else sig6(10 ** (level / 20))
            bundle.envelopes[wid] = (0.0, [amp], True)
    bundle.timestamps.sort()
    counts = {t: 0 for t in CONTENT_TYPES}
    for p in store.artifact_files() + ([store.audit_path] if store.audit_path.exists() else []):
        kind = classify(p, store)
        counts[kind] += 1
        if kind == "unknown":
            bundle.unknown_files.append(p.relative_to(store.root).as_posix())
    bundle.content_types = counts
    bundle.transcripts_present = counts["transcript"] > 0
    return bundle


def write_bundle(bundle: AuditBundle, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "timestamps.csv", out / "envelope.csv", out / "attestation.csv"]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "window_id"])
        for ts, wid in bundle.timestamps:
            w.writerow([repr(ts), wid])
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "bin", "bin_seconds", "rms", "coarse"])
        for _, wid in bundle.timestamps:
            bin_s, values, coarse = bundle.envelopes[wid]
            for i, v in enumerate(values):
                w.writerow([wid, i, bin_s if not coarse else "window", v, str(coarse).lower()])
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["content_type", "files"])
        for kind in CONTENT_TYPES:
            w.writerow([kind, bundle.content_types.get(kind, 0)])
        w.writerow(["transcripts_present", str(bundle.transcripts_present).lower()])
        w.writerow(["unverified_files", ";".join(bundle.unknown_files)])
    return paths


__all__ = [
    "PrivacySettings", "ProsodyFeatures", "AuditRecord", "Store", "PrivacyRuntime",
    "gate", "persist_decision", "extract_prosody", "export_audit", "write_bundle",
    "load_settings", "save_settings", "SettingsWatcher", "StoreFailure",
]
