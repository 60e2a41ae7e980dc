"""Desk-scale stand-ins for the four detector roles.

These are deliberately simple signal-level rules, good enough to drive the
harness end to end on synthetic fixtures:

* ``energy_zcr_vad``: adaptive frame-energy gate plus a zero-crossing band.
* ``cosine_sid``: mean cepstral vector, cosine against enrolled centroids.
* ``random_projection_sid``: the same decision rule on random-projection
  features; a known-bad negative control.
* ``prosody_emotion`` / ``conflict_heuristic``: loudness and variability gates.

All thresholds live in :class:`FeatureConfig`. Defaults were set on the
synthetic fixtures in :mod:`voicehome.synth`, never on evaluation output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.special import expit

from .audio import SILENCE_DBFS, AudioClip, rms_dbfs
from .pipeline import ConflictVerdict, DetectorContract, EmotionVerdict, SidVerdict, VadVerdict
from .records import read_jsonl, write_jsonl
from .samples import ANGRY, IDENTITIES, NOT_ANGRY

FRAME_DB_FLOOR = -100.0


class EmptyEnrollment(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_ceps: int = 13
    n_mels: int = 26
    n_fft: int = 512
    lifter: int = 22
    # pitch proxy
    pitch_frame_ms: float = 40.0
    pitch_min_hz: float = 50.0
    pitch_max_hz: float = 400.0
    voicing_threshold: float = 0.3
    # vad
    abs_floor_dbfs: float = -55.0
    dynamic_range_db: float = 30.0
    speech_fraction: float = 0.2
    zcr_low: float = 0.02
    zcr_high: float = 0.2
    # sid
    sid_threshold: float = 0.85
    projection_seed: int = 1234
    # emotion
    loud_dbfs: float = -20.0
    loud_scale_db: float = 6.0
    pitch_var_hz2: float = 300.0
    # conflict
    raised_frame_dbfs: float = -20.0
    raised_ratio: float = 0.72
    energy_var_db2: float = 20.0

    def __post_init__(self) -> None:
        if not self.frame_ms >= self.hop_ms > 0:
            raise ValueError("need frame length >= hop > 0")
        if self.n_ceps < 1 or self.n_ceps >= self.n_mels:
            raise ValueError("n_ceps must be in [1, n_mels)")
        if not 0 < self.pitch_min_hz < self.pitch_max_hz:
            raise ValueError("bad pitch range")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "FeatureConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown feature config key {key!r}")
            kw[key] = int(raw) if known[key] in ("int", int) else float(raw)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureConfig":
        """Read a flat ``key = value`` file (``#`` comments allowed)."""
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        return cls.from_mapping(values)

    def to_mapping(self) -> dict[str, float]:
        return asdict(self)


DEFAULT_CONFIG = FeatureConfig()


# -- framing and per-frame statistics ---------------------------------------

def frames(x: np.ndarray, sr: int, frame_ms: float, hop_ms: float) -> np.ndarray:
    flen = int(round(sr * frame_ms / 1000))
    hop = int(round(sr * hop_ms / 1000))
    if len(x) < flen:
        x = np.pad(x, (0, flen - len(x)))
    return sliding_window_view(x, flen)[::hop]


def frame_db(fr: np.ndarray) -> np.ndarray:
    ms = np.mean(fr * fr, axis=1)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(ms)
    return np.maximum(db, FRAME_DB_FLOOR)


def zero_crossing_rate(fr: np.ndarray) -> np.ndarray:
    """Sign changes per sample, per frame (zero counts as positive)."""
    s = np.signbit(fr)
    return np.count_nonzero(s[:, 1:] != s[:, :-1], axis=1) / (fr.shape[1] - 1)


def active_mask(db: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Frames within ``dynamic_range_db`` of the loudest frame and above the floor."""
    thresh = max(cfg.abs_floor_dbfs, float(db.max()) - cfg.dynamic_range_db)
    return db >= thresh


@lru_cache(maxsize=8)
def mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, len(bins)))
    for i in range(n_mels):
        lo, mid, hi = edges[i:i + 3]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def cepstra(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Liftered mel cepstra c1..c{n_ceps} per frame (c0 dropped for gain invariance)."""
    fr = frames(clip.samples, clip.sample_rate, cfg.frame_ms, cfg.hop_ms)
    spec = np.abs(np.fft.rfft(fr * np.hamming(fr.shape[1]), n=cfg.n_fft)) ** 2
    mel = spec @ mel_filterbank(clip.sample_rate, cfg.n_fft, cfg.n_mels).T
    c = dct(np.log(mel + 1e-10), type=2, norm="ortho", axis=1)[:, 1:cfg.n_ceps + 1]
    if cfg.lifter:
        n = np.arange(1, cfg.n_ceps + 1)
        c = c * (1 + (cfg.lifter / 2) * np.sin(np.pi * n / cfg.lifter))
    return c


def speech_like_mask(fr: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Active frames whose zero-crossing rate falls in the speech band."""
    zcr = zero_crossing_rate(fr)
    return active_mask(frame_db(fr), cfg) & (zcr >= cfg.zcr_low) & (zcr <= cfg.zcr_high)


def cepstral_mean(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Mean cepstral vector over speech-like frames (all frames if there are none)."""
    c = cepstra(clip, cfg)
    mask = speech_like_mask(frames(clip.samples, clip.sample_rate, cfg.frame_ms, cfg.hop_ms), cfg)
    return c[mask].mean(axis=0) if mask.any() else c.mean(axis=0)


@lru_cache(maxsize=8)
def _projection(seed: int, dim: int, frame_len: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((dim, frame_len)) / math.sqrt(frame_len)


def random_projection_mean(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Mean absolute random projection of raw frames: phase-blind, spectrally flat."""
    fr = frames(clip.samples, clip.sample_rate, cfg.frame_ms, cfg.hop_ms)
    p = _projection(cfg.projection_seed, cfg.n_ceps, fr.shape[1])
    return np.abs(fr @ p.T).mean(axis=0)


FEATURES = {"cepstral": cepstral_mean, "random_projection": random_projection_mean}


def pitch_track(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Autocorrelation pitch (Hz) of voiced, active frames."""
    sr = clip.sample_rate
    fr = frames(clip.samples, sr, cfg.pitch_frame_ms, cfg.hop_ms)
    db = frame_db(fr)
    fr = fr[active_mask(db, cfg)]
    if len(fr) == 0:
        return np.zeros(0)
    fr = fr - fr.mean(axis=1, keepdims=True)
    n = fr.shape[1]
    nfft = 1 << (2 * n - 1).bit_length()
    ac = np.fft.irfft(np.abs(np.fft.rfft(fr, n=nfft)) ** 2, n=nfft)[:, :n]
    lo = max(1, int(sr / cfg.pitch_max_hz))
    hi = min(n - 2, int(math.ceil(sr / cfg.pitch_min_hz)))
    r0 = ac[:, 0]
    ok = r0 > 0
    ac, r0 = ac[ok], r0[ok]
    if len(ac) == 0:
        return np.zeros(0)
    seg = ac[:, lo:hi + 1] / r0[:, None]
    k = np.argmax(seg, axis=1)
    peak = seg[np.arange(len(seg)), k]
    lag = (k + lo).astype(float)
    # parabolic refinement around the peak
    left = ac[np.arange(len(ac)), (k + lo - 1)]
    mid = ac[np.arange(len(ac)), (k + lo)]
    right = ac[np.arange(len(ac)), (k + lo + 1)]
    denom = left - 2 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(denom != 0, 0.5 * (left - right) / denom, 0.0)
    lag = lag + np.clip(shift, -0.5, 0.5)
    voiced = peak >= cfg.voicing_threshold
    return sr / lag[voiced]


# -- detectors ---------------------------------------------------------------

def energy_zcr_vad(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> VadVerdict:
    fr = frames(clip.samples, clip.sample_rate, cfg.frame_ms, cfg.hop_ms)
    db = frame_db(fr)
    mask = active_mask(db, cfg)
    fraction = float(mask.mean())
    if not mask.any():
        return VadVerdict(False, 0.0)
    zcr = float(np.median(zero_crossing_rate(fr[mask])))
    in_band = cfg.zcr_low <= zcr <= cfg.zcr_high
    is_speech = fraction >= cfg.speech_fraction and in_band
    return VadVerdict(is_speech, fraction)


@dataclass(frozen=True)
class SpeakerProfile:
    identity: str
    centroid: tuple[float, ...]
    enrollment_count: int
    feature: str = "cepstral"

    def __post_init__(self) -> None:
        if self.enrollment_count < 1:
            raise ValueError("enrollment_count must be >= 1")
        object.__setattr__(self, "centroid", tuple(float(v) for v in self.centroid))

    def to_record(self) -> dict:
        return {
            "identity": self.identity,
            "centroid": list(self.centroid),
            "enrollment_count": self.enrollment_count,
            "feature": self.feature,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SpeakerProfile":
        return cls(rec["identity"], tuple(rec["centroid"]), int(rec["enrollment_count"]),
                   rec.get("feature", "cepstral"))


def save_profiles(path: str | Path, profiles: Iterable[SpeakerProfile]) -> None:
    write_jsonl(path, (p.to_record() for p in profiles))


def load_profiles(path: str | Path) -> list[SpeakerProfile]:
    return [SpeakerProfile.from_record(r) for r in read_jsonl(path)]


def enroll(
    windows: Sequence[AudioClip],
    identity: str,
    cfg: FeatureConfig = DEFAULT_CONFIG,
    feature: str = "cepstral",
) -> SpeakerProfile:
    if not windows:
        raise EmptyEnrollment(f"no enrollment windows for {identity!r}")
    if identity not in IDENTITIES:
        raise ValueError(f"unknown identity {identity!r}")
    extract = FEATURES[feature]
    vecs = np.stack([extract(w, cfg) for w in windows])
    return SpeakerProfile(identity, tuple(vecs.mean(axis=0)), len(windows), feature)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_sid(
    clip: AudioClip,
    profiles: Sequence[SpeakerProfile],
    threshold: float | None = None,
    cfg: FeatureConfig = DEFAULT_CONFIG,
) -> SidVerdict:
    if not profiles:
        raise ValueError("cosine_sid needs at least one enrolled profile")
    tau = cfg.sid_threshold if threshold is None else threshold
    cache: dict[str, np.ndarray] = {}
    scores = {}
    for p in profiles:
        if p.feature not in cache:
            cache[p.feature] = FEATURES[p.feature](clip, cfg)
        scores[p.identity] = max(scores.get(p.identity, -1.0),
                                 cosine(cache[p.feature], np.asarray(p.centroid)))
    return SidVerdict(frozenset(i for i, s in scores.items() if s >= tau), scores)


def random_projection_sid(
    clip: AudioClip,
    profiles: Sequence[SpeakerProfile],
    threshold: float | None = None,
    cfg: FeatureConfig = DEFAULT_CONFIG,
) -> SidVerdict:
    """Negative control: profiles must have been enrolled with ``feature="random_projection"``."""
    if any(p.feature != "random_projection" for p in profiles):
        raise ValueError("random_projection_sid needs random_projection profiles")
    return cosine_sid(clip, profiles, threshold, cfg)


def _gate_score(margin: float) -> float:
    return float(expit(2.0 * margin))


def prosody_emotion(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> EmotionVerdict:
    level = rms_dbfs(clip)
    pitch = pitch_track(clip, cfg)
    var = float(np.var(pitch)) if len(pitch) > 1 else 0.0
    loud_margin = (level - cfg.loud_dbfs) / cfg.loud_scale_db
    var_margin = math.log10(max(var, 1e-12) / cfg.pitch_var_hz2)
    margin = min(loud_margin, var_margin)
    angry = level > cfg.loud_dbfs and var > cfg.pitch_var_hz2
    return EmotionVerdict(ANGRY if angry else NOT_ANGRY, _gate_score(margin))


def energy_profile(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> tuple[float, float]:
    """(fraction of raised-voice frames, variance of frame level in dB^2)."""
    db = frame_db(frames(clip.samples, clip.sample_rate, cfg.frame_ms, cfg.hop_ms))
    return float(np.mean(db > cfg.raised_frame_dbfs)), float(np.var(db))


def conflict_heuristic(clip: AudioClip, cfg: FeatureConfig = DEFAULT_CONFIG) -> ConflictVerdict:
    ratio, var = energy_profile(clip, cfg)
    in_conflict = ratio >= cfg.raised_ratio and var >= cfg.energy_var_db2
    margin = min(
        (ratio - cfg.raised_ratio) / 0.1,
        math.log10(max(var, 1e-12) / cfg.energy_var_db2),
    )
    return ConflictVerdict(in_conflict, _gate_score(margin))


def baseline_contract(cfg: FeatureConfig = DEFAULT_CONFIG, degraded_sid: bool = False) -> DetectorContract:
    sid = random_projection_sid if degraded_sid else cosine_sid
    return DetectorContract(
        vad=lambda clip: energy_zcr_vad(clip, cfg),
        sid=lambda clip, enrolled: sid(clip, enrolled, cfg=cfg),
        emotion=lambda clip: prosody_emotion(clip, cfg),
        conflict=lambda clip: conflict_heuristic(clip, cfg),
    )


__all__ = [
    "FeatureConfig", "SpeakerProfile", "EmptyEnrollment", "SILENCE_DBFS",
    "energy_zcr_vad", "enroll", "cosine_sid", "random_projection_sid",
    "prosody_emotion", "conflict_heuristic", "baseline_contract",
    "cepstral_mean", "random_projection_mean", "pitch_track", "energy_profile",
    "load_profiles", "save_profiles", "cosine",
]
