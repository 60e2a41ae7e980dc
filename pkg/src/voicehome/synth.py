"""Seeded synthetic fixtures: persona speech, pauses, household noise.

The voices are source-filter toys (pulse train through formant resonators
with a syllabic envelope). They are only meant to exercise the harness:
personas differ in pitch and vocal-tract length so the baseline SID has
something to separate, and "angry" speech is louder with wide pitch swings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .audio import CANONICAL_RATE, AudioClip, clip_guard, save_wav
from .realism import HOUSEHOLD_EVENTS, NoiseCatalog, NoiseEntry
from .samples import ANGRY, CAREGIVER, NOT_ANGRY, PATIENT, LabeledSample, write_labels

# Reference vowel formants (Hz) for a long vocal tract.
VOWELS = (
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (300.0, 870.0, 2240.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
)
BANDWIDTHS = (90.0, 110.0, 170.0)


@dataclass(frozen=True)
class Persona:
    name: str
    f0: float
    tract_scale: float
    breathiness: float = 0.02


PERSONAS = {
    CAREGIVER: Persona(CAREGIVER, f0=110.0, tract_scale=1.0),
    PATIENT: Persona(PATIENT, f0=215.0, tract_scale=1.22),
    "visitor": Persona("visitor", f0=160.0, tract_scale=1.1, breathiness=0.05),
}


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return lfilter(b, a, x)


def _pulse_train(f0_track: np.ndarray, sr: int) -> np.ndarray:
    phase = np.cumsum(f0_track / sr)
    pulses = np.zeros_like(f0_track)
    idx = np.nonzero(np.diff(np.floor(phase), prepend=0.0) > 0)[0]
    pulses[idx] = 1.0
    return pulses


def _normalize_rms(x: np.ndarray, level_dbfs: float) -> np.ndarray:
    rms = np.sqrt(np.mean(x ** 2))
    if rms == 0:
        return x
    return x * (10 ** (level_dbfs / 20) / rms)


def speech(
    persona: Persona,
    seconds: float,
    rng: np.random.Generator,
    sr: int = CANONICAL_RATE,
    angry: bool = False,
    level_dbfs: float | None = None,
    pause_fraction: float = 0.25,
) -> np.ndarray:
    """Syllable-rate modulated voiced speech for one persona."""
    n = int(round(seconds * sr))
    out = np.zeros(n)
    syl_rate = 5.5 if angry else 4.0
    t = int(rng.uniform(0.0, 0.15) * sr)
    while t < n:
        syl = int(rng.uniform(0.7, 1.3) / syl_rate * sr)
        gap = int(rng.uniform(0.02, 0.08) * sr)
        if rng.random() < pause_fraction * 0.3:
            gap += int(rng.uniform(0.2, 0.5) * sr)
        end = min(t + syl, n)
        length = end - t
        if length > 16:
            base = persona.f0 * (1.35 if angry else 1.0) * rng.uniform(0.93, 1.07)
            excursion = (0.35 if angry else 0.06) * base
            shape = np.sin(np.linspace(0, np.pi * rng.uniform(0.5, 2.0), length) + rng.uniform(0, np.pi))
            f0 = base + excursion * shape
            f0 *= 1.0 + 0.01 * rng.standard_normal(length).cumsum() / np.sqrt(length)
            src = _pulse_train(f0, sr)
            src = src + persona.breathiness * rng.standard_normal(length)
            vowel = VOWELS[rng.integers(len(VOWELS))]
            seg = np.zeros(length)
            for k, (fm, bw) in enumerate(zip(vowel, BANDWIDTHS)):
                seg += _resonator(src, fm * persona.tract_scale, bw, sr) * (0.6 ** k)
            env = np.sin(np.linspace(0, np.pi, length)) ** 0.6
            out[t:end] = seg * env
        t = end + gap
    level = level_dbfs if level_dbfs is not None else (-12.0 if angry else -26.0)
    return _normalize_rms(out, level)


def room_tone(seconds: float, rng: np.random.Generator, sr: int = CANONICAL_RATE,
              level_dbfs: float = -70.0) -> np.ndarray:
    """Very quiet low-passed hiss standing in for a pause."""
    n = int(round(seconds * sr))
    sos = butter(2, 2000, fs=sr, output="sos")
    return _normalize_rms(sosfilt(sos, rng.standard_normal(n)), level_dbfs)


def conflict_exchange(seconds: float, rng: np.random.Generator, sr: int = CANONICAL_RATE) -> np.ndarray:
    """Two personas shouting over each other with abrupt turn changes."""
    n = int(round(seconds * sr))
    a = speech(PERSONAS[CAREGIVER], seconds, rng, sr, angry=True, level_dbfs=-10.0, pause_fraction=0)
    b = speech(PERSONAS[PATIENT], seconds, rng, sr, angry=True, level_dbfs=-10.0, pause_fraction=0)
    gate = np.zeros(n)
    t = 0
    turn = 0
    while t < n:
        dur = int(rng.uniform(0.4, 0.9) * sr)
        gate[t:t + dur] = turn
        turn ^= 1
        t += dur
    mix = np.where(gate > 0, a + 0.3 * b, b + 0.3 * a)
    return _normalize_rms(mix, -10.0)


def _bandnoise(n: int, lo: float, hi: float, rng: np.random.Generator, sr: int) -> np.ndarray:
    sos = butter(4, [lo, hi], btype="band", fs=sr, output="sos")
    return sosfilt(sos, rng.standard_normal(n))


def _decaying_tones(n: int, rng: np.random.Generator, sr: int, lo: float, hi: float,
                    rate: float, decay_s: float) -> np.ndarray:
    out = np.zeros(n)
    t = np.arange(int(decay_s * 5 * sr)) / sr
    for _ in range(rng.poisson(rate * n / sr) + 1):
        start = rng.integers(0, n)
        freqs = rng.uniform(lo, hi, size=3)
        hit = sum(np.sin(2 * np.pi * f * t) for f in freqs) * np.exp(-t / decay_s)
        end = min(n, start + len(hit))
        out[start:end] += hit[:end - start] * rng.uniform(0.5, 1.0)
    return out


def _thumps(n: int, rng: np.random.Generator, sr: int, period: float | None, rate: float) -> np.ndarray:
    out = np.zeros(n)
    t = np.arange(int(0.15 * sr)) / sr
    thump = np.sin(2 * np.pi * 70 * t) * np.exp(-t / 0.03)
    if period:
        starts = np.arange(int(rng.uniform(0, period) * sr), n, int(period * sr))
    else:
        starts = rng.integers(0, n, size=rng.poisson(rate * n / sr) + 1)
    for s in starts:
        end = min(n, s + len(thump))
        out[s:end] += thump[:end - s]
    return out


def household_noise(tag: str, seconds: float, rng: np.random.Generator,
                    sr: int = CANONICAL_RATE, level_dbfs: float = -38.0) -> np.ndarray:
    n = int(round(seconds * sr))
    if tag == "(object) rustling":
        env = np.repeat(rng.random(n // 1600 + 1) > 0.5, 1600)[:n]
        x = _bandnoise(n, 2000, 7000, rng, sr) * env
    elif tag == "(object) snapping":
        x = _decaying_tones(n, rng, sr, 3000, 7000, 3.0, 0.004)
    elif tag == "cupboard":
        x = _thumps(n, rng, sr, None, 0.8) + 0.2 * _bandnoise(n, 300, 900, rng, sr)
    elif tag == "cutlery":
        x = _decaying_tones(n, rng, sr, 3000, 6500, 4.0, 0.05)
    elif tag == "dishes":
        x = _decaying_tones(n, rng, sr, 1500, 4500, 3.0, 0.08)
    elif tag == "drawers":
        slide = _bandnoise(n, 400, 3000, rng, sr) * np.repeat(rng.random(n // 8000 + 1) > 0.6, 8000)[:n]
        x = slide + _thumps(n, rng, sr, None, 0.5)
    elif tag == "glass jingling":
        x = _decaying_tones(n, rng, sr, 2500, 6000, 5.0, 0.12)
    elif tag == "object impact":
        x = _thumps(n, rng, sr, None, 1.2) + 0.3 * _decaying_tones(n, rng, sr, 800, 3000, 1.2, 0.02)
    elif tag == "people walking":
        x = _thumps(n, rng, sr, rng.uniform(0.45, 0.6), 0.0)
    elif tag == "washing dishes":
        x = _bandnoise(n, 1000, 6000, rng, sr) + 2.0 * _decaying_tones(n, rng, sr, 1500, 4500, 2.0, 0.06)
    elif tag == "water tap running":
        x = _bandnoise(n, 800, 7000, rng, sr)
    else:
        raise ValueError(f"no synthetic recipe for event {tag!r}")
    return _normalize_rms(x, level_dbfs)


def white_noise(seconds: float, level_dbfs: float, rng: np.random.Generator,
                sr: int = CANONICAL_RATE) -> np.ndarray:
    return _normalize_rms(rng.standard_normal(int(round(seconds * sr))), level_dbfs)


def harmonic_complex(seconds: float, f0: float = 150.0, am_hz: float = 4.0,
                     level_dbfs: float = -20.0, sr: int = CANONICAL_RATE,
                     n_harmonics: int = 10) -> np.ndarray:
    """Harmonics of ``f0`` with 1/k rolloff, amplitude-modulated at ``am_hz``."""
    t = np.arange(int(round(seconds * sr))) / sr
    x = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, n_harmonics + 1))
    env = 0.5 * (1 - np.cos(2 * np.pi * am_hz * t))
    return _normalize_rms(x * env, level_dbfs)


WINDOW_KINDS = ("caregiver", "patient", "visitor", "pause", "angry_caregiver", "angry_patient",
                "conflict")
SPEAKER_KINDS = ("caregiver", "patient")


def window(kind: str, rng: np.random.Generator, seconds: float = 5.0,
           sr: int = CANONICAL_RATE) -> tuple[np.ndarray, dict]:
    """One labelled window. ``kind`` in {caregiver, patient, visitor, pause,
    angry_caregiver, angry_patient, conflict}."""
    labels = {"is_speech": True, "speakers": [], "emotion": NOT_ANGRY, "conflict": False}
    if kind == "pause":
        labels["is_speech"] = False
        x = room_tone(seconds, rng, sr)
    elif kind == "conflict":
        x = conflict_exchange(seconds, rng, sr)
        labels.update(speakers=[CAREGIVER, PATIENT], emotion=ANGRY, conflict=True)
    elif kind.startswith("angry_"):
        who = kind[len("angry_"):]
        x = speech(PERSONAS[who], seconds, rng, sr, angry=True)
        labels.update(speakers=[who], emotion=ANGRY)
    elif kind in PERSONAS:
        x = speech(PERSONAS[kind], seconds, rng, sr)
        if kind != "visitor":
            labels["speakers"] = [kind]
    else:
        raise ValueError(f"unknown window kind {kind!r}")
    return clip_guard(x + room_tone(seconds, rng, sr)), labels


def labelled_windows(
    kinds: Sequence[str], seed: int, prefix: str = "w", home_id: str = "home1",
    seconds: float = 5.0, sr: int = CANONICAL_RATE,
) -> list[tuple[LabeledSample, AudioClip]]:
    out = []
    for i, kind in enumerate(kinds):
        rng = np.random.default_rng([seed, i])
        x, lab = window(kind, rng, seconds, sr)
        sid = f"{prefix}{i:04d}"
        sample = LabeledSample(
            sample_id=sid, path=f"{sid}.wav", is_speech=lab["is_speech"],
            speakers=frozenset(lab["speakers"]), emotion=lab["emotion"],
            conflict=lab["conflict"], home_id=home_id,
        )
        out.append((sample, AudioClip(x, sr, sid)))
    return out


def vad_session_kinds(n: int, seed: int, pause_share: float = 1 / 3) -> list[str]:
    """One talker with deliberate long pauses, as in a VAD collection session."""
    rng = np.random.default_rng(seed)
    n_pause = int(round(n * pause_share))
    kinds = [CAREGIVER] * (n - n_pause) + ["pause"] * n_pause
    rng.shuffle(kinds)
    return kinds


def noise_catalog(seed: int, seconds: float = 12.0, sr: int = CANONICAL_RATE,
                  per_event: int = 1) -> NoiseCatalog:
    clips = {}
    for j, tag in enumerate(HOUSEHOLD_EVENTS):
        for k in range(per_event):
            rng = np.random.default_rng([seed, j, k])
            cid = f"noise{j:02d}_{k}"
            clips[cid] = (tag, AudioClip(household_noise(tag, seconds, rng, sr), sr, cid))
    return NoiseCatalog.from_clips(clips)


def write_corpus(out_dir: str | Path, pairs: Sequence[tuple[LabeledSample, AudioClip]]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sample, clip in pairs:
        save_wav(clip, out_dir / sample.path)
    labels = out_dir / "labels.jsonl"
    write_labels(labels, [s for s, _ in pairs])
    return labels


def write_noise_catalog(out_dir: str | Path, catalog: NoiseCatalog) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in catalog.entries:
        rel = f"{e.clip_id}.wav"
        save_wav(catalog.clip(e.clip_id), out_dir / rel)
        entries.append(NoiseEntry(e.clip_id, e.event_tag, rel, e.duration))
    index = out_dir / "index.jsonl"
    NoiseCatalog(entries, root=out_dir).save_index(index)
    return index
