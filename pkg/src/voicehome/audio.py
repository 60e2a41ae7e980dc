"""Mono PCM clips, WAV I/O, fixed-length windowing and level arithmetic.

Everything downstream passes :class:`AudioClip` values around. Clips are
immutable: the sample buffer is a read-only float64 array, so a clip can be
shared between threads without copying.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile

CANONICAL_RATE = 16000
DEFAULT_WINDOW_SECONDS = 5
SILENCE_DBFS = -300.0

PathLike = Union[str, Path]


class AudioError(Exception):
    """Base class for audio-layer failures."""


class UnsupportedFormat(AudioError):
    pass


class CorruptHeader(AudioError):
    pass


class EmptyClip(AudioError, ValueError):
    pass


class RateMismatch(AudioError, ValueError):
    pass


class IoFailure(AudioError, OSError):
    pass


@dataclass(frozen=True, eq=False)
class AudioClip:
    """A mono buffer of float samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self) -> None:
        arr = np.array(self.samples, dtype=np.float64, copy=True)
        if arr.ndim != 1:
            raise ValueError(f"clip must be mono (1-D), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("clip contains NaN or infinite samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_seconds(self) -> Fraction:
        return Fraction(len(self.samples), self.sample_rate)

    def with_samples(self, samples: np.ndarray, id: str | None = None) -> "AudioClip":
        return AudioClip(samples, self.sample_rate, self.id if id is None else id)

    def same_as(self, other: "AudioClip") -> bool:
        """Bit-exact equality of rate and samples (ids are ignored)."""
        return (
            self.sample_rate == other.sample_rate
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True)
class WindowConfig:
    window_seconds: Fraction = field(default_factory=lambda: Fraction(DEFAULT_WINDOW_SECONDS))
    tail_policy: str = "drop_partial"

    def __post_init__(self) -> None:
        ws = _as_fraction(self.window_seconds)
        if ws <= 0:
            raise ValueError("window_seconds must be positive")
        if self.tail_policy != "drop_partial":
            raise ValueError(f"unsupported tail policy {self.tail_policy!r}")
        object.__setattr__(self, "window_seconds", ws)

    def window_samples(self, sample_rate: int) -> int:
        n = self.window_seconds * sample_rate
        if n.denominator != 1:
            raise ValueError(
                f"{self.window_seconds} s at {sample_rate} Hz is not a whole number of samples"
            )
        return int(n)


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def clip_guard(samples: np.ndarray) -> np.ndarray:
    """Hard-clip to [-1, 1] (saturating overflow guard)."""
    return np.clip(samples, -1.0, 1.0)


def load_wav(path: PathLike, id: str | None = None) -> AudioClip:
    """Read a mono PCM WAV file (8/16/24/32-bit int or 32-bit float).

    Integer formats are scaled so that the most negative code maps to -1.0;
    16-bit code 32767 therefore loads as 32767/32768.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(head) < 12 or head[:4] not in (b"RIFF", b"RIFX") or head[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise UnsupportedFormat(f"{path}: {msg}") from exc
        raise CorruptHeader(f"{path}: {msg}") from exc
    except (EOFError, OSError, IndexError, TypeError, struct.error) as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc

    if data.ndim != 1:
        raise UnsupportedFormat(f"{path}: {data.shape[1]} channels, only mono is supported")

    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit data into int32
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        samples = clip_guard(data.astype(np.float64))
    else:
        raise UnsupportedFormat(f"{path}: sample type {data.dtype} not supported")
    return AudioClip(samples, int(rate), path.stem if id is None else id)


def quantize_16(samples: np.ndarray) -> np.ndarray:
    """Round-to-nearest 16-bit quantization with saturation."""
    codes = np.rint(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(codes, -32768, 32767).astype(np.int16)


def save_wav(clip: AudioClip, path: PathLike, bit_depth: int = 16) -> None:
    if bit_depth != 16:
        raise UnsupportedFormat(f"only 16-bit output is supported, got {bit_depth}")
    path = Path(path)
    try:
        wavfile.write(path, clip.sample_rate, quantize_16(clip.samples))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def slice_windows(clip: AudioClip, cfg: WindowConfig | None = None) -> list[AudioClip]:
    """Cut a clip into contiguous fixed-length windows; a short tail is dropped."""
    cfg = cfg or WindowConfig()
    n = cfg.window_samples(clip.sample_rate)
    count = len(clip) // n
    return [
        AudioClip(clip.samples[k * n:(k + 1) * n], clip.sample_rate, f"{clip.id}#{k:04d}")
        for k in range(count)
    ]


def rms_dbfs(clip: AudioClip) -> float:
    """RMS level in dBFS; all-zero input returns ``SILENCE_DBFS``."""
    if len(clip) == 0:
        raise EmptyClip("rms of an empty clip is undefined")
    return samples_dbfs(clip.samples)


def samples_dbfs(samples: np.ndarray) -> float:
    ms = float(np.mean(np.square(samples)))
    if ms <= 0.0:
        return SILENCE_DBFS
    return max(10.0 * math.log10(ms), SILENCE_DBFS)


def db_to_gain(gain_db: float) -> float:
    return 10.0 ** (gain_db / 20.0)


def apply_gain_db(clip: AudioClip, gain_db: float) -> AudioClip:
    if gain_db == 0:
        return clip
    return clip.with_samples(clip_guard(clip.samples * db_to_gain(gain_db)))


def concat(clips: list[AudioClip], id: str = "") -> AudioClip:
    if not clips:
        raise EmptyClip("nothing to concatenate")
    rate = clips[0].sample_rate
    if any(c.sample_rate != rate for c in clips):
        raise RateMismatch("cannot concatenate clips with different sample rates")
    return AudioClip(np.concatenate([c.samples for c in clips]), rate, id)
