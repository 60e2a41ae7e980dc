"""Synthetic in-home acoustics: deamplification, household noise, reverberation.

A :class:`DistortionSpec` fully describes one treatment. Specs are drawn from
a seed by :func:`sample_distortion` and applied by :func:`compose_distortion`
in the fixed order deamplify -> overlay noise -> reverberate.

All continuous spec fields are rounded to 6 significant digits when drawn, so
a spec read back from a manifest reproduces the same audio bit for bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from .audio import (
    DEFAULT_WINDOW_SECONDS,
    AudioClip,
    RateMismatch,
    apply_gain_db,
    clip_guard,
    db_to_gain,
    load_wav,
    save_wav,
)
from .records import read_jsonl, sig6, write_jsonl
from .samples import (
    ALL_THREE,
    CLEAN,
    DEAMP_NOISE,
    PROTOCOL_CONDITIONS,
    REVERB,
    LabeledSample,
    resolve,
)

MAX_DEAMP_DB = 12.0
MAX_DECAY = 0.95

# Schroeder network delay table (milliseconds).
COMB_DELAYS_MS = (29.7, 37.1, 41.1, 43.7)
ALLPASS_DELAYS_MS = (5.0, 1.7)

HOUSEHOLD_EVENTS = (
    "(object) rustling",
    "(object) snapping",
    "cupboard",
    "cutlery",
    "dishes",
    "drawers",
    "glass jingling",
    "object impact",
    "people walking",
    "washing dishes",
    "water tap running",
)


class RealismError(ValueError):
    pass


class OutOfRangeM(RealismError):
    pass


class SegmentOutOfBounds(RealismError):
    pass


class EmptyCatalog(RealismError):
    pass


@dataclass(frozen=True)
class ReverbParams:
    r: float
    d: float
    f: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.r <= 1.0:
            raise RealismError(f"wet/dry ratio r={self.r} outside [0, 1]")
        if not 0.0 <= self.d <= 1.0:
            raise RealismError(f"diffusion d={self.d} outside [0, 1]")
        if not 0.0 <= self.f < 1.0:
            raise RealismError(f"decay f={self.f} outside [0, 1)")


@dataclass(frozen=True)
class NoiseRef:
    entry_id: str
    offset_s: float
    gain_db: float = 0.0


@dataclass(frozen=True)
class DistortionSpec:
    """One realism treatment. ``gain_db`` is stored negative (-m)."""

    gain_db: Optional[float] = None
    noise: Optional[NoiseRef] = None
    reverb: Optional[ReverbParams] = None
    seed: Optional[int] = None
    kind: str = CLEAN

    def __post_init__(self) -> None:
        if self.gain_db is not None and not -MAX_DEAMP_DB < self.gain_db < 0.0:
            raise OutOfRangeM(f"deamplification {-self.gain_db} dB outside (0, 12)")

    @property
    def is_clean(self) -> bool:
        return self.gain_db is None and self.noise is None and self.reverb is None

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"kind": self.kind, "seed": self.seed}
        rec["gain_db"] = None if self.gain_db is None else sig6(self.gain_db)
        if self.noise is None:
            rec["noise"] = None
        else:
            rec["noise"] = {
                "entry_id": self.noise.entry_id,
                "offset_s": sig6(self.noise.offset_s),
                "gain_db": sig6(self.noise.gain_db),
            }
        if self.reverb is None:
            rec["reverb"] = None
        else:
            rec["reverb"] = {k: sig6(getattr(self.reverb, k)) for k in ("r", "d", "f")}
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DistortionSpec":
        noise = rec.get("noise")
        reverb = rec.get("reverb")
        return cls(
            gain_db=rec.get("gain_db"),
            noise=None if noise is None else NoiseRef(
                noise["entry_id"], float(noise["offset_s"]), float(noise.get("gain_db", 0.0))
            ),
            reverb=None if reverb is None else ReverbParams(reverb["r"], reverb["d"], reverb["f"]),
            seed=rec.get("seed"),
            kind=rec.get("kind", CLEAN),
        )


@dataclass(frozen=True)
class NoiseEntry:
    clip_id: str
    event_tag: str
    path: str
    duration: float


class NoiseCatalog:
    """Household-noise sources indexed by clip id.

    Entries either point at WAV files (resolved against ``root``) or carry an
    in-memory clip supplied through ``clips``.
    """

    def __init__(
        self,
        entries: Sequence[NoiseEntry],
        root: str | Path = ".",
        clips: dict[str, AudioClip] | None = None,
        vocabulary: Iterable[str] = HOUSEHOLD_EVENTS,
        min_duration: float = DEFAULT_WINDOW_SECONDS,
    ):
        self.vocabulary = tuple(vocabulary)
        self.root = Path(root)
        self._clips = dict(clips or {})
        seen = set()
        for e in entries:
            if e.clip_id in seen:
                raise RealismError(f"duplicate noise clip id {e.clip_id!r}")
            seen.add(e.clip_id)
            if e.event_tag not in self.vocabulary:
                raise RealismError(f"{e.clip_id}: event tag {e.event_tag!r} not in vocabulary")
            if e.duration < min_duration:
                raise RealismError(f"{e.clip_id}: {e.duration} s is shorter than {min_duration} s")
        self.entries = sorted(entries, key=lambda e: e.clip_id)
        self._by_id = {e.clip_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, clip_id: str) -> NoiseEntry:
        try:
            return self._by_id[clip_id]
        except KeyError:
            raise RealismError(f"noise clip {clip_id!r} not in catalog") from None

    def clip(self, clip_id: str) -> AudioClip:
        if clip_id not in self._clips:
            e = self.entry(clip_id)
            self._clips[clip_id] = load_wav(resolve_path(e.path, self.root), id=clip_id)
        return self._clips[clip_id]

    @classmethod
    def from_clips(cls, clips: dict[str, tuple[str, AudioClip]], **kw) -> "NoiseCatalog":
        """Build from ``{clip_id: (event_tag, clip)}``."""
        entries = [
            NoiseEntry(cid, tag, "", len(c) / c.sample_rate) for cid, (tag, c) in clips.items()
        ]
        return cls(entries, clips={cid: c for cid, (_, c) in clips.items()}, **kw)

    @classmethod
    def load(cls, index_path: str | Path, **kw) -> "NoiseCatalog":
        index_path = Path(index_path)
        entries = [
            NoiseEntry(str(r["clip_id"]), r["event_tag"], r["path"], float(r["duration"]))
            for r in read_jsonl(index_path)
        ]
        return cls(entries, root=index_path.parent, **kw)

    def save_index(self, index_path: str | Path) -> None:
        write_jsonl(index_path, (
            {"clip_id": e.clip_id, "event_tag": e.event_tag, "path": e.path, "duration": e.duration}
            for e in self.entries
        ))


def resolve_path(p: str, root: Path) -> Path:
    path = Path(p)
    return path if path.is_absolute() else root / path


def deamplify(clip: AudioClip, m: float) -> AudioClip:
    if not 0.0 < m < MAX_DEAMP_DB:
        raise OutOfRangeM(f"m={m} dB outside (0, 12)")
    return apply_gain_db(clip, -m)


def overlay_noise(
    clip: AudioClip, noise: AudioClip, offset_s: float, noise_gain_db: float = 0.0
) -> AudioClip:
    """Add a same-length segment of ``noise`` starting at ``offset_s``."""
    if clip.sample_rate != noise.sample_rate:
        raise RateMismatch(f"clip at {clip.sample_rate} Hz, noise at {noise.sample_rate} Hz")
    start = int(round(offset_s * noise.sample_rate))
    end = start + len(clip)
    if start < 0 or end > len(noise):
        raise SegmentOutOfBounds(
            f"noise segment [{start}, {end}) outside source of {len(noise)} samples"
        )
    seg = noise.samples[start:end]
    if noise_gain_db:
        seg = seg * db_to_gain(noise_gain_db)
    return clip.with_samples(clip_guard(clip.samples + seg))


def delay_samples(ms: float, sample_rate: int) -> int:
    return max(1, int(round(ms * sample_rate / 1000.0)))


def comb_gains(f: float, delays: Sequence[int]) -> list[float]:
    """Feedback gain per comb: f for the shortest delay, f**(D/Dmin) otherwise.

    Scaling by delay length gives every comb the same decay per second.
    """
    dmin = min(delays)
    return [f ** (d / dmin) if f > 0 else 0.0 for d in delays]


def _feedback(u: np.ndarray, delay: int, g: float) -> np.ndarray:
    """y[n] = u[n] + g*y[n-D], solved one D-sample block at a time."""
    y = np.array(u, dtype=np.float64, copy=True)
    n = len(y)
    for start in range(delay, n, delay):
        stop = min(start + delay, n)
        y[start:stop] += g * y[start - delay:stop - delay]
    return y


def _delayed(x: np.ndarray, delay: int) -> np.ndarray:
    out = np.zeros(len(x))
    if delay < len(x):
        out[delay:] = x[:len(x) - delay]
    return out


def _comb(x: np.ndarray, delay: int, g: float) -> np.ndarray:
    # y[n] = x[n-D] + g*y[n-D]
    return _feedback(_delayed(x, delay), delay, g)


def _allpass(x: np.ndarray, delay: int, d: float) -> np.ndarray:
    # y[n] = -d*x[n] + x[n-M] + d*y[n-M]
    return _feedback(_delayed(x, delay) - d * x, delay, d)


def wet_path(samples: np.ndarray, p: ReverbParams, sample_rate: int) -> np.ndarray:
    combs = [delay_samples(ms, sample_rate) for ms in COMB_DELAYS_MS]
    gains = comb_gains(p.f, combs)
    acc = np.zeros(len(samples))
    for delay, g in zip(combs, gains):
        acc += _comb(samples, delay, g)
    y = acc / len(combs)
    for ms in ALLPASS_DELAYS_MS:
        y = _allpass(y, delay_samples(ms, sample_rate), p.d)
    return y


def reverberate(clip: AudioClip, p: ReverbParams) -> AudioClip:
    """Schroeder reverb mixed as (1-r)*dry + r*wet, tail truncated."""
    if p.r == 0:
        return clip
    wet = wet_path(clip.samples, p, clip.sample_rate)
    return clip.with_samples(clip_guard((1.0 - p.r) * clip.samples + p.r * wet))


def _draw_m(rng: np.random.Generator) -> float:
    while True:
        m = sig6(MAX_DEAMP_DB * rng.random())
        if 0.0 < m < MAX_DEAMP_DB:
            return m


def sample_distortion(
    rng_seed: int,
    catalog: NoiseCatalog | None,
    kind: str,
    window_seconds: float = DEFAULT_WINDOW_SECONDS,
    noise_gain_db: float = 0.0,
) -> DistortionSpec:
    """Draw a reproducible spec for one protocol condition.

    The same six uniforms are consumed for every kind, so the deamp+noise and
    reverb parts of an ``all_three`` draw equal the draws for ``deamp_noise``
    and ``reverb`` under the same seed. Noise offsets are whole milliseconds.
    """
    if kind not in PROTOCOL_CONDITIONS:
        raise RealismError(f"unknown condition {kind!r}")
    rng = np.random.default_rng(rng_seed)
    m = _draw_m(rng)
    u_entry, u_offset = rng.random(), rng.random()
    r, d = sig6(rng.random()), sig6(rng.random())
    f = sig6(MAX_DECAY * rng.random())

    if kind == CLEAN:
        return DistortionSpec(seed=rng_seed, kind=kind)

    gain_db = noise = reverb = None
    if kind in (DEAMP_NOISE, ALL_THREE):
        if not catalog:
            raise EmptyCatalog("noise-bearing condition needs a nonempty noise catalog")
        entry = catalog.entries[min(int(u_entry * len(catalog)), len(catalog) - 1)]
        max_start_ms = math.floor((entry.duration - window_seconds) * 1000 + 1e-9)
        offset_ms = min(int(u_offset * (max_start_ms + 1)), max_start_ms)
        gain_db = -m
        noise = NoiseRef(entry.clip_id, offset_ms / 1000.0, noise_gain_db)
    if kind in (REVERB, ALL_THREE):
        reverb = ReverbParams(r, d, f)
    return DistortionSpec(gain_db=gain_db, noise=noise, reverb=reverb, seed=rng_seed, kind=kind)


def compose_distortion(
    clip: AudioClip, spec: DistortionSpec, catalog: NoiseCatalog | None = None
) -> AudioClip:
    out = clip
    if spec.gain_db is not None:
        out = deamplify(out, -spec.gain_db)
    if spec.noise is not None:
        if catalog is None:
            raise EmptyCatalog("spec references noise but no catalog was given")
        out = overlay_noise(
            out, catalog.clip(spec.noise.entry_id), spec.noise.offset_s, spec.noise.gain_db
        )
    if spec.reverb is not None:
        out = reverberate(out, spec.reverb)
    return out


def derive_seed(seed: int, index: int) -> int:
    """Per-sample seed, independent of processing order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


@dataclass
class ProtocolDataset:
    """Four equal-size condition sets derived from the same clean originals."""

    sets: dict[str, list[tuple[LabeledSample, Optional[DistortionSpec]]]] = field(
        default_factory=lambda: {c: [] for c in PROTOCOL_CONDITIONS}
    )
    seed: Optional[int] = None

    def __len__(self) -> int:
        return sum(len(v) for v in self.sets.values())

    def items(self) -> list[tuple[LabeledSample, Optional[DistortionSpec], str]]:
        """All (sample, spec, source_id) triples, condition-major."""
        out = []
        for cond in PROTOCOL_CONDITIONS:
            for sample, spec in self.sets[cond]:
                out.append((sample, spec, _source_of(sample.sample_id)))
        return out

    def samples(self) -> list[LabeledSample]:
        return [s for s, _, _ in self.items()]


_SEP = "__"


def _source_of(sample_id: str) -> str:
    return sample_id.rsplit(_SEP, 1)[0]


def build_protocol_dataset(
    clean: Sequence[LabeledSample],
    catalog: NoiseCatalog,
    rng_seed: int,
    window_seconds: float = DEFAULT_WINDOW_SECONDS,
) -> ProtocolDataset:
    """Pair every clean sample with one spec per condition.

    For sample ``i`` a single ``all_three`` draw is made from the derived seed;
    the deamp+noise copy uses its gain and noise, the reverb copy its reverb,
    and the all-three copy both, so the all-three set carries the same
    reverberation as the reverb-only set.
    """
    ds = ProtocolDataset(seed=rng_seed)
    seen = set()
    for i, sample in enumerate(clean):
        if sample.sample_id in seen:
            raise RealismError(f"duplicate clean sample id {sample.sample_id!r}")
        seen.add(sample.sample_id)
        full = sample_distortion(derive_seed(rng_seed, i), catalog, ALL_THREE, window_seconds)
        parts = {
            CLEAN: None,
            DEAMP_NOISE: replace(full, reverb=None, kind=DEAMP_NOISE),
            REVERB: replace(full, gain_db=None, noise=None, kind=REVERB),
            ALL_THREE: full,
        }
        for cond, spec in parts.items():
            labeled = sample.relabel(sample_id=f"{sample.sample_id}{_SEP}{cond}", condition=cond)
            ds.sets[cond].append((labeled, spec))
    return ds


def manifest_record(
    sample: LabeledSample, spec: Optional[DistortionSpec], source_id: str
) -> dict[str, Any]:
    rec = sample.to_record()
    rec["source_id"] = source_id
    rec["spec"] = None if spec is None else spec.to_record()
    return rec


def read_manifest(path: str | Path) -> list[tuple[LabeledSample, Optional[DistortionSpec], str]]:
    out = []
    for rec in read_jsonl(path):
        spec = rec.get("spec")
        out.append((
            LabeledSample.from_record(rec),
            None if spec is None else DistortionSpec.from_record(spec),
            rec.get("source_id", rec["sample_id"]),
        ))
    return out


def write_protocol(
    dataset: ProtocolDataset,
    catalog: NoiseCatalog,
    clean_root: str | Path,
    out_dir: str | Path,
    load_clip: Callable[[Path], AudioClip] = load_wav,
    window_seconds: float = DEFAULT_WINDOW_SECONDS,
) -> Path:
    """Render every protocol sample to WAV and write ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)

    @lru_cache(maxsize=None)
    def source_clip(path: str) -> AudioClip:
        return load_clip(Path(path))

    originals = {
        s.sample_id: s for s, spec, _ in dataset.items() if s.condition == CLEAN
    }
    records = []
    for sample, spec, source_id in dataset.items():
        original = originals[source_id + _SEP + CLEAN]
        clip = source_clip(str(resolve(original, clean_root)))
        want = window_seconds * clip.sample_rate
        if len(clip) != want:
            raise RealismError(
                f"{source_id}: clean sample has {len(clip)} samples, expected {int(want)}"
            )
        rendered = clip if spec is None else compose_distortion(clip, spec, catalog)
        rel = Path("clips") / f"{sample.sample_id}.wav"
        save_wav(rendered, out_dir / rel)
        records.append(manifest_record(sample.relabel(path=rel.as_posix()), spec, source_id))
    manifest = out_dir / "manifest.jsonl"
    write_jsonl(manifest, records)
    return manifest


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
