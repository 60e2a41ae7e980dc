"""Scoring protocols for each pipeline stage and report rendering.

Every report row stores its confusion counts; the metric value is always
recomputed from them, never stored separately.
"""

from __future__ import annotations

import csv
import io
import re
import zlib
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .pipeline import PipelineDecision
from .samples import ANGRY, CONDITIONS, IDENTITIES, LabeledSample

UNDEFINED = "undefined"

FLAG_IMBALANCED = "imbalanced"
FLAG_NO_POSITIVES = "no_predicted_anger"


class EvaluationError(ValueError):
    pass


class EmptyCounts(EvaluationError):
    pass


class UndefinedMetric(EvaluationError):
    pass


class MissingPrediction(EvaluationError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"no prediction for sample {sample_id!r}")


class MissingLabel(EvaluationError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"no label for sample {sample_id!r}")


class UnknownIdentity(EvaluationError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def record(self, truth: bool, predicted: bool) -> "ConfusionCounts":
        if truth and predicted:
            return ConfusionCounts(self.tp + 1, self.fp, self.tn, self.fn)
        if predicted:
            return ConfusionCounts(self.tp, self.fp + 1, self.tn, self.fn)
        if truth:
            return ConfusionCounts(self.tp, self.fp, self.tn, self.fn + 1)
        return ConfusionCounts(self.tp, self.fp, self.tn + 1, self.fn)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[bool, bool]]) -> "ConfusionCounts":
        tp = fp = tn = fn = 0
        for truth, pred in pairs:
            if truth and pred:
                tp += 1
            elif pred:
                fp += 1
            elif truth:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, tn, fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise EmptyCounts("accuracy of zero samples is undefined")
    return (c.tp + c.tn) / c.total


def f1(c: ConfusionCounts) -> float:
    """2tp / (2tp + fp + fn); 0 when tp = 0 but there were errors."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        raise UndefinedMetric("F1 undefined: no positives and no positive predictions")
    return 2 * c.tp / denom


def precision(c: ConfusionCounts) -> Optional[float]:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else None


def recall(c: ConfusionCounts) -> Optional[float]:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else None


METRICS = {"accuracy": accuracy, "f1": f1}


@dataclass(frozen=True)
class ReportRow:
    detector: str
    group: str
    key: str
    metric: str
    counts: ConfusionCounts
    flags: tuple[str, ...] = ()
    members: tuple[str, ...] = ()

    @property
    def value(self) -> Optional[float]:
        try:
            return METRICS[self.metric](self.counts)
        except (EmptyCounts, UndefinedMetric):
            return None

    def to_record(self) -> dict[str, Any]:
        c = self.counts
        return {
            "detector": self.detector, "group": self.group, "key": self.key,
            "metric": self.metric, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
            "flags": list(self.flags), "members": list(self.members),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "ReportRow":
        return cls(
            rec["detector"], rec["group"], rec["key"], rec["metric"],
            ConfusionCounts(rec["tp"], rec["fp"], rec["tn"], rec["fn"]),
            tuple(rec.get("flags", ())), tuple(rec.get("members", ())),
        )


def _natural(s: str) -> tuple:
    return tuple(int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s))


def _group_rank(group: str) -> tuple:
    if group == "overall":
        return (0, ())
    if group in CONDITIONS:
        return (1, (CONDITIONS.index(group),))
    return (2, _natural(group))


def row_order(row: ReportRow) -> tuple:
    key_rank = (IDENTITIES.index(row.key), ()) if row.key in IDENTITIES else (len(IDENTITIES), _natural(row.key))
    return (row.detector, _group_rank(row.group), key_rank, row.metric)


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rows = sorted(self.rows, key=row_order)

    def row(self, group: str, key: str = "-", detector: Optional[str] = None) -> ReportRow:
        for r in self.rows:
            if r.group == group and r.key == key and (detector is None or r.detector == detector):
                return r
        raise KeyError((detector, group, key))

    def merged(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.rows + other.rows, {**self.metadata, **other.metadata})

    def to_record(self) -> dict[str, Any]:
        return {"metadata": dict(sorted(self.metadata.items())),
                "rows": [r.to_record() for r in self.rows]}

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "EvalReport":
        return cls([ReportRow.from_record(r) for r in rec["rows"]], dict(rec.get("metadata", {})))


def _require(predictions: Mapping[str, Any], sample_id: str) -> Any:
    try:
        return predictions[sample_id]
    except KeyError:
        raise MissingPrediction(sample_id) from None


def evaluate_vad(
    predictions: Mapping[str, bool],
    samples: Sequence[LabeledSample],
    detector: str = "vad",
    metadata: Optional[dict] = None,
) -> EvalReport:
    """Overall accuracy plus one row per condition present in ``samples``."""
    overall = ConfusionCounts()
    by_cond: dict[str, ConfusionCounts] = {}
    for s in samples:
        pred = bool(_require(predictions, s.sample_id))
        overall = overall.record(s.is_speech, pred)
        by_cond[s.condition] = by_cond.get(s.condition, ConfusionCounts()).record(s.is_speech, pred)
    rows = [ReportRow(detector, "overall", "-", "accuracy", overall)] if samples else []
    rows += [ReportRow(detector, cond, "-", "accuracy", c) for cond, c in by_cond.items()]
    return EvalReport(rows, dict(metadata or {}))


def _check_identities(ids: Iterable[str], where: str) -> frozenset[str]:
    ids = frozenset(ids)
    unknown = ids - set(IDENTITIES)
    if unknown:
        raise UnknownIdentity(f"{where}: unknown identities {sorted(unknown)}")
    return ids


def sid_counts(
    predictions: Mapping[str, Iterable[str]], labels: Sequence[LabeledSample]
) -> dict[tuple[str, str], ConfusionCounts]:
    """Per (home, identity) counts. A "both" label is a positive for each identity."""
    out: dict[tuple[str, str], ConfusionCounts] = {}
    for s in labels:
        pred = _check_identities(_require(predictions, s.sample_id), s.sample_id)
        truth = _check_identities(s.speakers, s.sample_id)
        for ident in IDENTITIES:
            k = (s.home_id, ident)
            out[k] = out.get(k, ConfusionCounts()).record(ident in truth, ident in pred)
    return out


def evaluate_sid(
    predictions: Mapping[str, Iterable[str]],
    labels: Sequence[LabeledSample],
    detector: str = "sid",
    include_overall: bool = False,
    metadata: Optional[dict] = None,
) -> EvalReport:
    counts = sid_counts(predictions, labels)
    rows = [ReportRow(detector, home, ident, "f1", c) for (home, ident), c in counts.items()]
    if include_overall:
        for ident in IDENTITIES:
            total = sum((c for (h, i), c in counts.items() if i == ident), ConfusionCounts())
            rows.append(ReportRow(detector, "overall", ident, "f1", total))
    return EvalReport(rows, dict(metadata or {}))


def _home_seed(seed: int, home: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(home.encode("utf-8"))])


def balanced_emotion_sets(
    decisions: Sequence[PipelineDecision],
    homes: Mapping[str, str],
    rng_seed: int,
) -> dict[str, tuple[list[str], list[str], bool]]:
    """Per home: (predicted-anger ids, sampled non-anger ids, imbalanced flag).

    Every window with an angry verdict is taken; the same number of windows
    without one is drawn at random from the rest of that home's scored windows.
    """
    pos: dict[str, list[str]] = {}
    neg: dict[str, list[str]] = {}
    for d in decisions:
        if d.emotion is None:
            continue
        if d.window_id not in homes:
            raise MissingLabel(d.window_id)
        home = homes[d.window_id]
        pos.setdefault(home, [])
        neg.setdefault(home, [])
        (pos if d.emotion.label == ANGRY else neg)[home].append(d.window_id)

    out = {}
    for home in sorted(pos, key=_natural):
        p = sorted(pos[home])
        n = sorted(neg[home])
        k = len(p)
        if len(n) <= k:
            chosen, short = n, len(n) < k
        else:
            idx = _home_seed(rng_seed, home).choice(len(n), size=k, replace=False)
            chosen, short = [n[i] for i in sorted(idx)], False
        out[home] = (p, chosen, short)
    return out


def evaluate_emotion_balanced(
    decisions: Sequence[PipelineDecision],
    labels: Sequence[LabeledSample],
    rng_seed: int,
    detector: str = "emotion",
    homes: Optional[Mapping[str, str]] = None,
    metadata: Optional[dict] = None,
) -> EvalReport:
    by_id = {s.sample_id: s for s in labels}
    homes = homes if homes is not None else {sid: s.home_id for sid, s in by_id.items()}
    predicted = {d.window_id: d.emotion.label == ANGRY for d in decisions if d.emotion is not None}
    rows = []
    for home, (p, n, short) in balanced_emotion_sets(decisions, homes, rng_seed).items():
        members = p + n
        counts = ConfusionCounts()
        for wid in members:
            if wid not in by_id:
                raise MissingLabel(wid)
            counts = counts.record(by_id[wid].emotion == ANGRY, predicted[wid])
        flags = []
        if not p:
            flags.append(FLAG_NO_POSITIVES)
        if short:
            flags.append(FLAG_IMBALANCED)
        rows.append(ReportRow(detector, home, "-", "f1", counts, tuple(flags), tuple(members)))
    meta = {"seed": rng_seed, **(metadata or {})}
    return EvalReport(rows, meta)


def evaluate_conflict(
    predictions: Mapping[str, bool],
    labels: Sequence[LabeledSample],
    detector: str = "conflict",
    metadata: Optional[dict] = None,
) -> EvalReport:
    """Hit/miss scoring per home, summarised as F1."""
    by_home: dict[str, ConfusionCounts] = {}
    for s in labels:
        pred = bool(_require(predictions, s.sample_id))
        by_home[s.home_id] = by_home.get(s.home_id, ConfusionCounts()).record(s.conflict, pred)
    rows = [ReportRow(detector, home, "-", "f1", c) for home, c in by_home.items()]
    return EvalReport(rows, dict(metadata or {}))


# -- rendering ----------------------------------------------------------------

COLUMNS = ("detector", "group", "key", "metric", "value", "tp", "fp", "tn", "fn", "n", "flags")


def _cells(row: ReportRow, percent: bool) -> list[str]:
    v = row.value
    if v is None:
        value = UNDEFINED
    elif percent:
        value = f"{100 * v:.2f}%"
    else:
        value = f"{v:.6f}"
    c = row.counts
    return [row.detector, row.group, row.key, row.metric, value,
            str(c.tp), str(c.fp), str(c.tn), str(c.fn), str(c.total), ";".join(row.flags)]


def _meta_lines(report: EvalReport) -> list[str]:
    return [f"# {k}: {report.metadata[k]}" for k in sorted(report.metadata)
            if report.metadata[k] is not None]


def render_report(report: EvalReport, fmt: str = "text") -> str:
    """Render as ``csv`` or aligned ``text``. Output is a pure function of the report."""
    if fmt == "csv":
        buf = io.StringIO()
        for line in _meta_lines(report):
            buf.write(line + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in report.rows:
            w.writerow(_cells(r, percent=False))
        return buf.getvalue()
    if fmt == "text":
        table = [list(COLUMNS)] + [_cells(r, percent=True) for r in report.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(COLUMNS))]
        lines = _meta_lines(report)
        for row in table:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")
