"""``voicehome`` command line.

Exit codes: 0 success, 1 command failure, 2 usage error. Failures print one
line ``error[CODE]: message`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np

from . import __version__
from .audio import (DEFAULT_WINDOW_SECONDS, AudioClip, AudioError, WindowConfig, load_wav,
                    save_wav, slice_windows)
from .detectors import (DEFAULT_CONFIG, FeatureConfig, baseline_contract, enroll, load_profiles,
                        save_profiles)
from .ema import (CatalogError, CatalogHandle, EmaSession, PolicyState, UnknownEvent,
                  UnknownParticipant)
from .evaluation import (EvalReport, EvaluationError, evaluate_conflict,
                         evaluate_emotion_balanced, evaluate_sid, evaluate_vad, render_report)
from .pipeline import (DecisionLog, PipelineDecision, PipelineError, process_window,
                       run_stream)
from .privacy import (PrivacyError, PrivacyRuntime, Store, export_audit, load_settings,
                      write_bundle)
from .realism import (PROTOCOL_CONDITIONS, DistortionSpec, NoiseCatalog, RealismError,
                      ReverbParams, build_protocol_dataset, compose_distortion, file_sha256,
                      sample_distortion, write_protocol)
from .records import dumps, read_jsonl
from .samples import IDENTITIES, LabeledSample, read_labels, resolve
from .supervisor import (JsonlSink, FanoutSink, SupervisorError, VirtualClock, WallClock,
                         WebhookSink, load_config, process_specs, supervise)
from . import synth


class UsageError(Exception):
    pass


class CommandError(Exception):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


class Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _err_code(exc: BaseException) -> str:
    table = [
        (CommandError, None), (AudioError, "AUDIO"), (RealismError, "REALISM"),
        (EvaluationError, "EVAL"), (CatalogError, "CATALOG"), (UnknownParticipant, "CATALOG"),
        (UnknownEvent, "CATALOG"), (PrivacyError, "PRIVACY"), (SupervisorError, "SUPERVISOR"),
        (PipelineError, "PIPELINE"), (json.JSONDecodeError, "FORMAT"), (OSError, "IO"),
        (KeyError, "FORMAT"), (ValueError, "INPUT"),
    ]
    for cls, code in table:
        if isinstance(exc, cls):
            return code or exc.code  # type: ignore[attr-defined]
    return "INTERNAL"


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


# -- shared helpers ----------------------------------------------------------------


def _labels_file(path: Path) -> Path:
    """Accept a labels/manifest file or a directory holding one."""
    if path.is_dir():
        for name in ("manifest.jsonl", "labels.jsonl"):
            if (path / name).exists():
                return path / name
        raise CommandError("IO", f"{path}: no manifest.jsonl or labels.jsonl")
    if not path.exists():
        raise CommandError("IO", f"{path}: not found")
    return path


def _labelled_clips(path: Path) -> Iterator[tuple[LabeledSample, AudioClip]]:
    f = _labels_file(path)
    for s in read_labels(f):
        yield s, load_wav(resolve(s, f.parent), id=s.sample_id)


def _source_clips(path: Path, window_seconds) -> Iterator[AudioClip]:
    """Labelled windows if a manifest exists, otherwise every WAV sliced into windows."""
    if path.is_file() or any((path / n).exists() for n in ("manifest.jsonl", "labels.jsonl")):
        for _, clip in _labelled_clips(path):
            yield clip
        return
    wavs = sorted(path.glob("*.wav"))
    if not wavs:
        raise CommandError("IO", f"{path}: no audio found")
    cfg = WindowConfig(window_seconds)
    for w in wavs:
        yield from slice_windows(load_wav(w), cfg)


def _feature_config(path: Optional[str]) -> FeatureConfig:
    return FeatureConfig.load(path) if path else DEFAULT_CONFIG


def _fresh(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    return path


def _print(rec: dict[str, Any]) -> None:
    print(dumps(rec))


# -- commands ------------------------------------------------------------------------


def cmd_synth(a) -> int:
    out = Path(a.out)
    if a.what == "noise":
        index = synth.write_noise_catalog(out, synth.noise_catalog(a.seed, seconds=a.seconds,
                                                                   per_event=a.per_event))
        _print({"index": str(index), "seed": a.seed})
        return 0
    if a.mix == "vad":
        kinds = synth.vad_session_kinds(a.windows, a.seed)
    else:
        pool = synth.WINDOW_KINDS if a.mix == "all" else synth.SPEAKER_KINDS
        kinds = [pool[i % len(pool)] for i in range(a.windows)]
    pairs = synth.labelled_windows(kinds, a.seed, prefix=a.prefix, home_id=a.home)
    labels = synth.write_corpus(out, pairs)
    _print({"labels": str(labels), "windows": len(pairs), "seed": a.seed})
    return 0


def cmd_build_protocol(a) -> int:
    t0 = time.perf_counter()
    labels = _labels_file(Path(a.clean))
    clean = read_labels(labels)
    catalog = NoiseCatalog.load(a.noise_catalog)
    ds = build_protocol_dataset(clean, catalog, a.seed, a.window_seconds)
    manifest = write_protocol(ds, catalog, labels.parent, a.out, window_seconds=a.window_seconds)
    counts = {c: len(ds.sets[c]) for c in PROTOCOL_CONDITIONS}
    _print({"manifest": str(manifest), "samples": len(ds), "per_condition": counts,
            "seed": a.seed, "sha256": file_sha256(manifest),
            "seconds": round(time.perf_counter() - t0, 3)})
    return 0


def cmd_augment(a) -> int:
    clip = load_wav(a.input)
    catalog = NoiseCatalog.load(a.noise_catalog) if a.noise_catalog else None
    if a.reverb or a.gain_db is not None:
        rv = None
        if a.reverb:
            try:
                r, d, f = (float(x) for x in a.reverb.split(","))
            except ValueError:
                raise UsageError("--reverb expects r,d,f") from None
            rv = ReverbParams(r, d, f)
        spec = DistortionSpec(gain_db=a.gain_db, reverb=rv, seed=a.seed, kind="custom")
    else:
        spec = sample_distortion(a.seed, catalog, a.kind, float(clip.duration_seconds))
    out = compose_distortion(clip, spec, catalog)
    save_wav(out, a.out)
    _print({"out": a.out, "spec": spec.to_record(), "seed": a.seed})
    return 0


def cmd_enroll(a) -> int:
    cfg = _feature_config(a.config)
    by_id: dict[str, list[AudioClip]] = {i: [] for i in IDENTITIES}
    for s, clip in _labelled_clips(Path(a.labels)):
        if len(s.speakers) == 1 and s.condition in ("clean", "field"):
            (ident,) = s.speakers
            if len(by_id[ident]) < a.per_identity:
                by_id[ident].append(clip)
    idents = a.identity or list(IDENTITIES)
    profiles = [enroll(by_id[i], i, cfg, a.feature) for i in idents]
    save_profiles(_fresh(Path(a.out)), profiles)
    _print({"profiles": str(a.out), "enrolled": {p.identity: p.enrollment_count for p in profiles},
            "feature": a.feature})
    return 0


def _contract(a):
    cfg = _feature_config(a.config)
    if a.detectors not in ("baseline", "degraded"):
        raise UsageError(f"unknown detector set {a.detectors!r}")
    return baseline_contract(cfg, degraded_sid=a.detectors == "degraded")


def cmd_run(a) -> int:
    profiles = load_profiles(a.profiles)
    contract = _contract(a)
    ws = a.window_seconds
    with DecisionLog(_fresh(Path(a.decisions))) as log:
        summary = run_stream(
            _source_clips(Path(a.source), ws), contract, profiles, log, ws, jobs=a.jobs,
            timestamps=lambda i, clip: a.start_time + i * float(ws),
        )
    _print({"decisions": a.decisions, **summary.as_dict(), "seed": a.seed})
    return 0


def _load_predictions(path: str, task: str) -> tuple[dict[str, Any], list[PipelineDecision]]:
    """Decision log or ``{"sample_id", "prediction"}`` records."""
    recs = list(read_jsonl(path))
    if recs and "stage_reached" in recs[0]:
        decisions = [PipelineDecision.from_record(r) for r in recs]
        preds: dict[str, Any] = {}
        for d in decisions:
            if task == "vad":
                preds[d.window_id] = bool(d.vad and d.vad.is_speech)
            elif task == "sid":
                preds[d.window_id] = d.registered
            elif task == "conflict":
                preds[d.window_id] = bool(d.conflict and d.conflict.in_conflict)
        return preds, decisions
    if task == "emotion":
        raise CommandError("INPUT", "emotion evaluation needs a decision log")
    preds = {}
    for r in recs:
        p = r["prediction"]
        preds[str(r["sample_id"])] = frozenset(p) if task == "sid" else bool(p)
    return preds, []


def cmd_evaluate(a) -> int:
    manifest = _labels_file(Path(a.manifest))
    labels = read_labels(manifest)
    preds, decisions = _load_predictions(a.predictions, a.task)
    meta = {"manifest_hash": file_sha256(manifest), "predictions_hash": file_sha256(a.predictions),
            "seed": a.seed}
    if a.timestamp:
        meta["timestamp"] = a.timestamp
    if a.task == "vad":
        report = evaluate_vad(preds, labels, metadata=meta)
    elif a.task == "sid":
        report = evaluate_sid(preds, labels, include_overall=a.overall, metadata=meta)
    elif a.task == "conflict":
        report = evaluate_conflict(preds, labels, metadata=meta)
    else:
        report = evaluate_emotion_balanced(decisions, labels, a.seed, metadata=meta)
    if a.report:
        Path(a.report).parent.mkdir(parents=True, exist_ok=True)
        Path(a.report).write_text(json.dumps(report.to_record(), sort_keys=True, indent=1) + "\n",
                                  encoding="utf-8")
    sys.stdout.write(render_report(report, a.format))
    return 0


def cmd_report(a) -> int:
    report = EvalReport()
    for p in a.inputs:
        report = report.merged(EvalReport.from_record(json.loads(Path(p).read_text("utf-8"))))
    if not report.rows:
        raise CommandError("EVAL", "report has no rows")
    text = render_report(report, a.format)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_supervise(a) -> int:
    cfg = load_config(a.config)
    specs, procs = process_specs(cfg)
    sinks = []
    log = a.log or cfg.log
    if log:
        sinks.append(JsonlSink(log))
    if cfg.webhook:
        sinks.append(WebhookSink(cfg.webhook))
    sink = FanoutSink(sinks) if sinks else None
    for p in procs:
        p.launch()
    try:
        if a.ticks is not None:
            handle = supervise(specs, sink, VirtualClock(), tick=cfg.tick)
            for _ in range(a.ticks):
                handle.step()
                time.sleep(a.pace)  # child processes run in real time
        else:
            handle = supervise(specs, sink, WallClock(), tick=cfg.tick)
            handle.start()
            try:
                time.sleep(a.duration)
            except KeyboardInterrupt:
                pass
            handle.stop()
    finally:
        for p in procs:
            p.terminate()
    events = handle.events()
    kinds: dict[str, int] = {}
    for ev in events:
        kinds[ev.kind] = kinds.get(ev.kind, 0) + 1
    _print({"events": kinds, "states": handle.states(), "sink_errors": len(handle.sink_errors)})
    return 0


def _parse_ranges(values: Sequence[str]) -> list[range]:
    out = []
    for v in values:
        try:
            lo, hi = (int(x) for x in v.split(":"))
        except ValueError:
            raise UsageError(f"--gate-off expects I:J, got {v!r}") from None
        out.append(range(lo, hi))
    return out


def cmd_simulate_home(a) -> int:
    settings = load_settings(a.settings)
    store = Store(a.store)
    profiles = load_profiles(a.profiles)
    contract = _contract(a)
    ws = a.window_seconds

    def decide(clip: AudioClip, ts: float) -> PipelineDecision:
        return process_window(clip, contract, profiles, ws, ts)

    runtime = PrivacyRuntime(settings, store, decide)
    start = datetime.fromisoformat(a.start)
    if start.tzinfo is None:
        start = start.replace(tzinfo=timezone.utc)
    off = _parse_ranges(a.gate_off)
    was_off = False
    heard = 0
    for i, clip in enumerate(_source_clips(Path(a.source), ws)):
        now_off = any(i in r for r in off)
        if now_off != was_off:
            runtime.update_settings(replace(settings, enabled=False) if now_off else settings,
                                    reason="schedule")
            was_off = now_off
        if runtime.on_window(clip, start.timestamp() + i * float(ws)) is not None:
            heard += 1
    actions: dict[str, int] = {}
    for r in store.audit_records():
        actions[r.action] = actions.get(r.action, 0) + 1
    _print({"store": a.store, "heard": heard, "audit": actions, "seed": a.seed})
    return 0


def cmd_audit(a) -> int:
    bundle = export_audit(Store(a.store), a.start, a.end)
    paths = write_bundle(bundle, a.out)
    _print({"windows": len(bundle.timestamps), "files": [str(p) for p in paths],
            "transcripts_present": bundle.transcripts_present})
    return 0 if not bundle.transcripts_present else 1


def cmd_catalog(a) -> int:
    if a.action == "validate":
        c = CatalogHandle(a.catalog).catalog
        _print({"catalog": a.catalog, "version": c.version,
                "messages": {k: len(v) for k, v in c.categories.items()},
                "participants": list(c.participants)})
        return 0
    handle = CatalogHandle(a.catalog)
    if a.action == "reload":
        try:
            handle.hot_reload(a.new)
            ok, err = True, None
        except (CatalogError, OSError) as exc:
            ok, err = False, _one_line(exc)
        _print({"reloaded": ok, "version": handle.version, "error": err})
        return 0 if ok else 1
    policy = PolicyState(a.policy, a.epsilon)
    clock_state = {"t": 0.0}
    session = EmaSession(handle, policy, a.seed, clock=lambda: clock_state["t"],
                         log_path=_fresh(Path(a.log)) if a.log else None)
    rng = np.random.default_rng([a.seed, 1])
    for k in range(a.count):
        clock_state["t"] = float(k)
        ev = session.recommend(a.participant, a.trigger)
        rec = ev.to_record()
        if a.respond is not None:
            _, fb = session.record_response(ev.event_id, bool(rng.random() < a.respond))
            rec["feedback"] = fb
        _print(rec)
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="voicehome", description="Deployment-readiness harness for in-home voice pipelines.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def seeded(sp, default=0):
        sp.add_argument("--seed", type=int, default=default)

    def detector_args(sp):
        sp.add_argument("--detectors", default="baseline", choices=["baseline", "degraded"])
        sp.add_argument("--config", help="flat key=value detector thresholds")
        sp.add_argument("--window-seconds", type=float, default=DEFAULT_WINDOW_SECONDS)

    sp = sub.add_parser("synth", help="generate synthetic windows or a noise catalog")
    sp.add_argument("what", choices=["corpus", "noise"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--windows", type=int, default=60)
    sp.add_argument("--mix", choices=["speakers", "vad", "all"], default="all")
    sp.add_argument("--prefix", default="w")
    sp.add_argument("--home", default="home1")
    sp.add_argument("--seconds", type=float, default=12.0)
    sp.add_argument("--per-event", type=int, default=1)
    seeded(sp)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("build-protocol", help="four-condition protocol dataset")
    sp.add_argument("--clean", required=True)
    sp.add_argument("--noise-catalog", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--window-seconds", type=float, default=DEFAULT_WINDOW_SECONDS)
    seeded(sp)
    sp.set_defaults(fn=cmd_build_protocol)

    sp = sub.add_parser("augment", help="apply one distortion to a WAV file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--noise-catalog")
    sp.add_argument("--kind", choices=list(PROTOCOL_CONDITIONS), default="all_three")
    sp.add_argument("--gain-db", type=float)
    sp.add_argument("--reverb", help="r,d,f")
    seeded(sp)
    sp.set_defaults(fn=cmd_augment)

    sp = sub.add_parser("enroll", help="build speaker profiles from single-speaker windows")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--identity", action="append", choices=list(IDENTITIES))
    sp.add_argument("--per-identity", type=int, default=6)
    sp.add_argument("--feature", choices=["cepstral", "random_projection"], default="cepstral")
    sp.add_argument("--config")
    sp.set_defaults(fn=cmd_enroll)

    sp = sub.add_parser("run", help="stream windows through the gated pipeline")
    sp.add_argument("--source", required=True)
    sp.add_argument("--profiles", required=True)
    sp.add_argument("--decisions", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--start-time", type=float, default=0.0)
    detector_args(sp)
    seeded(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("evaluate", help="score predictions against a manifest")
    sp.add_argument("task", choices=["vad", "sid", "emotion", "conflict"])
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--report")
    sp.add_argument("--format", choices=["text", "csv"], default="text")
    sp.add_argument("--overall", action="store_true", help="add pooled SID rows")
    sp.add_argument("--timestamp", help="recorded verbatim in the report metadata")
    seeded(sp)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("report", help="render saved evaluation reports")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--format", choices=["text", "csv"], default="text")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("supervise", help="keep configured processes alive")
    sp.add_argument("--config", required=True)
    sp.add_argument("--log")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--duration", type=float, default=10.0, help="wall-clock seconds")
    g.add_argument("--ticks", type=int, help="run on a virtual clock for N ticks")
    sp.add_argument("--pace", type=float, default=0.1,
                    help="real seconds between virtual ticks")
    sp.set_defaults(fn=cmd_supervise)

    sp = sub.add_parser("simulate-home", help="replay windows through the privacy runtime")
    sp.add_argument("--source", required=True)
    sp.add_argument("--profiles", required=True)
    sp.add_argument("--settings", required=True)
    sp.add_argument("--store", required=True)
    sp.add_argument("--start", default="2024-01-01T09:00:00+00:00")
    sp.add_argument("--gate-off", action="append", default=[], metavar="I:J",
                    help="switch the system off for windows I..J-1")
    detector_args(sp)
    seeded(sp)
    sp.set_defaults(fn=cmd_simulate_home)

    sp = sub.add_parser("audit", help="export timestamps, envelopes and attestation")
    sp.add_argument("--store", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--start", type=float, default=float("-inf"))
    sp.add_argument("--end", type=float, default=float("inf"))
    sp.set_defaults(fn=cmd_audit)

    sp = sub.add_parser("catalog", help="intervention catalog tools")
    csub = sp.add_subparsers(dest="action", required=True, parser_class=Parser)
    c = csub.add_parser("validate")
    c.add_argument("catalog")
    c.set_defaults(fn=cmd_catalog)
    c = csub.add_parser("reload")
    c.add_argument("catalog")
    c.add_argument("--new", required=True, help="edited catalog to swap in")
    c.set_defaults(fn=cmd_catalog)
    c = csub.add_parser("select")
    c.add_argument("catalog")
    c.add_argument("--participant", required=True)
    c.add_argument("--trigger", choices=["anger", "conflict"], default="anger")
    c.add_argument("--count", type=int, default=1)
    c.add_argument("--policy", choices=["round_robin", "epsilon_greedy"], default="round_robin")
    c.add_argument("--epsilon", type=float, default=0.1)
    c.add_argument("--respond", type=float, metavar="P",
                   help="simulate responses, implemented with probability P")
    c.add_argument("--log")
    seeded(c)
    c.set_defaults(fn=cmd_catalog)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.fn(args) or 0)
    except UsageError as exc:
        print(f"error[USAGE]: {_one_line(exc)}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error[{_err_code(exc)}]: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
