import csv
from datetime import datetime, time as dtime, timezone

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from voicehome import synth
from voicehome.audio import SILENCE_DBFS, AudioClip
from voicehome.pipeline import (DISCARDED_SID, DISCARDED_VAD, SCORED, ConflictVerdict,
                                EmotionVerdict, PipelineDecision, SidVerdict, VadVerdict)
from voicehome.privacy import (FEATURES_PERSISTED, GATED_OFF, LISTEN, OFF, RAW_CLIPS,
                               RAW_PERSISTED, SETTINGS_CHANGED, WINDOW_DISCARDED_UNREGISTERED,
                               WINDOW_HEARD, AuditOrderError, AuditRecord, PrivacyRuntime,
                               PrivacySettings, ProsodyFeatures, SettingsError, SettingsWatcher,
                               Store, export_audit, extract_prosody, gate, load_settings,
                               persist_decision, save_settings, write_bundle)

SR = 16000


def tone(seconds=5.0, f=200.0, amp=0.3):
    t = np.arange(int(seconds * SR)) / SR
    return AudioClip(amp * np.sin(2 * np.pi * f * t), SR, "tone")


def decision(wid, speakers=("patient",), ts=0.0, stage=SCORED):
    if stage == DISCARDED_VAD:
        return PipelineDecision(wid, stage, ts, vad=VadVerdict(False, 0.0))
    sid = SidVerdict(frozenset(speakers))
    if stage == DISCARDED_SID:
        return PipelineDecision(wid, stage, ts, vad=VadVerdict(True, 1.0), sid=sid)
    return PipelineDecision(wid, SCORED, ts, vad=VadVerdict(True, 1.0), sid=sid,
                            emotion=EmotionVerdict("not_angry", 0.1),
                            conflict=ConflictVerdict(False, 0.0))


def test_gate_examples():
    s = PrivacySettings()
    assert gate(dtime(10, 0), s) == LISTEN
    assert gate(dtime(20, 0), s) == OFF
    assert gate(dtime(8, 0), s) == LISTEN
    assert gate(dtime(10, 0), PrivacySettings(enabled=False)) == OFF
    night = PrivacySettings(day_start="22:00", day_end="06:00")
    assert gate(dtime(1, 0), night) == LISTEN and gate(dtime(12, 0), night) == OFF


def test_gate_every_minute_against_interval_oracle():
    for start, end in [(480, 1200), (1320, 360), (0, 1), (1439, 0), (600, 601)]:
        s = PrivacySettings(day_start=dtime(*divmod(start, 60)), day_end=dtime(*divmod(end, 60)))
        for m in range(1440):
            # membership by walking forward from start
            inside = (m - start) % 1440 < (end - start) % 1440
            assert (gate(dtime(*divmod(m, 60)), s) == LISTEN) == inside


@hsettings(max_examples=100, deadline=None)
@given(st.integers(0, 1439), st.integers(0, 1439), st.integers(0, 86399))
def test_gate_complement_property(a, b, sec):
    if a == b:
        return
    t = dtime(sec // 3600, sec // 60 % 60, sec % 60)
    s1 = PrivacySettings(day_start=dtime(*divmod(a, 60)), day_end=dtime(*divmod(b, 60)))
    s2 = PrivacySettings(day_start=dtime(*divmod(b, 60)), day_end=dtime(*divmod(a, 60)))
    assert (gate(t, s1) == LISTEN) != (gate(t, s2) == LISTEN)


def test_settings_validation_and_file(tmp_path):
    with pytest.raises(SettingsError):
        PrivacySettings(day_start="09:00", day_end="09:00")
    with pytest.raises(SettingsError):
        PrivacySettings(retention_mode="everything")
    with pytest.raises(SettingsError):
        PrivacySettings(registered={"visitor"})
    s = PrivacySettings(day_start="07:30", enabled=False, retention_mode=RAW_CLIPS,
                        registered={"patient"})
    p = tmp_path / "privacy.conf"
    save_settings(p, s)
    assert load_settings(p) == s
    p.write_text("enabled = maybe\n")
    with pytest.raises(SettingsError):
        load_settings(p)
    p.write_text("colour = blue\n")
    with pytest.raises(SettingsError):
        load_settings(p)


def test_prosody_silence():
    f = extract_prosody(AudioClip(np.zeros(5 * SR), SR))
    assert f.rms_dbfs == SILENCE_DBFS and f.peak_count == 0


def test_prosody_pure_tone():
    f = extract_prosody(tone())
    assert f.pitch_var_hz2 == pytest.approx(0.0, abs=1e-6)
    assert f.pitch_mean_hz == pytest.approx(200.0, abs=0.5)


@hsettings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([2.0, 5.0, 9.0]))
def test_prosody_fixed_schema(seed, seconds):
    x = np.random.default_rng(seed).normal(0, 0.1, int(seconds * SR))
    rec = extract_prosody(AudioClip(np.clip(x, -1, 1), SR)).to_record()
    assert len(rec) <= 8
    assert sorted(rec) == sorted(f for f in ProsodyFeatures.__dataclass_fields__)
    assert all(isinstance(v, (int, float)) for v in rec.values())


def test_persist_unregistered(tmp_path):
    store = Store(tmp_path)
    d = decision("w", speakers=(), stage=DISCARDED_SID)
    recs = persist_decision(d, tone(), PrivacySettings(), store)
    assert [r.action for r in recs] == [WINDOW_DISCARDED_UNREGISTERED]
    assert store.artifact_files() == []


def test_persist_prosody_only(tmp_path):
    store = Store(tmp_path)
    recs = persist_decision(decision("w"), tone(), PrivacySettings(), store)
    assert [r.action for r in recs] == [FEATURES_PERSISTED]
    assert store.artifact_files() == [store.features_path]
    assert not store.raw_dir.exists()


def test_persist_raw_clips(tmp_path):
    store = Store(tmp_path)
    before = set(store.artifact_files())
    recs = persist_decision(decision("w"), tone(), PrivacySettings(retention_mode=RAW_CLIPS), store)
    assert [r.action for r in recs] == [FEATURES_PERSISTED, RAW_PERSISTED]
    assert set(store.artifact_files()) - before == {store.features_path, store.raw_path("w")}


def test_persist_respects_registered_setting(tmp_path):
    store = Store(tmp_path)
    s = PrivacySettings(registered={"caregiver"})
    recs = persist_decision(decision("w", speakers=("patient",)), tone(), s, store)
    assert [r.action for r in recs] == [WINDOW_DISCARDED_UNREGISTERED]


def test_prosody_bytes_independent_of_length(tmp_path):
    sizes = []
    for seconds in (5.0, 30.0, 120.0):
        store = Store(tmp_path / str(seconds))
        persist_decision(decision("w"), tone(seconds), PrivacySettings(), store)
        sizes.append(store.features_path.stat().st_size)
    assert max(sizes) - min(sizes) <= 16 and max(sizes) < 512


def test_audit_monotone(tmp_path):
    store = Store(tmp_path)
    store.audit(AuditRecord(5.0, WINDOW_HEARD, "a"))
    store.audit(AuditRecord(5.0, WINDOW_HEARD, "b"))
    with pytest.raises(AuditOrderError):
        store.audit(AuditRecord(4.0, WINDOW_HEARD, "c"))
    assert Store(tmp_path)._last_ts == 5.0


def ts_of(hh, mm, day=1):
    return datetime(2024, 3, day, hh, mm, tzinfo=timezone.utc).timestamp()


def scored_decider(clip, ts):
    return decision(clip.id, ts=ts)


def stream(start_ts, n, step=5.0):
    return [(AudioClip(tone().samples, SR, f"w{i:03d}"), start_ts + i * step) for i in range(n)]


def test_off_means_off_across_boundary(tmp_path):
    store = Store(tmp_path)
    rt = PrivacyRuntime(PrivacySettings(day_start="08:00", day_end="20:00"), store, scored_decider)
    windows = stream(ts_of(19, 59), 30)  # crosses 20:00
    out = rt.replay(windows)
    heard = [ts for (c, ts), d in zip(windows, out) if d is not None]
    assert heard and all(datetime.fromtimestamp(t, timezone.utc).hour < 20 for t in heard)
    recs = store.audit_records()
    cutoff = ts_of(20, 0)
    assert not [r for r in recs if r.action == WINDOW_HEARD and r.timestamp >= cutoff]
    assert [r.action for r in recs if r.timestamp >= cutoff] == [GATED_OFF]
    assert len(store.feature_records()) == len(heard)


def test_disable_midstream_applies_at_next_window(tmp_path):
    store = Store(tmp_path)
    rt = PrivacyRuntime(PrivacySettings(), store, scored_decider)
    windows = stream(ts_of(10, 0), 6)
    for i, (clip, ts) in enumerate(windows):
        if i == 3:
            rt.update_settings(PrivacySettings(enabled=False), reason="user toggle")
        rt.on_window(clip, ts)
    acts = [(r.action, r.window_id) for r in store.audit_records()]
    assert acts[-2:] == [(SETTINGS_CHANGED, None), (GATED_OFF, None)]
    assert sum(a == WINDOW_HEARD for a, _ in acts) == 3
    changed = [r for r in store.audit_records() if r.action == SETTINGS_CHANGED][0]
    assert changed.timestamp == windows[3][1] and "enabled" in changed.detail


def test_every_store_mutation_audited(tmp_path):
    store = Store(tmp_path)

    def decide(clip, ts):
        i = int(clip.id[1:])
        return decision(clip.id, speakers=() if i % 3 == 0 else ("caregiver",), ts=ts,
                        stage=DISCARDED_SID if i % 3 == 0 else SCORED)

    rt = PrivacyRuntime(PrivacySettings(retention_mode=RAW_CLIPS), store, decide)
    rt.replay(stream(ts_of(9, 0), 9))
    recs = store.audit_records()
    feats = [r.window_id for r in recs if r.action == FEATURES_PERSISTED]
    raws = [r.window_id for r in recs if r.action == RAW_PERSISTED]
    assert feats == [f["window_id"] for f in store.feature_records()]
    assert sorted(store.raw_path(w) for w in raws) == sorted(store.raw_dir.iterdir())
    assert all(int(w[1:]) % 3 for w in feats)


def test_export_empty_store(tmp_path):
    b = export_audit(Store(tmp_path))
    assert b.is_empty and not b.transcripts_present
    paths = write_bundle(b, tmp_path / "bundle")
    assert all(p.exists() for p in paths)


def test_export_raw_envelope(tmp_path):
    store = Store(tmp_path)
    persist_decision(decision("w"), tone(), PrivacySettings(retention_mode=RAW_CLIPS), store,
                     timestamp=42.0)
    b = export_audit(store)
    assert b.timestamps == [(42.0, "w")]
    bin_s, values, coarse = b.envelopes["w"]
    assert bin_s == 0.1 and len(values) == 50 and not coarse
    assert values[10] == pytest.approx(0.3 / np.sqrt(2), rel=1e-3)


def test_export_prosody_only_coarse(tmp_path):
    store = Store(tmp_path)
    clip = tone(amp=0.1)
    persist_decision(decision("w"), clip, PrivacySettings(), store, timestamp=1.0)
    b = export_audit(store)
    _, values, coarse = b.envelopes["w"]
    stored = store.feature_records()[0]["rms_dbfs"]
    assert coarse and values == [pytest.approx(10 ** (stored / 20), rel=1e-5)]


def test_export_range_and_attestation(tmp_path):
    store = Store(tmp_path)
    for i in range(4):
        persist_decision(decision(f"w{i}"), tone(), PrivacySettings(), store, timestamp=float(i))
    b = export_audit(store, 1.0, 3.0)
    assert [w for _, w in b.timestamps] == ["w1", "w2"]
    assert b.content_types["prosody_features"] == 1 and b.content_types["transcript"] == 0
    (tmp_path / "notes.txt").write_text("hello")
    assert export_audit(store).transcripts_present
    with pytest.raises(ValueError):
        export_audit(store, 3.0, 1.0)


def test_bundle_csv_contents(tmp_path):
    store = Store(tmp_path / "s")
    persist_decision(decision("w"), tone(), PrivacySettings(), store, timestamp=7.0)
    paths = write_bundle(export_audit(store), tmp_path / "b")
    rows = list(csv.reader(open(paths[2])))
    assert ["transcript", "0"] in rows and ["transcripts_present", "false"] in rows
    env = list(csv.reader(open(paths[1])))
    assert len(env) == 2 and env[1][-1] == "true"


def test_settings_watcher(tmp_path):
    p = tmp_path / "privacy.conf"
    save_settings(p, PrivacySettings())
    store = Store(tmp_path / "store")
    rt = PrivacyRuntime(PrivacySettings(), store, scored_decider)
    w = SettingsWatcher(p, rt)
    assert not w.check()
    save_settings(p, PrivacySettings(enabled=False))
    assert w.check()
    assert rt.settings.enabled  # not yet: applies at the next window
    rt.on_window(AudioClip(tone().samples, SR, "w0"), ts_of(10, 0))
    assert not rt.settings.enabled
    p.write_text("day_start = 25:99\n")
    w.check()
    assert w.errors and not rt.settings.enabled


def test_runtime_with_real_detectors(tmp_path, profiles):
    from voicehome.detectors import baseline_contract
    from voicehome.pipeline import process_window

    contract = baseline_contract()
    store = Store(tmp_path)
    rt = PrivacyRuntime(PrivacySettings(), store,
                        lambda c, ts: process_window(c, contract, profiles, timestamp=ts))
    pairs = synth.labelled_windows(["visitor", "caregiver", "pause", "patient"], seed=77)
    out = rt.replay([(c, ts_of(12, 0) + 5 * i) for i, (_, c) in enumerate(pairs)])
    kept = {d.window_id for d in out if d.registered}
    assert [f["window_id"] for f in store.feature_records()] == sorted(kept)
    assert pairs[2][1].id not in kept
