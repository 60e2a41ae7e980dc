import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from voicehome.evaluation import (FLAG_IMBALANCED, FLAG_NO_POSITIVES, UNDEFINED, ConfusionCounts,
                                  EmptyCounts, EvalReport, MissingLabel, MissingPrediction,
                                  ReportRow, UndefinedMetric, UnknownIdentity, accuracy,
                                  balanced_emotion_sets, evaluate_conflict,
                                  evaluate_emotion_balanced, evaluate_sid, evaluate_vad, f1,
                                  precision, recall, render_report)
from voicehome.pipeline import (DISCARDED_SID, SCORED, ConflictVerdict, EmotionVerdict,
                                PipelineDecision, SidVerdict, VadVerdict)
from voicehome.samples import ALL_THREE, PROTOCOL_CONDITIONS, LabeledSample


def test_accuracy_examples():
    assert accuracy(ConfusionCounts(tp=10, tn=10)) == 1.0
    assert accuracy(ConfusionCounts(1, 1, 1, 1)) == 0.5
    with pytest.raises(EmptyCounts):
        accuracy(ConfusionCounts())


def test_f1_examples():
    assert f1(ConfusionCounts(tp=5, tn=3)) == 1.0
    assert f1(ConfusionCounts(tp=2, fp=1, fn=1)) == pytest.approx(2 / 3, abs=0)
    assert f1(ConfusionCounts(fp=3, fn=2)) == 0.0
    with pytest.raises(UndefinedMetric):
        f1(ConfusionCounts(tn=7))


def test_counts_validation_and_sum():
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)
    assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(4, 3, 2, 1) == ConfusionCounts(5, 5, 5, 5)


def _pr_oracle(tp, fp, fn):
    p = Fraction(tp, tp + fp)
    r = Fraction(tp, tp + fn)
    return 2 * p * r / (p + r)


def test_f1_harmonic_mean_oracle():
    rnd = random.Random(7)
    for _ in range(1000):
        c = ConfusionCounts(*(rnd.randint(0, 60) for _ in range(4)))
        if c.tp == 0:
            continue
        assert f1(c) == float(Fraction(2 * c.tp, 2 * c.tp + c.fp + c.fn))
        assert f1(c) == float(_pr_oracle(c.tp, c.fp, c.fn))


def test_precision_recall_none_when_undefined():
    assert precision(ConfusionCounts(fn=1)) is None
    assert recall(ConfusionCounts(fp=1)) is None


def protocol_samples(n=60):
    out = []
    for cond in PROTOCOL_CONDITIONS:
        for i in range(n):
            speech = i % 3 != 0
            out.append(LabeledSample(f"s{i}__{cond}", is_speech=speech,
                                     speakers={"caregiver"} if speech else set(), condition=cond))
    return out


def test_vad_all_correct():
    ss = protocol_samples()
    rep = evaluate_vad({s.sample_id: s.is_speech for s in ss}, ss)
    assert len(rep.rows) == 5 and all(r.value == 1.0 for r in rep.rows)


def test_vad_ten_wrong_on_all_three():
    ss = protocol_samples()
    wrong = [s.sample_id for s in ss if s.condition == ALL_THREE][:10]
    preds = {s.sample_id: s.is_speech != (s.sample_id in wrong) for s in ss}
    rep = evaluate_vad(preds, ss)
    assert rep.row("overall").value == pytest.approx(230 / 240)
    assert rep.row(ALL_THREE).value == pytest.approx(50 / 60)
    assert rep.row("clean").value == 1.0


def test_vad_missing_condition_omitted():
    ss = [s for s in protocol_samples(3) if s.condition != "reverb"]
    rep = evaluate_vad({s.sample_id: s.is_speech for s in ss}, ss)
    assert {r.group for r in rep.rows} == {"overall", "clean", "deamp_noise", ALL_THREE}


def test_vad_missing_prediction():
    ss = protocol_samples(1)
    with pytest.raises(MissingPrediction) as ei:
        evaluate_vad({}, ss)
    assert ei.value.sample_id == ss[0].sample_id


def test_sid_both_scheme():
    ss = [LabeledSample("a", is_speech=True, speakers={"caregiver", "patient"})]
    rep = evaluate_sid({"a": {"caregiver"}}, ss)
    assert rep.row("home1", "caregiver").counts == ConfusionCounts(tp=1)
    assert rep.row("home1", "patient").counts == ConfusionCounts(fn=1)


def test_sid_unknown_identity():
    ss = [LabeledSample("a", is_speech=True, speakers={"caregiver"})]
    with pytest.raises(UnknownIdentity):
        evaluate_sid({"a": {"visitor"}}, ss)


SETS = [frozenset(), frozenset({"caregiver"}), frozenset({"patient"}),
        frozenset({"caregiver", "patient"})]


def test_sid_recount_oracle():
    rnd = random.Random(3)
    ss, preds = [], {}
    for i in range(200):
        truth = rnd.choice(SETS)
        ss.append(LabeledSample(f"x{i}", is_speech=bool(truth) or rnd.random() < 0.5, speakers=truth,
                                home_id=rnd.choice(["home1", "home2"])))
        preds[f"x{i}"] = rnd.choice(SETS)
    rep = evaluate_sid(preds, ss, include_overall=True)
    for home in ("home1", "home2", "overall"):
        for ident in ("caregiver", "patient"):
            tp = fp = fn = 0
            for s in ss:
                if home != "overall" and s.home_id != home:
                    continue
                t, p = ident in s.speakers, ident in preds[s.sample_id]
                tp += t and p
                fp += p and not t
                fn += t and not p
            assert rep.row(home, ident).value == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=0)


def dec(wid, angry=None, stage=SCORED):
    if stage != SCORED:
        return PipelineDecision(wid, stage, 0.0, vad=VadVerdict(True, 1.0), sid=SidVerdict(frozenset()))
    return PipelineDecision(wid, SCORED, 0.0, vad=VadVerdict(True, 1.0),
                            sid=SidVerdict(frozenset({"patient"})),
                            emotion=EmotionVerdict("angry" if angry else "not_angry", 0.5),
                            conflict=ConflictVerdict(False, 0.0))


def emotion_fixture(n_pos, n_neg, home="home1"):
    decisions = [dec(f"{home}p{i}", True) for i in range(n_pos)]
    decisions += [dec(f"{home}n{i}", False) for i in range(n_neg)]
    labels = [LabeledSample(d.window_id, is_speech=True, speakers={"patient"},
                            emotion="angry" if i % 2 == 0 else "not_angry", home_id=home)
              for i, d in enumerate(decisions)]
    return decisions, labels


def test_emotion_balanced_size_and_reproducible():
    decisions, labels = emotion_fixture(10, 50)
    r1 = evaluate_emotion_balanced(decisions, labels, rng_seed=4)
    r2 = evaluate_emotion_balanced(decisions, labels, rng_seed=4)
    (row,) = r1.rows
    assert len(row.members) == 20 and row.counts.total == 20
    assert row.members == r2.rows[0].members
    assert all(m.startswith("home1p") for m in row.members[:10])
    other = evaluate_emotion_balanced(decisions, labels, rng_seed=5).rows[0].members
    assert other != row.members


def test_emotion_no_predicted_anger():
    decisions, labels = emotion_fixture(0, 8)
    (row,) = evaluate_emotion_balanced(decisions, labels, 1).rows
    assert row.members == () and FLAG_NO_POSITIVES in row.flags and row.value is None


def test_emotion_insufficient_negatives():
    decisions, labels = emotion_fixture(6, 4)
    (row,) = evaluate_emotion_balanced(decisions, labels, 1).rows
    assert len(row.members) == 10 and FLAG_IMBALANCED in row.flags


def test_emotion_ignores_unscored_and_needs_labels():
    decisions, labels = emotion_fixture(2, 2)
    decisions.append(dec("gone", stage=DISCARDED_SID))
    evaluate_emotion_balanced(decisions, labels, 0)
    with pytest.raises(MissingLabel):
        evaluate_emotion_balanced(decisions, labels[1:], 0)


def test_emotion_per_home_sampling_independent():
    d1, l1 = emotion_fixture(3, 20, "home1")
    d2, l2 = emotion_fixture(3, 20, "home2")
    alone = balanced_emotion_sets(d1, {s.sample_id: s.home_id for s in l1}, 9)
    both = balanced_emotion_sets(d1 + d2, {s.sample_id: s.home_id for s in l1 + l2}, 9)
    assert alone["home1"] == both["home1"]


def test_conflict_hit_miss():
    ss = [LabeledSample(f"c{i}", is_speech=True, conflict=True) for i in range(5)]
    assert evaluate_conflict({s.sample_id: True for s in ss}, ss).rows[0].value == 1.0
    assert evaluate_conflict({s.sample_id: False for s in ss}, ss).rows[0].value == 0.0


def test_conflict_fixture_0634():
    # 2*317 / (2*317 + 200 + 166) = 634 / 1000
    ss, preds = [], {}
    plan = [(True, True)] * 317 + [(False, True)] * 200 + [(True, False)] * 166 + [(False, False)] * 50
    for i, (t, p) in enumerate(plan):
        ss.append(LabeledSample(f"k{i}", is_speech=True, conflict=t))
        preds[f"k{i}"] = p
    rep = evaluate_conflict(preds, ss)
    assert rep.rows[0].value == 0.634
    assert "63.40%" in render_report(rep)


def test_render_single_row_and_deterministic():
    rep = EvalReport([ReportRow("vad", "overall", "-", "accuracy", ConfusionCounts(3, 0, 1, 0))],
                     {"seed": 3, "manifest_hash": "abc"})
    csv = render_report(rep, "csv")
    lines = csv.splitlines()
    assert lines[:2] == ["# manifest_hash: abc", "# seed: 3"]
    assert len(lines) == 4 and lines[3].startswith("vad,overall,-,accuracy,1.000000")
    assert render_report(rep, "text") == render_report(rep, "text")
    with pytest.raises(ValueError):
        render_report(rep, "xml")


def test_render_row_order():
    homes = [f"home{i}" for i in (10, 2, 1, 6, 3, 5)]
    rows = [ReportRow("sid", h, ident, "f1", ConfusionCounts(tp=1))
            for h in homes for ident in ("patient", "caregiver")]
    random.Random(1).shuffle(rows)
    lines = render_report(EvalReport(rows), "csv").splitlines()[1:]
    keys = [tuple(l.split(",")[1:3]) for l in lines]
    assert len(keys) == 12
    want = [(h, i) for h in ("home1", "home2", "home3", "home5", "home6", "home10")
            for i in ("caregiver", "patient")]
    assert keys == want


def test_render_undefined_marker():
    rep = EvalReport([ReportRow("sid", "home1", "caregiver", "f1", ConfusionCounts(tn=4))])
    assert UNDEFINED in render_report(rep, "text") and UNDEFINED in render_report(rep, "csv")


def test_report_record_round_trip():
    decisions, labels = emotion_fixture(4, 9)
    rep = evaluate_emotion_balanced(decisions, labels, 2, metadata={"manifest_hash": "h"})
    back = EvalReport.from_record(rep.to_record())
    assert render_report(back, "csv") == render_report(rep, "csv")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.sampled_from(PROTOCOL_CONDITIONS)),
                min_size=1, max_size=60), st.randoms())
def test_vad_permutation_invariant(rows, rnd):
    ss = [LabeledSample(f"v{i}", is_speech=t, condition=c) for i, (t, _, c) in enumerate(rows)]
    preds = {f"v{i}": p for i, (_, p, _) in enumerate(rows)}
    shuffled = list(ss)
    rnd.shuffle(shuffled)
    a = render_report(evaluate_vad(preds, ss), "csv")
    b = render_report(evaluate_vad(preds, shuffled), "csv")
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(SETS), st.sampled_from(SETS),
                          st.sampled_from(["home1", "home2", "home3"])), min_size=1, max_size=40))
def test_sid_counts_conserved(rows):
    ss = [LabeledSample(f"q{i}", is_speech=True, speakers=t, home_id=h) for i, (t, _, h) in enumerate(rows)]
    preds = {f"q{i}": p for i, (_, p, _) in enumerate(rows)}
    rep = evaluate_sid(preds, ss, include_overall=True)
    for ident in ("caregiver", "patient"):
        per_home = sum((r.counts for r in rep.rows if r.key == ident and r.group != "overall"),
                       ConfusionCounts())
        assert per_home == rep.row("overall", ident).counts
        assert per_home.total == len(rows)
