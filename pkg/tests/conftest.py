from __future__ import annotations

import numpy as np
import pytest

from voicehome import synth
from voicehome.audio import AudioClip
from voicehome.detectors import enroll

SR = 16000

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _criteria[n] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, text = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {text}")


def noise_clip(seconds: float = 5.0, level: float = 0.1, seed: int = 0, sr: int = SR) -> AudioClip:
    rng = np.random.default_rng(seed)
    return AudioClip(rng.uniform(-level, level, int(seconds * sr)), sr, f"noise{seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def noise_catalog():
    return synth.noise_catalog(seed=5)


@pytest.fixture(scope="session")
def profiles():
    """Cosine profiles from six windows per persona, disjoint from any test corpus."""
    pairs = synth.labelled_windows(["caregiver", "patient"] * 6, seed=424242, prefix="enr")
    out = []
    for ident in ("caregiver", "patient"):
        clips = [c for s, c in pairs if s.speakers == {ident}]
        out.append(enroll(clips, ident))
    return out
