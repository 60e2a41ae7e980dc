"""Hot-reloadable intervention catalog, selection policies and response tracking.

Catalog file format::

    # comment
    [breathing]
    - Take three slow, deep breaths.
    [breathing.box]
    - Breathe in for four counts, hold for four, out for four.
    [timeout]
    ...
    [participant:alice]
    - Water the tomatoes.
    [positive_feedback]
    - Nice work, {participant}.

Messages are ``- text`` lines. A ``[cat.sub]`` section adds a subcategory
whose messages also belong to ``cat``. ``[participant:NAME]`` lists that
participant's personal enjoyable activities and may be empty.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .records import append_jsonl
from .watch import FileWatcher

CATEGORIES = ("breathing", "timeout", "mindfulness", "enjoyable_activities")
ENJOYABLE = "enjoyable_activities"
FEEDBACK = "positive_feedback"
TRIGGERS = ("anger", "conflict")
PRIOR_RATE = 0.5

_SECTION = re.compile(r"^\[([^\]]+)\]\s*$")


class CatalogError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = ""):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        super().__init__(where + message)


class CatalogSyntaxError(CatalogError):
    pass


class MissingCategory(CatalogError):
    pass


class EmptyMessage(CatalogError):
    pass


class UnknownParticipant(KeyError):
    pass


class UnknownEvent(KeyError):
    pass


@dataclass(frozen=True)
class MessageCatalog:
    categories: dict[str, tuple[str, ...]]
    subcategories: dict[str, tuple[str, ...]]
    personalized: dict[str, tuple[str, ...]]
    positive_feedback: tuple[str, ...]
    version: int = 1

    @property
    def participants(self) -> tuple[str, ...]:
        return tuple(sorted(self.personalized))

    def messages_for(self, category: str, participant: str) -> tuple[str, ...]:
        if category == ENJOYABLE and self.personalized.get(participant):
            return self.personalized[participant]
        return self.categories[category]

    def contains(self, text: str) -> bool:
        pools = [*self.categories.values(), *self.personalized.values(), self.positive_feedback]
        return any(text in pool for pool in pools)

    def with_version(self, version: int) -> "MessageCatalog":
        return MessageCatalog(self.categories, self.subcategories, self.personalized,
                              self.positive_feedback, version)


def parse_catalog(text: str, source: str = "<catalog>", version: int = 1) -> MessageCatalog:
    sections: dict[str, list[str]] = {}
    header_line: dict[str, int] = {}
    current: Optional[str] = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _SECTION.match(line)
        if m:
            name = m.group(1).strip()
            base = name.split(".", 1)[0]
            if not (name.startswith("participant:") or base in CATEGORIES or name == FEEDBACK):
                raise CatalogSyntaxError(f"unknown section [{name}]", n, source)
            if name.startswith("participant:") and not name.split(":", 1)[1].strip():
                raise CatalogSyntaxError("participant section needs a name", n, source)
            if name in sections:
                raise CatalogSyntaxError(f"duplicate section [{name}]", n, source)
            sections[name] = []
            header_line[name] = n
            current = name
            continue
        if not line.startswith("-"):
            raise CatalogSyntaxError(f"expected '- message' or [section], got {line!r}", n, source)
        if current is None:
            raise CatalogSyntaxError("message before any section", n, source)
        msg = line[1:].strip()
        if not msg:
            raise EmptyMessage(f"empty message in [{current}]", n, source)
        sections[current].append(msg)

    end_line = len(text.splitlines()) or 1
    for cat in CATEGORIES:
        if cat not in sections:
            raise MissingCategory(f"missing category [{cat}]", end_line, source)
    if FEEDBACK not in sections:
        raise MissingCategory(f"missing [{FEEDBACK}]", end_line, source)

    categories: dict[str, list[str]] = {c: list(sections[c]) for c in CATEGORIES}
    subcategories: dict[str, tuple[str, ...]] = {}
    personalized: dict[str, tuple[str, ...]] = {}
    for name, msgs in sections.items():
        if name.startswith("participant:"):
            personalized[name.split(":", 1)[1].strip()] = tuple(msgs)
        elif "." in name:
            if not msgs:
                raise EmptyMessage(f"subcategory [{name}] has no messages", header_line[name], source)
            subcategories[name] = tuple(msgs)
            categories[name.split(".", 1)[0]].extend(msgs)
    for cat in CATEGORIES + (FEEDBACK,):
        pool = categories[cat] if cat != FEEDBACK else sections[FEEDBACK]
        if not pool:
            raise EmptyMessage(f"category [{cat}] has no messages", header_line[cat], source)
    return MessageCatalog(
        {c: tuple(v) for c, v in categories.items()}, subcategories, personalized,
        tuple(sections[FEEDBACK]), version,
    )


def load_catalog(path: str | Path, version: int = 1) -> MessageCatalog:
    p = Path(path)
    return parse_catalog(p.read_text(encoding="utf-8"), str(p), version)


class CatalogHandle:
    """Serves one catalog at a time; reloads swap the whole catalog or nothing."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._catalog = load_catalog(self.path)
        self._lock = threading.Lock()
        self.last_error: Optional[Exception] = None
        self._watcher: Optional[FileWatcher] = None

    @property
    def catalog(self) -> MessageCatalog:
        return self._catalog

    @property
    def version(self) -> int:
        return self._catalog.version

    def hot_reload(self, path: str | Path | None = None) -> MessageCatalog:
        src = Path(path) if path is not None else self.path
        with self._lock:
            try:
                new = load_catalog(src, self._catalog.version + 1)
            except (CatalogError, OSError) as exc:
                self.last_error = exc
                raise
            self._catalog = new
            self.last_error = None
            return new

    def watch(self, interval: float = 1.0) -> FileWatcher:
        def reload(_path: Path) -> None:
            try:
                self.hot_reload()
            except (CatalogError, OSError):
                pass  # kept in last_error, old catalog keeps serving

        self._watcher = FileWatcher(self.path, reload)
        self._watcher.start(interval)
        return self._watcher


# -- policy ---------------------------------------------------------------------


@dataclass
class PolicyState:
    kind: str = "round_robin"
    epsilon: float = 0.1
    cursor: int = 0
    implemented: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})
    responses: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})

    def __post_init__(self) -> None:
        if self.kind not in ("round_robin", "epsilon_greedy"):
            raise ValueError(f"unknown policy {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def rate(self, category: str) -> float:
        n = self.responses[category]
        return self.implemented[category] / n if n else PRIOR_RATE

    def update(self, category: str, implemented: bool) -> None:
        self.responses[category] += 1
        self.implemented[category] += int(implemented)


def choose_category(state: PolicyState, rng: np.random.Generator) -> str:
    if state.kind == "round_robin":
        cat = CATEGORIES[state.cursor % len(CATEGORIES)]
        state.cursor += 1
        return cat
    if rng.random() < state.epsilon:
        return CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    rates = [state.rate(c) for c in CATEGORIES]
    return CATEGORIES[int(np.argmax(rates))]  # argmax keeps the first of ties


@dataclass(frozen=True)
class RecommendationEvent:
    event_id: str
    participant: str
    trigger: str
    category: str
    text: str
    catalog_version: int
    timestamp: float

    def to_record(self) -> dict[str, Any]:
        return {"event_id": self.event_id, "participant": self.participant,
                "trigger": self.trigger, "category": self.category, "text": self.text,
                "catalog_version": self.catalog_version, "timestamp": self.timestamp}


@dataclass(frozen=True)
class ResponseRecord:
    event_id: str
    implemented: bool
    timestamp: float

    def to_record(self) -> dict[str, Any]:
        return {"event_id": self.event_id, "implemented": self.implemented,
                "timestamp": self.timestamp}


def select_message(
    catalog: MessageCatalog,
    participant: str,
    trigger: str,
    policy_state: PolicyState,
    rng_seed: int,
    timestamp: float = 0.0,
    event_id: str = "ev1",
) -> RecommendationEvent:
    """Pick a category by policy, then a message uniformly within it.

    Advances ``policy_state`` (the round-robin cursor); the draw itself is a
    function of the seed and the state.
    """
    if participant not in catalog.personalized:
        raise UnknownParticipant(participant)
    if trigger not in TRIGGERS:
        raise ValueError(f"unknown trigger {trigger!r}")
    rng = np.random.default_rng(rng_seed)
    category = choose_category(policy_state, rng)
    pool = catalog.messages_for(category, participant)
    text = pool[int(rng.integers(len(pool)))]
    return RecommendationEvent(event_id, participant, trigger, category, text,
                               catalog.version, timestamp)


class EmaSession:
    """Events, responses and feedback for one deployment.

    ``digest`` enables the optional daily summary on top of the immediate
    feedback; both are plain strings returned to the caller.
    """

    def __init__(
        self,
        handle: CatalogHandle,
        policy: PolicyState | None = None,
        seed: int = 0,
        clock: Callable[[], float] | None = None,
        log_path: str | Path | None = None,
        digest: bool = False,
    ):
        self.handle = handle
        self.policy = policy or PolicyState()
        self.seed = seed
        self.clock = clock or (lambda: 0.0)
        self.log_path = Path(log_path) if log_path is not None else None
        self.digest_enabled = digest
        self.events: dict[str, RecommendationEvent] = {}
        self.responses: list[ResponseRecord] = []
        self.feedback: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def _log(self, kind: str, rec: dict[str, Any]) -> None:
        if self.log_path is not None:
            append_jsonl(self.log_path, {"kind": kind, **rec})

    def recommend(self, participant: str, trigger: str) -> RecommendationEvent:
        with self._lock:
            n = len(self.events) + 1
            catalog = self.handle.catalog  # one snapshot per selection
            ev = select_message(catalog, participant, trigger, self.policy,
                                rng_seed=hash_seed(self.seed, n), timestamp=self.clock(),
                                event_id=f"ev{n}")
            self.events[ev.event_id] = ev
        self._log("event", ev.to_record())
        return ev

    def record_response(self, event_id: str, implemented: bool) -> tuple[ResponseRecord, Optional[str]]:
        with self._lock:
            if event_id not in self.events:
                raise UnknownEvent(event_id)
            ev = self.events[event_id]
            resp = ResponseRecord(event_id, bool(implemented), self.clock())
            self.responses.append(resp)
            self.policy.update(ev.category, resp.implemented)
            message = None
            if resp.implemented:
                templates = self.handle.catalog.positive_feedback
                message = templates[len(self.feedback) % len(templates)].replace(
                    "{participant}", ev.participant)
                self.feedback.append((event_id, message))
        self._log("response", resp.to_record())
        if message is not None:
            self._log("feedback", {"event_id": event_id, "text": message,
                                   "timestamp": resp.timestamp})
        return resp, message

    def implemented_rates(self) -> dict[str, Optional[float]]:
        return {c: (self.policy.implemented[c] / self.policy.responses[c]
                    if self.policy.responses[c] else None) for c in CATEGORIES}

    def daily_digest(self, participant: str, day_start: float, day_end: float) -> Optional[str]:
        if not self.digest_enabled:
            return None
        done = sum(1 for r in self.responses
                   if r.implemented and day_start <= r.timestamp < day_end
                   and self.events[r.event_id].participant == participant)
        if not done:
            return None
        noun = "suggestion" if done == 1 else "suggestions"
        return f"{participant}: you tried {done} {noun} today."


def hash_seed(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, n]).generate_state(1)[0])


DEFAULT_CATALOG = """\
[breathing]
- Take three slow, deep breaths before you answer.
- Breathe in through your nose for four counts, then out for six.
[timeout]
- Step into another room for five minutes.
- Pause the conversation and come back to it in ten minutes.
[mindfulness]
- Notice five things you can see right now.
- Put your hands on the table and feel its surface for a moment.
[enjoyable_activities]
- Put on a song you both like.
- Make a cup of tea.
[positive_feedback]
- Well done, {participant}. That took effort.
- Nice work, {participant}.
"""
