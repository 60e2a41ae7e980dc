"""Component liveness supervision with restart budgets and notifications.

The supervisor runs against a clock. Tests and replays use
:class:`VirtualClock` and drive it with :meth:`Supervisor.step`; live mode
uses wall time and one probing thread per component.
"""

from __future__ import annotations

import configparser
import json
import subprocess
import threading
import time
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

from .records import append_jsonl

CRASH_DETECTED = "crash_detected"
RESTARTED = "restarted"
RESTART_EXHAUSTED = "restart_exhausted"
EVENT_KINDS = (CRASH_DETECTED, RESTARTED, RESTART_EXHAUSTED)

ALIVE = "alive"
RESTARTING = "restarting"
PARKED = "parked"


class SupervisorError(Exception):
    pass


class DuplicateComponent(SupervisorError, ValueError):
    pass


class UnknownComponent(SupervisorError, KeyError):
    pass


class ConfigError(SupervisorError, ValueError):
    pass


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    probe: Callable[[], bool]
    restart: Callable[[], None]
    max_restarts: int = 3
    period: float = 1.0
    budget_window: Optional[float] = None  # seconds; None means the whole run

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("component name must be nonempty")
        if self.period <= 0:
            raise ValueError(f"{self.name}: probe period must be > 0")
        if self.max_restarts < 0:
            raise ValueError(f"{self.name}: max_restarts must be >= 0")
        if self.budget_window is not None and self.budget_window <= 0:
            raise ValueError(f"{self.name}: budget window must be > 0")


@dataclass(frozen=True)
class NotificationEvent:
    component: str
    kind: str
    timestamp: float
    seq: int

    def to_record(self) -> dict:
        return {"component": self.component, "kind": self.kind,
                "timestamp": self.timestamp, "seq": self.seq}


class Clock(Protocol):
    def now(self) -> float: ...


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("virtual time cannot go backwards")
        self._now += dt


class WallClock:
    def now(self) -> float:
        return time.time()


@dataclass
class _Component:
    spec: ComponentSpec
    state: str = ALIVE
    next_probe: float = 0.0
    restarts: deque = field(default_factory=deque)  # timestamps of restart attempts
    fault_ticks: set = field(default_factory=set)
    latched: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)


class Supervisor:
    """Run handle returned by :func:`supervise`."""

    def __init__(self, specs: Sequence[ComponentSpec], notify_sink=None,
                 clock: Clock | None = None, tick: float | None = None):
        names = [s.name for s in specs]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DuplicateComponent(f"duplicate component names: {dupes}")
        self.clock = clock if clock is not None else VirtualClock()
        self.tick_seconds = tick if tick is not None else min((s.period for s in specs), default=1.0)
        self.tick = 0
        self.sink = notify_sink
        self.sink_errors: list[str] = []
        start = self.clock.now()
        self._components = {s.name: _Component(s, next_probe=start) for s in specs}
        self._events: list[NotificationEvent] = []
        self._events_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- inspection ---------------------------------------------------------

    @property
    def names(self) -> list[str]:
        return list(self._components)

    def state(self, name: str) -> str:
        return self._get(name).state

    def states(self) -> dict[str, str]:
        return {n: c.state for n, c in self._components.items()}

    def _get(self, name: str) -> _Component:
        try:
            return self._components[name]
        except KeyError:
            raise UnknownComponent(name) from None

    # -- events -------------------------------------------------------------

    def _emit(self, component: str, kind: str) -> None:
        with self._events_lock:
            ev = NotificationEvent(component, kind, self.clock.now(), len(self._events) + 1)
            self._events.append(ev)
        if self.sink is not None:
            try:
                self.sink(ev)
            except Exception as exc:
                # a broken notifier must not stop supervision
                self.sink_errors.append(f"{ev.seq}: {exc}")

    def events(self) -> list[NotificationEvent]:
        with self._events_lock:
            return list(self._events)

    # -- the state machine --------------------------------------------------

    def _alive(self, c: _Component) -> bool:
        if c.latched:
            return False
        try:
            return bool(c.spec.probe())
        except Exception:
            return False

    def _budget_left(self, c: _Component, now: float) -> bool:
        w = c.spec.budget_window
        if w is not None:
            while c.restarts and c.restarts[0] <= now - w:
                c.restarts.popleft()
        return len(c.restarts) < c.spec.max_restarts

    def _try_restart(self, c: _Component, now: float) -> None:
        if not self._budget_left(c, now):
            c.state = PARKED
            self._emit(c.spec.name, RESTART_EXHAUSTED)
            return
        c.restarts.append(now)
        try:
            c.spec.restart()
        except Exception:
            c.state = RESTARTING
            return
        c.latched = False
        c.state = ALIVE
        self._emit(c.spec.name, RESTARTED)

    def _probe(self, c: _Component) -> None:
        with c.lock:
            if c.state == PARKED:
                return
            now = self.clock.now()
            if c.state == RESTARTING:
                self._try_restart(c, now)
                return
            if self._alive(c):
                return
            self._emit(c.spec.name, CRASH_DETECTED)
            self._try_restart(c, now)

    def step(self) -> None:
        """Process one tick: latch due faults, probe due components, advance the clock."""
        now = self.clock.now()
        for c in self._components.values():
            if self.tick in c.fault_ticks and c.state != PARKED:
                c.latched = True
            if now + 1e-9 >= c.next_probe:
                self._probe(c)
                c.next_probe += c.spec.period
                while c.next_probe <= now:
                    c.next_probe += c.spec.period
        self.tick += 1
        advance = getattr(self.clock, "advance", None)
        if advance is not None:
            advance(self.tick_seconds)

    def run_ticks(self, n: int) -> None:
        for _ in range(n):
            self.step()

    def run_for(self, seconds: float) -> None:
        self.run_ticks(int(round(seconds / self.tick_seconds)))

    # -- live mode ----------------------------------------------------------

    def start(self) -> None:
        """Probe every component on its own thread against the configured clock."""
        for c in self._components.values():
            t = threading.Thread(target=self._live_loop, args=(c,), name=f"sup:{c.spec.name}",
                                 daemon=True)
            self._threads.append(t)
            t.start()

    def _live_loop(self, c: _Component) -> None:
        while not self._stop.is_set():
            self._probe(c)
            if self._stop.wait(c.spec.period):
                return

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join()
        self._threads.clear()


def supervise(specs: Sequence[ComponentSpec], notify_sink=None, clock: Clock | None = None,
              tick: float | None = None) -> Supervisor:
    return Supervisor(specs, notify_sink, clock, tick)


def inject_fault(handle: Supervisor, component: str, at_tick: int) -> None:
    """Make ``component`` report dead from ``at_tick`` until it is restarted."""
    handle._get(component).fault_ticks.add(int(at_tick))


def drain_events(handle: Supervisor) -> list[NotificationEvent]:
    return handle.events()


# -- notification sinks -------------------------------------------------------


class JsonlSink:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def __call__(self, ev: NotificationEvent) -> None:
        with self._lock:
            append_jsonl(self.path, ev.to_record())


class WebhookSink:
    """POSTs ``{"component", "kind", "timestamp"}`` as JSON to ``url``."""

    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url
        self.timeout = timeout

    def body(self, ev: NotificationEvent) -> bytes:
        return json.dumps({"component": ev.component, "kind": ev.kind,
                           "timestamp": ev.timestamp}, sort_keys=True).encode("utf-8")

    def __call__(self, ev: NotificationEvent) -> None:
        req = urllib.request.Request(self.url, data=self.body(ev), method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            resp.read()


class FanoutSink:
    def __init__(self, sinks: Iterable[Callable[[NotificationEvent], None]]):
        self.sinks = list(sinks)

    def __call__(self, ev: NotificationEvent) -> None:
        errors = []
        for s in self.sinks:
            try:
                s(ev)
            except Exception as exc:
                errors.append(exc)
        if errors:
            raise errors[0]


# -- subprocess components from a config file --------------------------------


class ProcessComponent:
    """A command kept running as a child process."""

    def __init__(self, command: str, cwd: str | None = None):
        self.command = command
        self.cwd = cwd
        self.proc: subprocess.Popen | None = None

    def launch(self) -> None:
        self.proc = subprocess.Popen(self.command, shell=True, cwd=self.cwd,
                                     stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)

    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def restart(self) -> None:
        self.terminate()
        self.launch()

    def terminate(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


@dataclass
class SupervisorConfig:
    components: dict[str, dict[str, str]]
    log: Optional[str] = None
    webhook: Optional[str] = None
    tick: Optional[float] = None


def load_config(path: str | Path) -> SupervisorConfig:
    """INI file: an optional ``[supervisor]`` section and one ``[component:NAME]`` per component."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    comps = {}
    for section in cp.sections():
        if section.startswith("component:"):
            name = section.split(":", 1)[1].strip()
            body = dict(cp[section])
            if "command" not in body:
                raise ConfigError(f"{path}: [{section}] needs a command")
            comps[name] = body
        elif section != "supervisor":
            raise ConfigError(f"{path}: unknown section [{section}]")
    if not comps:
        raise ConfigError(f"{path}: no [component:NAME] sections")
    sup = cp["supervisor"] if cp.has_section("supervisor") else {}
    tick = sup.get("tick")
    return SupervisorConfig(comps, sup.get("log"), sup.get("webhook"),
                            float(tick) if tick else None)


def process_specs(cfg: SupervisorConfig) -> tuple[list[ComponentSpec], list[ProcessComponent]]:
    specs, procs = [], []
    for name, body in cfg.components.items():
        proc = ProcessComponent(body["command"], body.get("cwd"))
        window = body.get("budget_window")
        try:
            specs.append(ComponentSpec(
                name, proc.alive, proc.restart,
                max_restarts=int(body.get("max_restarts", 3)),
                period=float(body.get("period", 1.0)),
                budget_window=float(window) if window else None,
            ))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        procs.append(proc)
    return specs, procs
