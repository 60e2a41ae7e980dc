"""Polling file watcher shared by the settings and catalog reloaders."""

from __future__ import annotations

import hashlib
import threading
from pathlib import Path
from typing import Callable, Optional


def _fingerprint(path: Path) -> Optional[tuple[int, int, str]]:
    try:
        st = path.stat()
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
    except FileNotFoundError:
        return None
    return st.st_mtime_ns, st.st_size, digest


class FileWatcher:
    """Reports whether a file changed since the previous :meth:`check`.

    Content is hashed as well as stat'ed, so an edit that lands within the
    filesystem's mtime resolution is still noticed.
    """

    def __init__(self, path: str | Path, on_change: Callable[[Path], None] | None = None):
        self.path = Path(path)
        self.on_change = on_change
        self._last = _fingerprint(self.path)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def check(self) -> bool:
        now = _fingerprint(self.path)
        if now is None or now == self._last:
            return False
        # mtime alone can move without a content change (touch); ignore that
        changed = self._last is None or now[2] != self._last[2]
        self._last = now
        if changed and self.on_change is not None:
            self.on_change(self.path)
        return changed

    def start(self, interval: float = 1.0) -> None:
        if self._thread is not None:
            return

        def loop() -> None:
            while not self._stop.wait(interval):
                try:
                    self.check()
                except Exception:
                    # the callback reports its own errors; keep polling
                    pass

        self._thread = threading.Thread(target=loop, name=f"watch:{self.path.name}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
