"""Element-count accounting of named buffers.

The ledger stands in for a device memory profiler: kernels call ``alloc`` and
``free`` around every buffer they keep beyond a single expression, and the
ledger tracks the live total and its high-water mark.
"""
from __future__ import annotations

import threading


class AllocationLedger:
    def __init__(self):
        self._live = {}
        self._lock = threading.Lock()
        self.current = 0
        self.peak_aux_elements = 0
        self.breakdown = []
        self._peak_live = []

    def alloc(self, name: str, elements: int) -> None:
        with self._lock:
            if name in self._live:
                raise KeyError(f"buffer {name!r} already live")
            self._live[name] = int(elements)
            self.breakdown.append((name, int(elements)))
            self.current += int(elements)
            if self.current > self.peak_aux_elements:
                self.peak_aux_elements = self.current
                self._peak_live = list(self._live.items())

    def free(self, name: str) -> None:
        with self._lock:
            self.current -= self._live.pop(name)

    @property
    def live_at_peak(self) -> list[tuple[str, int]]:
        """Buffers that were live when the high-water mark was reached."""
        return list(self._peak_live)

    def largest(self) -> int:
        return max((e for _, e in self.breakdown), default=0)


class NullLedger:
    def alloc(self, name, elements):
        pass

    def free(self, name):
        pass
