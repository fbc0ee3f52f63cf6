"""Event calendar: the simulator's single source of time.

Time is integer nanoseconds.  Events fire in nondecreasing time order with
ties broken by insertion sequence, so a run is bit-reproducible for the same
inputs regardless of callback content.
"""

from heapq import heappop, heappush


class EventCalendar:
    __slots__ = ("now", "_heap", "_seq")

    def __init__(self) -> None:
        self.now = 0
        self._heap = []
        self._seq = 0

    def schedule(self, t: int, fn, arg=None) -> None:
        """Run ``fn(arg)`` at absolute time ``t`` (must not be in the past)."""
        self._seq += 1
        heappush(self._heap, (t, self._seq, fn, arg))

    def after(self, delay: int, fn, arg=None) -> None:
        self.schedule(self.now + delay, fn, arg)

    def __len__(self) -> int:
        return len(self._heap)

    def step(self):
        """Process the single next event; returns (time, fn, arg) or None."""
        if not self._heap:
            return None
        t, _, fn, arg = heappop(self._heap)
        self.now = t
        fn(arg)
        return t, fn, arg

    def run_until(self, t_end: int) -> None:
        """Process every event with time <= t_end; clock ends at t_end.

        Returns immediately on an empty calendar.
        """
        heap = self._heap
        while heap and heap[0][0] <= t_end:
            t, _, fn, arg = heappop(heap)
            self.now = t
            fn(arg)
        if self.now < t_end:
            self.now = t_end

    def run(self) -> None:
        """Drain the calendar completely."""
        heap = self._heap
        while heap:
            t, _, fn, arg = heappop(heap)
            self.now = t
            fn(arg)
