"""Concurrency primitives and the scheduler abstraction.

The runtime drives every domain through a Scheduler so the same code runs
in two modes:

 * ThreadScheduler: each domain is an OS thread, time is the wall clock.
 * CooperativeScheduler: domains are threads but exactly one runs at a
   time; control passes at explicit gates, chosen by a seeded RNG.  Time
   is a logical step counter, so runs (and emitted reports) are
   reproducible bit-for-bit for a fixed seed.

Atomic counters use a lock per value.  Under CPython these operations are
already indivisible most of the time, but the lock documents intent and
keeps us honest if the interpreter changes.
"""

from __future__ import annotations

import random
import threading
import time
from collections import deque


class AtomicInt:
    __slots__ = ("_value", "_lock")

    def __init__(self, value: int = 0):
        self._value = value
        self._lock = threading.Lock()

    def get(self) -> int:
        return self._value

    def set(self, v: int) -> None:
        with self._lock:
            self._value = v

    def add(self, delta: int) -> int:
        with self._lock:
            self._value += delta
            return self._value

    def cas(self, expect: int, update: int) -> bool:
        with self._lock:
            if self._value != expect:
                return False
            self._value = update
            return True


class QueueClosed(Exception):
    """Push to an interrupt queue whose owner has terminated."""


class MpscQueue:
    """Multi-producer single-consumer queue for inter-domain interrupts.

    Producers push from any thread; only the owning domain drains.  close()
    is called by the owner during termination: later pushes raise, and the
    owner does one final drain after closing so nothing is lost.
    """

    def __init__(self):
        self._items = deque()
        self._lock = threading.Lock()
        self._closed = False

    def push(self, item) -> None:
        with self._lock:
            if self._closed:
                raise QueueClosed()
            self._items.append(item)

    def drain(self) -> list:
        if not self._items:
            return []
        with self._lock:
            items = list(self._items)
            self._items.clear()
        return items

    def close(self) -> None:
        with self._lock:
            self._closed = True

    def __len__(self) -> int:
        return len(self._items)


class SchedulerStall(Exception):
    """Cooperative run exceeded its step bound without completing."""


class _Worker:
    __slots__ = ("name", "thread", "go", "done", "exc", "fn")

    def __init__(self, name, fn):
        self.name = name
        self.fn = fn
        self.thread = None
        self.go = threading.Event()
        self.done = False
        self.exc = None


class ThreadScheduler:
    """Free-running OS threads; gates are no-ops, spins release the GIL."""

    deterministic = False

    def __init__(self):
        self._workers = []

    def launch(self, name, fn):
        w = _Worker(name, fn)

        def body():
            try:
                fn()
            except BaseException as e:  # surfaced at join
                w.exc = e
            finally:
                w.done = True

        w.thread = threading.Thread(target=body, name=name, daemon=True)
        self._workers.append(w)
        w.thread.start()
        return w

    def gate(self) -> None:
        pass

    def spin_pause(self) -> None:
        time.sleep(0)

    def now_ns(self) -> int:
        return time.perf_counter_ns()

    def run_until_complete(self) -> None:
        for w in self._workers:
            w.thread.join()
        for w in self._workers:
            if w.exc is not None:
                raise w.exc
        self._workers.clear()


class CooperativeScheduler:
    """Deterministic single-token scheduler over worker threads.

    Exactly one worker (or the coordinator) runs at any moment.  A worker
    hands control back at every gate; the coordinator picks the next
    runnable worker with a seeded RNG.  The step counter doubles as the
    logical clock.
    """

    deterministic = True

    def __init__(self, seed: int = 0, max_steps: int | None = None,
                 gate_every: int = 4):
        self._rng = random.Random(seed)
        self._workers = []
        self._resume = threading.Event()
        self._current = None
        self._steps = 0
        self._max_steps = max_steps
        self._gate_every = max(gate_every, 1)
        self._gate_count = 0
        self._tls = threading.local()

    def launch(self, name, fn):
        w = _Worker(name, fn)

        def body():
            w.go.wait()
            self._tls.worker = w
            try:
                fn()
            except BaseException as e:
                w.exc = e
            finally:
                w.done = True
                self._resume.set()

        w.thread = threading.Thread(target=body, name=name, daemon=True)
        self._workers.append(w)
        w.thread.start()
        return w

    def _switch_out(self, w) -> None:
        w.go.clear()
        self._resume.set()
        w.go.wait()

    def gate(self) -> None:
        # Sampled: switching at every poll would dominate the run; every
        # k-th gate still interleaves domains at all poll sites over time
        # and stays deterministic.
        w = getattr(self._tls, "worker", None)
        if w is None:
            return  # coordinator thread; nothing to yield
        self._gate_count += 1
        if self._gate_count % self._gate_every:
            return
        self._switch_out(w)

    def spin_pause(self) -> None:
        # Spins must always yield or a waiting domain would starve the
        # domain it is waiting on.
        w = getattr(self._tls, "worker", None)
        if w is None:
            return
        self._switch_out(w)

    def now_ns(self) -> int:
        return self._steps

    def run_until_complete(self) -> None:
        while True:
            live = [w for w in self._workers if not w.done]
            if not live:
                break
            self._steps += 1
            if self._max_steps is not None and self._steps > self._max_steps:
                raise SchedulerStall("no completion after %d steps" % self._max_steps)
            w = live[self._rng.randrange(len(live))]
            self._current = w
            self._resume.clear()
            w.go.set()
            self._resume.wait()
        failed = [w for w in self._workers if w.exc is not None]
        self._workers.clear()
        if failed:
            raise failed[0].exc
