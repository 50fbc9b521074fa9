"""Minimal deterministic discrete-event kernel.

Processes are generators yielding ``("sleep", dt, prio)`` or
``("wait", signal, prio)``.  Simultaneous wake-ups run in (priority,
device, insertion) order, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import heapq
from collections import deque
from typing import Callable

# tie order at equal timestamps
PRIO_LOAD = 0
PRIO_COMPUTE = 1
PRIO_ACT = 2
PRIO_KV = 3


class Loop:
    def __init__(self):
        self.now = 0.0
        self._heap = []
        self._seq = 0

    def at(self, t: float, prio: int, dev: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (t, prio, dev, self._seq, fn))
        self._seq += 1

    def run(self) -> None:
        while self._heap:
            t, _, _, _, fn = heapq.heappop(self._heap)
            self.now = t
            fn()


class Signal:
    __slots__ = ("loop", "time", "waiters")

    def __init__(self, loop: Loop):
        self.loop = loop
        self.time = None
        self.waiters = []

    @property
    def fired(self) -> bool:
        return self.time is not None

    def fire(self) -> None:
        if self.time is not None:
            return
        self.time = self.loop.now
        for prio, dev, fn in self.waiters:
            self.loop.at(self.time, prio, dev, fn)
        self.waiters.clear()

    def on(self, prio: int, dev: int, fn) -> None:
        if self.time is not None:
            self.loop.at(self.loop.now, prio, dev, fn)
        else:
            self.waiters.append((prio, dev, fn))


class Process:
    def __init__(self, loop: Loop, gen, dev: int, prio: int):
        self.loop = loop
        self.gen = gen
        self.dev = dev
        self.prio = prio
        self.error = None

    def start(self) -> None:
        self.loop.at(self.loop.now, self.prio, self.dev, self._step)

    def _step(self) -> None:
        try:
            cmd = next(self.gen)
        except StopIteration:
            return
        kind = cmd[0]
        if kind == "sleep":
            self.loop.at(self.loop.now + cmd[1], cmd[2], self.dev, self._step)
        elif kind == "wait":
            cmd[1].on(cmd[2], self.dev, self._step)
        else:  # pragma: no cover - programming error
            raise ValueError(f"unknown command {kind!r}")


class Job:
    __slots__ = ("kind", "remaining", "bw", "meta", "on_start", "on_done", "chunk_start", "first_start")

    def __init__(self, kind, nbytes, bw, meta, on_done=None, on_start=None):
        self.kind = kind
        self.remaining = float(nbytes)
        self.bw = bw
        self.meta = meta
        self.on_done = on_done
        self.on_start = on_start
        self.chunk_start = None
        self.first_start = None


class Link:
    """One directed device pair.  Activations pre-empt KV transfers."""

    def __init__(self, loop: Loop, src: int, dst: int, record):
        self.loop = loop
        self.src = src
        self.dst = dst
        self.record = record  # record(job, t_start, t_end, final)
        self.act = deque()
        self.kv = deque()
        self.current = None
        self._version = 0

    def submit(self, job: Job) -> None:
        if job.kind == "ActivationSend":
            self.act.append(job)
            if self.current is not None and self.current.kind != "ActivationSend":
                self._preempt()
        else:
            self.kv.append(job)
        self._kick()

    def _kick(self) -> None:
        if self.current is not None:
            return
        if self.act:
            job = self.act.popleft()
        elif self.kv:
            job = self.kv.popleft()
        else:
            return
        self.current = job
        job.chunk_start = self.loop.now
        if job.first_start is None:
            job.first_start = self.loop.now
            if job.on_start:
                job.on_start()
        self._version += 1
        version = self._version
        prio = PRIO_ACT if job.kind == "ActivationSend" else PRIO_KV
        self.loop.at(self.loop.now + job.remaining / job.bw, prio, self.src,
                     lambda: self._finish(version))

    def _finish(self, version: int) -> None:
        if version != self._version:
            return
        job = self.current
        self.current = None
        self.record(job, job.chunk_start, self.loop.now, True)
        if job.on_done:
            job.on_done()
        self._kick()

    def _preempt(self) -> None:
        job = self.current
        now = self.loop.now
        job.remaining -= (now - job.chunk_start) * job.bw
        self._version += 1
        self.current = None
        if job.remaining <= 1e-6:
            self.record(job, job.chunk_start, now, True)
            if job.on_done:
                job.on_done()
            return
        if now > job.chunk_start:
            self.record(job, job.chunk_start, now, False)
        self.kv.appendleft(job)
