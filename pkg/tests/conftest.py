from __future__ import annotations

import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from waveunpack.trace_model import MemLoc, SystemTrace, TraceEvent

PAGE = 4096


class MicroSpace:
    """Fixed frame table for randomized micro-traces: g derives from (pid, v).

    Two processes with private pages plus one page shared between them, so
    cross-process flows show up in randomized testing.
    """

    def __init__(self):
        self.frames = {}
        nxt = 0x10_0000
        for pid in (1, 2):
            for page in range(6):
                self.frames[(pid, 0x400000 + page * PAGE)] = nxt
                nxt += PAGE
        shared = nxt
        self.frames[(1, 0x800000)] = shared
        self.frames[(2, 0x900000)] = shared

    def g_of(self, pid, v):
        page = v - v % PAGE
        return self.frames[(pid, page)] + (v - page)

    def loc(self, pid, v, val):
        return MemLoc(g=self.g_of(pid, v), v=v, space_pid=pid, val=val)

    def data_addr(self, rng, pid):
        if rng.random() < 0.2:
            base = 0x800000 if pid == 1 else 0x900000
        else:
            base = 0x400000 + rng.randrange(2, 6) * PAGE
        return base + rng.randrange(PAGE)


def random_micro_trace(seed: int, n_events: int = 1000) -> SystemTrace:
    rng = random.Random(seed)
    space = MicroSpace()
    events = []
    image_len = 2 * PAGE
    events.append(TraceEvent(kind="image", pid=1, base=0x400000,
                             gbase=space.g_of(1, 0x400000), name="micro.exe",
                             bytes=bytes(rng.randrange(256)
                                         for _ in range(image_len))))
    regs = ("eax", "ebx", "ecx")
    for seq in range(1, n_events + 1):
        pid = rng.choice((1, 1, 1, 2))
        code_page = 0x400000 + rng.randrange(0, 2) * PAGE
        length = rng.randrange(1, 7)
        vaddr = code_page + rng.randrange(PAGE - 16)
        reads = tuple(space.loc(pid, space.data_addr(rng, pid),
                                rng.randrange(256))
                      for _ in range(rng.randrange(0, 3)))
        n_writes = rng.randrange(0, 3)
        writes = []
        for _ in range(n_writes):
            # occasionally write the other process's view of the shared page
            wpid = pid
            if rng.random() < 0.15:
                wpid = 2 if pid == 1 else 1
                base = 0x900000 if wpid == 2 else 0x800000
                v = base + rng.randrange(PAGE)
            else:
                v = space.data_addr(rng, pid)
            writes.append(space.loc(wpid, v, rng.randrange(256)))
        events.append(TraceEvent(
            kind="instr", pid=pid, seq=seq, tid=1, vaddr=vaddr,
            gaddr=space.g_of(pid, vaddr),
            bytes=bytes(rng.randrange(256) for _ in range(length)),
            reads=reads, writes=tuple(writes),
            rregs=tuple(r for r in regs if rng.random() < 0.2),
            wregs=tuple(r for r in regs if rng.random() < 0.2)))
    return SystemTrace(events=events)


@pytest.fixture
def micro_trace():
    return random_micro_trace


@pytest.fixture
def d1_run():
    from waveunpack.pipeline import analyze
    from waveunpack.scenario_gen import generate_scenario

    trace, truth = generate_scenario("d1", 7)
    return trace, truth, analyze(trace)
