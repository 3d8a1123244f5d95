"""Byte-level taint propagation and the malware-trace inclusion predicate.

Memory taint is tracked per global location id so tainted data survives
shared mappings and cross-process writes; register taint is tracked per
(pid, tid, register). An instruction joins the malware execution trace iff
any byte of its encoding is tainted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, MutableMapping

from .trace_model import TraceEvent

# per-pid map of virtual address -> byte value for tainted own-space writes
TaintedWritesMap = MutableMapping[int, Dict[int, int]]


@dataclass
class PropagationSet:
    """Global taint state: tainted memory (by g) and tainted registers."""

    tainted_mem: set[int] = field(default_factory=set)
    tainted_regs: set[tuple[int, int, str]] = field(default_factory=set)

    def copy(self) -> "PropagationSet":
        return PropagationSet(set(self.tainted_mem), set(self.tainted_regs))

    @property
    def empty(self) -> bool:
        return not self.tainted_mem and not self.tainted_regs


class MissingImageError(ValueError):
    pass


def init_taint(image_event: TraceEvent | None) -> PropagationSet:
    """Taint the whole loaded module, data and code sections alike."""
    if image_event is None or image_event.kind != "image":
        raise MissingImageError("missing image event")
    pset = PropagationSet()
    pset.tainted_mem.update(
        range(image_event.gbase, image_event.gbase + len(image_event.bytes)))
    return pset


def is_tainted_instruction(ev: TraceEvent, pset: PropagationSet) -> bool:
    """True iff any byte of the instruction's global span is tainted."""
    mem = pset.tainted_mem
    return any(g in mem for g in ev.gspan())


def update(ev: TraceEvent, pset: PropagationSet,
           twrites: TaintedWritesMap) -> tuple[PropagationSet, TaintedWritesMap]:
    """Advance taint state over one executed instruction (in place).

    Data flow: tainted inputs taint every output, untainted inputs clear
    every output (strong update). Executing tainted bytes taints every
    output regardless of the inputs. Tainted writes landing in the writer's
    own address space are recorded per pid.
    """
    mem = pset.tainted_mem
    regs = pset.tainted_regs
    key = (ev.pid, ev.tid)

    inputs_tainted = any(m.g in mem for m in ev.reads) or any(
        (ev.pid, ev.tid, r) in regs for r in ev.rregs)
    exec_tainted = any(g in mem for g in ev.gspan())

    if inputs_tainted or exec_tainted:
        for m in ev.writes:
            mem.add(m.g)
        for r in ev.wregs:
            regs.add((*key, r))
    else:
        for m in ev.writes:
            mem.discard(m.g)
        for r in ev.wregs:
            regs.discard((*key, r))

    for w in ev.writes:
        if w.g in mem and w.space_pid == ev.pid:
            twrites.setdefault(ev.pid, {})[w.v] = w.val
    return pset, twrites


def taint_log_line(ev: TraceEvent, tainted: bool, pset: PropagationSet,
                   twrites: TaintedWritesMap) -> str:
    """One debug-log line per executed instruction."""
    t = twrites.get(ev.pid, {})
    return f"{ev.seq}, tainted_instr:{str(tainted).lower()}, {len(pset.tainted_mem)}, {len(t)}"
