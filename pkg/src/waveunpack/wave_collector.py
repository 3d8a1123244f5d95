"""Partition the malware execution trace into per-process execution waves.

Each process with malware execution has exactly one active wave. A tainted
instruction is classified against the process's shadow memory and tainted
writes; executing freshly written memory (a new region, or overwritten
code) closes the current wave and starts the next one. Closed waves are
logged together with page dumps of their shadow memory and tainted writes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .taint_engine import (
    PropagationSet,
    init_taint,
    is_tainted_instruction,
    taint_log_line,
    update,
)
from .trace_model import ObservedMemory, SystemTrace, TraceEvent


@dataclass(frozen=True)
class InstrRef:
    """Reference to one executed instruction of the malware trace."""

    seq: int
    pid: int
    vaddr: int
    bytes: bytes

    def code_pairs(self):
        return [(self.vaddr + i, b) for i, b in enumerate(self.bytes)]


@dataclass
class ProcessState:
    """Per-process collection state: one active wave at any moment."""

    pid: int
    shadow: dict[int, int] = field(default_factory=dict)
    twrites: dict[int, int] = field(default_factory=dict)
    cur_instrs: list[InstrRef] = field(default_factory=list)
    wave_index: int = 0


@dataclass
class WaveRecord:
    """One closed execution wave: instructions, memory pairs, page dumps."""

    pid: int
    wave_index: int
    instrs: list[InstrRef]
    shadow_pairs: dict[int, int]
    twrite_pairs: dict[int, int]
    page_dumps: dict[int, bytes]
    entry_vaddr: int

    @property
    def first_seq(self) -> int:
        return self.instrs[0].seq

    @property
    def last_seq(self) -> int:
        return self.instrs[-1].seq


@dataclass
class WaveSet:
    """All waves of a run, ordered per process, plus the initial wave id."""

    by_pid: dict[int, list[WaveRecord]]
    records: list[WaveRecord]
    initial: tuple[int, int] | None  # (pid, wave_index) where execution began


@dataclass
class CollectResult:
    mtrace: list[InstrRef]
    wave_set: WaveSet
    records: list[WaveRecord]


@dataclass(frozen=True)
class Violation:
    bullet: int
    pid: int
    wave_index: int
    detail: str

    def __str__(self):
        return f"bullet {self.bullet} (pid {self.pid} wave {self.wave_index}): {self.detail}"


def classify_case(ev: TraceEvent, state: ProcessState) -> int:
    """Classify a tainted instruction against shadow memory / tainted writes.

    Tests cover every byte of the encoding, so instructions straddling a
    generated-code boundary classify conservatively:
      1 -> no byte known at all (cross-process arrival, or earlier-wave code)
      2 -> some byte outside the shadow but freshly written (new region)
      3 -> fully shadowed but overwritten with different content
      4 -> fully consistent with the current wave
    """
    shadow = state.shadow
    tw = state.twrites
    span = list(ev.vspan())
    in_shadow = [v in shadow for v in span]
    in_tw = [v in tw for v in span]
    if not any(in_shadow) and not any(in_tw):
        return 1
    if any(t and not s for s, t in zip(in_shadow, in_tw)):
        return 2
    if all(in_shadow) and any(
            v in tw and tw[v] != shadow[v] for v in span):
        return 3
    return 4


def _dump_pages(state: ProcessState, observed: ObservedMemory,
                page_size: int) -> dict[int, bytes]:
    pages = {v - v % page_size for v in state.shadow}
    pages.update(v - v % page_size for v in state.twrites)
    return {p: observed.page(state.pid, p) for p in sorted(pages)}


def dump_wave(state: ProcessState, trigger: InstrRef | None,
              observed: ObservedMemory, page_size: int) -> WaveRecord | None:
    """Close the current wave and rotate state for the next one.

    Returns the logged record, or None when the wave executed nothing
    (zero-instruction waves are suppressed). The new wave's shadow memory is
    the closed wave's tainted writes; the trigger instruction, if any,
    becomes the new wave's entry point.
    """
    record = None
    if state.cur_instrs:
        record = WaveRecord(
            pid=state.pid,
            wave_index=state.wave_index,
            instrs=list(state.cur_instrs),
            shadow_pairs=dict(state.shadow),
            twrite_pairs=dict(state.twrites),
            page_dumps=_dump_pages(state, observed, page_size),
            entry_vaddr=state.cur_instrs[0].vaddr,
        )
        state.wave_index += 1
    state.shadow = dict(state.twrites)
    # cleared in place: the taint engine holds a reference to this dict
    state.twrites.clear()
    state.cur_instrs = [trigger] if trigger is not None else []
    return record


def collect_waves(trace: SystemTrace, monitor=None,
                  taint_log=None) -> CollectResult:
    """Run the replay loop: taint, inclusion test, wave classification.

    `monitor` is an optional ApiMonitor fed module events, return sites and
    malware-trace instructions from the same cursor. `taint_log` is an
    optional writable text stream receiving one line per instruction.
    """
    page_size = trace.page_size
    observed = ObservedMemory(page_size)
    pset = PropagationSet()
    states: dict[int, ProcessState] = {}
    tmap: dict[int, dict[int, int]] = {}
    records: list[WaveRecord] = []
    mtrace: list[InstrRef] = []
    initial: tuple[int, int] | None = None
    image_seen = False

    def state_for(pid: int) -> ProcessState:
        st = states.get(pid)
        if st is None:
            st = ProcessState(pid=pid, twrites=tmap.setdefault(pid, {}))
            states[pid] = st
        return st

    for ev in trace.events:
        if ev.kind == "image":
            observed.record_event(ev)
            pset = init_taint(ev)
            st = state_for(ev.pid)
            st.shadow = {ev.base + i: b for i, b in enumerate(ev.bytes)}
            image_seen = True
            continue
        if ev.kind == "module":
            if monitor is not None:
                monitor.on_module(ev)
            continue
        if ev.kind == "procexit":
            st = states.get(ev.pid)
            if st is not None:
                rec = dump_wave(st, None, observed, page_size)
                if rec is not None:
                    records.append(rec)
            if monitor is not None:
                monitor.on_procexit(ev.pid)
            continue

        # instr
        if monitor is not None:
            monitor.on_return_site(ev)
        tainted = is_tainted_instruction(ev, pset)
        if tainted:
            st = state_for(ev.pid)
            ref = InstrRef(seq=ev.seq, pid=ev.pid, vaddr=ev.vaddr, bytes=ev.bytes)
            mtrace.append(ref)
            if initial is None:
                initial = (ev.pid, st.wave_index)
            case = classify_case(ev, st)
            if case == 1:
                for v, b in ref.code_pairs():
                    st.shadow[v] = b
                st.cur_instrs.append(ref)
            elif case in (2, 3):
                rec = dump_wave(st, ref, observed, page_size)
                if rec is not None:
                    records.append(rec)
            else:
                st.cur_instrs.append(ref)
            if monitor is not None:
                monitor.on_malware_instr(ev)
        update(ev, pset, tmap)
        observed.record_event(ev)
        if taint_log is not None:
            taint_log.write(taint_log_line(ev, tainted, pset, tmap) + "\n")
        if image_seen and pset.empty:
            break

    for pid in sorted(states):
        rec = dump_wave(states[pid], None, observed, page_size)
        if rec is not None:
            records.append(rec)

    by_pid: dict[int, list[WaveRecord]] = {}
    for rec in records:
        by_pid.setdefault(rec.pid, []).append(rec)
    for recs in by_pid.values():
        recs.sort(key=lambda r: r.wave_index)
    return CollectResult(
        mtrace=mtrace,
        wave_set=WaveSet(by_pid=by_pid, records=records, initial=initial),
        records=records,
    )


def verify_wave_semantics(records: list[WaveRecord], mtrace: list[InstrRef],
                          image_event: TraceEvent | None) -> list[Violation]:
    """Check the four wave-set requirements; violations are data, not errors.

    1. every malware-trace instruction belongs to exactly one wave;
    2. waves of one process are strictly ordered by instruction sequence;
    3. every shadow pair comes from the initial image, from the tainted
       writes of a wave that started earlier, or from an instruction the
       wave itself executed (case-1 arrivals add their own bytes);
    4. every instruction's bytes are present in its wave's shadow memory.
    """
    out: list[Violation] = []

    seen: dict[int, tuple[int, int]] = {}
    for rec in records:
        for ref in rec.instrs:
            if ref.seq in seen:
                out.append(Violation(1, rec.pid, rec.wave_index,
                                     f"instruction seq {ref.seq} appears in wave "
                                     f"{seen[ref.seq]} and again here"))
            seen[ref.seq] = (rec.pid, rec.wave_index)
    for ref in mtrace:
        if ref.seq not in seen:
            out.append(Violation(1, ref.pid, -1,
                                 f"instruction seq {ref.seq} is in no wave"))

    by_pid: dict[int, list[WaveRecord]] = {}
    for rec in records:
        by_pid.setdefault(rec.pid, []).append(rec)
    for pid, recs in by_pid.items():
        recs = sorted(recs, key=lambda r: r.wave_index)
        for prev, cur in zip(recs, recs[1:]):
            if prev.last_seq >= cur.first_seq:
                out.append(Violation(2, pid, cur.wave_index,
                                     f"wave overlaps predecessor: seq {prev.last_seq} "
                                     f">= {cur.first_seq}"))

    image_pairs = set()
    if image_event is not None:
        image_pairs = {(image_event.base + i, b)
                       for i, b in enumerate(image_event.bytes)}
    for rec in records:
        earlier_tw = set()
        for other in records:
            if other is not rec and other.first_seq < rec.first_seq:
                earlier_tw.update(other.twrite_pairs.items())
        own_pairs = set()
        for ref in rec.instrs:
            own_pairs.update(ref.code_pairs())
        for pair in rec.shadow_pairs.items():
            if pair in image_pairs or pair in earlier_tw or pair in own_pairs:
                continue
            out.append(Violation(3, rec.pid, rec.wave_index,
                                 f"shadow pair ({pair[0]:#x}, {pair[1]:#04x}) has no "
                                 f"legitimate provenance"))

    for rec in records:
        for ref in rec.instrs:
            for v, b in ref.code_pairs():
                if rec.shadow_pairs.get(v) != b:
                    out.append(Violation(4, rec.pid, rec.wave_index,
                                         f"instruction seq {ref.seq} byte at {v:#x} "
                                         f"missing from shadow"))
                    break
    return out
