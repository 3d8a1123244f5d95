"""Build PE32 images from memory groups: imports, patching, emission.

Image base is 0 so every RVA equals the original virtual address; dumped
intervals keep their addresses as individual sections and the rebuilt
import table sits between the headers and the lowest interval. Output
targets static analysis, not loading.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .api_monitor import ApiCallRecord
from .regroup import Interval, MemoryGroup
from .wave_collector import WaveRecord

PAGE = 0x1000
FILE_ALIGN = 0x200
SECTION_ALIGN = 0x1000
DEFAULT_IDATA_RVA = 0x1000

IMAGE_FILE_MACHINE_I386 = 0x014C
PE32_MAGIC = 0x10B
# executable, 32-bit, relocs stripped
COFF_CHARACTERISTICS = 0x0103
# code | initialized data | execute | read | write
SECTION_CHARACTERISTICS = 0xE0000060
SUBSYSTEM_CONSOLE = 3


class EmitError(ValueError):
    pass


class PatchIntegrityError(ValueError):
    pass


def _align(value: int, granule: int) -> int:
    return (value + granule - 1) // granule * granule


@dataclass
class ImportTable:
    """Import directory + thunks + names laid out inside one .idata blob."""

    entries: list[tuple[str, list[str]]] = field(default_factory=list)
    placement_rva: int = DEFAULT_IDATA_RVA
    slots: dict[tuple[str, str], int] = field(default_factory=dict)
    _blob: bytes = b""
    iat_rva: int = 0
    iat_size: int = 0
    directory_size: int = 0

    @property
    def unique_count(self) -> int:
        return len(self.slots)

    def blob(self) -> bytes:
        return self._blob

    def slot_rva(self, module: str, function: str) -> int:
        return self.slots[(module, function)]

    def _layout(self):
        base = self.placement_rva
        ndll = len(self.entries)
        desc_size = 20 * (ndll + 1)
        self.directory_size = desc_size

        thunk_counts = [len(fns) + 1 for _, fns in self.entries]
        ilt_offsets, cursor = [], desc_size
        for count in thunk_counts:
            ilt_offsets.append(cursor)
            cursor += 4 * count
        iat_offsets = []
        iat_start = cursor
        for count in thunk_counts:
            iat_offsets.append(cursor)
            cursor += 4 * count
        self.iat_rva = base + iat_start
        self.iat_size = cursor - iat_start

        hint_offsets: dict[tuple[str, str], int] = {}
        hints = bytearray()
        for dll, fns in self.entries:
            for fn in fns:
                hint_offsets[(dll, fn)] = cursor + len(hints)
                hints += struct.pack("<H", 0) + fn.encode("ascii") + b"\x00"
                if len(hints) % 2:
                    hints += b"\x00"
        cursor += len(hints)

        name_offsets: dict[str, int] = {}
        names = bytearray()
        for dll, _ in self.entries:
            name_offsets[dll] = cursor + len(names)
            names += dll.encode("ascii") + b"\x00"
        cursor += len(names)

        blob = bytearray(cursor)
        pos = 0
        for i, (dll, fns) in enumerate(self.entries):
            struct.pack_into("<IIIII", blob, pos,
                             base + ilt_offsets[i], 0, 0,
                             base + name_offsets[dll], base + iat_offsets[i])
            pos += 20
        pos += 20  # null terminator descriptor stays zero

        for i, (dll, fns) in enumerate(self.entries):
            for which in (ilt_offsets[i], iat_offsets[i]):
                p = which
                for fn in fns:
                    struct.pack_into("<I", blob, p, base + hint_offsets[(dll, fn)])
                    p += 4
        for j, (dll, fns) in enumerate(self.entries):
            for k, fn in enumerate(fns):
                self.slots[(dll, fn)] = base + iat_offsets[j] + 4 * k

        blob[len(blob) - len(hints) - len(names):len(blob) - len(names)] = hints
        blob[len(blob) - len(names):] = names
        self._blob = bytes(blob)


def _place_idata(size: int, intervals: list[Interval]) -> int:
    """Default page 0x1000; on collision take the first free page gap above."""
    span = max(PAGE, _align(max(size, 1), PAGE))

    def collides(rva):
        return any(iv.base < rva + span and rva < iv.end for iv in intervals)

    rva = DEFAULT_IDATA_RVA
    while collides(rva):
        rva += PAGE
        if rva + span > 0xFFFFF000:
            raise EmitError("no page gap available for the import section")
    return rva


def build_import_table(group: MemoryGroup,
                       calls: list[ApiCallRecord]) -> ImportTable:
    """One IAT slot per unique function called from inside the group."""
    table = ImportTable()
    order: dict[str, list[str]] = {}
    for call in sorted(calls, key=lambda c: c.caller_seq):
        if not group.contains(call.caller_vaddr):
            continue
        fns = order.setdefault(call.module_name, [])
        if call.function_name not in fns:
            fns.append(call.function_name)
    table.entries = list(order.items())
    table.placement_rva = 0
    table._layout()  # first pass only measures the blob
    table.placement_rva = _place_idata(len(table.blob()), group.intervals)
    table._layout()
    return table


def select_entry_point(wave: WaveRecord, group: MemoryGroup) -> int:
    """Earliest-executed instruction address inside the group's intervals."""
    for ref in wave.instrs:
        if group.contains(ref.vaddr):
            return ref.vaddr
    raise EmitError(f"group at {group.intervals[0].base:#x} executed nothing")


def patch_branches(group: MemoryGroup, calls: list[ApiCallRecord],
                   table: ImportTable,
                   enable: bool = True) -> tuple[list[bytes], list[dict]]:
    """Retarget 6-byte call/jmp sites at the rebuilt IAT, sidecar the rest.

    Six bytes fit an indirect-absolute form in place, so those sites become
    FF 15 / FF 25 through the new slot; shorter sites cannot be rewritten
    without moving code and are only recorded.
    """
    bufs = {iv.base: bytearray(iv.bytes) for iv in group.intervals}

    def interval_for(vaddr, length):
        for iv in group.intervals:
            if iv.contains(vaddr) and iv.contains(vaddr + length - 1):
                return iv
        return None

    sidecar = []
    seen_sites = set()
    for call in sorted(calls, key=lambda c: c.caller_seq):
        iv = interval_for(call.caller_vaddr, call.caller_len)
        if iv is None:
            continue
        if call.caller_vaddr in seen_sites:
            continue
        seen_sites.add(call.caller_vaddr)
        buf = bufs[iv.base]
        off = call.caller_vaddr - iv.base
        current = bytes(buf[off:off + call.caller_len])
        if call.caller_bytes and current != call.caller_bytes:
            raise PatchIntegrityError(
                f"dump/trace mismatch at {call.caller_vaddr:#x}: "
                f"dump {current.hex()} vs trace {call.caller_bytes.hex()}")
        slot = table.slot_rva(call.module_name, call.function_name)
        patched = False
        if enable and call.caller_len == 6 and call.btype in ("call", "jmp"):
            opcode = 0x15 if call.btype == "call" else 0x25
            buf[off:off + 6] = bytes((0xFF, opcode)) + struct.pack("<I", slot)
            patched = True
        sidecar.append({
            "caller_vaddr": call.caller_vaddr,
            "len": call.caller_len,
            "function": call.qualified_name,
            "slot_rva": slot,
            "patched": patched,
        })
    patched_bytes = [bytes(bufs[iv.base]) for iv in group.intervals]
    return patched_bytes, sidecar


def write_sidecar(api_entries: list[dict],
                  xrefs: set[tuple[int, int]]) -> list[dict]:
    """Combined sidecar: call sites plus inter-interval references."""
    entries = [dict(e, kind="api") for e in api_entries]
    entries += [{"kind": "xref", "site": s, "target": t} for s, t in sorted(xrefs)]
    entries.sort(key=lambda e: (e.get("caller_vaddr", e.get("site", 0)), e["kind"]))
    return entries


@dataclass
class SectionSpec:
    name: str
    rva: int
    data: bytes


@dataclass
class PEArtifact:
    group: MemoryGroup
    entry_rva: int
    import_table: ImportTable
    data: bytes
    sections: list[SectionSpec]
    sidecar: list[dict]


def emit_pe(group: MemoryGroup, table: ImportTable, entry: int,
            patched_bytes: list[bytes]) -> bytes:
    """Emit a PE32 with .idata plus one section per interval."""
    blob = table.blob()
    sections = [SectionSpec(".idata", table.placement_rva, blob)]
    for iv, data in zip(group.intervals, patched_bytes):
        if len(data) != iv.end - iv.base:
            raise EmitError("patched interval size changed")
        sections.append(SectionSpec(f".wseg{len(sections) - 1}", iv.base, data))
    sections.sort(key=lambda s: s.rva)

    prev_end = 0
    for sec in sections:
        if sec.rva < prev_end:
            raise EmitError(f"section {sec.name} overlaps at {sec.rva:#x}")
        prev_end = sec.rva + _align(max(len(sec.data), 1), SECTION_ALIGN)

    n = len(sections)
    headers_size = 64 + 4 + 20 + 224 + 40 * n
    size_of_headers = _align(headers_size, FILE_ALIGN)

    raw_ptr = size_of_headers
    raws = []
    for sec in sections:
        raw_size = _align(len(sec.data), FILE_ALIGN)
        raws.append((raw_ptr if raw_size else 0, raw_size))
        raw_ptr += raw_size

    size_of_image = _align(
        max(sec.rva + max(len(sec.data), 1) for sec in sections), SECTION_ALIGN)
    size_of_image = max(size_of_image, SECTION_ALIGN)

    out = bytearray(raw_ptr)
    # DOS header: magic, e_lfanew at 0x3c
    struct.pack_into("<H", out, 0, 0x5A4D)
    struct.pack_into("<I", out, 0x3C, 64)
    struct.pack_into("<I", out, 64, 0x00004550)  # "PE\0\0"
    struct.pack_into("<HHIIIHH", out, 68,
                     IMAGE_FILE_MACHINE_I386, n, 0, 0, 0, 224,
                     COFF_CHARACTERISTICS)

    opt = 88
    code_size = sum(len(s.data) for s in sections[1:]) if n > 1 else 0
    struct.pack_into("<HBBIIIIII", out, opt,
                     PE32_MAGIC, 0, 0, code_size, len(blob), 0,
                     entry, entry, 0)
    struct.pack_into("<IIIHHHHHHIIIIHHIIIIII", out, opt + 28,
                     0,                 # ImageBase: RVA == original VA
                     SECTION_ALIGN, FILE_ALIGN,
                     0, 0, 0, 0, 0, 0,  # versions
                     0,                 # Win32VersionValue
                     size_of_image, size_of_headers,
                     0,                 # checksum
                     SUBSYSTEM_CONSOLE, 0,
                     0x100000, 0x1000, 0x100000, 0x1000,
                     0, 16)
    dirs = opt + 96
    struct.pack_into("<II", out, dirs + 8 * 1, table.placement_rva,
                     table.directory_size)
    struct.pack_into("<II", out, dirs + 8 * 12, table.iat_rva, table.iat_size)

    sec_table = opt + 224
    for i, sec in enumerate(sections):
        ptr, raw_size = raws[i]
        name = sec.name.encode("ascii")[:8].ljust(8, b"\x00")
        struct.pack_into("<8sIIIIIIHHI", out, sec_table + 40 * i,
                         name, len(sec.data), sec.rva, raw_size, ptr,
                         0, 0, 0, 0, SECTION_CHARACTERISTICS)
        out[ptr:ptr + len(sec.data)] = sec.data
    return bytes(out)


def build_artifact(wave: WaveRecord, group: MemoryGroup,
                   calls: list[ApiCallRecord],
                   patch: bool = True) -> PEArtifact:
    """Run the full static stage for one memory group."""
    group_calls = [c for c in calls if group.contains(c.caller_vaddr)]
    table = build_import_table(group, group_calls)
    entry = select_entry_point(wave, group)
    patched, api_entries = patch_branches(group, group_calls, table, enable=patch)
    data = emit_pe(group, table, entry, patched)
    sidecar = write_sidecar(api_entries, group.xrefs)
    sections = [SectionSpec(".idata", table.placement_rva, table.blob())]
    for iv, pb in zip(group.intervals, patched):
        sections.append(SectionSpec(f".wseg{len(sections) - 1}", iv.base, pb))
    return PEArtifact(group=group, entry_rva=entry, import_table=table,
                      data=data, sections=sections, sidecar=sidecar)
