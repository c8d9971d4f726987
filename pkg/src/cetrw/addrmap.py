"""Old-offset to new-offset mapping and the runtime lookup machinery.

Pass one of the rewrite assigns every disassembled instruction a new
offset (strictly increasing in old-offset order) and serializes the
old->new correspondence as a dense table of 4-byte entries, one per byte
of the original region, with 0xffffffff marking untranslatable targets.
In seeded mode only indirect-target candidates (endbr64 sites and
post-call offsets) are exposed in the table; direct branches are
retargeted statically and need no entries.

At run time translation is two-staged: a per-region local lookup does a
constant-time probe of the table, deferring to a global lookup that walks
a registry of all rewritten regions (24-byte entries at a fixed virtual
address) and tails into the matching region's local lookup.  An entry
with a null local-lookup address marks an uninstrumented (external)
region: addresses there pass through untranslated, and for indirect
calls the pushed return address is translated in place before control
enters external code.

Table entries are offsets from the anchor the local stub materializes
with RIP-relative arithmetic: the runtime address of the new code region
base.  All stub constants are link-time values recorded as symbol fixups.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .asm import (
    Asm, CC_AE, CC_B, CC_E, RAX, RBX, RCX, RDX, RSP, R10,
)
from .disasm import CET_GUIDED, SUPERSET, DisassemblyResult

SENTINEL = 0xFFFFFFFF
DEFAULT_TABLE_ADDRESS = 0x56780000
REGION_ENTRY_SIZE = 24
REGION_HEADER_SIZE = 0x18


class LookupFailure(enum.Enum):
    ILLEGAL = "illegal"          # in range, sentinel entry
    OUT_OF_REGION = "out_of_region"  # outside [old_base, old_base+old_size)


ILLEGAL = LookupFailure.ILLEGAL
OUT_OF_REGION = LookupFailure.OUT_OF_REGION


@dataclass
class AddressMapping:
    old_base: int
    old_size: int
    new_base: int
    entries: list[int]
    # Full per-instruction layout (superset of the table in seeded mode);
    # used by pass two for direct-branch retargeting.  Not serialized.
    assigned: dict[int, int] = field(default_factory=dict, repr=False)

    def nonsentinel_count(self) -> int:
        return sum(1 for e in self.entries if e != SENTINEL)


def build_mapping(
    disasm: DisassemblyResult,
    layout: tuple[int, int],
    per_instruction_new_size: dict[int, int],
) -> AddressMapping:
    """Assign new offsets in old-offset order and build the table.

    ``layout`` is (old_base, new_base).  ``per_instruction_new_size`` must
    cover every disassembled offset, including instrumentation bytes.
    """
    old_base, new_base = layout
    offsets = sorted(disasm.instructions)
    missing = [o for o in offsets if o not in per_instruction_new_size]
    if missing:
        raise KeyError(f"no size for instruction at offset {missing[0]:#x}")

    assigned: dict[int, int] = {}
    cursor = 0
    for off in offsets:
        assigned[off] = cursor
        cursor += per_instruction_new_size[off]
    if cursor >= SENTINEL:
        raise OverflowError(
            f"new code size {cursor:#x} collides with the sentinel"
        )

    entries = [SENTINEL] * disasm.region_size
    if disasm.mode == SUPERSET or getattr(disasm, "superset_seeded", False):
        # A NOTRACK fallback widened traversal to every offset; the table
        # must expose them all or the fallback would not be sound.
        exposed = offsets
    else:
        exposed = sorted(disasm.indirect_target_candidates)
    for off in exposed:
        entries[off] = assigned[off]
    return AddressMapping(
        old_base=old_base,
        old_size=disasm.region_size,
        new_base=new_base,
        entries=entries,
        assigned=assigned,
    )


def restrict_to_candidates(
    mapping: AddressMapping, candidates: frozenset[int]
) -> AddressMapping:
    """A copy of the table exposing only indirect-target candidates.

    Used by the indirect-branch-validation pass in superset mode: routing
    indirect transfers through this table makes non-candidate targets hit
    the sentinel, mirroring seeded-mode enforcement.
    """
    entries = [
        v if off in candidates else SENTINEL
        for off, v in enumerate(mapping.entries)
    ]
    return AddressMapping(
        mapping.old_base, mapping.old_size, mapping.new_base,
        entries, dict(mapping.assigned),
    )


def lookup(mapping: AddressMapping, old_offset: int) -> int | LookupFailure:
    """Host-side mirror of the local lookup stub's semantics."""
    idx = old_offset - mapping.old_base
    if not 0 <= idx < mapping.old_size:
        return OUT_OF_REGION
    value = mapping.entries[idx]
    if value == SENTINEL:
        return ILLEGAL
    return value


def serialize_mapping(mapping: AddressMapping) -> bytes:
    return struct.pack(f"<{mapping.old_size}I", *mapping.entries)


def deserialize_mapping(
    data: bytes, old_base: int, new_base: int
) -> AddressMapping:
    if len(data) % 4:
        raise ValueError("mapping table length not a multiple of 4")
    count = len(data) // 4
    entries = list(struct.unpack(f"<{count}I", data))
    return AddressMapping(old_base, count, new_base, entries)


# ---------------------------------------------------------------------------
# Region registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionEntry:
    local_lookup_address: int  # 0 marks an external, uninstrumented region
    region_base: int
    region_size: int


@dataclass
class RegionTable:
    global_lookup_address: int
    entries: list[RegionEntry]
    table_address: int = DEFAULT_TABLE_ADDRESS

    @property
    def region_count(self) -> int:
        return len(self.entries)

    def serialize(self) -> bytes:
        out = struct.pack(
            "<QQQ", self.region_count, self.global_lookup_address, 0
        )
        for e in self.entries:
            out += struct.pack(
                "<QQQ", e.local_lookup_address, e.region_base, e.region_size
            )
        return out

    @classmethod
    def parse(cls, data: bytes, table_address: int = DEFAULT_TABLE_ADDRESS
              ) -> "RegionTable":
        if len(data) < REGION_HEADER_SIZE:
            raise ValueError("region table shorter than its header")
        count, glookup, _reserved = struct.unpack_from("<QQQ", data, 0)
        need = REGION_HEADER_SIZE + count * REGION_ENTRY_SIZE
        if len(data) < need:
            raise ValueError("region table truncated")
        entries = []
        for i in range(count):
            lla, base, size = struct.unpack_from(
                "<QQQ", data, REGION_HEADER_SIZE + i * REGION_ENTRY_SIZE
            )
            entries.append(RegionEntry(lla, base, size))
        return cls(glookup, entries, table_address)


# ---------------------------------------------------------------------------
# Stub emission
# ---------------------------------------------------------------------------

@dataclass
class LookupStub:
    machine_code: bytes
    symbol_fixups: list[tuple[int, str]]


def emit_local_lookup_stub(
    mapping: AddressMapping,
    stub_offset: int,
    mapping_table_offset: int,
    table_address: int = DEFAULT_TABLE_ADDRESS,
) -> LookupStub:
    """Constant-time translation of one region's addresses.

    Offsets are relative to the new-code anchor: ``stub_offset`` is where
    this stub will live and ``mapping_table_offset`` where its serialized
    table will live.  In: rax = address to translate, rbx = remap-return
    flag (preserved into the global lookup).  Out: rax = translated
    address; sentinel entries halt; addresses outside the region tail
    into the global lookup loaded from table_address+8.
    """
    for name, value in (
        ("region_delta", mapping.new_base - mapping.old_base),
        ("mapping_table_offset", mapping_table_offset),
    ):
        if not -(1 << 31) <= value < (1 << 31):
            raise ValueError(f"{name} {value:#x} exceeds imm32 range")
    if not 0 < table_address + 8 < (1 << 31):
        raise ValueError("table address must sit in the low 2 GiB")

    delta = mapping.new_base - mapping.old_base  # newbase - base

    a = Asm()
    a.push(RBX)
    a.mov_rr(RBX, RAX)
    # rax <- runtime address of the new code region base.
    a.lea_rip(RAX, hole="anchor_displacement")
    lea_end = a.pos()
    a.add_r_imm32s(RBX, delta, hole="new_base_minus_old_base")
    a.sub_rr(RBX, RAX)
    a.jcc(CC_B, "outside")
    a.cmp_r_imm32s(RBX, mapping.old_size, hole="old_region_size")
    a.jcc(CC_AE, "outside")
    a.load_scaled4(RBX, RAX, RBX, mapping_table_offset,
                   hole="mapping_table_offset")
    a.cmp_r32_immneg1(RBX)
    a.jcc(CC_E, "failure")
    a.add_rr(RAX, RBX)
    a.pop(RBX)
    a.ret()
    a.label("outside")
    a.add_rr(RBX, RAX)
    a.sub_r_imm32s(RBX, delta, hole="new_base_minus_old_base_undo")
    a.mov_rr(RAX, RBX)
    a.load_abs32(RBX, table_address + 8, hole="global_lookup_slot")
    a.xchg_r_rsp0(RBX)
    a.add_r_imm8(RSP, 8)
    a.jmp_rsp_disp(-8)
    a.label("failure")
    a.hlt()

    code = bytearray(a.finish())
    a.patch32(code, "anchor_displacement", -(stub_offset + lea_end))
    return LookupStub(bytes(code), sorted(
        (off, name) for name, off in a.holes.items()
    ))


def emit_global_lookup_stub(
    regions: RegionTable,
) -> LookupStub:
    """Linear scan over the region registry at the fixed table address.

    In: rax = address, rbx = remap-return flag.  Region hit with a local
    lookup: restore scratch and tail into it.  Null local lookup marks an
    external region: when the flag is set, the return-address slot two
    qwords up the stack is translated in place by a recursive call, then
    the address passes through unchanged.  No region: halt.
    """
    if regions.region_count < 1:
        raise ValueError("region table must describe at least one region")
    table = regions.table_address
    if not 0 < table < (1 << 31):
        raise ValueError("table address must sit in the low 2 GiB")

    a = Asm()
    a.label("glookup")
    a.push(RCX)
    a.push(RBX)
    a.push(RDX)
    a.push(R10)
    a.mov_r_imm32s(RCX, table, hole="region_table_address")
    a.load_mem0(RBX, RCX)          # region count
    a.xor_rr(RDX, RDX)
    a.label("searchloop")
    a.cmp_rr(RBX, RDX)
    a.jcc(CC_E, "failure")
    a.add_r_imm8(RCX, REGION_ENTRY_SIZE)
    a.mov_rr(R10, RAX)
    a.sub_mem(R10, RCX, 8)    # r10 = address - region_base
    a.cmp_mem(R10, RCX, 16)   # against region_size, unsigned
    a.jcc(CC_B, "success")
    a.inc_r(RDX)
    a.jmp("searchloop")
    a.label("success")
    a.load_mem0(RCX, RCX)          # local lookup address
    a.test_rr(RCX, RCX)
    a.jcc(CC_E, "external")
    a.store_rsp(-64, RCX)          # stash the target below live slots
    a.pop(R10)
    a.pop(RDX)
    a.pop(RBX)
    a.pop(RCX)
    a.jmp_rsp_disp(-96)            # the stash, seen from the popped rsp
    a.label("external")
    a.pop(R10)
    a.pop(RDX)
    a.pop(RBX)
    a.pop(RCX)
    a.test_rr(RBX, RBX)
    a.jcc(CC_E, "skip")
    a.store_rsp(-64, RAX)
    a.load_rsp(RAX, 8)             # pushed return-address slot
    a.call_label("glookup")
    a.store_rsp(8, RAX)
    a.load_rsp(RAX, -64)
    a.label("skip")
    a.ret()
    a.label("failure")
    a.hlt()

    code = bytes(a.finish())
    return LookupStub(code, sorted(
        (off, name) for name, off in a.holes.items()
    ))
