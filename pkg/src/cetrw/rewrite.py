"""Pass two: translate disassembled instructions into the new code region.

Layout protocol (all values link-time vaddrs):
  - sizing walk: every instruction's rewritten size (including bytes from
    instrumentation passes and fall-through jumps) feeds build_mapping;
  - emission walk: bytes are emitted at the assigned offsets, direct
    branches re-encoded with 4-byte displacements against the mapping,
    indirect calls/jumps/returns replaced by lookup trampolines, and
    RIP-relative operands re-displaced to keep referencing the original
    addresses.

Because overlapping decodes each get their own new location, any
instruction whose fall-through successor is not the next emitted offset
gets an explicit jump to the successor's new location appended.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .addrmap import (
    AddressMapping, LookupStub, RegionEntry, RegionTable, build_mapping,
    emit_global_lookup_stub, emit_local_lookup_stub, restrict_to_candidates,
    serialize_mapping, DEFAULT_TABLE_ADDRESS,
)
from .asm import Asm, RAX, RBX, RCX, RSP
from .asm import RDX as RDX_REG, RSI as RSI_REG, CC_B, CC_E, CC_NE
from .disasm import CET_GUIDED, SUPERSET, CountsReport, DisassemblyResult
from .errors import (
    SizeDivergence, UnmappedDirectTarget, UnsupportedOperand,
)
from .isa import (
    DecodedInstruction, DirectTarget, IndirectTarget, InstructionKind,
    TERMINATOR_KINDS, decode_at,
)

K = InstructionKind

_LEGACY_PREFIXES = frozenset(
    [0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65, 0x66, 0x67, 0xF0, 0xF2, 0xF3]
)
_KEEP_PREFIXES = frozenset([0x64, 0x65, 0x67])  # fs/gs/addr-size matter

# Trace event identifiers (record format: old_offset u64, kind u32, u32 0).
TRACE_EVENT_CODES = {
    K.DIRECT_CALL: 1,
    K.INDIRECT_CALL: 2,
    K.RETURN: 3,
    K.INDIRECT_JUMP: 4,
}
TRACE_RECORD_SIZE = 16

# Diagnostic fault gates: unmapped byte stores whose fault address tells
# the runtime which check failed.
DIAG_GATE_BASE = 0x56790000
DIAG_SHADOW_MISMATCH = DIAG_GATE_BASE + 1
DIAG_IBV_VIOLATION = DIAG_GATE_BASE + 2


@dataclass
class RewriteConfig:
    old_base: int = 0
    new_base: int = 0x10000          # vaddr of the first rewritten byte
    stub_base: int = 0xF000          # vaddr of the stub area (before text)
    mapping_array_vaddr: int = DEFAULT_TABLE_ADDRESS + 0x1000
    strict_array_vaddr: int | None = None
    table_address: int = DEFAULT_TABLE_ADDRESS
    state_vaddr: int = 0x56400000    # runtime-state page (shadow stack top)
    red_zone_safe: bool = False


@dataclass
class Site:
    """What an instrumentation pass sees for one instruction."""

    insn: DecodedInstruction
    old_offset: int
    old_vaddr: int
    sizing: bool
    prologue_vaddr: int | None = None   # where this pass's prologue lands
    epilogue_vaddr: int | None = None
    stack_ra_vaddr: int | None = None   # on-stack return address after a call
    region_code: bytes = b""            # the original region, for peeking


@dataclass
class PassOutput:
    prologue: bytes = b""
    replacement: bytes | None = None
    epilogue: bytes = b""


class InstrumentationPass:
    """Base pass: returns nothing everywhere (the null instrumentor)."""

    name = "null"
    wants_strict_lookup = False

    def instrument(self, site: Site) -> PassOutput | None:
        return None


def null_pass() -> InstrumentationPass:
    return InstrumentationPass()


@dataclass
class StubTemplate:
    name: str  # IndirectJump | IndirectCall | Return
    kinds: frozenset[InstructionKind]
    # entry-rsp-relative scratch slots, for the static discipline check
    scratch_slots: frozenset[int]


# Jump-template slots are entry-relative: the expansion claims 128 bytes
# so its -64/-72/-8 working slots land below the guest red zone.
JUMP_TEMPLATE = StubTemplate(
    "IndirectJump", frozenset({K.INDIRECT_JUMP}),
    frozenset({-64 - 128, -72 - 128, -8 - 128}))
CALL_TEMPLATE = StubTemplate(
    "IndirectCall", frozenset({K.INDIRECT_CALL}),
    frozenset({-64, -72, -16, -8}))
RETURN_TEMPLATE = StubTemplate(
    "Return", frozenset({K.RETURN}), frozenset({-56, -8}))


def stub_templates() -> tuple[StubTemplate, StubTemplate, StubTemplate]:
    return JUMP_TEMPLATE, CALL_TEMPLATE, RETURN_TEMPLATE


@dataclass
class ExpandContext:
    """Link-time facts expand_stub needs to materialize one site."""

    code: bytes
    old_base: int
    new_base: int
    new_offset: int       # region-relative start of the expansion
    lookup_offset: int    # region-relative offset of the local lookup stub
    red_zone_safe: bool = False


@dataclass
class RewriteStats:
    counts: CountsReport
    old_text_size: int
    new_text_size: int
    stub_area_size: int
    mapping_table_size: int


@dataclass
class RewriteOutput:
    new_text: bytes
    stub_area: bytes
    final_mapping: AddressMapping
    strict_mapping: AddressMapping | None
    stubs: dict[str, LookupStub]
    stub_offsets: dict[str, int]  # within the stub area
    stats: RewriteStats
    config: RewriteConfig
    mode: str

    def new_offset_of(self, old_offset: int) -> int:
        return self.final_mapping.assigned[old_offset]


# ---------------------------------------------------------------------------
# Operand materialization
# ---------------------------------------------------------------------------

def _operand_parts(code: bytes, insn: DecodedInstruction):
    """Split an FF-group indirect branch into (kept prefixes, rex, tail).

    tail = modrm [+ sib] [+ disp] bytes of the original operand.
    """
    pos = insn.offset
    end = insn.offset + insn.length
    kept = []
    rex = 0
    while pos < end:
        b = code[pos]
        if b in _LEGACY_PREFIXES:
            if b in _KEEP_PREFIXES:
                kept.append(b)
            rex = 0
            pos += 1
        elif 0x40 <= b <= 0x4F:
            rex = b
            pos += 1
        else:
            break
    if pos >= end or code[pos] != 0xFF:
        raise UnsupportedOperand(
            f"not an FF-group indirect branch at {insn.offset:#x}"
        )
    return bytes(kept), rex, code[pos + 1:end]


def _materialize_target(code: bytes, insn: DecodedInstruction,
                        mov_vaddr: int, old_base: int,
                        rsp_adjust: int = 0) -> bytes:
    """mov rax, <original branch operand>, preserving addressing exactly.

    ``rsp_adjust`` compensates rsp-based operands when the template has
    pre-decremented the stack pointer (red-zone-safe variant).
    """
    kept, rex, tail = _operand_parts(code, insn)
    modrm = tail[0]
    mod, rm = modrm >> 6, modrm & 7
    out = bytearray(kept)
    out.append(0x48 | (rex & 0x3))          # REX.W, keep X/B
    out.append(0x8B)
    rest = tail[1:]

    if mod == 0 and rm == 5:
        # RIP-relative: re-displace against the new location.
        out.append((0 << 6) | (0 << 3) | rm)
        disp = struct.unpack("<i", rest[:4])[0]
        target = old_base + insn.offset + insn.length + disp
        new_disp = target - (mov_vaddr + len(out) + 4)
        if not -(1 << 31) <= new_disp < (1 << 31):
            raise UnsupportedOperand("rip-relative operand out of disp32 range")
        out += struct.pack("<i", new_disp)
        return bytes(out)

    uses_rsp_base = (
        mod != 3 and rm == 4 and rest and (rest[0] & 7) == 4
        and not (rex & 0x1)
    )
    if rsp_adjust and uses_rsp_base:
        # Re-encode with an adjusted displacement; always use disp32 so
        # sizing never depends on the displacement value.
        sib = rest[0]
        if mod == 0:
            disp = 0
            ntail = rest[1:]
        elif mod == 1:
            disp = struct.unpack("<b", rest[1:2])[0]
            ntail = rest[2:]
        else:
            disp = struct.unpack("<i", rest[1:5])[0]
            ntail = rest[5:]
        out.append((2 << 6) | (0 << 3) | 4)
        out.append(sib)
        out += struct.pack("<i", disp + rsp_adjust)
        out += ntail  # nothing should remain, kept for safety
        return bytes(out)

    out.append((mod << 6) | (0 << 3) | rm)
    out += rest
    return bytes(out)


# ---------------------------------------------------------------------------
# Trampoline expansion
# ---------------------------------------------------------------------------

def _lookup_call(a: Asm, ctx: ExpandContext) -> None:
    """call rel32 into the local lookup stub."""
    a.buf.append(0xE8)
    site_end = ctx.new_offset + len(a.buf) + 4
    a.buf += struct.pack("<i", ctx.lookup_offset - site_end)


def expand_stub(template: StubTemplate, instr: DecodedInstruction,
                ctx: ExpandContext) -> bytes:
    """Emit one trampoline, materializing the original operand."""
    if instr.kind not in template.kinds:
        raise ValueError(
            f"{template.name} template cannot expand {instr.kind}"
        )
    a = Asm()
    claimed = 0
    if ctx.red_zone_safe:
        # Pre-decrement so the scratch writes stay above rsp.  Restored
        # before the choreography that touches the guest stack.
        a.lea_rsp_adjust(-128)
        claimed = 128

    if template.name == "IndirectJump":
        # Unlike calls and returns, a jump must preserve the guest's red
        # zone (leaf switch dispatch keeps live data there), so the
        # whole choreography runs 128 bytes down: every write lands
        # below the zone, including the lookup's own scratch.
        if not claimed:
            a.lea_rsp_adjust(-128)
            claimed = 128
        a.store_rsp(-64, RAX)
        a.store_rsp(-72, RBX)
        mov_vaddr = ctx.new_base + ctx.new_offset + len(a.buf)
        a.raw(_materialize_target(
            ctx.code, instr, mov_vaddr, ctx.old_base, rsp_adjust=claimed))
        a.mov_r_imm32s(RBX, 0)
        _lookup_call(a, ctx)
        a.store_rsp(-8, RAX)
        a.load_rsp(RAX, -64)
        a.load_rsp(RBX, -72)
        a.lea_rsp_adjust(128)
        a.jmp_rsp_disp(-8 - 128)
        return a.finish()

    if template.name == "IndirectCall":
        a.store_rsp(-64 + claimed, RAX)
        a.store_rsp(-72 + claimed, RBX)
        mov_vaddr = ctx.new_base + ctx.new_offset + len(a.buf)
        a.raw(_materialize_target(
            ctx.code, instr, mov_vaddr, ctx.old_base, rsp_adjust=claimed))
        a.mov_r_imm32s(RBX, 1)
        if claimed:
            a.lea_rsp_adjust(128)
        a.push(RBX)
        # Original post-call address, position-independently.
        old_ra = ctx.old_base + instr.offset + instr.length
        lea_end = ctx.new_base + ctx.new_offset + len(a.buf) + 7
        a.lea_rip(RBX, old_ra - lea_end)
        a.xchg_r_rsp0(RBX)
        _lookup_call(a, ctx)
        a.store_rsp(-8, RAX)
        a.load_rsp(RAX, -56)
        a.load_rsp(RBX, -64)
        a.jmp_rsp_disp(-8)
        return a.finish()

    if template.name == "Return":
        pop_extra = 0
        if instr.length >= 3 and ctx.code[instr.offset] == 0xC2:
            pop_extra = struct.unpack_from(
                "<H", ctx.code, instr.offset + 1)[0]
        a.store_rsp(-56 + claimed, RAX)
        if claimed:
            a.lea_rsp_adjust(128)
        a.pop(RAX)
        if pop_extra:
            a.add_r_imm32s(RSP, pop_extra)
        a.push(RBX)
        a.mov_r_imm32s(RBX, 0)
        _lookup_call(a, ctx)
        a.pop(RBX)
        a.store_rsp(-8, RAX)
        a.load_rsp(RAX, -64 - pop_extra)
        a.jmp_rsp_disp(-8)
        return a.finish()

    raise ValueError(f"unknown template {template.name}")


# ---------------------------------------------------------------------------
# Built-in passes
# ---------------------------------------------------------------------------

class _TracePass(InstrumentationPass):
    name = "trace"

    def __init__(self, fd: int):
        self.fd = fd

    def instrument(self, site: Site) -> PassOutput | None:
        code = TRACE_EVENT_CODES.get(site.insn.kind)
        if code is None:
            return None
        a = Asm()
        for r in (RAX, RCX, 2, 6, 7, 11):  # rax rcx rdx rsi rdi r11
            a.push(r)
        a.raw(b"\x68" + struct.pack("<i", code))            # push kind qword
        a.raw(b"\x68" + struct.pack("<i", site.old_offset))  # push old offset
        a.mov_r_imm32s(RAX, 1)       # SYS_write
        a.mov_r_imm32s(7, self.fd)   # rdi
        a.mov_rr(6, RSP)             # rsi = record
        a.mov_r_imm32s(2, TRACE_RECORD_SIZE)  # rdx
        a.raw(b"\x0f\x05")           # syscall
        a.add_r_imm8(RSP, 16)
        for r in (11, 7, 6, 2, RCX, RAX):
            a.pop(r)
        return PassOutput(prologue=a.finish())


def trace_pass(sink_fd: int = 3) -> InstrumentationPass:
    """Emit a 16-byte event record to ``sink_fd`` at every call, return
    and indirect transfer."""
    if sink_fd < 0:
        raise ValueError("sink_fd must be a non-negative file descriptor")
    return _TracePass(sink_fd)


class _ShadowStackPass(InstrumentationPass):
    """Stack-pointer-tagged shadow stack.

    Calls record (return address, stack pointer) pairs; returns scan the
    shadow top-down: entries for frames deeper than the returning one
    are stale (their calls left the instrumented world and never popped)
    and are discarded; an entry recording exactly this frame must match
    the on-stack return address or the program halts through the
    diagnostic gate; if only shallower entries remain, the call that
    created this frame was never instrumented (external callers,
    library callbacks), and the return is allowed.  The tagging keeps
    uninstrumented-library round trips and longjmp-style unwinding away
    from false positives while still pinning every instrumented frame.
    """

    name = "shadow-stack"

    def __init__(self, state_vaddr: int):
        self.state = state_vaddr  # qword: current top; storage at +64

    @staticmethod
    def _targets_plt_thunk(site: Site) -> bool:
        """Direct call into a PLT-style thunk (an indirect jump straight
        out of the module): the return executes uninstrumented, so a
        push would only create a stale entry."""
        if not isinstance(site.insn.target, DirectTarget):
            return False
        code = site.region_code
        pos = site.insn.target.absolute_target
        if not 0 <= pos < len(code):
            return False
        for _ in range(2):  # optional endbr64, then the dispatch
            insn = decode_at(code, pos)
            if insn.kind is K.INDIRECT_JUMP:
                return True
            if insn.kind is not K.OTHER:
                return False
            pos += insn.length
            if pos >= len(code):
                return False
        return False

    def _push_code(self, site: Site) -> bytes:
        a = Asm()
        base = site.prologue_vaddr if not site.sizing else 0
        ra = site.stack_ra_vaddr if not site.sizing else 0
        a.push(RAX)
        a.push(RCX)
        p = base + len(a.buf)
        a.load_rip(RAX, self.state - (p + 7))
        p = base + len(a.buf)
        a.lea_rip(RCX, ra - (p + 7))
        a.raw(b"\x48\x89\x08")        # mov [rax], rcx
        a.lea_mem(RCX, RSP, 16)          # rsp before our two pushes
        a.store_mem(RAX, 8, RCX)
        a.add_r_imm8(RAX, 16)
        p = base + len(a.buf)
        a.store_rip(self.state - (p + 7), RAX)
        a.pop(RCX)
        a.pop(RAX)
        return a.finish()

    def _check_code(self, site: Site) -> bytes:
        a = Asm()
        base = site.prologue_vaddr if not site.sizing else 0
        a.push(RAX)
        a.push(RCX)
        a.push(RDX_REG)
        a.push(RSI_REG)
        p = base + len(a.buf)
        a.load_rip(RAX, self.state - (p + 7))         # running top
        p = base + len(a.buf)
        a.lea_rip(RDX_REG, (self.state + 64) - (p + 7))  # storage base
        a.lea_mem(RSI_REG, RSP, 40)   # this frame: rsp at ret, plus 8
        a.label("scan")
        a.cmp_rr(RAX, RDX_REG)
        a.jcc(CC_E, "commit")         # nothing recorded for this frame
        a.load_mem(RCX, RAX, -8)      # entry stack pointer
        a.cmp_rr(RCX, RSI_REG)
        a.jcc(CC_B, "stale")          # deeper frame: discard, rescan
        a.jcc(0x7, "commit")          # ja: only shallower entries remain
        a.load_mem(RCX, RAX, -16)     # entry return address
        a.cmp_mem(RCX, RSP, 32)       # on-stack return address
        a.jcc(CC_NE, "violation")
        a.add_r_imm8(RAX, -16 & 0xFF)
        a.jmp("commit")
        a.label("stale")
        a.add_r_imm8(RAX, -16 & 0xFF)
        a.jmp("scan")
        a.label("violation")
        a.store_byte_abs32(DIAG_SHADOW_MISMATCH, 0)
        a.label("commit")
        p = base + len(a.buf)
        a.store_rip(self.state - (p + 7), RAX)
        a.pop(RSI_REG)
        a.pop(RDX_REG)
        a.pop(RCX)
        a.pop(RAX)
        return a.finish()

    def instrument(self, site: Site) -> PassOutput | None:
        if site.insn.kind is K.DIRECT_CALL and \
                self._targets_plt_thunk(site):
            return None
        if site.insn.kind in (K.DIRECT_CALL, K.INDIRECT_CALL):
            return PassOutput(prologue=self._push_code(site))
        if site.insn.kind is K.RETURN:
            return PassOutput(prologue=self._check_code(site))
        return None


def shadow_stack_pass(state_vaddr: int = 0x56400000) -> InstrumentationPass:
    return _ShadowStackPass(state_vaddr)


class _IbvPass(InstrumentationPass):
    """Route indirect transfers through the candidates-only table.

    In seeded mode the regular table already exposes only endbr64 sites
    and post-call offsets, so this is a no-op there; in superset mode the
    strict table makes non-candidate targets hit the sentinel before the
    transfer happens.
    """

    name = "ibv"
    wants_strict_lookup = True

    def instrument(self, site: Site) -> PassOutput | None:
        return None


def ibv_pass() -> InstrumentationPass:
    return _IbvPass()


PASS_REGISTRY = {
    "null": null_pass,
    "trace": trace_pass,
    "shadow-stack": shadow_stack_pass,
    "ibv": ibv_pass,
}


# ---------------------------------------------------------------------------
# The rewrite driver
# ---------------------------------------------------------------------------

def _branch_cc(code: bytes, insn: DecodedInstruction) -> int | None:
    """Condition code of a Jcc, or None for jrcxz/loop forms."""
    pos = insn.offset
    while code[pos] in _LEGACY_PREFIXES or 0x40 <= code[pos] <= 0x4F:
        pos += 1
    op = code[pos]
    if 0x70 <= op <= 0x7F:
        return op & 0xF
    if op == 0x0F:
        return code[pos + 1] & 0xF
    return None  # E0..E3


def _loop_opcode(code: bytes, insn: DecodedInstruction) -> int:
    pos = insn.offset
    while code[pos] in _LEGACY_PREFIXES or 0x40 <= code[pos] <= 0x4F:
        pos += 1
    return code[pos]


class _Rewriter:
    def __init__(self, disasm: DisassemblyResult,
                 passes: list[InstrumentationPass], config: RewriteConfig):
        self.disasm = disasm
        self.code = disasm.code
        self.passes = passes
        self.cfg = config
        self.offsets = sorted(disasm.instructions)
        self.next_emitted = {
            off: nxt for off, nxt in zip(self.offsets, self.offsets[1:])
        }
        self.strict = any(p.wants_strict_lookup for p in passes) \
            and disasm.mode == SUPERSET

        # Stub area layout, region-relative to new_base.
        self.stub_rel = config.stub_base - config.new_base
        self.mapping: AddressMapping | None = None

    # -- sizing --------------------------------------------------------
    def size_all(self) -> dict[int, int]:
        sizes = {}
        for off in self.offsets:
            sizes[off] = self._site_size(off)
        return sizes

    def _falls_through(self, insn: DecodedInstruction) -> bool:
        return insn.kind not in TERMINATOR_KINDS

    def _needs_fallthrough_jmp(self, off: int) -> tuple[bool, bool]:
        """(needs jump, successor exists).  No successor -> halt pad."""
        insn = self.disasm.instructions[off]
        if not self._falls_through(insn):
            return False, True
        succ = off + insn.length
        if succ not in self.disasm.instructions:
            return True, False
        return self.next_emitted.get(off) != succ, True

    def _rip_feasible(self, insn) -> bool:
        """Will the re-displaced RIP operand fit in 32 bits?

        Decided from layout-independent facts so sizing and emission
        agree: the original target must sit within disp32 of the whole
        new region, with a margin covering any expansion.  Real code is
        always feasible; only junk decodes at displacement extremes
        fail, and those sites become enforcement halts.
        """
        if insn.rip_operand is None:
            return True
        target = self.cfg.old_base + insn.offset + insn.length \
            + insn.rip_operand.disp_value
        margin = 96 * self.disasm.region_size + 0x200000
        delta = target - self.cfg.new_base
        return -(1 << 31) + margin <= delta <= (1 << 31) - 1 - margin

    def _body_size(self, off: int) -> int:
        insn = self.disasm.instructions[off]
        k = insn.kind
        if k is K.DIRECT_CALL:
            return 5
        if k is K.DIRECT_JUMP:
            return 5
        if k is K.CONDITIONAL_JUMP:
            return 6 if _branch_cc(self.code, insn) is not None else 9
        if k in (K.INDIRECT_CALL, K.INDIRECT_JUMP, K.RETURN):
            if not self._rip_feasible(insn):
                return insn.length  # substituted by a halt jump
            return len(self._expand(off, 0))
        return insn.length  # copied verbatim (incl. endbr64, halt, other)

    def _pass_sizes(self, off: int) -> tuple[list[int], list[int],
                                             bytes | None]:
        insn = self.disasm.instructions[off]
        site = Site(insn, off, self.cfg.old_base + off, sizing=True,
                    region_code=self.code)
        pro, epi, replacement = [], [], None
        for p in self.passes:
            out = p.instrument(site)
            if out is None:
                pro.append(0)
                epi.append(0)
                continue
            pro.append(len(out.prologue))
            epi.append(len(out.epilogue))
            if out.replacement is not None:
                replacement = out.replacement
        return pro, epi, replacement

    def _site_size(self, off: int) -> int:
        pro, epi, replacement = self._pass_sizes(off)
        body = len(replacement) if replacement is not None \
            else self._body_size(off)
        total = sum(pro) + body + sum(epi)
        needs, has_succ = self._needs_fallthrough_jmp(off)
        if needs:
            total += 5 if has_succ else 1  # jmp rel32 or halt pad
        return total

    # -- emission ------------------------------------------------------
    def _lookup_rel(self) -> int:
        name = "strict" if self.strict else "local"
        return self.stub_rel + self.stub_offsets[name]

    def _expand(self, off: int, new_off: int) -> bytes:
        insn = self.disasm.instructions[off]
        template = {
            K.INDIRECT_JUMP: JUMP_TEMPLATE,
            K.INDIRECT_CALL: CALL_TEMPLATE,
            K.RETURN: RETURN_TEMPLATE,
        }[insn.kind]
        lookup_rel = self._lookup_rel() if hasattr(self, "stub_offsets") \
            else 0
        ctx = ExpandContext(
            code=self.code,
            old_base=self.cfg.old_base,
            new_base=self.cfg.new_base,
            new_offset=new_off,
            lookup_offset=lookup_rel,
            red_zone_safe=self.cfg.red_zone_safe,
        )
        return expand_stub(template, insn, ctx)

    def _direct_branch_bytes(self, off: int, new_off: int) -> bytes:
        insn = self.disasm.instructions[off]
        target = insn.target.absolute_target
        in_region = 0 <= target < self.disasm.region_size

        if in_region and target in self.mapping.assigned:
            tgt_rel = self.mapping.assigned[target]
        elif in_region:
            if self.disasm.mode == CET_GUIDED and \
                    not self.disasm.superset_seeded:
                raise UnmappedDirectTarget(
                    f"direct branch at {off:#x} targets unreached "
                    f"offset {target:#x}"
                )
            tgt_rel = None  # junk decode: branch to the halt pad
        else:
            # Keep targeting the original absolute address.
            tgt_rel = (self.cfg.old_base + target) - self.cfg.new_base

        pad = self.stub_rel + self.stub_offsets["halt_pad"]
        if tgt_rel is None:
            tgt_rel = pad

        def rel(instr_len: int) -> bytes:
            # Junk decodes can point ±2 GiB away; unreachable-by-real-flow
            # sites whose displacement cannot encode halt instead.
            r = tgt_rel - (new_off + instr_len)
            if not -(1 << 31) <= r < (1 << 31):
                r = pad - (new_off + instr_len)
            return struct.pack("<i", r)

        k = insn.kind
        if k is K.DIRECT_CALL:
            return b"\xe8" + rel(5)
        if k is K.DIRECT_JUMP:
            return b"\xe9" + rel(5)
        cc = _branch_cc(self.code, insn)
        if cc is not None:
            return bytes([0x0F, 0x80 + cc]) + rel(6)
        # jrcxz/jecxz/loopcc: no rel32 form; invert around a long jump.
        op = _loop_opcode(self.code, insn)
        return bytes([op, 0x02, 0xEB, 0x05, 0xE9]) + rel(9)

    def _halt_substitute(self, new_off: int, length: int) -> bytes:
        """Length-preserving jump to the halt pad (junk decode sites)."""
        pad_rel = self.stub_rel + self.stub_offsets["halt_pad"]
        out = b"\xe9" + struct.pack("<i", pad_rel - (new_off + 5))
        return out + b"\xcc" * (length - 5)

    def _copy_with_rip_fix(self, off: int, new_off: int) -> bytes:
        insn = self.disasm.instructions[off]
        raw = bytearray(self.code[off:off + insn.length])
        if insn.rip_operand is not None:
            if not self._rip_feasible(insn):
                return self._halt_substitute(new_off, insn.length)
            ro = insn.rip_operand
            target = self.cfg.old_base + off + insn.length + ro.disp_value
            new_next = self.cfg.new_base + new_off + insn.length
            new_disp = target - new_next
            if not -(1 << 31) <= new_disp < (1 << 31):
                raise UnsupportedOperand(
                    f"rip-relative displacement at {off:#x} exceeds 32 bits"
                )
            raw[ro.disp_offset:ro.disp_offset + 4] = struct.pack(
                "<i", new_disp)
        return bytes(raw)

    def _emit_site(self, off: int) -> bytes:
        insn = self.disasm.instructions[off]
        new_off = self.mapping.assigned[off]
        pro_sizes, epi_sizes, sized_replacement = self._pass_sizes(off)

        body_start = new_off + sum(pro_sizes)
        if insn.kind in (K.INDIRECT_CALL, K.INDIRECT_JUMP, K.RETURN):
            if not self._rip_feasible(insn):
                body = self._halt_substitute(body_start, insn.length)
            else:
                body = self._expand(off, body_start)
        elif insn.kind in (K.DIRECT_CALL, K.DIRECT_JUMP, K.CONDITIONAL_JUMP):
            body = self._direct_branch_bytes(off, body_start)
        else:
            body = self._copy_with_rip_fix(off, body_start)
        body_len = len(sized_replacement) if sized_replacement is not None \
            else len(body)

        # Return address on the guest stack after a call executes here.
        if insn.kind is K.DIRECT_CALL:
            stack_ra = self.cfg.new_base + body_start + body_len
        elif insn.kind is K.INDIRECT_CALL:
            stack_ra = self.cfg.old_base + off + insn.length
        else:
            stack_ra = None

        out = bytearray()
        replacement = None
        epilogues = []
        cursor_pro = new_off
        cursor_epi = body_start + body_len
        for p, psize, esize in zip(self.passes, pro_sizes, epi_sizes):
            site = Site(
                insn, off, self.cfg.old_base + off, sizing=False,
                prologue_vaddr=self.cfg.new_base + cursor_pro,
                epilogue_vaddr=self.cfg.new_base + cursor_epi,
                stack_ra_vaddr=stack_ra,
                region_code=self.code,
            )
            pout = p.instrument(site)
            if pout is None:
                continue
            out += pout.prologue
            cursor_pro += len(pout.prologue)
            epilogues.append(pout.epilogue)
            cursor_epi += len(pout.epilogue)
            if pout.replacement is not None:
                replacement = pout.replacement
        out += replacement if replacement is not None else body
        for e in epilogues:
            out += e

        needs, has_succ = self._needs_fallthrough_jmp(off)
        if needs:
            if has_succ:
                succ_rel = self.mapping.assigned[off + insn.length]
                at = new_off + len(out)
                out += b"\xe9" + struct.pack("<i", succ_rel - (at + 5))
            else:
                out += b"\xf4"
        return bytes(out)

    # -- stubs ---------------------------------------------------------
    def _emit_stub_area(self) -> tuple[bytes, dict[str, int],
                                       dict[str, LookupStub]]:
        cfg = self.cfg
        offsets: dict[str, int] = {}
        stubs: dict[str, LookupStub] = {}
        area = bytearray()

        offsets["local"] = 0
        local = emit_local_lookup_stub(
            self.mapping,
            stub_offset=self.stub_rel,
            mapping_table_offset=cfg.mapping_array_vaddr - cfg.new_base,
            table_address=cfg.table_address,
        )
        stubs["local"] = local
        area += local.machine_code

        if self.strict:
            offsets["strict"] = len(area)
            strict = emit_local_lookup_stub(
                self.strict_mapping,
                stub_offset=self.stub_rel + len(area),
                mapping_table_offset=cfg.strict_array_vaddr - cfg.new_base,
                table_address=cfg.table_address,
            )
            stubs["strict"] = strict
            area += strict.machine_code

        offsets["global"] = len(area)
        glob = emit_global_lookup_stub(RegionTable(
            0, [RegionEntry(0, 0, 0)], cfg.table_address))
        stubs["global"] = glob
        area += glob.machine_code

        offsets["halt_pad"] = len(area)
        area += b"\xf4"
        return bytes(area), offsets, stubs

    def run(self) -> RewriteOutput:
        sizes = self.size_all()
        self.mapping = build_mapping(
            self.disasm, (self.cfg.old_base, self.cfg.new_base), sizes)
        self.strict_mapping = (
            restrict_to_candidates(
                self.mapping, self.disasm.indirect_target_candidates)
            if self.strict else None
        )
        if self.strict and self.cfg.strict_array_vaddr is None:
            raise ValueError(
                "strict lookup requested but no strict_array_vaddr in config"
            )
        area, self.stub_offsets, stubs = self._emit_stub_area()

        text = bytearray()
        for off in self.offsets:
            emitted = self._emit_site(off)
            if len(emitted) != sizes[off]:
                raise SizeDivergence(
                    f"site {off:#x}: sized {sizes[off]}, emitted "
                    f"{len(emitted)}"
                )
            assert len(text) == self.mapping.assigned[off]
            text += emitted

        stats = RewriteStats(
            counts=self.disasm.stats,
            old_text_size=self.disasm.region_size,
            new_text_size=len(text),
            stub_area_size=len(area),
            mapping_table_size=4 * self.disasm.region_size,
        )
        return RewriteOutput(
            new_text=bytes(text),
            stub_area=area,
            final_mapping=self.mapping,
            strict_mapping=self.strict_mapping,
            stubs=stubs,
            stub_offsets=self.stub_offsets,
            stats=stats,
            config=self.cfg,
            mode=self.disasm.mode,
        )



def rewrite(disasm: DisassemblyResult, passes: list[InstrumentationPass],
            config: RewriteConfig | None = None) -> RewriteOutput:
    """Two-pass translation of a disassembled region."""
    return _Rewriter(disasm, passes, config or RewriteConfig()).run()


# ---------------------------------------------------------------------------
# Static stack-slot discipline check
# ---------------------------------------------------------------------------

def check_stack_discipline(code: bytes) -> tuple[set[int], set[int]]:
    """Walk a template expansion tracking rsp-relative slot accesses.

    Slots are entry-rsp-relative.  Every read of a scratch slot (below
    the entry stack pointer, or any slot at all once the template has
    started writing) must be preceded by a write within the same
    expansion; guest-owned slots at or above the entry rsp may be read
    by pops and loads without a prior write.  Raises AssertionError with
    the offending offset on a violation.
    """
    written: set[int] = set()
    read: set[int] = set()
    delta = 0  # rsp - entry rsp
    pos = 0
    while pos < len(code):
        insn = decode_at(code, pos)
        if insn.kind is InstructionKind.INVALID:
            raise AssertionError(f"template undecodable at {pos:#x}")
        raw = code[pos:pos + insn.length]
        p = 0
        rex = 0
        while raw[p] in _LEGACY_PREFIXES or 0x40 <= raw[p] <= 0x4F:
            if 0x40 <= raw[p] <= 0x4F:
                rex = raw[p]
            p += 1
        op = raw[p]

        def rsp_mem_slot() -> int | None:
            # [rsp+disp] operands as the emitters encode them.
            if p + 2 >= len(raw):
                return None
            modrm, sib = raw[p + 1], raw[p + 2]
            mod, rm = modrm >> 6, modrm & 7
            if rm != 4 or sib != 0x24 or mod == 3 or (rex & 1):
                return None
            if mod == 1:
                disp = int.from_bytes(raw[p + 3:p + 4], "little", signed=True)
            elif mod == 2:
                disp = int.from_bytes(raw[p + 3:p + 7], "little", signed=True)
            else:
                disp = 0
            return delta + disp

        if op == 0x50 + (raw[p] - 0x50) and 0x50 <= op <= 0x57:  # push
            delta -= 8
            written.add(delta)
        elif 0x58 <= op <= 0x5F:  # pop
            slot = delta
            if slot < 0 and slot not in written:
                raise AssertionError(f"pop reads unwritten slot {slot}")
            read.add(slot)
            delta += 8
        elif op == 0xE8:  # call: pushes and pops its return address
            written.add(delta - 8)
        elif op in (0x89, 0x8B, 0x87, 0x3B, 0xFF, 0xC7, 0x8D, 0x81, 0x83):
            slot = rsp_mem_slot()
            if slot is not None:
                if op == 0x8D:  # lea rsp,[rsp+k]
                    delta += int.from_bytes(
                        raw[p + 3:p + 4] if (raw[p + 1] >> 6) == 1
                        else raw[p + 3:p + 7], "little", signed=True)
                elif op in (0x89, 0xC7):
                    written.add(slot)
                elif op in (0x8B, 0x3B):
                    if slot < 0 and slot not in written:
                        raise AssertionError(
                            f"read of unwritten scratch slot {slot} at "
                            f"{pos:#x}"
                        )
                    read.add(slot)
                elif op == 0x87:  # xchg
                    if slot < 0 and slot not in written:
                        raise AssertionError(
                            f"xchg reads unwritten scratch slot {slot}"
                        )
                    read.add(slot)
                    written.add(slot)
                elif op == 0xFF:
                    reg = (raw[p + 1] >> 3) & 7
                    if reg in (2, 4):  # call/jmp through the slot
                        if slot < 0 and slot not in written:
                            raise AssertionError(
                                f"transfer through unwritten slot {slot}"
                            )
                        read.add(slot)
            elif op == 0x81 and p + 1 < len(raw) and \
                    (raw[p + 1] & 0xC7) == 0xC4:
                imm = int.from_bytes(raw[p + 2:p + 6], "little", signed=True)
                delta += imm if (raw[p + 1] >> 3) & 7 == 0 else -imm
            elif op == 0x83 and p + 1 < len(raw) and \
                    (raw[p + 1] & 0xC7) == 0xC4:
                imm = int.from_bytes(raw[p + 2:p + 3], "little", signed=True)
                delta += imm if (raw[p + 1] >> 3) & 7 == 0 else -imm
        pos += insn.length
    return read, written


def template_example_expansions(red_zone_safe: bool = False
                                ) -> dict[str, bytes]:
    """One representative expansion per template, for static checks."""
    samples = {
        "IndirectJump": b"\xff\xe0",        # jmp rax
        "IndirectCall": b"\xff\x50\x08",    # call [rax+8]
        "Return": b"\xc3",
        "ReturnImm": b"\xc2\x04\x00",
    }
    out = {}
    for name, code in samples.items():
        insn = decode_at(code, 0)
        template = {
            K.INDIRECT_JUMP: JUMP_TEMPLATE,
            K.INDIRECT_CALL: CALL_TEMPLATE,
            K.RETURN: RETURN_TEMPLATE,
        }[insn.kind]
        ctx = ExpandContext(
            code=code, old_base=0x1000, new_base=0x100000,
            new_offset=0x40, lookup_offset=-0x80,
            red_zone_safe=red_zone_safe,
        )
        out[name] = expand_stub(template, insn, ctx)
    return out
