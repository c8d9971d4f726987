"""Single-instruction x86-64 decoding and control-flow classification.

The decoder recovers exact instruction lengths for the full 64-bit
instruction set (legacy, REX, VEX, EVEX, x87, 3DNow) and classifies each
instruction into the categories the rewriter cares about: direct/indirect
calls and jumps, conditional jumps, returns, endbr64, and halting
instructions.  Operand semantics are only modeled where the rewriter needs
them: branch targets and RIP-relative memory displacements.

Anything that cannot be a legal instruction at an offset decodes as
``InstructionKind.INVALID`` with length 1, so per-offset iteration can
always make progress.

Conformance notes (Invalid/Other boundary):
  - Opcodes removed in 64-bit mode (pusha, les, aam, salc, far direct
    jumps, ...) are INVALID.
  - Two/three-byte opcode map holes are INVALID per the validity tables
    below; privileged but encodable instructions are OTHER.
  - VEX/EVEX instructions are accepted structurally (prefix, opcode map,
    ModRM, map-determined immediate); operand-level constraints (vvvv,
    masking rules) are not checked, so some encodings a stricter
    disassembler rejects decode here as OTHER.
  - A 3E prefix on an indirect call/jump is reported as NOTRACK.
  - endbr64 is recognized only as the exact 4-byte sequence F3 0F 1E FA
    with no extra prefixes; prefixed variants classify as OTHER.
  - 16-bit-operand relative branches (66 E8/E9/0F 8x) decode with rel16
    immediates; the reported target ignores 16-bit IP truncation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class InstructionKind(Enum):
    DIRECT_CALL = "direct_call"
    DIRECT_JUMP = "direct_jump"
    CONDITIONAL_JUMP = "conditional_jump"
    INDIRECT_CALL = "indirect_call"
    INDIRECT_JUMP = "indirect_jump"
    RETURN = "return"
    ENDBR64 = "endbr64"
    HALT = "halt"
    OTHER = "other"
    INVALID = "invalid"


BRANCH_KINDS = frozenset({
    InstructionKind.DIRECT_CALL,
    InstructionKind.DIRECT_JUMP,
    InstructionKind.CONDITIONAL_JUMP,
    InstructionKind.INDIRECT_CALL,
    InstructionKind.INDIRECT_JUMP,
})

# Kinds that never fall through to the next instruction.
TERMINATOR_KINDS = frozenset({
    InstructionKind.DIRECT_JUMP,
    InstructionKind.INDIRECT_JUMP,
    InstructionKind.RETURN,
    InstructionKind.HALT,
    InstructionKind.INVALID,
})


@dataclass(frozen=True, slots=True)
class DirectTarget:
    """Statically known branch destination, as a region offset."""

    absolute_target: int


@dataclass(frozen=True, slots=True)
class IndirectTarget:
    operand_class: str  # "register" | "memory"
    notrack: bool


TargetSpec = DirectTarget | IndirectTarget


@dataclass(frozen=True, slots=True)
class RipOperand:
    """RIP-relative memory operand: where its disp32 sits and its value."""

    disp_offset: int  # offset of the 4-byte displacement within the instruction
    disp_value: int   # sign-extended displacement


@dataclass(frozen=True, slots=True)
class DecodedInstruction:
    offset: int
    length: int
    kind: InstructionKind
    target: TargetSpec | None = None
    rip_operand: RipOperand | None = None


ENDBR64_BYTES = b"\xf3\x0f\x1e\xfa"

# ---------------------------------------------------------------------------
# Opcode tables.  Immediate codes:
#   0 none, 1 imm8, 2 imm16, 4 imm32, 8 imm64,
#   IZ   imm16/imm32 by operand size,
#   IV   imm16/imm32/imm64 for B8+r,
#   MOFF moffs (8, or 4 with 67),
#   REL8/RELZ relative branch displacements,
#   ENTER iw+ib, IB2 two imm8 (extrq/insertq forms)
# ---------------------------------------------------------------------------
IZ, IV, MOFF, REL8, RELZ, ENTER, IB2 = 100, 101, 102, 103, 104, 105, 106

_LEGACY_PREFIXES = frozenset(
    [0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65, 0x66, 0x67, 0xF0, 0xF2, 0xF3]
)

K = InstructionKind

# Map 1 entries: (valid, has_modrm, imm, kind) indexed by opcode byte.
_M1: list[tuple[bool, bool, int, InstructionKind]] = [
    (False, False, 0, K.INVALID)
] * 256


def _m1(op, modrm=False, imm=0, kind=K.OTHER):
    _M1[op] = (True, modrm, imm, kind)


# 00-3F: ALU block.  Pattern per 8: modrm x4, AL,Ib, rAX,Iz, two invalid/prefix.
for base in (0x00, 0x08, 0x10, 0x18, 0x20, 0x28, 0x30, 0x38):
    for i in range(4):
        _m1(base + i, modrm=True)
    _m1(base + 4, imm=1)
    _m1(base + 5, imm=IZ)
    # base+6/base+7 stay invalid (segment pushes) or are prefixes, below.
_m1(0x63, modrm=True)  # movsxd
for op in range(0x50, 0x60):
    _m1(op)
_m1(0x68, imm=IZ)
_m1(0x69, modrm=True, imm=IZ)
_m1(0x6A, imm=1)
_m1(0x6B, modrm=True, imm=1)
for op in range(0x6C, 0x70):
    _m1(op)
for op in range(0x70, 0x80):  # Jcc rel8
    _m1(op, imm=REL8, kind=K.CONDITIONAL_JUMP)
_m1(0x80, modrm=True, imm=1)
_m1(0x81, modrm=True, imm=IZ)
_m1(0x83, modrm=True, imm=1)
for op in range(0x84, 0x90):
    _m1(op, modrm=True)  # test/xchg/mov/lea/pop Ev
for op in range(0x90, 0x9A):
    _m1(op)  # xchg r, cwde, cdq
_m1(0x9B)
for op in range(0x9C, 0xA0):
    _m1(op)  # pushf/popf/sahf/lahf
for op in range(0xA0, 0xA4):
    _m1(op, imm=MOFF)
for op in range(0xA4, 0xA8):
    _m1(op)  # movs/cmps
_m1(0xA8, imm=1)
_m1(0xA9, imm=IZ)
for op in range(0xAA, 0xB0):
    _m1(op)  # stos/lods/scas
for op in range(0xB0, 0xB8):
    _m1(op, imm=1)
for op in range(0xB8, 0xC0):
    _m1(op, imm=IV)
_m1(0xC0, modrm=True, imm=1)
_m1(0xC1, modrm=True, imm=1)
_m1(0xC2, imm=2, kind=K.RETURN)
_m1(0xC3, kind=K.RETURN)
_m1(0xC6, modrm=True, imm=1)
_m1(0xC7, modrm=True, imm=IZ)
_m1(0xC8, imm=ENTER)
_m1(0xC9)
_m1(0xCA, imm=2)  # lret iw
_m1(0xCB)  # lret
_m1(0xCC, kind=K.HALT)  # int3
_m1(0xCD, imm=1)  # int n
_m1(0xCF)  # iret
for op in range(0xD0, 0xD4):
    _m1(op, modrm=True)
_m1(0xD7)  # xlat
for op in range(0xD8, 0xE0):
    _m1(op, modrm=True)  # x87
for op in range(0xE0, 0xE4):  # loopcc / jrcxz
    _m1(op, imm=REL8, kind=K.CONDITIONAL_JUMP)
_m1(0xE4, imm=1)
_m1(0xE5, imm=1)
_m1(0xE6, imm=1)
_m1(0xE7, imm=1)
_m1(0xE8, imm=RELZ, kind=K.DIRECT_CALL)
_m1(0xE9, imm=RELZ, kind=K.DIRECT_JUMP)
_m1(0xEB, imm=REL8, kind=K.DIRECT_JUMP)
for op in range(0xEC, 0xF0):
    _m1(op)  # in/out dx
_m1(0xF1, kind=K.HALT)  # int1
_m1(0xF4, kind=K.HALT)  # hlt
_m1(0xF5)
_m1(0xF6, modrm=True)  # group 3: imm depends on /reg
_m1(0xF7, modrm=True)
for op in range(0xF8, 0xFE):
    _m1(op)
_m1(0xFE, modrm=True)  # group 4 (validity checked on /reg)
_m1(0xFF, modrm=True)  # group 5 (kinds resolved on /reg)

# Two-byte map (0F xx): (valid, has_modrm, imm).  Kind resolution for the
# few control-flow entries happens in the decode loop.
_M2: list[tuple[bool, bool, int]] = [(False, False, 0)] * 256


def _m2(op, modrm=False, imm=0):
    _M2[op] = (True, modrm, imm)


for op in (0x00, 0x01, 0x02, 0x03, 0x0D):
    _m2(op, modrm=True)
for op in (0x05, 0x06, 0x07, 0x08, 0x09, 0x0B, 0x0E):
    _m2(op)  # syscall, clts, sysret, invd, wbinvd, ud2, femms
_m2(0x0F, modrm=True, imm=1)  # 3DNow: modrm + suffix opcode byte
for op in range(0x10, 0x20):
    _m2(op, modrm=True)  # SSE moves + hint-nop space (incl. endbr64)
for op in range(0x20, 0x24):
    _m2(op, modrm=True)  # mov cr/dr: modrm forced to register form
for op in range(0x28, 0x30):
    _m2(op, modrm=True)
for op in range(0x30, 0x36):
    _m2(op)  # wrmsr/rdtsc/rdmsr/rdpmc/sysenter/sysexit
_m2(0x37)  # getsec
for op in range(0x40, 0x50):
    _m2(op, modrm=True)  # cmovcc
for op in range(0x50, 0x70):
    _m2(op, modrm=True)  # SSE
for op in range(0x70, 0x74):
    _m2(op, modrm=True, imm=1)  # pshuf / shift groups
for op in (0x74, 0x75, 0x76):
    _m2(op, modrm=True)
_m2(0x77)  # emms
_m2(0x78, modrm=True)  # vmread; extrq/insertq imm forms handled inline
_m2(0x79, modrm=True)
for op in (0x7C, 0x7D, 0x7E, 0x7F):
    _m2(op, modrm=True)
for op in range(0x80, 0x90):
    _m2(op, imm=RELZ)  # Jcc rel32
for op in range(0x90, 0xA0):
    _m2(op, modrm=True)  # setcc
for op in (0xA0, 0xA1, 0xA2):
    _m2(op)
_m2(0xA3, modrm=True)
_m2(0xA4, modrm=True, imm=1)
_m2(0xA5, modrm=True)
for op in (0xA8, 0xA9, 0xAA):
    _m2(op)
_m2(0xAB, modrm=True)
_m2(0xAC, modrm=True, imm=1)
_m2(0xAD, modrm=True)
_m2(0xAE, modrm=True)  # group 15
_m2(0xAF, modrm=True)
for op in (0xB0, 0xB1, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7):
    _m2(op, modrm=True)
_m2(0xB8, modrm=True)  # popcnt (F3 required; checked inline)
_m2(0xB9, modrm=True)  # ud1
_m2(0xBA, modrm=True, imm=1)  # bt group
for op in (0xBB, 0xBC, 0xBD, 0xBE, 0xBF):
    _m2(op, modrm=True)
_m2(0xC0, modrm=True)
_m2(0xC1, modrm=True)
_m2(0xC2, modrm=True, imm=1)
_m2(0xC3, modrm=True)
for op in (0xC4, 0xC5, 0xC6):
    _m2(op, modrm=True, imm=1)
_m2(0xC7, modrm=True)  # group 9
for op in range(0xC8, 0xD0):
    _m2(op)  # bswap
for op in range(0xD0, 0xFF):
    _m2(op, modrm=True)  # MMX/SSE block
_M2[0xB8] = (True, True, 0)
_m2(0xFF, modrm=True)  # ud0

# VEX map-1 opcodes carrying an imm8; map 3 always carries one.
_VEX_M1_IMM8 = frozenset([0x70, 0x71, 0x72, 0x73, 0xC2, 0xC4, 0xC5, 0xC6])
_VEX_NO_MODRM = frozenset([0x77])  # vzeroupper / vzeroall

# x87 register-form (mod=11) encodings with no defined instruction.
_X87_INVALID = {
    0xD9: set(range(0xD1, 0xE0)) | {0xE2, 0xE3, 0xE6, 0xE7, 0xEF},
    0xDA: set(range(0xE0, 0xE9)) | set(range(0xEA, 0x100)),
    0xDB: {0xE6, 0xE7} | set(range(0xF8, 0x100)),
    0xDC: set(range(0xD0, 0xE0)),
    0xDD: set(range(0xC8, 0xD0)) | set(range(0xF0, 0x100)),
    0xDE: set(range(0xD0, 0xD9)) | set(range(0xDA, 0xE0)),
    0xDF: set(range(0xC8, 0xE0)) | set(range(0xE1, 0xE8))
    | set(range(0xF8, 0x100)),
}


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def is_endbr64_at(code: bytes, offset: int) -> bool:
    """True iff the 4 bytes at offset are exactly F3 0F 1E FA."""
    return code[offset:offset + 4] == ENDBR64_BYTES


def decode_at(code: bytes, offset: int) -> DecodedInstruction:
    """Decode the instruction starting at ``offset``.

    Never raises on undecodable input: such offsets (including
    instructions that would run past the end of ``code``) come back as
    INVALID with length 1.
    """
    n = len(code)
    if not 0 <= offset < n:
        raise IndexError(f"offset {offset} outside code of length {n}")
    limit = min(n, offset + 15)

    pos = offset
    has_66 = has_67 = has_f2 = has_f3 = has_3e = False
    rex = 0
    while pos < limit:
        b = code[pos]
        if b in _LEGACY_PREFIXES:
            rex = 0  # REX only counts immediately before the opcode
            if b == 0x66:
                has_66 = True
            elif b == 0x67:
                has_67 = True
            elif b == 0xF2:
                has_f2 = True
            elif b == 0xF3:
                has_f3 = True
            elif b == 0x3E:
                has_3e = True
            pos += 1
        elif 0x40 <= b <= 0x4F:
            rex = b
            pos += 1
        else:
            break
    else:
        return DecodedInstruction(offset, 1, K.INVALID)

    op = code[pos]
    kind = K.OTHER
    modrm = False
    imm = 0
    opcode_pos = pos

    if op == 0xC5 or op == 0xC4 or op == 0x62:
        # VEX2 / VEX3 / EVEX.  Structural decode; map determines imm.
        if op == 0xC5:
            payload, vmap = 1, 1
        elif op == 0xC4:
            payload = 2
            if pos + 1 >= limit:
                return DecodedInstruction(offset, 1, K.INVALID)
            vmap = code[pos + 1] & 0x1F
        else:
            payload = 3
            if pos + 1 >= limit:
                return DecodedInstruction(offset, 1, K.INVALID)
            vmap = code[pos + 1] & 0x07
        if vmap not in (1, 2, 3, 5, 6):
            return DecodedInstruction(offset, 1, K.INVALID)
        pos += 1 + payload
        if pos >= limit:
            return DecodedInstruction(offset, 1, K.INVALID)
        vop = code[pos]
        pos += 1
        if vmap == 3:
            imm = 1
        elif vmap == 1 and vop in _VEX_M1_IMM8:
            imm = 1
        if not (op != 0x62 and vmap == 1 and vop in _VEX_NO_MODRM):
            mlen, rip_off, _ = _modrm_length(code, pos, limit)
            if mlen < 0:
                return DecodedInstruction(offset, 1, K.INVALID)
            pos += mlen
        end = pos + imm
        if end > limit or end - offset > 15:
            return DecodedInstruction(offset, 1, K.INVALID)
        return DecodedInstruction(offset, end - offset, K.OTHER)

    rip_operand = None
    modrm_byte = -1

    if op == 0x0F:
        pos += 1
        if pos >= limit:
            return DecodedInstruction(offset, 1, K.INVALID)
        op2 = code[pos]
        if op2 == 0x38 or op2 == 0x3A:
            pos += 1
            if pos >= limit:
                return DecodedInstruction(offset, 1, K.INVALID)
            pos += 1  # three-byte opcode; every entry takes ModRM
            imm = 1 if op2 == 0x3A else 0
            mlen, rip_off, mbyte = _modrm_length(code, pos, limit)
            if mlen < 0:
                return DecodedInstruction(offset, 1, K.INVALID)
            if rip_off >= 0:
                disp_off = pos + rip_off - offset
                rip_operand = RipOperand(
                    disp_off,
                    _sext(int.from_bytes(
                        code[pos + rip_off:pos + rip_off + 4], "little"), 32),
                )
            pos += mlen
            end = pos + imm
            if end > limit or end - offset > 15:
                return DecodedInstruction(offset, 1, K.INVALID)
            return DecodedInstruction(
                offset, end - offset, K.OTHER, rip_operand=rip_operand)

        valid, modrm, imm = _M2[op2]
        if not valid:
            return DecodedInstruction(offset, 1, K.INVALID)
        if op2 == 0xB8 and not has_f3:
            return DecodedInstruction(offset, 1, K.INVALID)  # jmpe
        if op2 in (0x78, 0x79) and (has_66 or has_f2):
            # extrq/insertq immediate forms
            imm = IB2 if op2 == 0x78 else 0
        if 0x80 <= op2 <= 0x8F:
            kind = K.CONDITIONAL_JUMP
        elif op2 in (0x0B, 0xB9, 0xFF):
            kind = K.HALT  # ud2 / ud1 / ud0
        pos += 1
        if 0x20 <= op2 <= 0x23:
            # mov to/from CR/DR: ModRM always register form, no disp.
            if pos >= limit:
                return DecodedInstruction(offset, 1, K.INVALID)
            pos += 1
            modrm = False
    else:
        valid, modrm, imm, kind = _M1[op]
        if not valid:
            return DecodedInstruction(offset, 1, K.INVALID)
        pos += 1

    if modrm:
        mlen, rip_off, modrm_byte = _modrm_length(code, pos, limit)
        if mlen < 0:
            return DecodedInstruction(offset, 1, K.INVALID)
        if rip_off >= 0:
            disp_off = pos + rip_off - offset
            rip_operand = RipOperand(
                disp_off,
                _sext(int.from_bytes(
                    code[pos + rip_off:pos + rip_off + 4], "little"), 32),
            )
        reg = (modrm_byte >> 3) & 7
        if op == 0xF6 and reg <= 1:
            imm = 1
        elif op == 0xF7 and reg <= 1:
            imm = IZ
        elif op == 0x8F and reg != 0:
            return DecodedInstruction(offset, 1, K.INVALID)
        elif op == 0xFE and reg > 1:
            return DecodedInstruction(offset, 1, K.INVALID)
        elif op == 0x8D and (modrm_byte >> 6) == 3:
            return DecodedInstruction(offset, 1, K.INVALID)  # lea needs memory
        elif op in (0xC6, 0xC7) and reg != 0 and modrm_byte != 0xF8:
            # group 11: only /0 defined, plus F8 (xabort / xbegin)
            return DecodedInstruction(offset, 1, K.INVALID)
        elif 0xD8 <= op <= 0xDF and modrm_byte in _X87_INVALID.get(op, ()):
            return DecodedInstruction(offset, 1, K.INVALID)
        elif op == 0xFF:
            if reg == 2:
                kind = K.INDIRECT_CALL
            elif reg == 4:
                kind = K.INDIRECT_JUMP
            elif reg == 7:
                return DecodedInstruction(offset, 1, K.INVALID)
            # reg 3/5 are far call/jmp through memory: OTHER, but the
            # register forms of those are not encodable.
            elif reg in (3, 5) and (modrm_byte >> 6) == 3:
                return DecodedInstruction(offset, 1, K.INVALID)
        pos += mlen

    # Immediate size resolution.
    rel_bits = 0
    if imm == IZ:
        imm = 2 if (has_66 and not (rex & 8)) else 4
    elif imm == IV:
        imm = 8 if (rex & 8) else (2 if has_66 else 4)
    elif imm == MOFF:
        imm = 4 if has_67 else 8
    elif imm == REL8:
        imm, rel_bits = 1, 8
    elif imm == RELZ:
        if has_66 and not (rex & 8):
            imm, rel_bits = 2, 16
        else:
            imm, rel_bits = 4, 32
    elif imm == ENTER:
        imm = 3
    elif imm == IB2:
        imm = 2

    end = pos + imm
    if end > limit or end - offset > 15:
        return DecodedInstruction(offset, 1, K.INVALID)
    length = end - offset

    target = None
    if rel_bits:
        rel = _sext(int.from_bytes(code[pos:end], "little"), rel_bits)
        target = DirectTarget(offset + length + rel)
    elif kind in (K.INDIRECT_CALL, K.INDIRECT_JUMP):
        operand_class = "register" if (modrm_byte >> 6) == 3 else "memory"
        target = IndirectTarget(operand_class, has_3e)

    if kind is K.OTHER and length == 4 and is_endbr64_at(code, offset):
        kind = K.ENDBR64

    return DecodedInstruction(offset, length, kind, target, rip_operand)


def _modrm_length(code: bytes, pos: int, limit: int) -> tuple[int, int, int]:
    """ModRM + SIB + displacement length starting at ``pos``.

    Returns (consumed bytes, disp-offset-within-modrm-area for RIP-relative
    operands or -1, the ModRM byte).  consumed = -1 on truncation.
    """
    if pos >= limit:
        return -1, -1, 0
    m = code[pos]
    mod = m >> 6
    rm = m & 7
    if mod == 3:
        return 1, -1, m
    length = 1
    rip_off = -1
    if rm == 4:
        if pos + 1 >= limit:
            return -1, -1, m
        length = 2
        if mod == 0 and (code[pos + 1] & 7) == 5:
            length += 4
    elif mod == 0 and rm == 5:
        rip_off = 1
        length += 4
    if mod == 1:
        length += 1
    elif mod == 2:
        length += 4
    if pos + length > limit:
        return -1, -1, m
    return length, rip_off, m
