"""Minimal x86-64 encoder for the generated stubs and trampolines.

Only the handful of instruction forms the emitters need.  The Asm buffer
supports labels and rel8/rel32 branch fixups resolved at finish time;
absolute constants are patched by callers through recorded hole offsets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

RAX, RCX, RDX, RBX, RSP, RBP, RSI, RDI = range(8)
R8, R9, R10, R11, R12, R13, R14, R15 = range(8, 16)


def _rex(w: int, r: int, x: int, b: int) -> int:
    return 0x40 | (w << 3) | (r << 2) | (x << 1) | b


def _modrm(mod: int, reg: int, rm: int) -> int:
    return (mod << 6) | ((reg & 7) << 3) | (rm & 7)


@dataclass
class Asm:
    buf: bytearray = field(default_factory=bytearray)
    labels: dict[str, int] = field(default_factory=dict)
    _relocs: list[tuple[int, str, int]] = field(default_factory=list)
    holes: dict[str, int] = field(default_factory=dict)

    # -- plumbing --------------------------------------------------------
    def pos(self) -> int:
        return len(self.buf)

    def raw(self, data: bytes) -> "Asm":
        self.buf += data
        return self

    def label(self, name: str) -> "Asm":
        self.labels[name] = len(self.buf)
        return self

    def hole32(self, name: str, value: int = 0) -> "Asm":
        """Record a 32-bit little-endian constant patchable by name."""
        self.holes[name] = len(self.buf)
        self.buf += struct.pack("<i", value)
        return self

    def _rel(self, label: str, width: int) -> None:
        self._relocs.append((len(self.buf), label, width))
        self.buf += b"\x00" * width

    def finish(self) -> bytes:
        for pos, label, width in self._relocs:
            rel = self.labels[label] - (pos + width)
            if width == 1:
                if not -128 <= rel <= 127:
                    raise ValueError(f"rel8 to {label} out of range ({rel})")
                self.buf[pos:pos + 1] = struct.pack("<b", rel)
            else:
                self.buf[pos:pos + 4] = struct.pack("<i", rel)
        return bytes(self.buf)

    def patch32(self, code: bytearray, name: str, value: int) -> None:
        off = self.holes[name]
        code[off:off + 4] = struct.pack("<i", value)

    # -- instructions ----------------------------------------------------
    def push(self, reg: int) -> "Asm":
        if reg >= 8:
            self.buf.append(0x41)
        self.buf.append(0x50 + (reg & 7))
        return self

    def pop(self, reg: int) -> "Asm":
        if reg >= 8:
            self.buf.append(0x41)
        self.buf.append(0x58 + (reg & 7))
        return self

    def mov_rr(self, dst: int, src: int) -> "Asm":
        """mov dst, src (64-bit)."""
        self.buf += bytes([
            _rex(1, src >= 8, 0, dst >= 8), 0x89, _modrm(3, src, dst)])
        return self

    def mov_r_imm32s(self, dst: int, value: int, hole: str | None = None) -> "Asm":
        """mov dst, imm32 (sign-extended to 64 bits)."""
        self.buf += bytes([_rex(1, 0, 0, dst >= 8), 0xC7, _modrm(3, 0, dst)])
        if hole:
            self.hole32(hole, value)
        else:
            self.buf += struct.pack("<i", value)
        return self

    def mov_r_imm64(self, dst: int, value: int) -> "Asm":
        self.buf += bytes([_rex(1, 0, 0, dst >= 8), 0xB8 + (dst & 7)])
        self.buf += struct.pack("<Q", value & 0xFFFFFFFFFFFFFFFF)
        return self

    def _rsp_disp(self, opcode: int, reg: int, disp: int) -> None:
        """reg <-> [rsp+disp] with the shortest displacement form."""
        rex = _rex(1, reg >= 8, 0, 0)
        if -128 <= disp <= 127:
            self.buf += bytes([
                rex, opcode, _modrm(1, reg, 4), 0x24, disp & 0xFF])
        else:
            self.buf += bytes([rex, opcode, _modrm(2, reg, 4), 0x24])
            self.buf += struct.pack("<i", disp)

    def store_rsp(self, disp: int, reg: int) -> "Asm":
        """mov [rsp+disp], reg."""
        self._rsp_disp(0x89, reg, disp)
        return self

    def load_rsp(self, reg: int, disp: int) -> "Asm":
        """mov reg, [rsp+disp]."""
        self._rsp_disp(0x8B, reg, disp)
        return self

    def lea_rip(self, dst: int, disp: int = 0, hole: str | None = None) -> "Asm":
        self.buf += bytes([_rex(1, dst >= 8, 0, 0), 0x8D, _modrm(0, dst, 5)])
        if hole:
            self.hole32(hole, disp)
        else:
            self.buf += struct.pack("<i", disp)
        return self

    def add_r_imm32s(self, dst: int, value: int, hole: str | None = None) -> "Asm":
        self.buf += bytes([_rex(1, 0, 0, dst >= 8), 0x81, _modrm(3, 0, dst)])
        if hole:
            self.hole32(hole, value)
        else:
            self.buf += struct.pack("<i", value)
        return self

    def sub_r_imm32s(self, dst: int, value: int, hole: str | None = None) -> "Asm":
        self.buf += bytes([_rex(1, 0, 0, dst >= 8), 0x81, _modrm(3, 5, dst)])
        if hole:
            self.hole32(hole, value)
        else:
            self.buf += struct.pack("<i", value)
        return self

    def add_r_imm8(self, dst: int, value: int) -> "Asm":
        self.buf += bytes([
            _rex(1, 0, 0, dst >= 8), 0x83, _modrm(3, 0, dst), value & 0xFF])
        return self

    def add_rr(self, dst: int, src: int) -> "Asm":
        self.buf += bytes([
            _rex(1, src >= 8, 0, dst >= 8), 0x01, _modrm(3, src, dst)])
        return self

    def sub_rr(self, dst: int, src: int) -> "Asm":
        self.buf += bytes([
            _rex(1, src >= 8, 0, dst >= 8), 0x29, _modrm(3, src, dst)])
        return self

    def cmp_rr(self, a: int, b: int) -> "Asm":
        """cmp a, b."""
        self.buf += bytes([
            _rex(1, b >= 8, 0, a >= 8), 0x39, _modrm(3, b, a)])
        return self

    def cmp_r_imm32s(self, reg: int, value: int, hole: str | None = None) -> "Asm":
        self.buf += bytes([_rex(1, 0, 0, reg >= 8), 0x81, _modrm(3, 7, reg)])
        if hole:
            self.hole32(hole, value)
        else:
            self.buf += struct.pack("<i", value)
        return self

    def cmp_r32_immneg1(self, reg: int) -> "Asm":
        """cmp reg32, 0xffffffff (the table sentinel probe)."""
        self.buf += bytes([0x81, _modrm(3, 7, reg)]) + b"\xff\xff\xff\xff"
        return self

    def test_rr(self, a: int, b: int) -> "Asm":
        self.buf += bytes([
            _rex(1, b >= 8, 0, a >= 8), 0x85, _modrm(3, b, a)])
        return self

    def xor_rr(self, dst: int, src: int) -> "Asm":
        self.buf += bytes([
            _rex(1, src >= 8, 0, dst >= 8), 0x31, _modrm(3, src, dst)])
        return self

    def inc_r(self, reg: int) -> "Asm":
        self.buf += bytes([_rex(1, 0, 0, reg >= 8), 0xFF, _modrm(3, 0, reg)])
        return self

    def _reg_mem_disp8(self, opcode: int, reg: int, base: int,
                       disp: int) -> None:
        """reg, [base+disp8]; emits the SIB byte rsp/r12 bases require."""
        self.buf += bytes([_rex(1, reg >= 8, 0, base >= 8), opcode])
        if (base & 7) == 4:
            self.buf += bytes([_modrm(1, reg, 4), 0x24, disp & 0xFF])
        else:
            self.buf += bytes([_modrm(1, reg, base), disp & 0xFF])

    def load_mem(self, dst: int, base: int, disp: int) -> "Asm":
        """mov dst, [base+disp8]."""
        self._reg_mem_disp8(0x8B, dst, base, disp)
        return self

    def sub_mem(self, dst: int, base: int, disp: int) -> "Asm":
        """sub dst, [base+disp8]."""
        self._reg_mem_disp8(0x2B, dst, base, disp)
        return self

    def cmp_mem(self, a: int, base: int, disp: int) -> "Asm":
        """cmp a, [base+disp8]."""
        self._reg_mem_disp8(0x3B, a, base, disp)
        return self

    def lea_mem(self, dst: int, base: int, disp: int) -> "Asm":
        """lea dst, [base+disp8]."""
        self._reg_mem_disp8(0x8D, dst, base, disp)
        return self

    def store_mem(self, base: int, disp: int, src: int) -> "Asm":
        """mov [base+disp8], src."""
        self._reg_mem_disp8(0x89, src, base, disp)
        return self

    def load_mem0(self, dst: int, base: int) -> "Asm":
        self.buf += bytes([
            _rex(1, dst >= 8, 0, base >= 8), 0x8B, _modrm(0, dst, base)])
        return self

    def load_abs32(self, dst: int, addr: int, hole: str | None = None) -> "Asm":
        """mov dst, [abs32] (sign-extended absolute address)."""
        self.buf += bytes([
            _rex(1, dst >= 8, 0, 0), 0x8B, _modrm(0, dst, 4), 0x25])
        if hole:
            self.hole32(hole, addr)
        else:
            self.buf += struct.pack("<i", addr)
        return self

    def load_scaled4(self, dst32: int, base: int, index: int, disp: int,
                     hole: str | None = None) -> "Asm":
        """mov dst32, [base + index*4 + disp32] (32-bit load)."""
        rex = 0
        if base >= 8 or index >= 8 or dst32 >= 8:
            rex = _rex(0, dst32 >= 8, index >= 8, base >= 8)
        if rex:
            self.buf.append(rex)
        sib = (2 << 6) | ((index & 7) << 3) | (base & 7)
        self.buf += bytes([0x8B, _modrm(2, dst32, 4), sib])
        if hole:
            self.hole32(hole, disp)
        else:
            self.buf += struct.pack("<i", disp)
        return self

    def xchg_r_rsp0(self, reg: int) -> "Asm":
        """xchg reg, [rsp]."""
        self.buf += bytes([
            _rex(1, reg >= 8, 0, 0), 0x87, _modrm(0, reg, 4), 0x24])
        return self

    def lea_rsp_adjust(self, delta: int) -> "Asm":
        """lea rsp, [rsp+delta]: move rsp without touching flags."""
        if -128 <= delta <= 127:
            self.buf += bytes([0x48, 0x8D, 0x64, 0x24, delta & 0xFF])
        else:
            self.buf += bytes([0x48, 0x8D, 0xA4, 0x24])
            self.buf += struct.pack("<i", delta)
        return self

    def jmp_rsp_disp(self, disp: int) -> "Asm":
        """jmp qword [rsp+disp]."""
        if -128 <= disp <= 127:
            self.buf += bytes([0xFF, _modrm(1, 4, 4), 0x24, disp & 0xFF])
        else:
            self.buf += bytes([0xFF, _modrm(2, 4, 4), 0x24])
            self.buf += struct.pack("<i", disp)
        return self

    def jcc(self, cc: int, label: str, short: bool = True) -> "Asm":
        if short:
            self.buf.append(0x70 + cc)
            self._rel(label, 1)
        else:
            self.buf += bytes([0x0F, 0x80 + cc])
            self._rel(label, 4)
        return self

    def jmp(self, label: str, short: bool = True) -> "Asm":
        if short:
            self.buf.append(0xEB)
            self._rel(label, 1)
        else:
            self.buf.append(0xE9)
            self._rel(label, 4)
        return self

    def call_label(self, label: str) -> "Asm":
        self.buf.append(0xE8)
        self._rel(label, 4)
        return self

    def call_hole(self, hole: str) -> "Asm":
        """call rel32 with the displacement patched later."""
        self.buf.append(0xE8)
        self.hole32(hole, 0)
        return self

    def ret(self) -> "Asm":
        self.buf.append(0xC3)
        return self

    def hlt(self) -> "Asm":
        self.buf.append(0xF4)
        return self

    def store_byte_abs32(self, addr: int, value: int) -> "Asm":
        """mov byte [abs32], value (diagnostic fault gates)."""
        self.buf += bytes([0xC6, _modrm(0, 0, 4), 0x25])
        self.buf += struct.pack("<i", addr)
        self.buf.append(value & 0xFF)
        return self

    def load_rip(self, dst: int, disp: int = 0, hole: str | None = None) -> "Asm":
        """mov dst, [rip+disp]."""
        self.buf += bytes([_rex(1, dst >= 8, 0, 0), 0x8B, _modrm(0, dst, 5)])
        if hole:
            self.hole32(hole, disp)
        else:
            self.buf += struct.pack("<i", disp)
        return self

    def store_rip(self, disp: int, src: int, hole: str | None = None) -> "Asm":
        """mov [rip+disp], src."""
        self.buf += bytes([_rex(1, src >= 8, 0, 0), 0x89, _modrm(0, src, 5)])
        if hole:
            self.hole32(hole, disp)
        else:
            self.buf += struct.pack("<i", disp)
        return self


# Condition codes for jcc.
CC_B, CC_AE, CC_E, CC_NE = 0x2, 0x3, 0x4, 0x5
