import random

import pytest

from cetrw.isa import (
    DecodedInstruction, DirectTarget, IndirectTarget, InstructionKind,
    decode_at, is_endbr64_at,
)

from conftest import compare_against_oracle
from fixtures import all_fixtures

K = InstructionKind


def test_endbr64_decode():
    d = decode_at(bytes.fromhex("f30f1efa"), 0)
    assert d.length == 4 and d.kind is K.ENDBR64


def test_single_byte_nop_mid_buffer():
    d = decode_at(b"\x90\x90\x90", 1)
    assert (d.offset, d.length, d.kind) == (1, 1, K.OTHER)


def test_return():
    d = decode_at(b"\xc3", 0)
    assert d.length == 1 and d.kind is K.RETURN


def test_direct_call_target():
    code = bytes.fromhex("e805000000") + b"\x90" * 6
    d = decode_at(code, 0)
    assert d.length == 5 and d.kind is K.DIRECT_CALL
    assert d.target == DirectTarget(10)  # 0 + 5 + 5


def test_short_jump_padding_source():
    d = decode_at(b"\xeb\x10", 0)
    assert d.kind is K.DIRECT_JUMP and d.length == 2
    assert d.target.absolute_target == 0x12


@pytest.mark.parametrize("code,offset,expected", [
    (bytes.fromhex("f30f1efa"), 0, True),
    (bytes.fromhex("f30f1efa"), 1, False),     # truncated pattern
    (bytes.fromhex("00f30f1efa"), 1, True),    # position independent
    (bytes.fromhex("f30f1efb"), 0, False),     # endbr32
])
def test_is_endbr64_at(code, offset, expected):
    assert is_endbr64_at(code, offset) is expected


def test_prefixed_endbr_is_not_a_landing_pad():
    # Extra prefixes break the exact 4-byte pattern rule.
    d = decode_at(bytes.fromhex("66f30f1efa"), 0)
    assert d.kind is K.OTHER and d.length == 5


def test_invalid_consumes_one_byte():
    d = decode_at(b"\x06\x90", 0)  # removed in 64-bit mode
    assert d.kind is K.INVALID and d.length == 1


def test_truncated_instruction_is_invalid():
    # A call needs 4 displacement bytes it does not have.
    d = decode_at(b"\xe8\x00", 0)
    assert d.kind is K.INVALID and d.length == 1


def test_indirect_kinds_and_notrack():
    reg = decode_at(b"\xff\xe0", 0)
    assert reg.kind is K.INDIRECT_JUMP
    assert reg.target == IndirectTarget("register", False)

    mem = decode_at(b"\xff\x10", 0)
    assert mem.kind is K.INDIRECT_CALL
    assert mem.target == IndirectTarget("memory", False)

    nt = decode_at(b"\x3e\xff\xe0", 0)
    assert nt.target == IndirectTarget("register", True)


def test_rip_operand_recorded():
    d = decode_at(bytes.fromhex("488b05f0ffffff"), 0)  # mov rax,[rip-0x10]
    assert d.rip_operand is not None
    assert d.rip_operand.disp_offset == 3
    assert d.rip_operand.disp_value == -0x10


def test_length_never_exceeds_region():
    code = bytes.fromhex("48b8")  # movabs truncated
    d = decode_at(code, 0)
    assert d.length <= len(code)


def test_determinism():
    rng = random.Random(11)
    buf = bytes(rng.randrange(256) for _ in range(512))
    first = [decode_at(buf, o) for o in range(len(buf))]
    second = [decode_at(buf, o) for o in range(len(buf))]
    assert first == second


def test_halt_kinds():
    assert decode_at(b"\xf4", 0).kind is K.HALT         # hlt
    assert decode_at(b"\xcc", 0).kind is K.HALT         # int3
    assert decode_at(b"\x0f\x0b", 0).kind is K.HALT     # ud2


def test_direct_target_self_consistency():
    # Re-decoding at a reported in-region target is well-defined.
    for fx in all_fixtures():
        for off in range(len(fx.code)):
            d = decode_at(fx.code, off)
            if isinstance(d.target, DirectTarget):
                t = d.target.absolute_target
                if 0 <= t < len(fx.code):
                    redo = decode_at(fx.code, t)
                    assert isinstance(redo, DecodedInstruction)


def test_oracle_agreement_fixtures(objdump_available):
    for fx in all_fixtures():
        violations, soft = compare_against_oracle(fx.code)
        assert not violations, (fx.name, violations[:5])
        # Boundary disagreements never involve control-flow kinds.
        assert all(m in ("other", "invalid") and o in ("other", "invalid")
                   for _, m, o in soft)


def test_oracle_agreement_random(objdump_available):
    rng = random.Random(1234)
    for _ in range(12):
        buf = bytearray(rng.randrange(256) for _ in range(384))
        # Splice in landing pads so branch kinds appear.
        for _ in range(4):
            pos = rng.randrange(len(buf) - 4)
            buf[pos:pos + 4] = bytes.fromhex("f30f1efa")
        violations, _ = compare_against_oracle(bytes(buf))
        assert not violations, violations[:5]
