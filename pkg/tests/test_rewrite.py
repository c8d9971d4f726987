import struct
import warnings

import pytest

from cetrw.disasm import cet_disassemble, superset_disassemble
from cetrw.errors import SizeDivergence, UnmappedDirectTarget
from cetrw.isa import DirectTarget, InstructionKind, decode_at
from cetrw.rewrite import (
    CALL_TEMPLATE, JUMP_TEMPLATE, RETURN_TEMPLATE, ExpandContext,
    InstrumentationPass, PassOutput, RewriteConfig, TRACE_RECORD_SIZE,
    check_stack_discipline, expand_stub, ibv_pass, null_pass, rewrite,
    shadow_stack_pass, stub_templates, template_example_expansions,
    trace_pass,
)

from fixtures import all_fixtures, fixture

K = InstructionKind

CFG = RewriteConfig(
    old_base=0x401000, new_base=0x500000, stub_base=0x4ff000,
    mapping_array_vaddr=0x56781000, strict_array_vaddr=0x567c1000,
)


def disasm_fixture(name, mode="cet"):
    fx = fixture(name)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if mode == "cet":
            return cet_disassemble(fx.code, entry_points=fx.entry_points)
        return superset_disassemble(fx.code)


def linear_decode(code):
    out = []
    pos = 0
    while pos < len(code):
        d = decode_at(code, pos)
        assert d.kind is not K.INVALID, (hex(pos), code[pos:pos + 8].hex())
        out.append(d)
        pos += d.length
    return out


def reachable_from(region: bytes, seeds):
    seen = set()
    work = list(seeds)
    bad = []
    while work:
        off = work.pop()
        if off in seen or not 0 <= off < len(region):
            continue
        seen.add(off)
        d = decode_at(region, off)
        if d.kind is K.INVALID:
            bad.append(off)
            continue
        if d.kind not in (K.DIRECT_JUMP, K.INDIRECT_JUMP, K.RETURN, K.HALT):
            work.append(off + d.length)
        if isinstance(d.target, DirectTarget):
            work.append(d.target.absolute_target)
    return seen, bad


def combined_region(out):
    pad = out.config.new_base - out.config.stub_base - len(out.stub_area)
    return out.stub_area + b"\x90" * pad + out.new_text


# -- trampoline expansion ----------------------------------------------------

def expand(code_hex, template):
    code = bytes.fromhex(code_hex)
    insn = decode_at(code, 0)
    ctx = ExpandContext(code=code, old_base=0x401000, new_base=0x500000,
                        new_offset=0x100, lookup_offset=-0x200)
    return expand_stub(template, insn, ctx)


def test_jump_stub_shape():
    blob = expand("ffe0", JUMP_TEMPLATE)  # jmp rax
    insns = linear_decode(blob)
    kinds = [i.kind for i in insns]
    # save, save, materialize, flag, call lookup, spill, restore x2, jmp
    assert kinds[-1] is K.INDIRECT_JUMP
    assert K.DIRECT_CALL in kinds
    # flag = 0 for jumps
    flag_at = blob.find(bytes.fromhex("48c7c3"))
    assert struct.unpack_from("<i", blob, flag_at + 3)[0] == 0


def test_call_stub_shape():
    blob = expand("ff5008", CALL_TEMPLATE)  # call [rax+8]
    insns = linear_decode(blob)
    flag_at = blob.find(bytes.fromhex("48c7c3"))
    assert struct.unpack_from("<i", blob, flag_at + 3)[0] == 1
    # position-independent return-address computation
    assert bytes.fromhex("488d1d") in blob  # lea rbx,[rip+disp]
    assert insns[-1].kind is K.INDIRECT_JUMP


def test_return_stub_shape():
    blob = expand("c3", RETURN_TEMPLATE)
    insns = linear_decode(blob)
    assert insns[1].kind is K.OTHER  # pop rax
    assert blob[blob.find(b"\x58")] == 0x58
    assert insns[-1].kind is K.INDIRECT_JUMP


def test_return_imm16_pops_extra_bytes():
    blob = expand("c20400", RETURN_TEMPLATE)
    assert bytes.fromhex("4881c404000000") in blob  # add rsp, 4


def test_template_mismatch_rejected():
    with pytest.raises(ValueError):
        expand("c3", JUMP_TEMPLATE)


def test_materialized_memory_operand_keeps_addressing():
    blob = expand("ff6508", JUMP_TEMPLATE)  # jmp [rbp+8]
    assert bytes.fromhex("488b4508") in blob  # mov rax,[rbp+8]


def test_materialized_rip_operand_redisplaced():
    blob = expand("ff25f0ffffff", JUMP_TEMPLATE)  # jmp [rip-0x10]
    idx = blob.find(bytes.fromhex("488b05"))
    assert idx >= 0
    disp = struct.unpack_from("<i", blob, idx + 3)[0]
    mov_end_vaddr = 0x500000 + 0x100 + idx + 7
    target = 0x401000 + 0 + 6 - 0x10
    assert mov_end_vaddr + disp == target


def test_stack_slot_discipline_all_templates():
    for variant in (False, True):
        for name, blob in template_example_expansions(variant).items():
            reads, writes = check_stack_discipline(blob)
            assert reads and writes, name


def test_declared_scratch_slots_match_derived():
    expansions = template_example_expansions()
    for template, key in ((JUMP_TEMPLATE, "IndirectJump"),
                          (CALL_TEMPLATE, "IndirectCall"),
                          (RETURN_TEMPLATE, "Return")):
        reads, writes = check_stack_discipline(expansions[key])
        scratch = {s for s in reads | writes if s < 0}
        assert scratch == set(template.scratch_slots), key


def test_jump_template_spares_guest_red_zone():
    """Writes of the jump expansion must all land below rsp-128: leaf
    switch dispatch legally keeps live data in the red zone."""
    blob = template_example_expansions()["IndirectJump"]
    reads, writes = check_stack_discipline(blob)
    assert all(slot < -128 for slot in writes if slot < 0), sorted(writes)


def test_stub_templates_exposed():
    names = [t.name for t in stub_templates()]
    assert names == ["IndirectJump", "IndirectCall", "Return"]


# -- the rewrite driver ------------------------------------------------------

def test_single_return_region():
    d = cet_disassemble(b"\xc3", entry_points={0})
    out = rewrite(d, [], CFG)
    expected = expand_stub(RETURN_TEMPLATE, decode_at(b"\xc3", 0),
                           ExpandContext(
                               code=b"\xc3", old_base=CFG.old_base,
                               new_base=CFG.new_base, new_offset=0,
                               lookup_offset=CFG.stub_base - CFG.new_base))
    assert out.new_text == expected
    assert out.stats.new_text_size == len(expected)


def test_short_jump_padded_to_rel32():
    # jmp +0 (eb 00) re-encoded as e9 rel32 to the mapped successor.
    code = b"\xeb\x00\xc3"
    d = superset_disassemble(code)
    out = rewrite(d, [], CFG)
    new0 = out.final_mapping.assigned[0]
    assert out.new_text[new0] == 0xE9
    rel = struct.unpack_from("<i", out.new_text, new0 + 1)[0]
    assert new0 + 5 + rel == out.final_mapping.assigned[2]


def test_direct_target_correctness_exhaustive():
    for fx in all_fixtures():
        for mode in ("cet", "superset"):
            d = disasm_fixture(fx.name, mode)
            out = rewrite(d, [], CFG)
            for off, insn in d.instructions.items():
                if insn.kind not in (K.DIRECT_CALL, K.DIRECT_JUMP,
                                     K.CONDITIONAL_JUMP):
                    continue
                t = insn.target.absolute_target
                if not (0 <= t < len(fx.code)) or \
                        t not in out.final_mapping.assigned:
                    continue
                new_off = out.final_mapping.assigned[off]
                first = out.new_text[new_off]
                if insn.kind is K.CONDITIONAL_JUMP and first in (
                        0xE0, 0xE1, 0xE2, 0xE3):
                    got = decode_at(out.new_text, new_off + 4)
                else:
                    got = decode_at(out.new_text, new_off)
                assert got.target.absolute_target == \
                    out.final_mapping.assigned[t], (fx.name, mode, hex(off))


def test_redisassembly_no_invalid_from_seeds():
    for fx in all_fixtures():
        for mode in ("cet", "superset"):
            d = disasm_fixture(fx.name, mode)
            out = rewrite(d, [], CFG)
            region = combined_region(out)
            delta = out.config.new_base - out.config.stub_base
            seeds = [out.final_mapping.assigned[s] + delta
                     for s in (d.seeds or fx.entry_points)]
            _, bad = reachable_from(region, seeds)
            assert not bad, (fx.name, mode, [hex(b) for b in bad])


def test_pass_composition_identity():
    for fx in ("mixed", "calls_compiled"):
        d = disasm_fixture(fx)
        bare = rewrite(d, [], CFG)
        nulled = rewrite(d, [null_pass()], CFG)
        assert bare.new_text == nulled.new_text
        assert bare.stub_area == nulled.stub_area


def test_size_accounting():
    d = disasm_fixture("calls_compiled")
    out = rewrite(d, [], CFG)
    total = sum(
        len(out.new_text[out.final_mapping.assigned[o]:
                         out.final_mapping.assigned[o] + 1])
        for o in d.instructions
    )
    assert out.stats.new_text_size == len(out.new_text)
    assert out.stats.old_text_size == len(fixture("calls_compiled").code)
    assert total == len(d.instructions)


def test_cet_new_text_smaller_than_superset():
    for name in ("mixed", "calls_compiled", "largest_compiled"):
        cet = rewrite(disasm_fixture(name, "cet"), [], CFG)
        sup = rewrite(disasm_fixture(name, "superset"), [], CFG)
        assert cet.stats.new_text_size < sup.stats.new_text_size, name


def test_unmapped_direct_target_raises_in_cet_mode():
    # A reached conditional branch targeting an undecodable byte.
    bad = bytes.fromhex("7400" "06" "c3")  # je to the invalid 0x06
    d = cet_disassemble(bad, entry_points={0})
    assert 2 in d.invalid_stops
    with pytest.raises(UnmappedDirectTarget):
        rewrite(d, [], CFG)


def test_superset_junk_branches_use_halt_pad():
    bad = bytes.fromhex("7400" "06" "c3")  # je targets an invalid offset
    d = superset_disassemble(bad)
    out = rewrite(d, [], CFG)  # must not raise
    pad_rel = (out.config.stub_base - out.config.new_base
               + out.stub_offsets["halt_pad"])
    new0 = out.final_mapping.assigned[0]
    got = decode_at(out.new_text, new0)
    assert got.target.absolute_target == pad_rel


def test_rip_references_preserved():
    fx = fixture("mixed")
    d = disasm_fixture("mixed")
    out = rewrite(d, [], CFG)
    for off, insn in d.instructions.items():
        if insn.rip_operand is None or insn.kind is not K.OTHER:
            continue
        new_off = out.final_mapping.assigned[off]
        redec = decode_at(out.new_text, new_off)
        assert redec.rip_operand is not None
        old_target = CFG.old_base + off + insn.length + \
            insn.rip_operand.disp_value
        new_target = CFG.new_base + new_off + redec.length + \
            redec.rip_operand.disp_value
        assert old_target == new_target


class _BrokenPass(InstrumentationPass):
    name = "broken"

    def __init__(self):
        self.calls = 0

    def instrument(self, site):
        self.calls += 1
        # Lies about its size between sizing and emission.
        if site.insn.kind is K.RETURN:
            if site.sizing:
                return PassOutput(prologue=b"\x90" * 4)
            return PassOutput(prologue=b"\x90" * 2)
        return None


def test_size_divergence_detected():
    d = disasm_fixture("mixed")
    with pytest.raises(SizeDivergence):
        rewrite(d, [_BrokenPass()], CFG)


def test_trace_pass_sites_and_record_shape():
    d = disasm_fixture("calls_compiled")
    out = rewrite(d, [trace_pass(3)], CFG)
    bare = rewrite(d, [], CFG)
    traced_kinds = (K.DIRECT_CALL, K.INDIRECT_CALL, K.RETURN,
                    K.INDIRECT_JUMP)
    n_sites = sum(1 for i in d.instructions.values()
                  if i.kind in traced_kinds)
    grown = len(out.new_text) - len(bare.new_text)
    assert n_sites > 0 and grown % n_sites == 0
    assert TRACE_RECORD_SIZE == 16


def test_shadow_pass_instruments_calls_and_returns():
    d = disasm_fixture("calls_compiled")
    out = rewrite(d, [shadow_stack_pass(CFG.state_vaddr)], CFG)
    bare = rewrite(d, [], CFG)
    assert len(out.new_text) > len(bare.new_text)
    region = combined_region(out)
    delta = out.config.new_base - out.config.stub_base
    seeds = [out.final_mapping.assigned[s] + delta for s in d.seeds]
    _, bad = reachable_from(region, seeds)
    assert not bad


def test_ibv_pass_is_noop_in_cet_mode():
    d = disasm_fixture("mixed", "cet")
    plain = rewrite(d, [], CFG)
    ibv = rewrite(d, [ibv_pass()], CFG)
    assert plain.new_text == ibv.new_text
    assert "strict" not in ibv.stubs


def test_ibv_pass_adds_strict_table_in_superset_mode():
    d = disasm_fixture("mixed", "superset")
    out = rewrite(d, [ibv_pass()], CFG)
    assert out.strict_mapping is not None
    assert "strict" in out.stubs
    assert out.strict_mapping.nonsentinel_count() == \
        len(d.indirect_target_candidates)
    # Trampolines call the strict stub, not the permissive one.
    strict_rel = (CFG.stub_base - CFG.new_base
                  + out.stub_offsets["strict"])
    ret_off = next(o for o, i in d.instructions.items()
                   if i.kind is K.RETURN)
    site = out.final_mapping.assigned[ret_off]
    call_at = out.new_text.find(b"\xe8", site)
    rel = struct.unpack_from("<i", out.new_text, call_at + 1)[0]
    assert site <= call_at < site + 64
    assert call_at + 5 + rel == strict_rel
