"""ELF64 parsing, rewritten-image assembly, and static verification.

The emitter appends three LOAD segments to the original file:

  - an executable segment holding the relocated program-header table,
    the lookup-stub area, the rewritten text, and the runtime blob;
  - a read-only segment at the fixed table address holding the region
    registry, the mapping table(s), and a build-metadata block;
  - a read-write segment for runtime state (shadow-stack storage).

The executable segment's vaddr keeps the file's vaddr==base+offset
congruence so the program-header table stays visible at AT_PHDR under
both old and new kernel calculations.  The original text segment keeps
its bytes but loses the execute flag; the entry point is redirected into
the runtime blob, which ends by jumping to the translated original
entry.  Init/fini pointers the dynamic loader calls before the entry
point are retargeted statically, since no fault handler is installed
that early.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

from . import runtime as rt
from .addrmap import (
    DEFAULT_TABLE_ADDRESS, RegionEntry, RegionTable, deserialize_mapping,
    serialize_mapping,
)
from .disasm import CET_GUIDED, SUPERSET, cet_disassemble, superset_disassemble
from .errors import (
    LayoutCollision, MalformedHeaders, NoExecutableSegment, UnsupportedClass,
)
from .isa import ENDBR64_BYTES
from .rewrite import (
    PASS_REGISTRY, RewriteConfig, RewriteOutput, rewrite,
)

PAGE = 0x1000
PT_LOAD, PT_DYNAMIC, PT_INTERP, PT_PHDR = 1, 2, 3, 6
PF_X, PF_W, PF_R = 1, 2, 4
ET_EXEC, ET_DYN = 2, 3
EM_X86_64 = 62

DT_NULL, DT_INIT, DT_FINI = 0, 12, 13
DT_INIT_ARRAY, DT_FINI_ARRAY = 25, 26
DT_INIT_ARRAYSZ, DT_FINI_ARRAYSZ = 27, 28
DT_RELA, DT_RELASZ = 7, 8
DT_PREINIT_ARRAY, DT_PREINIT_ARRAYSZ = 32, 33
R_X86_64_RELATIVE = 8

META_MAGIC = b"RWMETA01"
STUB_AREA_BUDGET = 0x200


def _align(value: int, to: int) -> int:
    return (value + to - 1) & ~(to - 1)


@dataclass
class Segment:
    p_type: int
    p_flags: int
    p_offset: int
    p_vaddr: int
    p_paddr: int
    p_filesz: int
    p_memsz: int
    p_align: int
    index: int = -1

    def pack(self) -> bytes:
        return struct.pack(
            "<IIQQQQQQ", self.p_type, self.p_flags, self.p_offset,
            self.p_vaddr, self.p_paddr, self.p_filesz, self.p_memsz,
            self.p_align,
        )


@dataclass
class Section:
    name: str
    sh_type: int
    addr: int
    offset: int
    size: int
    entsize: int
    link: int


@dataclass
class TextRegion:
    vaddr: int
    offset: int
    size: int
    data: bytes


@dataclass
class ElfImage:
    data: bytes
    e_type: int
    entry_point: int
    e_phoff: int
    e_phnum: int
    e_shoff: int
    segments: list[Segment]
    sections: list[Section] = field(default_factory=list)
    dynamic: dict[int, int] = field(default_factory=dict)
    text_region: TextRegion | None = None

    @property
    def is_pie(self) -> bool:
        return self.e_type == ET_DYN

    @property
    def load_base(self) -> int:
        loads = [s for s in self.segments if s.p_type == PT_LOAD]
        first = min(loads, key=lambda s: s.p_vaddr)
        return first.p_vaddr - first.p_offset

    def vaddr_to_offset(self, vaddr: int) -> int | None:
        for s in self.segments:
            if s.p_type == PT_LOAD and \
                    s.p_vaddr <= vaddr < s.p_vaddr + s.p_filesz:
                return s.p_offset + (vaddr - s.p_vaddr)
        return None

    def function_symbols(self) -> set[int]:
        """st_value of FUNC symbols inside the text region."""
        if self.text_region is None:
            return set()
        lo = self.text_region.vaddr
        hi = lo + self.text_region.size
        out = set()
        for sec in self.sections:
            if sec.sh_type not in (2, 11) or sec.entsize != 24:
                continue
            count = sec.size // 24
            for i in range(count):
                off = sec.offset + i * 24
                if off + 24 > len(self.data):
                    break
                _, info, _, _, value, _ = struct.unpack_from(
                    "<IBBHQQ", self.data, off)
                if info & 0xF == 2 and lo <= value < hi:
                    out.add(value)
        return out


def load_elf(data: bytes) -> ElfImage:
    if len(data) < 64:
        raise MalformedHeaders("file shorter than the ELF header")
    if data[:4] != b"\x7fELF":
        raise MalformedHeaders("bad magic")
    if data[4] != 2 or data[5] != 1:
        raise UnsupportedClass("only 64-bit little-endian ELF is supported")
    (e_type, e_machine, _ver, e_entry, e_phoff, e_shoff, _flags, _ehsize,
     e_phentsize, e_phnum, _shentsize, e_shnum, e_shstrndx) = struct.unpack_from(
        "<HHIQQQIHHHHHH", data, 16)
    if e_machine != EM_X86_64:
        raise UnsupportedClass(f"machine {e_machine} is not x86-64")
    if e_type not in (ET_EXEC, ET_DYN):
        raise UnsupportedClass(f"ELF type {e_type} is not an executable")
    if e_phentsize != 56:
        raise MalformedHeaders(f"phentsize {e_phentsize} != 56")
    if e_phoff + e_phnum * 56 > len(data):
        raise MalformedHeaders("program header table runs past EOF")

    segments = []
    for i in range(e_phnum):
        fields = struct.unpack_from("<IIQQQQQQ", data, e_phoff + i * 56)
        segments.append(Segment(*fields, index=i))

    text = None
    for s in segments:
        if s.p_type == PT_LOAD and (s.p_flags & PF_X) and \
                s.p_vaddr <= e_entry < s.p_vaddr + s.p_filesz:
            if s.p_offset + s.p_filesz > len(data):
                raise MalformedHeaders("text segment runs past EOF")
            text = TextRegion(
                s.p_vaddr, s.p_offset, s.p_filesz,
                data[s.p_offset:s.p_offset + s.p_filesz],
            )
            break
    if text is None:
        raise NoExecutableSegment(
            "no executable LOAD segment contains the entry point"
        )

    sections: list[Section] = []
    if e_shoff and e_shnum and e_shoff + e_shnum * 64 <= len(data):
        raw = []
        for i in range(e_shnum):
            (sh_name, sh_type, _fl, sh_addr, sh_off, sh_size, sh_link,
             _info, _align_, sh_entsize) = struct.unpack_from(
                "<IIQQQQIIQQ", data, e_shoff + i * 64)
            raw.append((sh_name, sh_type, sh_addr, sh_off, sh_size,
                        sh_link, sh_entsize))
        names = b""
        if e_shstrndx < len(raw):
            _, _, _, off, size, _, _ = raw[e_shstrndx]
            if off + size <= len(data):
                names = data[off:off + size]

        def name_of(idx: int) -> str:
            end = names.find(b"\x00", idx)
            return names[idx:end].decode("latin1") if end >= 0 else ""

        for (sh_name, sh_type, sh_addr, sh_off, sh_size, sh_link,
             sh_entsize) in raw:
            sections.append(Section(
                name_of(sh_name), sh_type, sh_addr, sh_off, sh_size,
                sh_entsize, sh_link,
            ))

    dynamic: dict[int, int] = {}
    for s in segments:
        if s.p_type == PT_DYNAMIC and s.p_offset + s.p_filesz <= len(data):
            pos = s.p_offset
            while pos + 16 <= s.p_offset + s.p_filesz:
                tag, val = struct.unpack_from("<qQ", data, pos)
                pos += 16
                if tag == DT_NULL:
                    break
                dynamic[tag] = val

    return ElfImage(
        data=data,
        e_type=e_type,
        entry_point=e_entry,
        e_phoff=e_phoff,
        e_phnum=e_phnum,
        e_shoff=e_shoff,
        segments=segments,
        sections=sections,
        dynamic=dynamic,
        text_region=text,
    )


# ---------------------------------------------------------------------------
# Output planning and emission
# ---------------------------------------------------------------------------

@dataclass
class OutputPlan:
    new_code_vaddr: int = 0          # 0: derive from file layout
    table_vaddr: int = DEFAULT_TABLE_ADDRESS
    state_vaddr: int = 0             # 0: place just below the table
    state_size: int = 0x200000
    runtime_blob: bytes = b""        # empty: synthesize the minimal jump
    lib_policy: str = "ignore"
    red_zone_safe: bool = False
    touched_segments: tuple[int, ...] = ()  # filled during emission


@dataclass
class Layout:
    """All link-time constants shared by rewrite() and emit_rewritten()."""

    exec_off: int
    phdr_size: int
    stub_base: int
    new_base: int
    table_vaddr: int
    region_table_size: int
    mapping_array_vaddr: int
    strict_array_vaddr: int
    state_vaddr: int


def plan_layout(image: ElfImage, plan: OutputPlan) -> Layout:
    if not plan.state_vaddr:
        plan.state_vaddr = plan.table_vaddr - _align(
            plan.state_size + PAGE, PAGE) - 0x100000
    base0 = image.load_base
    # Keep vaddr == base + offset for the appended executable segment so
    # the relocated program-header table stays where AT_PHDR points.  The
    # offset is pushed past both the file end and the highest mapped
    # vaddr (memsz gaps make those differ).
    max_end = max(
        (s.p_vaddr + s.p_memsz for s in image.segments
         if s.p_type == PT_LOAD),
        default=0,
    )
    exec_off = max(_align(len(image.data), PAGE),
                   _align(max_end - base0, PAGE))
    phdr_size = (image.e_phnum + 3) * 56
    if plan.new_code_vaddr:
        exec_vaddr = plan.new_code_vaddr
        if exec_vaddr != base0 + _align(exec_vaddr - base0, PAGE) or \
                exec_vaddr < base0 + exec_off:
            raise LayoutCollision(
                "new_code_vaddr breaks the vaddr/offset congruence"
            )
        exec_off = exec_vaddr - base0
    else:
        exec_vaddr = base0 + exec_off
    stub_base = _align(exec_vaddr + phdr_size, 16)
    new_base = stub_base + STUB_AREA_BUDGET

    region_count = 1 + (1 if plan.lib_policy == "ignore" else 0)
    region_table_size = 0x18 + 24 * region_count
    mapping_array_vaddr = plan.table_vaddr + _align(region_table_size, 16)
    old_size = image.text_region.size
    strict_array_vaddr = mapping_array_vaddr + _align(4 * old_size, 16)

    planned = [
        ("new-code", exec_vaddr, new_base + 0x1000),
        ("table", plan.table_vaddr, strict_array_vaddr + 4 * old_size),
        ("state", plan.state_vaddr, plan.state_vaddr + plan.state_size),
    ]
    for i, (name_a, lo_a, hi_a) in enumerate(planned):
        for name_b, lo_b, hi_b in planned[i + 1:]:
            if lo_a < hi_b and lo_b < hi_a:
                raise LayoutCollision(
                    f"planned {name_a} and {name_b} regions overlap"
                )
    for s in image.segments:
        if s.p_type != PT_LOAD:
            continue
        for name, lo, hi in planned:
            if s.p_vaddr < hi and lo < s.p_vaddr + s.p_memsz:
                raise LayoutCollision(
                    f"planned {name} region {lo:#x}-{hi:#x} overlaps "
                    f"segment {s.index} at {s.p_vaddr:#x}"
                )

    return Layout(
        exec_off=exec_off,
        phdr_size=phdr_size,
        stub_base=stub_base,
        new_base=new_base,
        table_vaddr=plan.table_vaddr,
        region_table_size=region_table_size,
        mapping_array_vaddr=mapping_array_vaddr,
        strict_array_vaddr=strict_array_vaddr,
        state_vaddr=plan.state_vaddr,
    )


def rewrite_config_for(image: ElfImage, layout: Layout,
                       plan: OutputPlan) -> RewriteConfig:
    return RewriteConfig(
        old_base=image.text_region.vaddr,
        new_base=layout.new_base,
        stub_base=layout.stub_base,
        mapping_array_vaddr=layout.mapping_array_vaddr,
        strict_array_vaddr=layout.strict_array_vaddr,
        table_address=layout.table_vaddr,
        state_vaddr=layout.state_vaddr,
        red_zone_safe=plan.red_zone_safe,
    )


def _retarget_init_pointers(data: bytearray, image: ElfImage,
                            out: RewriteOutput, touched: set[int]) -> None:
    """Point DT_INIT/DT_FINI and init/fini arrays at rewritten code.

    The dynamic loader calls these before the redirected entry runs, so
    they cannot rely on fault redirection.
    """
    text = image.text_region

    def translate(v: int) -> int | None:
        off = v - text.vaddr
        if 0 <= off < text.size and off in out.final_mapping.assigned:
            return out.config.new_base + out.final_mapping.assigned[off]
        return None

    dyn_seg = next(
        (s for s in image.segments if s.p_type == PT_DYNAMIC), None)
    if dyn_seg is None:
        return

    # DT_INIT / DT_FINI live in the dynamic entries themselves.
    pos = dyn_seg.p_offset
    while pos + 16 <= dyn_seg.p_offset + dyn_seg.p_filesz:
        tag, val = struct.unpack_from("<qQ", data, pos)
        if tag == DT_NULL:
            break
        if tag in (DT_INIT, DT_FINI):
            nv = translate(val)
            if nv is not None:
                struct.pack_into("<Q", data, pos + 8, nv)
                touched.add(dyn_seg.index)
        pos += 16

    # Array contents: absolute slots, plus RELATIVE reloc addends for PIE.
    spans = []
    for atag, sztag in ((DT_INIT_ARRAY, DT_INIT_ARRAYSZ),
                        (DT_FINI_ARRAY, DT_FINI_ARRAYSZ),
                        (DT_PREINIT_ARRAY, DT_PREINIT_ARRAYSZ)):
        addr = image.dynamic.get(atag)
        size = image.dynamic.get(sztag, 0)
        if addr and size:
            spans.append((addr, size))

    for addr, size in spans:
        off = image.vaddr_to_offset(addr)
        if off is None:
            continue
        for i in range(size // 8):
            v = struct.unpack_from("<Q", data, off + i * 8)[0]
            nv = translate(v)
            if nv is not None:
                struct.pack_into("<Q", data, off + i * 8, nv)
                for s in image.segments:
                    if s.p_type == PT_LOAD and \
                            s.p_offset <= off + i * 8 < s.p_offset + s.p_filesz:
                        touched.add(s.index)

    rela = image.dynamic.get(DT_RELA)
    relasz = image.dynamic.get(DT_RELASZ, 0)
    if rela and relasz:
        roff = image.vaddr_to_offset(rela)
        if roff is not None:
            for i in range(relasz // 24):
                r_offset, r_info, r_addend = struct.unpack_from(
                    "<QQq", data, roff + i * 24)
                if r_info & 0xFFFFFFFF != R_X86_64_RELATIVE:
                    continue
                if not any(lo <= r_offset < lo + sz for lo, sz in spans):
                    continue
                nv = translate(r_addend)
                if nv is not None:
                    struct.pack_into("<q", data, roff + i * 24 + 16, nv)
                    for s in image.segments:
                        if s.p_type == PT_LOAD and s.p_offset <= roff \
                                < s.p_offset + s.p_filesz:
                            touched.add(s.index)


def build_metadata(image: ElfImage, out: RewriteOutput, layout: Layout,
                   plan: OutputPlan, pass_specs: list[str],
                   blob_vaddr: int, blob_size: int) -> bytes:
    meta = {
        "mode": out.mode,
        "old_base": image.text_region.vaddr,
        "old_size": image.text_region.size,
        "new_base": out.config.new_base,
        "stub_base": out.config.stub_base,
        "new_text_size": len(out.new_text),
        "table_vaddr": layout.table_vaddr,
        "mapping_array_vaddr": layout.mapping_array_vaddr,
        "strict_array_vaddr": (
            layout.strict_array_vaddr if out.strict_mapping else 0),
        "state_vaddr": layout.state_vaddr,
        "entry_offset": image.entry_point - image.text_region.vaddr,
        "passes": pass_specs,
        "lib_policy": plan.lib_policy,
        "red_zone_safe": plan.red_zone_safe,
        "blob_vaddr": blob_vaddr,
        "blob_size": blob_size,
        "text_sha256": hashlib.sha256(image.text_region.data).hexdigest(),
    }
    body = json.dumps(meta, sort_keys=True).encode()
    return META_MAGIC + struct.pack("<I", len(body)) + body


def parse_metadata(data: bytes) -> dict:
    idx = data.rfind(META_MAGIC)
    if idx < 0:
        raise MalformedHeaders("no rewrite metadata block found")
    (length,) = struct.unpack_from("<I", data, idx + 8)
    body = data[idx + 12:idx + 12 + length]
    return json.loads(body)


def emit_rewritten(image: ElfImage, out: RewriteOutput, plan: OutputPlan,
                   layout: Layout, pass_specs: list[str] | None = None
                   ) -> bytes:
    """Assemble the output ELF around a completed rewrite."""
    pass_specs = pass_specs or []
    data = bytearray(image.data)
    touched: set[int] = set()

    # Stub area must fit its fixed budget so new_base stays put.
    if len(out.stub_area) > STUB_AREA_BUDGET:
        raise LayoutCollision(
            f"stub area {len(out.stub_area)} exceeds budget "
            f"{STUB_AREA_BUDGET}"
        )

    # --- executable segment ------------------------------------------
    exec_off = layout.exec_off
    exec_vaddr = image.load_base + exec_off
    stub_off_in_seg = layout.stub_base - exec_vaddr
    text_off_in_seg = layout.new_base - exec_vaddr

    seg = bytearray()
    seg += b"\x00" * layout.phdr_size  # placeholder; patched below
    seg += b"\x00" * (stub_off_in_seg - len(seg))
    seg += out.stub_area
    seg += b"\x00" * (text_off_in_seg - len(seg))
    seg += out.new_text

    blob_vaddr = _align(exec_vaddr + len(seg), 16)
    seg += b"\x00" * (blob_vaddr - exec_vaddr - len(seg))
    entry_rel = out.final_mapping.assigned[
        image.entry_point - image.text_region.vaddr]
    translated_entry = layout.new_base + entry_rel
    if plan.runtime_blob:
        blob = plan.runtime_blob
        if rt.has_param_block(blob):
            region_count = 1 + (1 if plan.lib_policy == "ignore" else 0)
            blob = rt.patch_params(blob, rt.RuntimeParams(
                blob_vaddr=blob_vaddr,
                entry_vaddr=translated_entry,
                table_vaddr=layout.table_vaddr,
                table_size=0,  # patched after the table is built
                fixed_table_addr=layout.table_vaddr,
                old_text_vaddr=image.text_region.vaddr,
                old_text_size=image.text_region.size,
                new_base=layout.new_base,
                mapping_array_vaddr=layout.mapping_array_vaddr,
                state_vaddr=layout.state_vaddr,
                state_size=plan.state_size,
                flags=rt.FLAG_HAVE_STATE,
                region_count=region_count,
                stub_base=layout.stub_base,
            ))
    else:
        blob = rt.synthesize_minimal_runtime(blob_vaddr, translated_entry)
    seg += blob

    # --- table segment -------------------------------------------------
    glookup_vaddr = layout.stub_base + out.stub_offsets["global"]
    entries = [RegionEntry(
        layout.stub_base + out.stub_offsets["local"],
        image.text_region.vaddr,
        image.text_region.size,
    )]
    if plan.lib_policy == "ignore":
        entries.append(RegionEntry(0, 0, (1 << 63) - 1))
    region_table = RegionTable(glookup_vaddr, entries, layout.table_vaddr)

    table = bytearray(region_table.serialize())
    table += b"\x00" * (layout.mapping_array_vaddr - layout.table_vaddr
                        - len(table))
    table += serialize_mapping(out.final_mapping)
    if out.strict_mapping is not None:
        table += b"\x00" * (layout.strict_array_vaddr - layout.table_vaddr
                            - len(table))
        table += serialize_mapping(out.strict_mapping)
    table += build_metadata(image, out, layout, plan, pass_specs,
                            blob_vaddr, len(blob))

    if plan.runtime_blob and rt.has_param_block(plan.runtime_blob):
        # Patch the final table size now that it is known.
        idx = bytes(seg).rfind(rt.PARAM_MAGIC)
        fo = idx + len(rt.PARAM_MAGIC) + 8 * rt.PARAM_FIELDS.index(
            "table_size")
        seg[fo:fo + 8] = struct.pack("<Q", len(table))

    # --- state segment ---------------------------------------------------
    state = bytearray(64)
    struct.pack_into("<Q", state, 0, layout.state_vaddr + 64)

    # --- program headers ---------------------------------------------------
    # Loaders require PT_LOAD entries in ascending vaddr order.
    state_off = _align(exec_off + len(seg), PAGE)
    table_off = _align(state_off + len(state), PAGE)

    new_segments = [Segment(
        PT_LOAD, PF_R | PF_X, exec_off, exec_vaddr, exec_vaddr,
        len(seg), len(seg), PAGE)]
    new_segments.append(Segment(
        PT_LOAD, PF_R | PF_W, state_off, layout.state_vaddr,
        layout.state_vaddr, len(state), plan.state_size, PAGE))
    new_segments.append(Segment(
        PT_LOAD, PF_R, table_off, layout.table_vaddr, layout.table_vaddr,
        len(table), len(table), PAGE))
    if layout.table_vaddr % PAGE or layout.state_vaddr % PAGE:
        raise LayoutCollision("table/state vaddrs must be page-aligned")
    if not (exec_vaddr < layout.state_vaddr < layout.table_vaddr):
        raise LayoutCollision(
            "planned vaddrs must ascend: exec < state < table"
        )

    phdrs = bytearray()
    for s in image.segments:
        edit = Segment(**{k: getattr(s, k) for k in (
            "p_type", "p_flags", "p_offset", "p_vaddr", "p_paddr",
            "p_filesz", "p_memsz", "p_align")})
        if s.p_type == PT_LOAD and image.text_region is not None and \
                s.p_vaddr == image.text_region.vaddr and (s.p_flags & PF_X):
            edit.p_flags &= ~PF_X
            touched.add(s.index)
        if s.p_type == PT_PHDR:
            edit.p_offset = exec_off
            edit.p_vaddr = exec_vaddr
            edit.p_paddr = exec_vaddr
            edit.p_filesz = layout.phdr_size
            edit.p_memsz = layout.phdr_size
        phdrs += edit.pack()
    for s in new_segments:
        phdrs += s.pack()
    assert len(phdrs) == layout.phdr_size
    seg[0:layout.phdr_size] = phdrs

    _retarget_init_pointers(data, image, out, touched)
    plan.touched_segments = tuple(sorted(touched))

    # --- ELF header patches -----------------------------------------------
    struct.pack_into("<Q", data, 24, blob_vaddr)            # e_entry
    struct.pack_into("<Q", data, 32, exec_off)              # e_phoff
    struct.pack_into("<H", data, 56, image.e_phnum + 3)     # e_phnum

    # Re-apply the flag edits to the ORIGINAL phdr table location too:
    # some tools keep reading it; the loader uses the new one.
    for s in image.segments:
        if s.index in touched and s.p_type == PT_LOAD and \
                s.p_vaddr == image.text_region.vaddr:
            struct.pack_into(
                "<I", data, image.e_phoff + s.index * 56 + 4,
                s.p_flags & ~PF_X)

    final = bytearray(data)
    final += b"\x00" * (exec_off - len(final))
    final += seg
    final += b"\x00" * (state_off - len(final))
    final += state
    final += b"\x00" * (table_off - len(final))
    final += table
    return bytes(final)


# ---------------------------------------------------------------------------
# One-call pipeline
# ---------------------------------------------------------------------------

def rewrite_elf(data: bytes, mode: str = CET_GUIDED,
                pass_specs: list[str] | None = None,
                plan: OutputPlan | None = None,
                entry_points: set[int] | None = None,
                ) -> tuple[bytes, RewriteOutput]:
    """load -> disassemble -> rewrite -> emit, with defaults."""
    image = load_elf(data)
    plan = plan or OutputPlan()
    pass_specs = pass_specs or []
    layout = plan_layout(image, plan)
    text = image.text_region

    if entry_points is None:
        entry_points = {image.entry_point - text.vaddr}
        entry_points |= {v - text.vaddr for v in image.function_symbols()}

    if mode == SUPERSET:
        disasm = superset_disassemble(text.data, text.vaddr)
    else:
        disasm = cet_disassemble(text.data, text.vaddr, entry_points)

    passes = [make_pass(spec, layout) for spec in pass_specs]
    cfg = rewrite_config_for(image, layout, plan)
    out = rewrite(disasm, passes, cfg)
    blob = emit_rewritten(image, out, plan, layout, pass_specs)
    return blob, out


def make_pass(spec: str, layout: Layout):
    """Instantiate a registered pass from 'name' or 'name:arg'."""
    name, _, arg = spec.partition(":")
    if name not in PASS_REGISTRY:
        raise ValueError(f"unknown pass {name!r}")
    if name == "trace":
        return PASS_REGISTRY[name](int(arg) if arg else 3)
    if name == "shadow-stack":
        return PASS_REGISTRY[name](layout.state_vaddr)
    return PASS_REGISTRY[name]()


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list[Check]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


def verify(original: bytes, rewritten: bytes) -> VerificationReport:
    """Static checks tying a rewritten binary back to its original."""
    checks: list[Check] = []

    def add(name: str, passed: bool, detail: str = "") -> None:
        checks.append(Check(name, bool(passed), detail))

    orig = load_elf(original)
    new = load_elf(rewritten)

    try:
        meta = parse_metadata(rewritten)
    except (MalformedHeaders, ValueError, json.JSONDecodeError) as e:
        add("metadata-present", False, str(e))
        return VerificationReport(checks)
    add("metadata-present", True)

    text_hash = hashlib.sha256(orig.text_region.data).hexdigest()
    add("original-matches-metadata", text_hash == meta["text_sha256"],
        "original text hash differs from the one recorded at rewrite time")

    old_seg = next(
        (s for s in new.segments
         if s.p_type == PT_LOAD and s.p_vaddr == meta["old_base"]), None)
    add("original-text-exec-revoked",
        old_seg is not None and not (old_seg.p_flags & PF_X),
        "original text segment still executable")

    table_off = new.vaddr_to_offset(meta["table_vaddr"])
    table_ok = table_off is not None
    mapping = None
    if table_ok:
        try:
            region_table = RegionTable.parse(
                rewritten[table_off:table_off + 0x18 + 24 * 8],
                meta["table_vaddr"])
            arr_off = new.vaddr_to_offset(meta["mapping_array_vaddr"])
            raw = rewritten[arr_off:arr_off + 4 * meta["old_size"]]
            mapping = deserialize_mapping(
                raw, meta["old_base"], meta["new_base"])
            in_bounds = all(
                e == 0xFFFFFFFF or e < meta["new_text_size"]
                for e in mapping.entries
            )
            table_ok = region_table.region_count >= 1 and in_bounds and \
                len(raw) == 4 * meta["old_size"]
        except (ValueError, TypeError) as e:
            table_ok = False
    add("mapping-table-wellformed", table_ok)

    # Recompute the pipeline deterministically and compare.
    recompute_ok = False
    branch_ok = False
    if table_ok and text_hash == meta["text_sha256"]:
        plan = OutputPlan(
            table_vaddr=meta["table_vaddr"],
            state_vaddr=meta["state_vaddr"],
            lib_policy=meta["lib_policy"],
            red_zone_safe=meta["red_zone_safe"],
        )
        layout = plan_layout(orig, plan)
        if meta["mode"] in (SUPERSET, CET_GUIDED):
            text = orig.text_region
            eps = {orig.entry_point - text.vaddr}
            eps |= {v - text.vaddr for v in orig.function_symbols()}
            import warnings as _warnings
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore")  # surfaced at rewrite time
                if meta["mode"] == SUPERSET:
                    disasm = superset_disassemble(text.data, text.vaddr)
                else:
                    disasm = cet_disassemble(text.data, text.vaddr, eps)
            passes = [make_pass(s, layout) for s in meta["passes"]]
            cfg = rewrite_config_for(orig, layout, plan)
            expected = rewrite(disasm, passes, cfg)
            recompute_ok = (
                serialize_mapping(expected.final_mapping) ==
                serialize_mapping(mapping)
            )
            text_off = new.vaddr_to_offset(meta["new_base"])
            emitted_text = rewritten[
                text_off:text_off + meta["new_text_size"]]
            branch_ok = emitted_text == expected.new_text
    add("mapping-matches-recompute", recompute_ok)
    add("direct-branches-retargeted", branch_ok,
        "rewritten text differs from a deterministic recompute")

    endbr_ok = mapping is not None
    if mapping is not None:
        start = 0
        text = orig.text_region.data
        while True:
            idx = text.find(ENDBR64_BYTES, start)
            if idx < 0:
                break
            if mapping.entries[idx] == 0xFFFFFFFF:
                endbr_ok = False
                break
            start = idx + 1
    add("endbr64-sites-mapped", endbr_ok)

    add("entry-redirected",
        meta["blob_vaddr"] <= new.entry_point
        < meta["blob_vaddr"] + meta["blob_size"],
        "entry point is not inside the runtime blob")

    return VerificationReport(checks)
