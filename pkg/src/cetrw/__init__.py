"""Static x86-64 ELF rewriting with endbr64-guided disassembly."""

from .addrmap import (
    AddressMapping, ILLEGAL, OUT_OF_REGION, RegionEntry, RegionTable,
    SENTINEL, build_mapping, deserialize_mapping, emit_global_lookup_stub,
    emit_local_lookup_stub, lookup, serialize_mapping,
)
from .disasm import (
    CET_GUIDED, SUPERSET, CountsReport, DisassemblyResult, cet_disassemble,
    compare_modes, superset_disassemble,
)
from .elf import (
    ElfImage, OutputPlan, emit_rewritten, load_elf, plan_layout, rewrite_elf,
    verify,
)
from .isa import (
    DecodedInstruction, DirectTarget, IndirectTarget, InstructionKind,
    decode_at, is_endbr64_at,
)
from .rewrite import (
    InstrumentationPass, RewriteConfig, RewriteOutput, expand_stub, ibv_pass,
    null_pass, rewrite, shadow_stack_pass, stub_templates, trace_pass,
)

__version__ = "0.1.0"
