"""Runtime blob embedding: parameter-block patching and a minimal fallback.

The injected runtime is built separately as a flat position-independent
blob.  It carries a magic-tagged parameter block the emitter fills in
with link-time facts (where the translated entry lives, where the table
segment is, the original text range, the shadow-stack region).  The blob
protocol is the contract between this package and any runtime
implementation.

When no blob is supplied, a minimal fallback is synthesized: a single
jump to the translated entry point.  That is enough for statically
linked, non-PIE programs whose control flow never re-enters original
text (the loader maps the fixed-address table segment directly); fault
redirection, shadow-stack growth and diagnostics need the full runtime.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

PARAM_MAGIC = b"RTPB0002"

# u64 fields following the magic, in order.
PARAM_FIELDS = (
    "blob_vaddr",        # link vaddr of the blob's first byte
    "entry_vaddr",       # translated original entry point
    "table_vaddr",       # link vaddr of the table segment
    "table_size",
    "fixed_table_addr",  # where the region table must be visible at run time
    "old_text_vaddr",
    "old_text_size",
    "new_base",          # anchor the mapping entries are relative to
    "mapping_array_vaddr",
    "state_vaddr",       # runtime-state page (shadow top pointer at +0)
    "state_size",
    "flags",
    "region_count",
    "stub_base",         # lookup-stub area: enforcement halts live here
)
PARAM_BLOCK_SIZE = len(PARAM_MAGIC) + 8 * len(PARAM_FIELDS)

FLAG_HAVE_STATE = 1 << 0


@dataclass
class RuntimeParams:
    blob_vaddr: int = 0
    entry_vaddr: int = 0
    table_vaddr: int = 0
    table_size: int = 0
    fixed_table_addr: int = 0
    old_text_vaddr: int = 0
    old_text_size: int = 0
    new_base: int = 0
    mapping_array_vaddr: int = 0
    state_vaddr: int = 0
    state_size: int = 0
    flags: int = 0
    region_count: int = 0
    stub_base: int = 0

    def pack(self) -> bytes:
        return PARAM_MAGIC + struct.pack(
            f"<{len(PARAM_FIELDS)}Q",
            *(getattr(self, f) for f in PARAM_FIELDS)
        )


def patch_params(blob: bytes, params: RuntimeParams) -> bytes:
    """Fill the parameter block of a full runtime blob."""
    idx = blob.find(PARAM_MAGIC)
    if idx < 0:
        raise ValueError("runtime blob has no parameter block")
    out = bytearray(blob)
    out[idx:idx + PARAM_BLOCK_SIZE] = params.pack()
    return bytes(out)


def has_param_block(blob: bytes) -> bool:
    return blob.find(PARAM_MAGIC) >= 0


def synthesize_minimal_runtime(blob_vaddr: int, entry_vaddr: int) -> bytes:
    """jmp rel32 straight to the translated entry point."""
    return b"\xe9" + struct.pack("<i", entry_vaddr - (blob_vaddr + 5))
