"""Region disassembly in superset and endbr64-seeded modes.

Superset mode decodes at every byte offset so that no address an indirect
branch could reach is missed.  The seeded ("cet") mode exploits the fact
that hardware-enforced indirect branches may only land on endbr64: it
starts traversal from declared entry points and every endbr64 site,
follows direct branches and fall-through edges, and prunes everything
else.  Post-call offsets join the traversal and the indirect-target
candidate set because returns are redirected through the address lookup
at run time, so they must stay translatable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .errors import InvalidEntryPoint, RegionMismatch, SubsetViolation
from .isa import (
    ENDBR64_BYTES,
    DecodedInstruction,
    DirectTarget,
    IndirectTarget,
    InstructionKind,
    TERMINATOR_KINDS,
    decode_at,
)

SUPERSET = "superset"
CET_GUIDED = "cet"

K = InstructionKind


@dataclass(frozen=True)
class CountsReport:
    """Instrumented-instruction counts by category."""

    total_instructions: int = 0
    direct_call: int = 0
    direct_jump: int = 0
    indirect_call: int = 0
    indirect_jump: int = 0
    conditional_jump: int = 0

    @classmethod
    def from_instructions(
        cls, instructions: dict[int, DecodedInstruction]
    ) -> "CountsReport":
        counts = {k: 0 for k in K}
        for insn in instructions.values():
            counts[insn.kind] += 1
        return cls(
            total_instructions=len(instructions),
            direct_call=counts[K.DIRECT_CALL],
            direct_jump=counts[K.DIRECT_JUMP],
            indirect_call=counts[K.INDIRECT_CALL],
            indirect_jump=counts[K.INDIRECT_JUMP],
            conditional_jump=counts[K.CONDITIONAL_JUMP],
        )


@dataclass
class DisassemblyResult:
    mode: str
    region_base: int
    region_size: int
    instructions: dict[int, DecodedInstruction]
    code: bytes = b""  # the region itself; the rewriter re-reads operands
    seeds: frozenset[int] = frozenset()
    indirect_target_candidates: frozenset[int] = frozenset()
    invalid_offsets: frozenset[int] = frozenset()
    truncated_paths: frozenset[int] = frozenset()  # ran off the region end
    invalid_stops: frozenset[int] = frozenset()    # path hit an undecodable byte
    notrack_sites: frozenset[int] = frozenset()
    superset_seeded: bool = False  # NOTRACK fallback widened the traversal
    stats: CountsReport = field(default_factory=CountsReport)


def _endbr_sites(code: bytes) -> set[int]:
    sites = set()
    start = 0
    while True:
        idx = code.find(ENDBR64_BYTES, start)
        if idx < 0:
            return sites
        sites.add(idx)
        start = idx + 1


def _candidates(
    instructions: dict[int, DecodedInstruction], endbr: set[int], size: int
) -> frozenset[int]:
    """endbr64 sites plus decodable post-call fall-through offsets."""
    cand = set(endbr)
    for insn in instructions.values():
        if insn.kind in (K.DIRECT_CALL, K.INDIRECT_CALL):
            after = insn.offset + insn.length
            if after < size and after in instructions:
                cand.add(after)
    return frozenset(cand)


def superset_disassemble(code: bytes, region_base: int = 0) -> DisassemblyResult:
    """One decode attempt per byte offset of the region."""
    if not code:
        raise ValueError("empty code region")
    instructions: dict[int, DecodedInstruction] = {}
    invalid = set()
    for off in range(len(code)):
        insn = decode_at(code, off)
        if insn.kind is K.INVALID:
            invalid.add(off)
        else:
            instructions[off] = insn
    endbr = _endbr_sites(code)
    return DisassemblyResult(
        mode=SUPERSET,
        region_base=region_base,
        region_size=len(code),
        instructions=instructions,
        code=code,
        indirect_target_candidates=_candidates(instructions, endbr, len(code)),
        invalid_offsets=frozenset(invalid),
        stats=CountsReport.from_instructions(instructions),
    )


def cet_disassemble(
    code: bytes,
    region_base: int = 0,
    entry_points: set[int] | frozenset[int] = frozenset(),
    notrack_fallback: bool = True,
) -> DisassemblyResult:
    """Worklist traversal seeded from entry points and endbr64 sites.

    Paths stop at undecodable bytes, halts, returns and unconditional
    branches; direct branch targets inside the region and fall-throughs
    (including post-call offsets) extend the traversal.  A NOTRACK-prefixed
    indirect branch defeats the endbr64-only-targets assumption, so by
    default its discovery falls back to seeding every decodable offset of
    the region (`notrack_fallback`); either way a warning is emitted.
    """
    if not code:
        raise ValueError("empty code region")
    size = len(code)
    for ep in entry_points:
        if not 0 <= ep < size:
            raise InvalidEntryPoint(f"entry point {ep:#x} outside region")
        if decode_at(code, ep).kind is K.INVALID:
            raise InvalidEntryPoint(f"entry point {ep:#x} does not decode")

    endbr = _endbr_sites(code)
    seeds = frozenset(entry_points) | frozenset(endbr)

    instructions: dict[int, DecodedInstruction] = {}
    truncated: set[int] = set()
    invalid_stops: set[int] = set()
    notrack_sites: set[int] = set()
    fell_back = False

    work = list(seeds)
    while work:
        off = work.pop()
        if off in instructions:
            continue
        if not 0 <= off < size:
            truncated.add(off)  # path left the region; noted, not followed
            continue
        insn = decode_at(code, off)
        if insn.kind is K.INVALID:
            invalid_stops.add(off)
            continue
        instructions[off] = insn

        if (
            isinstance(insn.target, IndirectTarget)
            and insn.target.notrack
            and off not in notrack_sites
        ):
            notrack_sites.add(off)
            warnings.warn(
                f"NOTRACK indirect branch at region offset {off:#x}: "
                "its targets need not be endbr64-marked"
                + ("; falling back to every-offset seeding" if
                   notrack_fallback and not fell_back else ""),
                stacklevel=2,
            )
            if notrack_fallback and not fell_back:
                fell_back = True
                work.extend(range(size))

        if insn.kind not in TERMINATOR_KINDS:
            work.append(off + insn.length)
        if isinstance(insn.target, DirectTarget):
            work.append(insn.target.absolute_target)

    cand = _candidates(instructions, endbr, size)
    return DisassemblyResult(
        mode=CET_GUIDED,
        region_base=region_base,
        region_size=size,
        instructions=instructions,
        code=code,
        seeds=seeds,
        indirect_target_candidates=cand,
        truncated_paths=frozenset(truncated),
        invalid_stops=frozenset(invalid_stops),
        notrack_sites=frozenset(notrack_sites),
        superset_seeded=fell_back,
        stats=CountsReport.from_instructions(instructions),
    )


@dataclass(frozen=True)
class ComparisonReport:
    superset_counts: CountsReport
    cet_counts: CountsReport
    pruning_ratio: float  # cet total / superset total
    pruned_offsets: tuple[int, ...]  # in superset but not in cet


def compare_modes(
    sup: DisassemblyResult, cet: DisassemblyResult
) -> ComparisonReport:
    """Per-kind counts of both modes plus the subset check."""
    if (sup.region_base, sup.region_size) != (cet.region_base, cet.region_size):
        raise RegionMismatch(
            f"superset covers {sup.region_base:#x}+{sup.region_size:#x}, "
            f"cet covers {cet.region_base:#x}+{cet.region_size:#x}"
        )
    extra = set(cet.instructions) - set(sup.instructions)
    if extra:
        raise SubsetViolation(
            f"{len(extra)} offsets in seeded result missing from superset"
        )
    for off, insn in cet.instructions.items():
        if sup.instructions[off] != insn:
            raise SubsetViolation(f"decode mismatch at offset {off:#x}")
    total = sup.stats.total_instructions
    ratio = (cet.stats.total_instructions / total) if total else 1.0
    pruned = tuple(sorted(set(sup.instructions) - set(cet.instructions)))
    return ComparisonReport(sup.stats, cet.stats, ratio, pruned)
