"""Exception types shared across the toolkit."""


class CetrwError(Exception):
    """Base class for all toolkit errors."""


class InvalidEntryPoint(CetrwError):
    """An entry point is outside the region or decodes to no instruction."""


class RegionMismatch(CetrwError):
    """Two disassembly results do not cover the same region."""


class SubsetViolation(CetrwError):
    """Seeded disassembly produced instructions absent from the superset."""


class UnmappedDirectTarget(CetrwError):
    """A direct branch targets an offset the disassembly never reached."""


class SizeDivergence(CetrwError):
    """Emitted instruction bytes differ from the sizing pass prediction."""


class UnsupportedOperand(CetrwError):
    """An indirect-branch operand form the materializer cannot express."""


class UnsupportedClass(CetrwError):
    """Input is not a 64-bit little-endian ELF."""


class NoExecutableSegment(CetrwError):
    """No executable LOAD segment containing the entry point."""


class MalformedHeaders(CetrwError):
    """ELF headers are truncated or inconsistent."""


class LayoutCollision(CetrwError):
    """Planned output regions overlap existing segments."""


class RelocationConflict(CetrwError):
    """A dynamic relocation targets bytes the rewrite must move."""
