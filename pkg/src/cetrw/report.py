"""Deterministic, diff-friendly report rendering for the CLI.

Reports are line-oriented key/value text with aligned count tables.
Timing figures are informational only and live in a separate optional
block so that two runs over identical inputs produce byte-identical
reports by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .disasm import ComparisonReport, CountsReport

COUNT_COLUMNS = (
    ("total", "total_instructions"),
    ("direct-call", "direct_call"),
    ("direct-jump", "direct_jump"),
    ("indirect-call", "indirect_call"),
    ("indirect-jump", "indirect_jump"),
    ("conditional-jump", "conditional_jump"),
)


@dataclass
class ModeReport:
    counts: CountsReport
    old_text_size: int
    new_text_size: int | None = None
    old_file_size: int | None = None
    new_file_size: int | None = None
    seconds: float | None = None


@dataclass
class AnalyzeReport:
    path: str
    modes: dict[str, ModeReport] = field(default_factory=dict)
    comparison: ComparisonReport | None = None

    def render(self, with_timings: bool = False) -> str:
        lines = [f"binary: {self.path}"]
        for mode in sorted(self.modes):
            r = self.modes[mode]
            lines.append(f"[{mode}]")
            for label, attr in COUNT_COLUMNS:
                lines.append(f"  {label:<18} {getattr(r.counts, attr)}")
            lines.append(f"  {'text-size-before':<18} {r.old_text_size}")
            if r.new_text_size is not None:
                lines.append(f"  {'text-size-after':<18} {r.new_text_size}")
            if r.old_file_size is not None:
                lines.append(f"  {'file-size-before':<18} {r.old_file_size}")
            if r.new_file_size is not None:
                lines.append(f"  {'file-size-after':<18} {r.new_file_size}")
        if self.comparison is not None:
            lines.append("[comparison]")
            lines.append(
                f"  {'pruning-ratio':<18} {self.comparison.pruning_ratio:.4f}"
            )
            lines.append(
                f"  {'pruned-offsets':<18} {len(self.comparison.pruned_offsets)}"
            )
        if with_timings:
            lines.append("[timings]")
            for mode in sorted(self.modes):
                sec = self.modes[mode].seconds
                if sec is not None:
                    lines.append(f"  {mode + '-seconds':<18} {sec:.3f}")
        return "\n".join(lines) + "\n"
