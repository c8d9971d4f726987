"""Command-line front end: analyze, rewrite, verify, run-diff.

Exit codes (exhaustive):
  0   success
  2   usage error (argparse)
  3   input not supported or not parseable as ELF
  4   pipeline error while rewriting
  5   verification found failing checks
  6   behavioral difference between original and rewritten binary
  7   unsupported configuration requested
  125 gated: this host cannot execute the binaries under test

The fixed region-table address can be overridden for testing through the
CETRW_TABLE_ADDR environment variable (hex or decimal).
"""

from __future__ import annotations

import argparse
import os
import platform
import subprocess
import sys
import time

from .disasm import (
    CET_GUIDED, SUPERSET, cet_disassemble, compare_modes,
    superset_disassemble,
)
from .elf import OutputPlan, load_elf, rewrite_elf, verify
from .errors import CetrwError, MalformedHeaders, NoExecutableSegment, \
    UnsupportedClass
from .report import AnalyzeReport, ModeReport

EXIT_OK = 0
EXIT_INPUT = 3
EXIT_PIPELINE = 4
EXIT_VERIFY = 5
EXIT_DIVERGED = 6
EXIT_UNSUPPORTED_CONFIG = 7
EXIT_GATED = 125

_PARSE_ERRORS = (UnsupportedClass, MalformedHeaders, NoExecutableSegment)


def _table_addr_override() -> int | None:
    raw = os.environ.get("CETRW_TABLE_ADDR")
    if not raw:
        return None
    return int(raw, 0)


def _make_plan(args) -> OutputPlan:
    plan = OutputPlan()
    addr = _table_addr_override()
    if addr is not None:
        plan.table_vaddr = addr
    if getattr(args, "libs", "ignore") == "instrument":
        raise SystemExit(
            _fail(EXIT_UNSUPPORTED_CONFIG,
                  "library instrumentation is not supported; use --libs "
                  "ignore (uninstrumented libraries are handled through "
                  "fault redirection)")
        )
    if getattr(args, "runtime", None):
        with open(args.runtime, "rb") as f:
            plan.runtime_blob = f.read()
    if getattr(args, "red_zone_safe", False):
        plan.red_zone_safe = True
    return plan


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_analyze(args) -> int:
    try:
        data = open(args.binary, "rb").read()
        image = load_elf(data)
    except OSError as e:
        return _fail(EXIT_INPUT, str(e))
    except _PARSE_ERRORS as e:
        return _fail(EXIT_INPUT, str(e))

    text = image.text_region
    eps = {image.entry_point - text.vaddr}
    eps |= {v - text.vaddr for v in image.function_symbols()}

    report = AnalyzeReport(path=args.binary)
    results = {}
    modes = ("superset", "cet") if args.mode == "both" else (args.mode,)
    for mode in modes:
        t0 = time.perf_counter()
        if mode == "superset":
            disasm = superset_disassemble(text.data, text.vaddr)
        else:
            disasm = cet_disassemble(text.data, text.vaddr, eps)
        results[mode] = disasm
        new_size = new_file = None
        if args.sizes:
            blob, out = rewrite_elf(data, mode=mode)
            new_size = out.stats.new_text_size
            new_file = len(blob)
        report.modes[mode] = ModeReport(
            counts=disasm.stats,
            old_text_size=text.size,
            new_text_size=new_size,
            old_file_size=len(data),
            new_file_size=new_file,
            seconds=time.perf_counter() - t0,
        )
    if args.mode == "both":
        report.comparison = compare_modes(results["superset"], results["cet"])
    sys.stdout.write(report.render(with_timings=args.timings))
    return EXIT_OK


def cmd_rewrite(args) -> int:
    try:
        data = open(args.input, "rb").read()
    except OSError as e:
        return _fail(EXIT_INPUT, str(e))
    plan = _make_plan(args)
    if not plan.runtime_blob:
        try:
            image = load_elf(data)
            dynamic = any(s.p_type == 3 for s in image.segments)  # INTERP
            if dynamic or image.is_pie:
                print("warning: no --runtime blob; dynamically linked and "
                      "position-independent programs need the full runtime "
                      "for fault redirection", file=sys.stderr)
        except _PARSE_ERRORS:
            pass
    passes = [p for p in (args.passes or "").split(",") if p and p != "null"]
    try:
        blob, out = rewrite_elf(data, mode=args.mode, pass_specs=passes,
                                plan=plan)
    except _PARSE_ERRORS as e:
        return _fail(EXIT_INPUT, str(e))
    except (CetrwError, OverflowError, ValueError) as e:
        return _fail(EXIT_PIPELINE, str(e))
    with open(args.output, "wb") as f:
        f.write(blob)
    os.chmod(args.output, 0o755)
    print(f"text-size-before {out.stats.old_text_size}")
    print(f"text-size-after  {out.stats.new_text_size}")
    print(f"file-size-before {len(data)}")
    print(f"file-size-after  {len(blob)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        orig = open(args.original, "rb").read()
        new = open(args.rewritten, "rb").read()
        report = verify(orig, new)
    except OSError as e:
        return _fail(EXIT_INPUT, str(e))
    except _PARSE_ERRORS as e:
        return _fail(EXIT_INPUT, str(e))
    for check in report.checks:
        status = "pass" if check.passed else "FAIL"
        extra = f"  ({check.detail})" if check.detail and not check.passed \
            else ""
        print(f"{status}  {check.name}{extra}")
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_run_diff(args) -> int:
    if platform.machine() != "x86_64" or sys.platform != "linux":
        print("gated: host cannot execute x86-64 ELF binaries")
        return EXIT_GATED

    def run(path):
        return subprocess.run(
            [os.path.abspath(path), *args.args],
            input=args.stdin.encode() if args.stdin else None,
            capture_output=True,
            timeout=args.timeout,
        )

    try:
        a = run(args.original)
        b = run(args.rewritten)
    except OSError as e:
        return _fail(EXIT_INPUT, str(e))
    except subprocess.TimeoutExpired as e:
        return _fail(EXIT_DIVERGED, f"timeout: {e}")

    diffs = []
    if a.stdout != b.stdout:
        diffs.append("stdout")
    if a.stderr != b.stderr:
        diffs.append("stderr")
    if a.returncode != b.returncode:
        diffs.append(f"exit ({a.returncode} vs {b.returncode})")
    if diffs:
        print("diverged:", ", ".join(diffs))
        return EXIT_DIVERGED
    print(f"identical: exit {a.returncode}, "
          f"{len(a.stdout)}B stdout, {len(a.stderr)}B stderr")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cetrw",
        description="Static x86-64 binary rewriter with endbr64-guided "
                    "disassembly and software CET enforcement.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="disassemble and report counts")
    p.add_argument("binary")
    p.add_argument("--mode", choices=["superset", "cet", "both"],
                   default="both")
    p.add_argument("--timings", action="store_true",
                   help="append wall-clock figures (non-deterministic)")
    p.add_argument("--sizes", action="store_true",
                   help="also compute rewritten text sizes")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rewrite", help="rewrite a binary")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=["superset", "cet"], default="cet")
    p.add_argument("--pass", dest="passes", default="",
                   help="comma-separated: null,trace[:fd],shadow-stack,ibv")
    p.add_argument("--libs", choices=["ignore", "instrument"],
                   default="ignore")
    p.add_argument("--runtime", help="full runtime blob to embed")
    p.add_argument("--red-zone-safe", action="store_true")
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("verify", help="static checks on a rewritten binary")
    p.add_argument("original")
    p.add_argument("rewritten")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run-diff", help="behavioral diff original/rewritten")
    p.add_argument("original")
    p.add_argument("rewritten")
    p.add_argument("args", nargs="*")
    p.add_argument("--stdin", default="")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_run_diff)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
