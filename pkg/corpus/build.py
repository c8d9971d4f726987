#!/usr/bin/env python3
"""Build the test corpus and emit its ground-truth manifest.

Each entry compiles with CET branch protection, runs once to record its
expected stdout/exit, and lists its address-taken functions (the legal
indirect-branch targets) from the symbol table.  Without a capable
toolchain a gated-skip manifest is written so consumers fall back to
their built-in fixtures.
"""

import hashlib
import shutil
import subprocess
import sys
from pathlib import Path

HERE = Path(__file__).parent
SRC = HERE / "src"
BUILD = HERE / "build"

FREESTANDING = [
    "-nostdlib", "-static", "-no-pie", "-fcf-protection=full",
    "-fno-jump-tables", "-fno-asynchronous-unwind-tables", "-O1",
]
HOSTED = ["-fcf-protection=full", "-Wl,-z,now"]

# name -> (sources, extra flags, metadata)
ENTRIES = {
    "hello_min": (["hello_min.c"], FREESTANDING, {
        "modes": "cet,superset", "violation": "none",
        "targets": [],
    }),
    "funcptr": (["funcptr.c"], FREESTANDING, {
        "modes": "cet,superset", "violation": "none",
        "targets": ["add_vals", "mul_vals", "sub_vals"],
    }),
    "recursion": (["recursion.c"], FREESTANDING, {
        "modes": "cet,superset", "violation": "none",
        "passes": "shadow-stack", "small_state": "yes",
        "targets": [],
    }),
    "violate": (["violate.c"], FREESTANDING, {
        "modes": "cet", "violation": "sentinel",
        "halt_stdout": b"before\n", "targets": [],
    }),
    "smash": (["smash.c"], FREESTANDING, {
        "modes": "cet", "violation": "shadow", "passes": "shadow-stack",
        "halt_stdout": b"calling\n", "targets": ["hijack_target"],
    }),
    "jumptab": (["jumptab.c"],
                HOSTED + ["-no-pie", "-O1", "-fjump-tables",
                          "--param", "case-values-threshold=4"], {
        "modes": "cet,superset", "violation": "none",
        "needs_runtime": "yes", "notrack": "yes", "targets": [],
    }),
    "dynhello": (["dynhello.c"], HOSTED + ["-no-pie"], {
        "modes": "cet,superset", "violation": "none",
        "needs_runtime": "yes", "targets": [],
    }),
    "dynpie": (["dynhello.c"], HOSTED + ["-pie", "-fPIE"], {
        "modes": "cet,superset", "violation": "none",
        "needs_runtime": "yes", "passes": "shadow-stack",
        "targets": [],
    }),
    "qsortcb": (["qsortcb.c"], HOSTED + ["-no-pie"], {
        "modes": "cet,superset", "violation": "none",
        "needs_runtime": "yes", "passes": "shadow-stack",
        "targets": ["cmp_longs"],
    }),
    # A statically linked libc program: the whole C runtime (TLS setup,
    # ifunc resolution, tunables, stdio) runs through rewritten code.
    "staticlibc": (["staticlibc.c"],
                   ["-O2", "-fcf-protection=full", "-static"], {
        "modes": "superset", "violation": "none",
        "needs_runtime": "yes", "notrack": "yes", "targets": [],
    }),
}


def toolchain_supports_cet(cc: str) -> bool:
    probe = BUILD / "probe.c"
    probe.write_text("int main(void){return 0;}\n")
    r = subprocess.run(
        [cc, "-fcf-protection=full", str(probe), "-o", str(BUILD / "probe")],
        capture_output=True,
    )
    return r.returncode == 0


def symbol_offsets(binary: Path, names: list[str]) -> list[str]:
    if not names:
        return []
    out = subprocess.run(["objdump", "-t", str(binary)],
                         capture_output=True, text=True).stdout
    addrs = {}
    for line in out.splitlines():
        if " F .text" in line:
            parts = line.split()
            addrs[parts[-1]] = parts[0]
    return [f"{n}=0x{addrs[n]}" for n in names if n in addrs]


def main() -> int:
    BUILD.mkdir(exist_ok=True)
    cc = shutil.which("gcc") or shutil.which("cc")
    manifest = BUILD / "manifest.txt"
    if cc is None or not toolchain_supports_cet(cc):
        manifest.write_text(
            "# gated-skip: no CET-capable C toolchain on this host\n")
        print("corpus: gated-skip manifest written")
        return 0

    lines = ["# corpus ground truth; one block per entry"]
    failures = 0
    for name, (sources, flags, meta) in ENTRIES.items():
        out = BUILD / name
        cmd = [cc, *flags, *[str(SRC / s) for s in sources], "-o", str(out)]
        r = subprocess.run(cmd, capture_output=True, text=True)
        if r.returncode != 0:
            print(f"corpus: {name} failed to build:\n{r.stderr}",
                  file=sys.stderr)
            failures += 1
            continue
        run = subprocess.run([str(out)], capture_output=True, timeout=60)
        if meta.get("notrack") == "yes":
            text = subprocess.run(["objdump", "-d", str(out)],
                                  capture_output=True, text=True).stdout
            if "notrack" not in text:
                print(f"corpus: {name} built without a notrack branch",
                      file=sys.stderr)
                failures += 1
                continue
        lines.append(f"{name}:")
        lines.append(f"  binary {name}")
        lines.append(
            f"  stdout_sha256 {hashlib.sha256(run.stdout).hexdigest()}")
        lines.append(f"  exit {run.returncode}")
        lines.append(f"  modes {meta.get('modes', 'cet,superset')}")
        lines.append(f"  passes {meta.get('passes', '')}")
        lines.append(f"  violation {meta.get('violation', 'none')}")
        if "halt_stdout" in meta:
            lines.append(f"  halt_stdout {meta['halt_stdout'].hex()}")
        lines.append(f"  needs_runtime {meta.get('needs_runtime', 'no')}")
        lines.append(f"  small_state {meta.get('small_state', 'no')}")
        lines.append(f"  notrack {meta.get('notrack', 'no')}")
        lines.append("  cet yes")
        syms = symbol_offsets(out, meta.get("targets", []))
        lines.append(f"  targets {','.join(syms)}")
    manifest.write_text("\n".join(lines) + "\n")
    print(f"corpus: built {len(ENTRIES) - failures}/{len(ENTRIES)} entries")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
