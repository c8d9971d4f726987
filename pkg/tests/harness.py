"""Gated execution harness: runs generated stubs in a throwaway process.

Used by tests that compare the executed local/global lookup stubs against
the host-side table semantics, including halt paths.  Each batch runs in
a child Python process: the child maps an RWX page for the stubs, maps
the region table at its fixed virtual address, and calls a small C-ABI
thunk around the local stub via ctypes.  Probes that halt kill the child
with SIGSEGV; the driver reads results printed before death.

Only meaningful on x86-64 Linux; callers must gate on `supported()`.
"""

from __future__ import annotations

import json
import platform
import subprocess
import sys

CHILD_SOURCE = r"""
import ctypes, ctypes.util, json, mmap, sys

spec = json.load(open(sys.argv[1]))

libc = ctypes.CDLL(None, use_errno=True)
libc.mmap.restype = ctypes.c_void_p
libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                      ctypes.c_int, ctypes.c_int, ctypes.c_long]

PROT_RWX = 0x1 | 0x2 | 0x4
MAP_PRIVATE, MAP_ANONYMOUS, MAP_FIXED = 0x02, 0x20, 0x10

blob = bytes.fromhex(spec["blob"])
base = libc.mmap(None, max(len(blob), 4096), PROT_RWX,
                 MAP_PRIVATE | MAP_ANONYMOUS, -1, 0)
assert base and base != 0xFFFFFFFFFFFFFFFF, "rwx mmap failed"
ctypes.memmove(base, blob, len(blob))
print(json.dumps({"base": base}), flush=True)

table_addr = spec["table_addr"]
table = bytes.fromhex(spec["table_hex"])
if table:
    t = libc.mmap(ctypes.c_void_p(table_addr), max(len(table), 4096),
                  PROT_RWX, MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED, -1, 0)
    assert t == table_addr, "fixed table mmap failed"
    # Runtime-absolute fields are encoded blob-relative; rebase them here.
    tb = bytearray(table)
    for off in spec["table_rebase"]:
        v = int.from_bytes(tb[off:off+8], "little")
        tb[off:off+8] = (v + base).to_bytes(8, "little")
    ctypes.memmove(t, bytes(tb), len(tb))

thunk = ctypes.CFUNCTYPE(
    ctypes.c_uint64, ctypes.c_uint64, ctypes.c_uint64, ctypes.c_uint64,
    ctypes.POINTER(ctypes.c_uint64),
)(base + spec["thunk_off"])

out = ctypes.c_uint64(0)
ra_mask = 1 << 63  # flag bit: rebase this probe's ra field by +base
addr_mask = 1 << 62
for addr, flag, ra in spec["probes"]:
    if addr & addr_mask:
        addr = (addr & ~addr_mask) + base
    if ra & ra_mask:
        ra = (ra & ~ra_mask) + base
    res = thunk(addr, flag, ra, ctypes.byref(out))
    print(json.dumps({"rax": res, "ra": out.value}), flush=True)
"""


def supported() -> bool:
    return platform.machine() == "x86_64" and sys.platform == "linux"


# Probe-field flag bits: the child adds its load base to fields tagged
# with these, modeling relocated (slid) runtime addresses.
REBASE_RA = 1 << 63
REBASE_ADDR = 1 << 62


def run_probes(
    blob: bytes,
    thunk_off: int,
    probes: list[tuple[int, int, int]],
    table_addr: int = 0,
    table: bytes = b"",
    table_rebase: list[int] = (),
) -> tuple[int, list[dict | str]]:
    """Run probes in a child; returns (child load base, one result/probe).

    A probe that kills the child yields the string "halt" and ends the
    batch (remaining probes are not attempted; callers split batches).
    """
    import tempfile

    spec = {
        "blob": blob.hex(),
        "thunk_off": thunk_off,
        "probes": [list(p) for p in probes],
        "table_addr": table_addr,
        "table_hex": table.hex(),
        "table_rebase": list(table_rebase),
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json") as f:
        json.dump(spec, f)
        f.flush()
        proc = subprocess.run(
            [sys.executable, "-c", CHILD_SOURCE, f.name],
            capture_output=True,
            timeout=60,
        )
    lines = proc.stdout.decode().splitlines()
    if not lines:
        raise RuntimeError(
            f"harness child produced no output rc={proc.returncode}: "
            f"{proc.stderr.decode()[:500]}"
        )
    base = json.loads(lines[0])["base"]
    results: list[dict | str] = [json.loads(line) for line in lines[1:]]
    if proc.returncode != 0:
        if proc.returncode > 0:
            raise RuntimeError(
                f"harness child failed rc={proc.returncode}: "
                f"{proc.stderr.decode()[:500]}"
            )
        results.append("halt")  # killed by a signal mid-probe
    return base, results
