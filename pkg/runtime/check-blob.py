#!/usr/bin/env python3
"""Sanity gate for the runtime blob link.

The blob must be genuinely position independent and self-contained:
no relocations left, nothing in .bss (objcopy would drop it), the entry
shim at offset 0, and the parameter block present exactly once.
"""

import subprocess
import sys

PARAM_MAGIC = b"RTPB0002"


def fail(msg):
    print(f"check-blob: {msg}", file=sys.stderr)
    sys.exit(1)


def main():
    elf = sys.argv[1]
    relocs = subprocess.run(["readelf", "-r", elf],
                            capture_output=True, text=True).stdout
    if "There are no relocations" not in relocs:
        fail(f"relocations remain:\n{relocs}")

    sections = subprocess.run(["readelf", "-SW", elf],
                              capture_output=True, text=True).stdout
    for line in sections.splitlines():
        if " .bss " in line or " COMMON " in line:
            size = int(line.split()[6], 16)
            if size:
                fail(f"non-empty .bss ({size} bytes) would be dropped")

    syms = subprocess.run(["readelf", "-sW", elf],
                          capture_output=True, text=True).stdout
    for line in syms.splitlines():
        if " blob_entry" in line:
            value = int(line.split()[1], 16)
            if value != 0:
                fail(f"entry shim at {value:#x}, expected offset 0")
            break
    else:
        fail("blob_entry symbol missing")

    if "--bin" in sys.argv:
        blob = open(sys.argv[sys.argv.index("--bin") + 1], "rb").read()
        if blob.count(PARAM_MAGIC) != 1:
            fail("parameter block must appear exactly once in the blob")
        print(f"check-blob: ok ({len(blob)} bytes)")


if __name__ == "__main__":
    main()
