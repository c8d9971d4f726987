import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cetrw.isa import InstructionKind, decode_at  # noqa: E402

import oracle  # noqa: E402

TESTS_DIR = Path(__file__).parent
REPO_ROOT = TESTS_DIR.parent

# Kind buckets shared between the decoder and the objdump oracle.
KIND_CATEGORY = {
    InstructionKind.DIRECT_CALL: "direct_call",
    InstructionKind.DIRECT_JUMP: "direct_jump",
    InstructionKind.CONDITIONAL_JUMP: "cond",
    InstructionKind.INDIRECT_CALL: "indirect_call",
    InstructionKind.INDIRECT_JUMP: "indirect_jump",
    InstructionKind.RETURN: "ret",
    InstructionKind.ENDBR64: "endbr64",
    InstructionKind.HALT: "halt",
    InstructionKind.OTHER: "other",
    InstructionKind.INVALID: "invalid",
}
SOFT_CATEGORIES = {"other", "invalid", "prefix-run"}


def compare_against_oracle(buf: bytes):
    """Decode every offset with both sides.

    Returns (violations, soft_disagreements).  A violation is any
    length/category mismatch outside the documented Other/Invalid
    boundary; soft disagreements are the logged, permitted kind.
    """
    violations = []
    soft = []
    omap = oracle.ObjdumpOracle(buf).all()
    for off in range(len(buf)):
        mine = decode_at(buf, off)
        mcat = KIND_CATEGORY[mine.kind]
        o = omap.get(off)
        if o is None:
            continue
        ocat = oracle.category(o)
        if mcat in SOFT_CATEGORIES and ocat in SOFT_CATEGORIES:
            if mcat == "other" and ocat == "other" \
                    and mine.length != o.length:
                violations.append((off, "length", mine.length, o.length,
                                   buf[off:off + 15].hex(), o.text))
            elif mcat != ocat:
                soft.append((off, mcat, ocat))
            continue
        if mcat != ocat or mine.length != o.length:
            violations.append((off, "kind", (mcat, mine.length),
                               (ocat, o.length), buf[off:off + 15].hex(),
                               o.text))
    return violations, soft


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "gated: needs an x86-64 Linux host to execute binaries")


@pytest.fixture(scope="session")
def objdump_available():
    if not oracle.available():
        pytest.skip("objdump not available for oracle comparisons")
    return True


@pytest.fixture(scope="session")
def corpus_manifest():
    """Compiled corpus entries, when the secondary corpus has been built."""
    path = REPO_ROOT / "corpus" / "build" / "manifest.txt"
    if not path.exists():
        return None
    entries = {}
    current = None
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        if not line.startswith(" "):
            current = line.strip().rstrip(":")
            entries[current] = {}
        else:
            key, _, value = line.strip().partition(" ")
            entries[current][key] = value
    return entries


@pytest.fixture(scope="session")
def runtime_blob():
    """The full injected runtime, when the secondary has been built."""
    path = REPO_ROOT / "runtime" / "build" / "runtime.bin"
    if not path.exists():
        return None
    return path.read_bytes()
