"""Frozen code-region fixtures for the test suite.

Each fixture is a raw x86-64 text region (hex) with metadata: where
execution may enter, which offsets are legal indirect-branch targets
(all endbr64-marked, address-taken functions), and function starts.
The two larger regions were compiled from small freestanding C programs
with CET branch protection and frozen here so the suite runs without a
C toolchain.
"""

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Fixture:
    name: str
    code: bytes
    entry_points: frozenset[int] = frozenset()
    declared_targets: frozenset[int] = frozenset()  # legal indirect targets
    function_starts: frozenset[int] = frozenset()


FIXTURES: dict[str, Fixture] = {}


def _add(name, code_hex, entries=(), targets=(), functions=()):
    FIXTURES[name] = Fixture(
        name=name,
        code=bytes.fromhex("".join(code_hex.split())),
        entry_points=frozenset(entries),
        declared_targets=frozenset(targets),
        function_starts=frozenset(functions),
    )


# Five NOPs: every offset decodes identically.
_add("nops", "90 90 90 90 90", entries=[0])

# Single return.
_add("ret", "c3", entries=[0])

# endbr64 landing pad followed by a return.
_add("pad_ret", "f3 0f 1e fa c3", entries=[0])

# Three returns; only the first is reachable from the entry.
_add("ret3", "c3 c3 c3", entries=[0])

# One endbr64-rooted 4-instruction path inside 16 decodable offsets
# (offset 2 decodes to nothing; the trailing pushes are unreachable).
_add("ratio16", "f3 0f 1e fa 90 90 c3" + " 50" * 10, entries=[0])

# Code with an embedded data blob that happens to contain the endbr64
# byte pattern: over-approximating seeding must treat it as real.
_add(
    "accidental_pad",
    "f3 0f 1e fa"      # 0: genuine pad
    "eb 06"            # 4: jmp over the data
    "f3 0f 1e fa 90 90"  # 6: data bytes, accidentally a pad + junk
    "31 c0"            # 12: xor eax,eax
    "c3",              # 14: ret
    entries=[0],
    targets=[0],
)

# Calls, conditional flow, an indirect jump and a rip-relative load.
_add(
    "mixed",
    "f3 0f 1e fa"          # 0 endbr64
    "e8 0b 00 00 00"       # 4 call 0x14
    "75 f9"                # 9 jne 4
    "c3"                   # b ret
    "90 90"                # c
    "0f 1f 40 00"          # e nop4
    "90 90"                # 12
    "f3 0f 1e fa"          # 14 endbr64
    "31 c0"                # 18 xor eax,eax
    "ff e0"                # 1a jmp rax
    "ff 50 08"             # 1c call [rax+8]
    "48 8b 05 e1 ff ff ff"  # 1f mov rax,[rip-0x1f]
    "c2 04 00"             # 26 ret 4
    "e3 02"                # 29 jrcxz +2
    "eb 00"                # 2b jmp 0x2d
    "f4",                  # 2d hlt
    entries=[0],
    targets=[0, 0x14],
)

# jrcxz/loop forms and a NOTRACK indirect jump.
_add(
    "oddballs",
    "f3 0f 1e fa"   # 0 endbr64
    "e3 04"         # 4 jrcxz 0xa
    "e2 02"         # 6 loop 0xa
    "90 90"         # 8
    "f3 0f 1e fa"   # a endbr64
    "3e ff e0"      # e notrack jmp rax
    "c3",           # 11 ret
    entries=[0],
    targets=[0, 0xa],
)

# Compiled: function-pointer dispatch plus deep recursion (368 bytes).
_add(
    "calls_compiled",
    (
        "f30f1efa488d0437c3f30f1efa4889f8480fafc6c3f30f1efa4889f84829f0c3"
        "534889fb4885ff75054889d85bc3488d7fffe8e9ffffff4801c3ebedf30f1efa"
        "534883ec108b05dd0f0000488d1dbe0f00004898488b04c3be05000000bf0700"
        "0000ffd04889c78b05970f00004898488b04c3be03000000ffd04889c78b057d"
        "0f00004898488b04c3be06000000ffd04889c3bf10270000e883ffffff4989c0"
        "48b876616c20303030304889442401c74424093030303066c744240d300ac644"
        "240f004869cb40420f0048badb34b6d782de1b434c89c048f7ea48c1fa124c89"
        "c048c1f83f4829c24869d240420f004c89c04829d04801c1488d74240d4c8d4c"
        "240448bf67666666666666664889c848f7ef48c1fa024889c848c1f83f4829c2"
        "488d04924801c04829c183c130880e4889d14883ee014c39ce75d1488d742401"
        "b801000000bf01000000ba0e0000000f054883fb1e400f95c74981f80804fb02"
        "0f95c009c7400fb6ffb83c0000000f05"
    ),
    entries=[60],
    targets=[0, 9, 21],
    functions=[0, 9, 21, 32, 60],
)

# Compiled: eight address-taken operations, recursion, a dense switch,
# and string hashing (565 bytes).  The largest built-in region.
_add(
    "largest_compiled",
    (
        "f30f1efa488d0437c3f30f1efa4889f84829f0c3f30f1efa4889f8480fafc6c3"
        "f30f1efa4889f84831f0c3f30f1efa4889f889f148d3e0c3f30f1efa4839fe48"
        "89f8480f4ec6c3f30f1efa4839fe4889f8480f4dc6c3f30f1efa4889f848c1e0"
        "054829f84801f048c1fe034831f0c34889f84883ff017e2855534883ec084889"
        "fb488d7fffe8e5ffffff4889c5488d7bfee8d9ffffff4801e84883c4085b5dc3"
        "c34889f04889f983e1074883f903745740f6c704752b4829d64883f901740a48"
        "6bf0034883f90275044889f0c3488d34104885c974f348355a5a00004889c6eb"
        "e84883f905742648f7d64883f90674d94883f90475e04889d74883cf01489948"
        "f7ff4889d6ebc2486bf205ebbc4883ca014889d1489948f7f94889c6ebab0fb6"
        "1784d27422b8051500004889c148c1e1054801c84883c701480fbed24801d00f"
        "b61784d275e4c3b805150000c3f30f1efa415455534883ec20bb03000000bd01"
        "0000004c8d25d61e00008d43fd4898498b04c44889de4889efffd04889c54883"
        "c3014883fb0b75e2bf0c000000e8ddfeffff4831c5ba09000000be1100000048"
        "89efe8fafeffff488d5c0500488d3d4d0e0000e866ffffff4831c348b8616363"
        "203030303048ba3030303030303030488904244889542408c744241030303030"
        "66c74424140a004889da488d4424134c8d442403488d35330e00004889d183e1"
        "0f0fb60c0e880848c1ea044883e8014c39c075e74889e6b801000000bf010000"
        "00ba150000000f0583e37fb83c0000004889df0f05"
    ),
    entries=[333],
    targets=[0, 9, 20, 32, 43, 56, 71, 86],
    functions=[0, 9, 20, 32, 43, 56, 71, 86, 111, 161, 286, 333],
)


# Compiled, fully self-contained (all state on the stack): indirect
# dispatch through stack-held function pointers plus recursion
# (305 bytes).  Runs as raw text with no data segment.
_add(
    "selfcontained",
    (
        "f30f1efa488d0437c3f30f1efa4889f8480fafc6c34883ec084889f84889f748"
        "89d6ffd04883c408c3b8000000004885ff7e164883ec084883ef01e8e9ffffff"
        "4883c0014883c408c3c3f30f1efa534883ec20488d05a6ffffff488944241048"
        "8d05a3ffffff4889442418c744240c00000000c7442408010000008b44240c48"
        "98488b7cc410ba04000000be03000000e880ffffff4889c68b4424084898488b"
        "7cc410ba06000000e868ffffff4889c3bf19000000e86fffffff4c8d0403c604"
        "246fc64424016bc64424022048ba67666666666666664c89c048f7ea48c1fa02"
        "4c89c048c1f83f4829c28d423088442403488d14924801d24c89c04829d083c0"
        "3088442404c64424050a4889e6b801000000bf01000000ba060000000f054983"
        "f843400f95c7400fb6ffb83c0000000f05"
    ),
    entries=[74],
    targets=[0, 9],
    functions=[0, 9, 21, 41, 74],
)


def fixture(name: str) -> Fixture:
    return FIXTURES[name]


def all_fixtures() -> list[Fixture]:
    return list(FIXTURES.values())
