import os

import pytest

from cetrw import cli

from fixtures import fixture
from test_elf import build_static_elf

import harness


@pytest.fixture()
def binpair(tmp_path):
    fx = fixture("selfcontained")
    data = build_static_elf(fx.code, entry_off=min(fx.entry_points))
    orig = tmp_path / "prog"
    orig.write_bytes(data)
    orig.chmod(0o755)
    return orig, tmp_path / "prog.out"


def test_analyze_both_modes(binpair, capsys):
    orig, _ = binpair
    rc = cli.main(["analyze", str(orig), "--mode", "both"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "[cet]" in out and "[superset]" in out
    assert "pruning-ratio" in out

    def total(block):
        lines = out.split(f"[{block}]", 1)[1].splitlines()
        return int(next(l.split()[1] for l in lines if "total" in l))

    assert total("cet") < total("superset")


def test_analyze_column_set(binpair, capsys):
    orig, _ = binpair
    cli.main(["analyze", str(orig), "--mode", "cet"])
    out = capsys.readouterr().out
    for label in ("total", "direct-call", "direct-jump", "indirect-call",
                  "indirect-jump", "conditional-jump"):
        assert f"\n  {label} " in out or out.startswith(f"  {label} "), label


def test_analyze_report_is_deterministic(binpair, capsys):
    orig, _ = binpair
    cli.main(["analyze", str(orig), "--mode", "both", "--sizes"])
    first = capsys.readouterr().out
    cli.main(["analyze", str(orig), "--mode", "both", "--sizes"])
    second = capsys.readouterr().out
    assert first == second
    assert "seconds" not in first  # timings only appear on request


def test_analyze_timings_optional_block(binpair, capsys):
    orig, _ = binpair
    cli.main(["analyze", str(orig), "--mode", "cet", "--timings"])
    out = capsys.readouterr().out
    assert "[timings]" in out


def test_analyze_five_nop_fixture(tmp_path, capsys):
    data = build_static_elf(b"\x90" * 5)
    p = tmp_path / "nops"
    p.write_bytes(data)
    rc = cli.main(["analyze", str(p), "--mode", "superset"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "total              5" in out


def test_rewrite_then_verify(binpair, capsys):
    orig, out_path = binpair
    rc = cli.main(["rewrite", str(orig), "-o", str(out_path),
                   "--mode", "cet", "--pass", "null"])
    assert rc == 0
    assert out_path.exists() and os.access(out_path, os.X_OK)
    rc = cli.main(["verify", str(orig), str(out_path)])
    report = capsys.readouterr().out
    assert rc == 0
    assert "FAIL" not in report


def test_rewrite_pass_composition_flag(binpair):
    orig, out_path = binpair
    rc = cli.main(["rewrite", str(orig), "-o", str(out_path),
                   "--mode", "cet", "--pass", "shadow-stack,trace"])
    assert rc == 0


def test_rewrite_rejects_non_elf(tmp_path, capsys):
    p = tmp_path / "junk"
    p.write_bytes(b"#!/bin/sh\n")
    rc = cli.main(["rewrite", str(p), "-o", str(tmp_path / "x")])
    assert rc == cli.EXIT_INPUT


def test_rewrite_rejects_32bit(tmp_path):
    fx = fixture("selfcontained")
    data = bytearray(build_static_elf(fx.code))
    data[4] = 1
    p = tmp_path / "prog32"
    p.write_bytes(bytes(data))
    rc = cli.main(["rewrite", str(p), "-o", str(tmp_path / "x")])
    assert rc == cli.EXIT_INPUT


def test_libs_instrument_unsupported(binpair):
    orig, out_path = binpair
    with pytest.raises(SystemExit):
        cli.main(["rewrite", str(orig), "-o", str(out_path),
                  "--libs", "instrument"])


def test_verify_corrupted_names_check(binpair, capsys):
    orig, out_path = binpair
    cli.main(["rewrite", str(orig), "-o", str(out_path)])
    capsys.readouterr()
    data = bytearray(out_path.read_bytes())
    data[-40] ^= 0xFF  # somewhere inside the metadata/table tail
    bad = out_path.with_suffix(".bad")
    bad.write_bytes(bytes(data))
    rc = cli.main(["verify", str(orig), str(bad)])
    out = capsys.readouterr().out
    assert rc == cli.EXIT_VERIFY
    assert "FAIL" in out


def test_table_addr_env_override(binpair, monkeypatch, capsys):
    orig, out_path = binpair
    monkeypatch.setenv("CETRW_TABLE_ADDR", "0x51230000")
    rc = cli.main(["rewrite", str(orig), "-o", str(out_path)])
    assert rc == 0
    from cetrw.elf import parse_metadata
    assert parse_metadata(out_path.read_bytes())["table_vaddr"] == 0x51230000


@pytest.mark.gated
def test_run_diff_identical(binpair, capsys):
    if not harness.supported():
        pytest.skip("host cannot execute x86-64 ELF binaries")
    orig, out_path = binpair
    cli.main(["rewrite", str(orig), "-o", str(out_path), "--mode", "cet"])
    rc = cli.main(["run-diff", str(orig), str(out_path)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "identical" in out
