from isoscan.cli import main
from isoscan.selftest import CHECKS, path_tables, run_selftest


def test_selftest_passes(capsys):
    assert len(CHECKS) >= 12
    assert main(["selftest"]) == 0
    assert f"{len(CHECKS)}/{len(CHECKS)} checks passed" in capsys.readouterr().out


def test_corrupt_path_table_fails():
    res = {r.name: r for r in run_selftest(corrupt_path_table=True)}
    assert not res["scan_bijective"].ok
    assert "scan_bijective" in [n for n, _ in CHECKS]


def test_path_tables_count():
    assert len(path_tables((2, 2, 2))) == 8
