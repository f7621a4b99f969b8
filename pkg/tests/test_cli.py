import json
import subprocess
import sys

import numpy as np
import pytest

from wireguide import __version__
from wireguide.cli import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main, trap_report
from wireguide.io import parse_header, read_json, read_snapshot_csv

SMALL = """
[wire]
current_A = 1.2
[bias]
magnitude_G = 0
[mot]
atom_count = 400
[sequence]
guide_time_ms = 3
snapshot_times_ms = 1
free_expansion_time_ms = 2
[analysis]
kind = profile
reference_current_A = 0
pixel_um = 200
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL)
    return path


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_trap_design_point(tmp_path, capsys):
    assert main(["trap", "--current", "0.5", "--bias-G", "10", "--out", str(tmp_path)]) == EXIT_OK
    assert "100 um" in capsys.readouterr().out
    data = read_json(tmp_path / "trap.json")
    assert data["trap"]["r_s_um"] == pytest.approx(100.0, rel=1e-3)
    assert data["trap"]["gradient_G_per_cm"] == pytest.approx(1000.0, rel=1e-2)
    assert data["wireguide_version"] == __version__ and data["master_seed"] == 0


def test_trap_report_depth():
    assert trap_report(0.5, 10.0)["depth_uK"] == pytest.approx(672, rel=2e-3)


def test_trap_without_bias_is_a_validation_error(tmp_path, capsys):
    assert main(["trap", "--current", "0.5", "--bias-G", "0", "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "no side trap exists" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["fly"], ["trap", "--current", "1"], ["simulate", "--seed", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_bad_config_is_a_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[mot]\natom_count = 0\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "atom_count" in capsys.readouterr().err
    assert main(["simulate", "--preset", "nope"]) == EXIT_VALIDATION


def test_list_presets(capsys):
    assert main(["simulate", "--list-presets"]) == EXIT_OK
    assert "fig6-side" in capsys.readouterr().out.split()


def test_field_grid_has_minimum_on_trap_line(tmp_path):
    argv = ["field", "--current", "0.5", "--bias-G", "10", "--extent-mm", "0.2", "--points", "41",
            "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    lines = (tmp_path / "field.csv").read_text().splitlines()
    assert parse_header(lines[0])["version"] == __version__
    data = np.array([[float(c) for c in line.split(",")] for line in lines[2:]])
    k = np.argmin(data[:, 4])
    assert np.hypot(data[k, 0], data[k, 1]) == pytest.approx(100e-6, abs=1e-5)
    assert data[k, 2] < 1e-12


def test_simulate_analyze_expand(tmp_path, small, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(small), "--seed", "5", "--out", str(out)]) == EXIT_OK
    summary = read_json(out / "summary.json")
    assert summary["master_seed"] == 5 and summary["wireguide_version"] == __version__
    assert summary["config"]["mot"]["atom_count"] == 400
    run = summary["runs"]["I1.2A"]
    assert len(run["snapshots"]) == 4  # t=0, 1 ms, 3 ms, expansion
    assert set(run["efficiency"]) == {"energy", "survival"}
    assert sum(run["outcomes"].values()) == 400

    code = main(["analyze", str(out)])
    assert code in (0, 3)
    analysis = read_json(out / "analysis.json")
    assert "fit" in analysis["profile"] and "difference" in analysis["profile"]
    for p in out.iterdir():
        if p.suffix == ".json":
            data = read_json(p)
            meta = {"version": data["wireguide_version"], "seed": str(data["master_seed"])}
        elif p.suffix == ".csv":
            meta = parse_header(p.read_text().splitlines()[0])
        else:
            raw = p.read_bytes()
            head = raw[: raw.index(b"65535\n")].decode("ascii")
            meta = dict(line[2:].split("=", 1) for line in head.splitlines() if line.startswith("# "))
            meta["version"] = meta.pop("wireguide_version")
        assert meta["version"] == __version__ and meta["seed"] == "5", p.name

    guide = out / run["snapshots"][2]
    assert main(["expand", str(guide), "--time-ms", "4", "--out", str(tmp_path / "exp")]) == EXIT_OK
    written = list((tmp_path / "exp").iterdir())
    assert len(written) == 1
    exp, meta = read_snapshot_csv(written[0])
    before, _ = read_snapshot_csv(guide)
    free = exp.outcomes < 2
    moved = before.positions[free] + 4e-3 * before.velocities[free]
    moved[:, 2] -= 0.5 * 9.80665 * 4e-3**2  # default gravity along -z
    assert meta["seed"] == "5" and exp.phase == "expansion"
    assert np.allclose(exp.positions[free], moved, rtol=0, atol=1e-12)


def test_outputs_identical_across_threads(tmp_path, small):
    outs = []
    for threads in (1, 4, 8):
        d = tmp_path / f"t{threads}"
        assert main(["simulate", "--config", str(small), "--threads", str(threads), "--out", str(d)]) == EXIT_OK
        main(["analyze", str(d)])
        outs.append(_files(d))
    assert outs[0] == outs[1] == outs[2]
    assert len(outs[0]) > 5


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "wireguide.cli", "trap", "--current", "1", "--bias-G", "10",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads((tmp_path / "trap.json").read_text())["trap"]["r_s_um"] == pytest.approx(200.0)
