import json
import subprocess
import sys

import pytest

from interlacements.cli import EXIT_GATE, EXIT_OK, EXIT_USAGE, main, parse_levels, parse_radii

SMALL = ["--N", "8", "--L", "4", "--levels", "0:2:0.5", "--soups", "96", "--seed", "5", "--eq-samples", "200"]


def test_parse_helpers():
    assert parse_levels("0:1:0.25") == pytest.approx([0, 0.25, 0.5, 0.75, 1.0])
    assert parse_levels("0.1,0.3") == [0.1, 0.3]
    assert parse_radii("2:4") == [2, 3, 4]
    assert parse_radii("1,5") == [1, 5]


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense"],
        ["simulate", "--levels", "a:b"],
        ["simulate", "--levels", "1,0.5"],
        ["simulate", "--N", "8", "--L", "9"],
        ["verify", "nosuch"],
        ["fit", "--u0", "1", "--u1", "0.5", "--u-star", "3", "--toy", "exp:1"],
        ["fit", "--u0", "0.8", "--u1", "1.2", "--u-star", "3", "--toy", "cosh:1"],
        ["solve", "--u", "0.3", "--excess", "0.01"],
        ["solve", "--u", "0.3", "--affine", "0.3,1"],
    ],
)
def test_usage_errors(argv, outdir):
    if argv[0] != "nonsense":
        argv = argv + ["--out", str(outdir)]
    with pytest.raises(SystemExit) as e:
        sys.exit(main(argv))
    assert e.value.code == EXIT_USAGE


def test_verify_quick_prints_pass_lines(outdir, capsys):
    code = main(["verify", "rearrangement", "--quick", "--out", str(outdir)])
    lines = capsys.readouterr().out.split("\n")
    assert code == EXIT_OK
    assert lines[0].startswith("PASS rearrangement:")
    rep = json.loads((outdir / "verify-rearrangement.json").read_text())
    assert rep["passed"] and rep["config"]["command"] == "verify"


def test_fit_then_solve(outdir):
    assert main(["fit", "--toy", "exp:1", "--u0", "0.8", "--u1", "1.2", "--u-star", "3", "--out", str(outdir)]) == EXIT_OK
    prof = json.loads((outdir / "profile.json").read_text())
    assert prof["digest"] and all(v["ok"] for v in prof["checks"].values() if isinstance(v, dict) and "ok" in v)
    code = main(["solve", "--profile", str(outdir / "profile.json"), "--u", "0.3", "--excess", "0.02", "--h", "0.02", "--out", str(outdir)])
    assert code == EXIT_OK
    doc = json.loads((outdir / "solve.json").read_text())
    (res,) = doc["results"]
    assert res["failed_checks"] == [] and abs(res["constraint"] - res["nu"]) <= 1e-6
    assert doc["profile_digest"] == prof["digest"]
    assert (outdir / "phi.csv").read_text().startswith("r,phi\n")


def test_solve_affine_grid(outdir):
    code = main(["solve", "--affine", "0.3,1,4", "--u", "0.25", "--nu-grid", "0.31,0.33,0.36", "--h", "0.02", "--out", str(outdir)])
    assert code == EXIT_OK
    rows = (outdir / "j_curve.csv").read_text().splitlines()
    assert rows[0] == "nu,lambda,J" and len(rows) == 4
    J = [float(r.split(",")[2]) for r in rows[1:]]
    assert J == sorted(J)
    assert json.loads((outdir / "solve.json").read_text())["j_monotone"]


def test_solve_outside_regime_is_gated(outdir):
    code = main(["solve", "--affine", "0.3,1,1", "--u", "0.25", "--nu", "0.9", "--h", "0.05", "--out", str(outdir)])
    assert code == EXIT_GATE


def test_simulate_worker_invariance_and_replay(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["simulate", *SMALL, "--workers", "1", "--out", str(a)]) == EXIT_OK
    assert main(["simulate", *SMALL, "--workers", "2", "--out", str(b)]) == EXIT_OK
    assert main(["simulate", "--config", str(a / "simulate.json"), "--out", str(c)]) == EXIT_OK
    for name in ("theta.csv", "nlf.csv", "simulate.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes(), name
    doc = json.loads((a / "simulate.json").read_text())
    assert doc["config"]["seed"] == 5 and "numpy" in doc["config"]["versions"]
    assert (a / "theta.csv").read_text().splitlines()[0].startswith("u,")


def test_replay_refuses_other_command(tmp_path):
    main(["fit", "--toy", "linear:0.5", "--u0", "0.8", "--u1", "1.2", "--u-star", "3", "--out", str(tmp_path)])
    assert main(["solve", "--u", "0.3", "--excess", "0.01", "--config", str(tmp_path / "profile.json")]) == EXIT_USAGE


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("INTERLACEMENTS_OUT", str(tmp_path / "env"))
    assert main(["fit", "--toy", "exp:1", "--u0", "0.8", "--u1", "1.2", "--u-star", "3"]) == EXIT_OK
    assert (tmp_path / "env" / "profile.json").exists()


def test_console_entry_point(tmp_path):
    p = subprocess.run(
        [sys.executable, "-m", "interlacements.cli", "scan", "--N", "8", "--u", "1", "--radii", "1:4", "--soups", "64", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert p.returncode in (EXIT_OK, EXIT_GATE)
    assert (tmp_path / "nlf.csv").exists() and (tmp_path / "scan.json").exists()
    bad = subprocess.run([sys.executable, "-m", "interlacements.cli", "verify", "bogus"], capture_output=True, text=True)
    assert bad.returncode == EXIT_USAGE and "unknown suite" in bad.stderr
