import json
import subprocess
import sys

import pytest

from mfl import cli
from mfl.cli import EXIT_FAIL, EXIT_INVALID, EXIT_OK, build_schema, load_schema, main


def _run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    return main([*argv, "--out", str(out)]), out


def _read(out, name):
    return json.loads((out / name).read_text())


def test_packaged_schema_is_current():
    assert load_schema() == build_schema()


def test_fbm_writes_paths_and_sidecar(tmp_path):
    code, out = _run(tmp_path, "fbm", "--n", "16", "--paths", "2", "--dim", "2", "--check-paths", "2000",
                     "--seed", "5")
    assert code == EXIT_OK
    assert (out / "paths.csv").read_text().splitlines()[0] == "t,path0_dim0,path0_dim1,path1_dim0,path1_dim1"
    side = _read(out, "run.json")
    assert side["seed"] == 5 and side["command"] == "fbm"
    assert set(side["artifacts"]) == {"paths.csv", "covariance.json"}
    code, out2 = _run(tmp_path, "fbm", "--n", "16", "--paths", "2", "--dim", "2", "--check-paths", "2000",
                      "--seed", "5", name="again")
    assert (out / "paths.csv").read_bytes() == (out2 / "paths.csv").read_bytes()


def test_hurst_outside_range_is_rejected(tmp_path, capsys):
    code, _ = _run(tmp_path, "fbm", "--h", "0.4")
    assert code == EXIT_INVALID
    assert "1/2 < H < 1" in capsys.readouterr().err


def test_single_replica_statistics_rejected(tmp_path):
    assert _run(tmp_path, "clt", "--mc", "1")[0] == EXIT_INVALID
    assert _run(tmp_path, "simulate", "--eps", "0.01", "--delta", "0.1")[0] == EXIT_INVALID
    assert _run(tmp_path, "fast-diag", "--theta", "0.6")[0] == EXIT_INVALID


def test_parser_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["fbm", "--bogus"])
    assert info.value.code == EXIT_INVALID
    with pytest.raises(SystemExit) as info:
        main(["clt", "--scenario", "nope"])
    assert info.value.code == EXIT_INVALID


def test_config_file_validation_and_precedence(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": 16, "unknown_key": 1}))
    assert _run(tmp_path, "fbm", "--config", str(bad))[0] == EXIT_INVALID
    wrong_type = tmp_path / "type.json"
    wrong_type.write_text(json.dumps({"n": "sixteen"}))
    assert _run(tmp_path, "fbm", "--config", str(wrong_type))[0] == EXIT_INVALID
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"command": "fbm", "n": 16, "paths": 1, "check_paths": 500, "seed": 3}))
    code, out = _run(tmp_path, "fbm", "--config", str(good), "--seed", "4")
    assert code == EXIT_OK
    cfg = _read(out, "run.json")["config"]
    assert cfg["n"] == 16 and cfg["seed"] == 4 and cfg["hurst"] == 0.75


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MFL_SEED", "77")
    code, out = _run(tmp_path, "fbm", "--n", "8", "--paths", "1", "--check-paths", "200")
    assert code == EXIT_OK and _read(out, "run.json")["seed"] == 77


def test_verdict_failure_exit_three(tmp_path):
    # an absurd flatness bound forces a FAIL verdict
    code, out = _run(tmp_path, "tightness", "--eps", "0.1", "0.05", "--n", "20", "--mc", "20",
                     "--max-ratio", "1.0000001")
    assert code == EXIT_FAIL
    assert _read(out, "report.json")["pass"] is False


def test_cell_null_scenario(tmp_path):
    code, out = _run(tmp_path, "cell", "--scenario", "null", "--mc", "500", "--t-max", "1")
    assert code == EXIT_OK
    rep = _read(out, "cell.json")
    assert rep["psi"][0]["value"] == [0.0]
    assert rep["V_bar"] == [[0.0]]


def test_cell_linear_scenario(tmp_path):
    code, out = _run(tmp_path, "cell", "--mc", "5000", "--y", "1.0")
    assert code == EXIT_OK
    rep = _read(out, "cell.json")
    assert rep["psi"][0]["exact"] == [0.5]
    assert rep["poisson_residual"]["max"] < 1e-6
    assert rep["V_bar"][0][0] == pytest.approx(0.25)


def test_cell_slow_mixing_warns(tmp_path, capsys):
    code, out = _run(tmp_path, "cell", "--scenario", "slow-mixing", "--mc", "200")
    assert code == EXIT_OK
    assert any(w.startswith("WARN: non-exponential decay") for w in _read(out, "cell.json")["warnings"])
    assert "WARN:" in capsys.readouterr().out


def test_cell_rejects_misshaped_points(tmp_path):
    assert _run(tmp_path, "cell", "--scenario", "ou-2d", "--y", "1", "2", "3")[0] == EXIT_INVALID


def test_simulate_and_replay(tmp_path, capsys):
    code, out = _run(tmp_path, "simulate", "--mc", "4", "--n", "20", "--eps", "0.05", "--csv-replicas", "2")
    assert code == EXIT_OK
    assert {"trajectory_0000.csv", "trajectory_0001.csv", "trajectory.json", "report.json"} <= set(
        _read(out, "run.json")["artifacts"])
    assert main(["replay", str(out), "--jobs", "2"]) == EXIT_OK
    assert "replay: PASS" in capsys.readouterr().out
    (out / "run.json").write_text((out / "run.json").read_text().replace('"eps": 0.05', '"eps": 0.04'))
    assert main(["replay", str(out)]) == EXIT_FAIL


def test_replay_rejects_missing_sidecar(tmp_path):
    assert main(["replay", str(tmp_path)]) == EXIT_INVALID


def test_reports_identical_across_jobs(tmp_path):
    args = ["rate", "--eps", "0.1", "0.05", "0.02", "--n", "20", "--mc", "2500", "--seed", "9"]
    code1, a = _run(tmp_path, *args, "--jobs", "1", name="a")
    code2, b = _run(tmp_path, *args, "--jobs", "3", name="b")
    assert code1 == code2
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_clt_defaults_depend_on_regime():
    base = {"coupled": None, "require_monotone": None, "ks_target": None, "var_tol": None}
    c1 = cli.resolve_clt_defaults(dict(base), True, "case1")
    assert c1 == {"coupled": False, "require_monotone": True, "ks_target": 0.05, "var_tol": None}
    c2 = cli.resolve_clt_defaults(dict(base), False, "case2")
    assert c2 == {"coupled": True, "require_monotone": False, "ks_target": None, "var_tol": 0.15}


def test_two_scale_needs_case2(tmp_path):
    assert _run(tmp_path, "two-scale", "--scenario", "case1-ou")[0] == EXIT_INVALID


def test_console_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mfl.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("mfl ")


def test_fbm_exact_invocation_is_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        argv = ["fbm", "--h", "0.75", "--n", "64", "--paths", "3", "--seed", "7", "--out", str(tmp_path / name)]
        assert main(argv) == 0
        # run.json records the output directory, the artifacts must match byte for byte
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir()) if p.name != "run.json"})
    assert outs[0] == outs[1]


def test_fbm_verify_passes(tmp_path):
    assert main(["fbm-verify", "--paths", "10000", "--seed", "20240601", "--out", str(tmp_path)]) == 0


def test_jobs_eight_matches_one(tmp_path):
    reports = []
    for jobs in ("1", "8"):
        out = tmp_path / jobs
        assert main(["rate", "--scenario", "case1-ou", "--mc", "1200", "--seed", "5", "--jobs", jobs,
                     "--out", str(out)]) == 0
        reports.append((out / "report.json").read_bytes())
    assert reports[0] == reports[1]
