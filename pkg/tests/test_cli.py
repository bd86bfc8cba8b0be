import json
import time

import numpy as np
import pytest

from mfglab import cli
from mfglab.linsys import LinearSolveError
from mfglab.stability import LabSetup

SMALL = {"grid": {"n": 29, "nt": 60}}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _csvs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.glob("*.csv"))}


def test_minimal_forward_run(tmp_path):
    out = tmp_path / "fwd"
    start = time.perf_counter()
    code = cli.main(["forward", "--out", str(out), "--quiet"])
    assert time.perf_counter() - start < 10
    assert code == cli.EXIT_SUCCESS
    for name in ("u.csv", "v.csv", "u.bin", "resolved_config.json", "status.json"):
        assert (out / name).exists()
    status = json.loads((out / "status.json").read_text())
    assert status["status"] == "success" and status["exit_code"] == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["grid"]["n"] == 99 and resolved["forward"]["M"] == 200.0
    raw = (out / "u.csv").read_bytes()
    assert b"\r\n" not in raw and raw.startswith(b"level,t,node,x0,value\n")


def test_slice_time_at_zero_rejected_before_solving(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("solver must not run")

    monkeypatch.setattr(LabSetup, "solve", boom)
    out = tmp_path / "bad"
    code = cli.main(["forward", "--config", _write(tmp_path, {"grid": {"t0_fraction": 0}}),
                     "--out", str(out), "--quiet"])
    assert code == cli.EXIT_CONFIG_ERROR
    status = json.loads((out / "status.json").read_text())
    assert status["status"] == "config-error" and "t0_fraction" in status["info"]["error"]
    assert not (out / "u.csv").exists()


@pytest.mark.parametrize("cfg,key", [
    ({"grid": {"nn": 3}}, "grid.nn"),
    ({"solver": {}}, "solver"),
    ({"perturbation": {"kind": "fourier_modes", "width": 0.1}}, "perturbation.width"),
    ({"stability": {"family": {"kind": "random_smooth", "k_max": 2}}}, "stability.family.k_max"),
])
def test_unknown_keys_are_named(tmp_path, caplog, cfg, key):
    code = cli.main(["forward", "--config", _write(tmp_path, cfg), "--out",
                     str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG_ERROR
    assert key in caplog.text


def test_expression_fields(tmp_path):
    cfg = {**SMALL, "forward": {"p": "1 + 0.1*sin(pi*x0)", "c0": 0.25}}
    assert cli.main(["forward", "--config", _write(tmp_path, cfg), "--out",
                     str(tmp_path / "ok"), "--quiet"]) == cli.EXIT_SUCCESS
    bad = {**SMALL, "forward": {"p": "__import__('os').getcwd()"}}
    assert cli.main(["forward", "--config", _write(tmp_path, bad, "b.json"), "--out",
                     str(tmp_path / "bad"), "--quiet"]) == cli.EXIT_CONFIG_ERROR


def test_nonconvergence_exits_flagged(tmp_path):
    cfg = {**SMALL, "forward": {"picard_max_iter": 1}}
    out = tmp_path / "flag"
    assert cli.main(["forward", "--config", _write(tmp_path, cfg), "--out", str(out),
                     "--quiet"]) == cli.EXIT_FLAGGED
    assert "nonconverged" in json.loads((out / "status.json").read_text())["flags"]


def test_solver_failure_exit(tmp_path, monkeypatch):
    def fail(ctx, out):
        raise LinearSolveError("singular")

    monkeypatch.setitem(cli.HANDLERS, "forward", fail)
    out = tmp_path / "fail"
    assert cli.main(["forward", "--config", _write(tmp_path, SMALL), "--out", str(out),
                     "--quiet"]) == cli.EXIT_SOLVER_FAILURE
    assert json.loads((out / "status.json").read_text())["status"] == "solver-failure"


@pytest.mark.parametrize("command,extra", [
    ("forward", {}),
    ("linearize", {}),
    ("carleman", {"carleman": {"trials": 2}}),
    ("stability", {"stability": {"amplitudes": [0.1, 0.02]}}),
    ("reconstruct", {}),
    ("reconstruct", {"reconstruction": {"method": "least_squares", "noise_level": 0.01,
                                        "p_parameterization": 4, "max_gn_iterations": 2}}),
])
def test_rerun_is_byte_identical(tmp_path, command, extra):
    cfg = _write(tmp_path, {**SMALL, **extra})
    a, b = tmp_path / "a", tmp_path / "b"
    ca = cli.main([command, "--config", cfg, "--out", str(a), "--seed", "5", "--quiet"])
    cb = cli.main([command, "--config", cfg, "--out", str(b), "--seed", "5", "--quiet"])
    assert ca == cb and ca in (cli.EXIT_SUCCESS, cli.EXIT_FLAGGED)
    assert _csvs(a) and _csvs(a) == _csvs(b)
    # the resolved config alone reproduces the run
    c = tmp_path / "c"
    cli.main([command, "--config", str(a / "resolved_config.json"), "--out", str(c), "--quiet"])
    assert _csvs(a) == _csvs(c)
    assert json.loads((a / "resolved_config.json").read_text())["seed"] == 5


def test_thread_count_does_not_change_output(tmp_path, monkeypatch):
    cfg = _write(tmp_path, {**SMALL, "stability": {"amplitudes": [0.1, 0.02]}})
    cli.main(["stability", "--config", cfg, "--out", str(tmp_path / "one"), "--quiet"])
    monkeypatch.setenv("MFGLAB_THREADS", "4")
    cli.main(["stability", "--config", cfg, "--out", str(tmp_path / "four"), "--quiet"])
    assert _csvs(tmp_path / "one") == _csvs(tmp_path / "four")


def test_output_tables(tmp_path):
    cfg = _write(tmp_path, {**SMALL, "stability": {"amplitudes": [0.1]}})
    out = tmp_path / "st"
    cli.main(["stability", "--config", cfg, "--out", str(out), "--quiet"])
    header = (out / "sweep.csv").read_text().splitlines()[0]
    assert header == "family,member,amplitude,lhs,rhs_h2,rhs_y,rhs_z,ratio,delta_est,flags"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["empirical_C"] > 0 and summary["control_lhs"] == 0.0
    out = tmp_path / "car"
    cli.main(["carleman", "--config", cfg, "--out", str(out), "--quiet"])
    lines = (out / "ratios_backward_trial00.csv").read_text().splitlines()
    assert lines[0] == "s,lambda,lhs,rhs,ratio,verdict" and len(lines) == 7
    out = tmp_path / "rec"
    cli.main(["reconstruct", "--config", cfg, "--out", str(out), "--quiet"])
    meta = json.loads((out / "reconstruction.json").read_text())
    assert meta["method"] == "direct_slice" and "z(t0)" in meta["data"]
    p = np.loadtxt(out / "p_diff_hat.csv", delimiter=",", skiprows=1)
    assert p.shape == (31, 3)
