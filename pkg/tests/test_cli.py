import json

import pytest

from invhyb.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, EXIT_SIM, main


def run(tmp_path, *argv, out="out"):
    return main([*argv, "--out", str(tmp_path / out)])


def test_simulate_ball_writes_outputs(tmp_path, capsys):
    code = run(tmp_path, "simulate", "--system", "bouncing-ball", "--feedback", "bkd", "--x0", "11,0", "--T", "20", "--seed", "7")
    assert code == EXIT_OK
    assert "invariant=True" in capsys.readouterr().out
    summ = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summ["invariant"] is True and summ["impact_count_per_jumpset"]["0"] == 12
    man = json.loads((tmp_path / "out" / "simulate_manifest.json").read_text())
    assert man["seed"] == 7 and man["system"] == "bouncing-ball"
    assert (tmp_path / "out" / "trajectory.csv").read_text().startswith("t,j,x1,x2,")


def test_simulate_is_byte_reproducible(tmp_path):
    args = ("simulate", "--system", "bouncing-ball", "--feedback", "kmd", "--x0", "11,0", "--T", "8", "--seed", "3")
    assert run(tmp_path, *args, out="a") == EXIT_OK
    assert run(tmp_path, *args, out="b") == EXIT_OK
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()
    ma = json.loads((tmp_path / "a" / "simulate_manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "simulate_manifest.json").read_text())
    assert ma["config_digest"] == mb["config_digest"] and ma["rng"] == mb["rng"]


def test_zero_horizon(tmp_path):
    assert run(tmp_path, "simulate", "--system", "bouncing-ball", "--x0", "11,0", "--T", "0") == EXIT_OK
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["termination"] == "HorizonReached"


@pytest.mark.parametrize(
    "argv",
    [
        ("simulate", "--system", "pendulum", "--x0", "0,0"),
        ("simulate", "--system", "bouncing-ball", "--x0", "1,2,3"),
        ("simulate", "--system", "bouncing-ball", "--x0", "a,b"),
        ("simulate", "--system", "bouncing-ball"),
        ("simulate", "--system", "bouncing-ball", "--x0", "11,0", "--feedback", "nope"),
        ("reproduce",),
    ],
)
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert run(tmp_path, *argv) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_bad_config_file_exit_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("system = ")
    assert run(tmp_path, "simulate", "--config", str(bad), "--x0", "0,0") == EXIT_CONFIG


def test_state_outside_sets_exit_3(tmp_path, capsys):
    assert run(tmp_path, "simulate", "--system", "bouncing-ball", "--x0=-1,0") == EXIT_SIM
    assert "simulation error" in capsys.readouterr().err


def test_require_invariant_exit_1(tmp_path):
    # V(0.3, 0.55) = 0.6925 exceeds r = 0.576, so the run starts outside L_V(r)
    argv = ("simulate", "--system", "robot-arm", "--x0", "0.3,0.55", "--T", "2")
    assert run(tmp_path, *argv) == EXIT_OK
    assert run(tmp_path, *argv, "--require-invariant") == EXIT_FAIL


def test_config_file_drives_simulation(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('system = "planar"\n[run]\nseed = 4\n[simulation]\nx0 = [1.2, 0.3]\nT = 2.0\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_OK
    man = json.loads((tmp_path / "out" / "simulate_manifest.json").read_text())
    assert man["seed"] == 4 and man["system"] == "planar"


def test_verify_planar(tmp_path, capsys):
    assert run(tmp_path, "verify", "--system", "planar", "--grid", "0.1") == EXIT_OK
    reports = json.loads((tmp_path / "out" / "verification.json").read_text())
    names = {r["condition"] for r in reports}
    assert {"rcFI2", "rcFI3", "rcFI5"} <= names
    assert all(r["passed"] for r in reports if r["required"])


def test_verify_fails_on_unit_arm_margin(tmp_path):
    cfg = tmp_path / "arm.yaml"
    cfg.write_text("system: robot-arm\nparams:\n  rho_c_scale: 1.0\n")
    assert main(["verify", "--config", str(cfg), "--grid", "0.02", "--out", str(tmp_path / "out")]) == EXIT_FAIL
    reports = json.loads((tmp_path / "out" / "verification.json").read_text())
    assert any(r["condition"] == "CLF-C" and not r["passed"] for r in reports)


def test_synthesize_refuses_failing_certificate(tmp_path):
    cfg = tmp_path / "arm.toml"
    cfg.write_text('system = "robot-arm"\n[params]\nrho_c_scale = 1.0\n')
    assert main(["synthesize", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_synthesize_forced_table(tmp_path):
    assert run(tmp_path, "synthesize", "--system", "robot-arm", "--force", "--grid", "0.2") == EXIT_OK
    lines = (tmp_path / "out" / "feedback_table.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,map,u_c1"
    assert len(lines) > 2
    desc = json.loads((tmp_path / "out" / "descriptor.json").read_text())
    assert desc["method"] == "pointwise-min-norm"


def test_reproduce_ball(tmp_path):
    assert run(tmp_path, "reproduce", "--system", "bouncing-ball", "--seeds", "2", "--T", "10") == EXIT_OK
    res = json.loads((tmp_path / "out" / "reproduce.json").read_text())
    assert res["seeds"] == [0, 1]
    assert res["all_peaks_in_range"] is True
    assert len(res["impacts_kd"]) == 2 and all(k > m for k, m in zip(res["impacts_kd"], res["impacts_kmd"]))
    assert (tmp_path / "out" / "reproduce_manifest.json").exists()


def test_list_systems(capsys):
    assert main(["list-systems"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("bouncing-ball", "robot-arm", "planar"):
        assert name in out
