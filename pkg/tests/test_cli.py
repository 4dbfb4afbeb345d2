import json
import subprocess
import sys

import numpy as np
import pytest

from fbm_control import cli



def run(tmp_path, *argv, capsys=None):
    out = tmp_path / "out"
    code = cli.main([*argv, "--out", str(out), "--cache", str(tmp_path / "cache")])
    report = None
    path = out / f"{argv[0]}.json"
    if path.exists():
        report = json.loads(path.read_text())
    return code, report, out


def test_sample_is_byte_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["sample", "--hurst", "0.7", "--level", "8", "--seed", "3", "--out", str(out),
                         "--cache", str(tmp_path / f"cache_{name}")]) == 0
        outputs.append({f: (out / f).read_bytes() for f in ("fbm.csv", "fbm.svg", "sample.json")})
    assert outputs[0] == outputs[1]


def test_sample_report_fields(tmp_path):
    code, rep, out = run(tmp_path, "sample", "--hurst", "0.4", "--dim", "2", "--level", "9")
    assert code == 0
    assert rep["command"] == "sample" and rep["checks"] == ["fbm.sample"]
    assert len(rep["config_hash"]) > 0
    data = np.loadtxt(out / "fbm.csv", delimiter=",", skiprows=1)
    assert data.shape == (2 ** 9 + 1, 3)


def test_sample_bad_hurst_is_rejected(tmp_path):
    code, rep, _ = run(tmp_path, "sample", "--hurst", "1.2")
    assert code == 2 and rep is None


def test_lift_chen(tmp_path):
    code, rep, out = run(tmp_path, "lift", "--hurst", "0.4", "--dim", "2", "--level", "8")
    assert code == 0 and rep["verdict"] == "PASS"
    assert rep["chen_defect_max"] < 1e-10 * max(rep["path_scale_sq"], 1)
    assert (out / "lift.csv").exists() and (out / "lift.svg").exists()


def test_lift_reads_csv(tmp_path):
    run(tmp_path, "sample", "--hurst", "0.6", "--dim", "2", "--level", "7")
    code, rep, _ = run(tmp_path, "lift", "--input", str(tmp_path / "out" / "fbm.csv"))
    assert code == 0 and rep["verdict"] == "PASS"


def test_integrate_chain_rule(tmp_path):
    code, rep, _ = run(tmp_path, "integrate", "--hurst", "0.7", "--level", "8", "--sew-level", "12")
    assert code == 0
    assert rep["error"] < 1e-6
    assert set(rep["checks"]) == {"sewing.chain-rule", "sewing.local-bound"}


def test_integrate_level_order_is_config_error(tmp_path, capsys):
    code, _, _ = run(tmp_path, "integrate", "--level", "10", "--sew-level", "8")
    assert code == 2
    assert "--sew-level" in capsys.readouterr().err


def test_cbhd_against_ode(tmp_path):
    code, rep, out = run(tmp_path, "cbhd", "--spec", "nilpotent_e12e23", "--level", "7")
    assert code == 0 and rep["relative_error_T"] < 1e-8
    assert (out / "cbhd.csv").exists()


def test_cbhd_without_generators(tmp_path, capsys):
    code, _, _ = run(tmp_path, "cbhd", "--spec", "lq_toy")
    assert code == 2
    assert "A:" in capsys.readouterr().err


def test_wongzakai_small_run(tmp_path):
    code, rep, _ = run(tmp_path, "wongzakai", "--spec", "nilpotent_e12e23", "--set", "model.hurst=0.7",
                       "--samples", "20", "--min-level", "3", "--max-level", "7", "--sample-level", "9")
    mean = np.array(rep["mean_distance"])
    assert np.all(np.diff(mean) < 0)
    assert rep["strictly_decreasing"] is True
    assert code == (0 if rep["verdict"] == "PASS" else 1)


def test_wongzakai_workers_agree(tmp_path):
    args = ["wongzakai", "--spec", "nilpotent_e12e23", "--samples", "6", "--min-level", "3",
            "--max-level", "5", "--sample-level", "7"]
    _, serial, _ = run(tmp_path / "s", *args)
    _, parallel, _ = run(tmp_path / "p", *args, "--workers", "2")
    assert np.allclose(serial["mean_distance"], parallel["mean_distance"], rtol=1e-12)


def test_simulate_reports_cost(tmp_path):
    code, rep, out = run(tmp_path, "simulate", "--spec", "lq_toy", "--batch", "200", "--level", "6",
                         "--consistency", "4,6,8")
    assert code == 0
    assert rep["cost"] > 0 and rep["cost_se"] > 0
    assert abs(rep["rho_T_mean"] - 1) < 4 * rep["rho_T_se"] + 1e-12
    assert "sde.consistency" in rep["checks"]
    assert np.loadtxt(out / "simulate.csv", delimiter=",", skiprows=1).shape == (200, 4)


def test_simulate_expression_control(tmp_path):
    code, rep, _ = run(tmp_path, "simulate", "--spec", "partially_observed_lq", "--batch", "100",
                       "--level", "5", "--control=-0.5*zeta[0]")
    assert code == 0 and rep["control"]["control"] == "-0.5*zeta[0]"


def test_simulate_bad_expression(tmp_path, capsys):
    code, _, _ = run(tmp_path, "simulate", "--spec", "lq_toy", "--batch", "10", "--level", "4",
                     "--control", "t +* 1")
    assert code == 2
    assert "control" in capsys.readouterr().err


def malformed(tmp_path, replace_from, replace_to):
    from importlib.resources import files
    text = (files("fbm_control") / "presets" / "lq_toy.toml").read_text()
    assert replace_from in text
    path = tmp_path / "bad.toml"
    path.write_text(text.replace(replace_from, replace_to))
    return str(path)


@pytest.mark.parametrize("old, new, key", [
    ('b = ["b0*x[0] + b1*u[0]"]', 'b = ["b0*x[0] + sin(u[0]"]', "coefficients.b"),
    ("hurst = 0.7", "hurst = 1.7", "model.hurst"),
    ('D = [["1"]]', 'D = [["0"]]', "D"),
    ("state = 1", "state = 0", "dimensions.state"),
])
def test_malformed_config_exit_two(tmp_path, capsys, old, new, key):
    spec = malformed(tmp_path, old, new)
    code, rep, _ = run(tmp_path, "simulate", "--spec", spec, "--batch", "10", "--level", "4")
    assert code == 2 and rep is None
    assert key in capsys.readouterr().err


def test_unknown_preset(tmp_path, capsys):
    code, _, _ = run(tmp_path, "simulate", "--spec", "no_such_preset")
    assert code == 2


def test_mp_check_shift_exit_one(tmp_path):
    code, rep, out = run(tmp_path, "mp-check", "--spec", "lq_toy", "--batch", "800", "--level", "7",
                         "--t-points", "5", "--shift", "0.5", "--seed", "7")
    assert code == 1 and rep["verdict"] == "VIOLATION"
    assert rep["worst"]["margin"] < 0
    assert (out / "mp_surface.csv").exists() and (out / "mp_surface.svg").exists()
    assert "mp.adjoint-riccati" in rep["checks"] and "config_hash" in rep


def test_mp_check_regime_mismatch(tmp_path, capsys):
    code, _, _ = run(tmp_path, "mp-check", "--spec", "lq_toy", "--batch", "10", "--hurst-regime", "rough")
    assert code == 2
    assert "model.hurst" in capsys.readouterr().err


def test_json_flag_prints_report(tmp_path, capsys):
    code, rep, _ = run(tmp_path, "sample", "--level", "5", "--json")
    assert code == 0
    assert json.loads(capsys.readouterr().out) == rep


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fbm_control.cli", "sample", "--level", "4", "--out",
                          str(tmp_path), "--cache", str(tmp_path / "c")], capture_output=True, text=True)
    assert res.returncode == 0 and "sample: PASS" in res.stdout


def test_simulate_consistency_refines(tmp_path):
    code, rep, _ = run(tmp_path, "simulate", "--spec", "partially_observed_lq", "--batch", "100",
                       "--level", "5", "--consistency", "4,6,8")
    assert code == 0
    assert np.all(np.diff(rep["consistency"]["median_sup_error"]) < 0)
