import csv
import hashlib
import json
import math
import os

import numpy as np
import pytest

from fracdyn.approx import build_gamma_grid, criterion, solve_optimal_omega
from fracdyn.cli import DEFAULT_H_LIST, DEFAULT_K_LIST, build_parser, main
from fracdyn.kernels import FbmKind, FbmSpec
from fracdyn.simulate import PathEnsemble, TimeGrid, wiener_increments
from oracles import euler_linear_var


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ---------------------------------------------------------------- weights


def test_weights_scalar_closed_form():
    assert main(["weights", "--type", "II", "--hurst", "0.5", "--terms", "1", "--gamma-max", "1",
                 "--horizon", "1", "--method", "optimal", "--out", "w.json"]) == 0
    doc = json.load(open("w.json"))
    a = (1 + (math.exp(-2) - 1) / 2) / 2
    assert doc["omega"] == [pytest.approx(math.exp(-1) / a, rel=1e-12)]
    assert set(doc) == {"type", "hurst", "horizon", "gamma", "omega", "method", "criterion"}
    assert set(doc["criterion"]) == {"quadratic", "linear", "constant", "total"}


def test_weights_default_grid_spans_twentieth_to_twenty():
    assert main(["weights", "--type", "I", "--hurst", "0.7", "--terms", "5", "--gamma-max", "20",
                 "--horizon", "6", "--out", "w.json"]) == 0
    g = json.load(open("w.json"))["gamma"]
    assert len(g) == 5
    assert g[0] == pytest.approx(0.05) and g[-1] == pytest.approx(20.0)


def test_baseline_at_half_is_a_domain_error(capsys):
    assert main(["weights", "--method", "baseline", "--hurst", "0.5", "--out", "w.json"]) == 2
    assert "H = 1/2" in capsys.readouterr().err


def test_ill_conditioned_system_exits_3_with_condition(capsys):
    code = main(["weights", "--type", "II", "--terms", "11", "--gamma-ratio", "1.05", "--horizon", "0.05",
                 "--out", "w.json"])
    assert code == 3
    assert "condition number" in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["weights", "--type", "III"])
    assert info.value.code == 2


# ---------------------------------------------------------------- sweeps


def test_criterion_sweep_rows_and_sentinel():
    assert main(["criterion-sweep", "--hurst-list", "0.3,0.5,0.8", "--k-list", "3,5,7",
                 "--out", "c.csv"]) == 0
    rows = _rows("c.csv")
    assert list(rows[0]) == ["H", "K", "total_optimal", "total_baseline"]
    assert len(rows) == 3 * 4
    for h in ("0.3", "0.5", "0.8"):
        sub = [r for r in rows if r["H"] == h]
        sentinel = [r for r in sub if r["K"] == "0"][0]
        spec = FbmSpec(float(h), FbmKind.TYPE_II)
        grid = build_gamma_grid(3, ratio=2.0)
        c = criterion(spec, grid, solve_optimal_omega(spec, grid, 10.0), 10.0).constant
        assert float(sentinel["total_optimal"]) == pytest.approx(c, rel=1e-12)
        opt = [float(r["total_optimal"]) for r in sub if r["K"] != "0"]
        assert all(b <= a + 1e-9 for a, b in zip(opt, opt[1:]))
        for r in sub:
            if r["total_baseline"] != "nan":
                assert float(r["total_optimal"]) <= float(r["total_baseline"]) + 1e-9
        assert (h == "0.5") == all(r["total_baseline"] == "nan" for r in sub if r["K"] != "0")


def test_default_sweep_lists():
    assert 0.5 not in [float(v) for v in DEFAULT_H_LIST.split(",")]
    assert [float(v) for v in DEFAULT_H_LIST.split(",")] == [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9]
    assert DEFAULT_K_LIST == "3,5,7,9"


def test_mse_sweep_refuses_type_one(capsys):
    assert main(["mse-sweep", "--type", "I", "--out", "m.csv"]) == 4
    assert "Type II" in capsys.readouterr().err


def test_mse_sweep_small():
    assert main(["mse-sweep", "--hurst-list", "0.3", "--k-list", "3,5", "--paths", "4", "--t-end", "2",
                 "--steps", "400", "--refine", "4", "--out", "m.csv"]) == 0
    rows = _rows("m.csv")
    assert list(rows[0]) == ["H", "K", "method", "mse_mean", "mse_ci95"]
    assert [(r["K"], r["method"]) for r in rows] == [("3", "optimal"), ("3", "baseline"),
                                                    ("5", "optimal"), ("5", "baseline")]
    assert all(float(r["mse_ci95"]) > 0 for r in rows)


# ---------------------------------------------------------------- bridge


def test_bridge_regime_exit_code(capsys):
    assert main(["bridge", "--theta", "1", "--hurst", "0.3"]) == 4
    assert "theta = 0 or H > 1/2" in capsys.readouterr().err


def test_untrained_bridge_matches_prior_variance():
    assert main(["bridge", "--train-steps", "0", "--eval-paths", "4000", "--out", "b.csv",
                 "--report", "b.json"]) == 0
    rows = _rows("b.csv")
    emp = np.array([float(r["empirical_var"]) for r in rows])
    grid = build_gamma_grid(5, 20.0)
    w = solve_optimal_omega(FbmSpec(0.7, FbmKind.TYPE_I), grid, 6.0)
    g = np.asarray(grid.speeds)
    prior = euler_linear_var(1.0, g, w.weights, 0.01, 200, 1.0 / (g[:, None] + g[None, :]))
    for i in (50, 100, 150, 200):
        # Var of a sample variance is about 2 v^2 / n for Gaussian data
        assert abs(emp[i] - prior[i]) < 4 * prior[i] * math.sqrt(2 / 4000)
    report = json.load(open("b.json"))
    assert [c["t"] for c in report["checkpoints"]] == [0.5, 1.0, 1.5]
    assert report["elbo_first"] is None


# -------------------------------------------------------------- simulate


def test_bm_degenerate_is_cumulative_wiener_sum():
    assert main(["simulate", "--hurst", "0.5", "--bm-degenerate", "--paths", "3", "--steps", "20",
                 "--t-end", "1", "--seed", "9", "--out", "bm.csv"]) == 0
    rows = _rows("bm.csv")
    tg = TimeGrid.span(1.0, 20)
    for p in range(3):
        expect = np.concatenate([[0.0], np.cumsum(wiener_increments(9, p, tg)[:, 0])])
        got = np.array([float(r[f"path_{p}"]) for r in rows])
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-15)


def test_bm_degenerate_needs_half():
    assert main(["simulate", "--hurst", "0.7", "--bm-degenerate", "--out", "x.csv"]) == 2


def test_identical_seeds_identical_bytes():
    args = ["simulate", "--paths", "3", "--steps", "60", "--seed", "4"]
    assert main(args + ["--out", "a.csv"]) == 0
    assert main(args + ["--out", "b.csv", "--threads", "3"]) == 0
    assert open("a.csv", "rb").read() == open("b.csv", "rb").read()
    assert b"\r" not in open("a.csv", "rb").read()


def test_stability_gate_runs_before_any_work(capsys):
    assert main(["simulate", "--dt", "0.05", "--out", "x.csv"]) == 2
    err = capsys.readouterr().err
    assert "gamma_5 = 20" in err and "use dt < 0.025" in err
    assert not os.path.exists("x.csv")


def test_binary_output_and_exact_kind():
    assert main(["simulate", "--kind", "exact", "--paths", "2", "--steps", "30", "--refine", "3",
                 "--format", "binary", "--out", "e.bin"]) == 0
    times, paths = PathEnsemble.read_binary("e.bin")
    assert times.shape == (31,) and paths.shape[:2] == (2, 31)
    assert main(["simulate", "--kind", "exact", "--type", "I", "--out", "e.bin"]) == 4


# ------------------------------------------------------------- hurst-fit


def test_hurst_fit_json_and_log():
    assert main(["hurst-fit", "--train-steps", "6", "--dim", "2", "--obs", "6", "--t-end", "1",
                 "--out", "h.json", "--log", "h.jsonl"]) == 0
    doc = json.load(open("h.json"))
    assert {"hurst", "trajectory", "boundary_warning", "true_hurst"} <= set(doc)
    assert len(doc["trajectory"]) == 6 and doc["trajectory"][0] == pytest.approx(0.5)
    assert 0.05 < doc["hurst"] < 0.95
    lines = [json.loads(x) for x in open("h.jsonl")]
    assert [x["step"] for x in lines] == list(range(6))


def test_hurst_fit_reads_csv_data():
    t = np.linspace(0.25, 1.0, 4)
    np.savetxt("d.csv", np.column_stack([t, 0.1 * t]), delimiter=",", header="t,x_0", comments="")
    assert main(["hurst-fit", "--data", "d.csv", "--train-steps", "3", "--out", "h.json"]) == 0
    doc = json.load(open("h.json"))
    assert doc["true_hurst"] is None


# ------------------------------------------------------- manifest/replay


def test_manifest_contents_and_timings():
    assert main(["weights", "--out", "w.json", "--timings", "--seed", "3"]) == 0
    man = json.load(open("w.json.manifest.json"))
    assert man["subcommand"] == "weights" and man["seed"] == 3
    assert man["config"]["hurst"] == 0.7 and man["config"]["out"] == "w.json"
    assert man["outputs"] == [{"path": "w.json", "sha256": _digest("w.json"), "bytes": man["outputs"][0]["bytes"]}]
    assert "solve" in man["timings"]
    assert {"started", "seconds"} <= set(man["wall_clock"])
    assert main(["weights", "--out", "v.json"]) == 0
    assert "timings" not in json.load(open("v.json.manifest.json"))


def test_replay_detects_tampering(capsys):
    assert main(["simulate", "--paths", "2", "--steps", "50", "--out", "p.csv"]) == 0
    assert main(["replay", "p.csv.manifest.json", "--out-dir", "again"]) == 0
    assert "identical again/p.csv" in capsys.readouterr().out
    man = json.load(open("p.csv.manifest.json"))
    man["outputs"][0]["sha256"] = "0" * 64
    json.dump(man, open("p.csv.manifest.json", "w"))
    assert main(["replay", "p.csv.manifest.json", "--out-dir", "again"]) == 3


def test_replay_missing_manifest():
    assert main(["replay", "nope.json"]) == 2


def test_help_lists_every_flag_with_default():
    ap = build_parser()
    sub = [a for a in ap._actions if a.dest == "command"][0]
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            if action.dest == "help":
                continue
            assert action.help, (name, action.dest)
            if action.option_strings and action.default is not None and action.default is not False:
                assert f"(default: {action.default})" in " ".join(text.split()), (name, action.dest)
