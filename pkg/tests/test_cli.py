import json
import shutil
import subprocess

import numpy as np
import pytest
from scipy import stats

from otbump.cli import DEFAULTS, main
from otbump.estimators import clopper_pearson
from otbump.simulate import EventSet, read_csv, write_csv


def run(*argv):
    return main([str(a) for a in argv])


def load(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--n", "20000", "--lam", "0.05", "--seed", "7",
                 "-o", str(d / "mixed.csv")]) == 0
    assert main(["simulate", "--n", "20000", "--seed", "8", "-o", str(d / "train.csv")]) == 0
    assert main(["decorrelate", "-i", str(d / "train.csv"), "--map", str(d / "map.json"),
                 "-o", str(d / "train_dec.csv")]) == 0
    return d


# -- simulate ------------------------------------------------------------------------

def test_simulate_null_rows(tmp_path):
    out = tmp_path / "null.csv"
    assert run("simulate", "--n", 1000, "-o", out) == 0
    ev = read_csv(out)
    assert len(ev) == 1000 and np.all(ev.label == 0)
    assert out.read_text().splitlines()[0] == "mass,score,label,weight"


def test_simulate_is_byte_identical(tmp_path, workdir):
    again = tmp_path / "again.csv"
    assert run("simulate", "--n", 20000, "--lam", 0.05, "--seed", 7, "-o", again) == 0
    assert again.read_bytes() == (workdir / "mixed.csv").read_bytes()


def test_simulate_label_count_in_binomial_interval(workdir):
    n_sig = int(np.sum(read_csv(workdir / "mixed.csv").label == 1))
    lo, hi = stats.binom.interval(0.99, 20000, 0.05)
    assert lo <= n_sig <= hi
    ci = clopper_pearson(n_sig, 20000, 0.99)
    assert ci.lower <= 0.05 <= ci.upper


def test_simulate_to_stdout(capsys):
    assert run("simulate", "--n", 3, "--seed", 1) == 0
    assert len(capsys.readouterr().out.splitlines()) == 4


# -- exit codes ----------------------------------------------------------------------

def test_exit_codes(tmp_path, workdir, capsys):
    assert run("simulate", "--n", 10, "-o", tmp_path / "missing" / "x.csv") == 3
    assert "missing" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("mass,weight\n0.5,1\n")
    assert run("decorrelate", "-i", bad) == 3
    assert "'score'" in capsys.readouterr().err
    assert run("test", "-i", workdir / "mixed.csv", "-K", 5) == 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert run("simulate", "--config", cfg) == 2
    assert run("test", "-i", workdir / "mixed.csv", "--region", "0.45,0.55", "-K", 5,
               "--cut-level", 0.998) == 3
    assert "survive" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        run("simulate", "--score-model", "nonsense")
    assert info.value.code == 2


@pytest.mark.skipif(shutil.which("otbump") is None, reason="console script not installed")
def test_console_script_reports_errors_on_stderr(tmp_path):
    proc = subprocess.run(["otbump", "test", "-i", str(tmp_path / "none.csv"), "-K", "5",
                           "--region", "0.4,0.6"], capture_output=True, text=True)
    assert proc.returncode == 3
    assert proc.stdout == "" and "otbump: error" in proc.stderr


def test_region_without_control_events_is_a_configuration_error(tmp_path):
    ev = EventSet(mass=np.full(500, 0.5), score=np.linspace(0, 1, 500),
                  label=np.zeros(500, np.int64), weight=np.ones(500))
    path = tmp_path / "inside.csv"
    write_csv(ev, path)
    assert run("test", "-i", path, "--region", "0.4,0.6", "-K", 3) == 2


def test_numeric_failure_exit_code(tmp_path, capsys):
    # no signal-window events makes the counting variance exactly zero
    ev = EventSet(mass=np.linspace(0.0, 0.3, 500), score=np.linspace(0, 1, 500),
                  label=np.zeros(500, np.int64), weight=np.ones(500))
    path = tmp_path / "outside.csv"
    write_csv(ev, path)
    assert run("test", "-i", path, "--region", "0.4,0.6", "--known-background-mass", 0.2) == 4
    assert "variance" in capsys.readouterr().err


# -- decorrelate ---------------------------------------------------------------------

def test_decorrelate_outputs_and_roundtrip(tmp_path, workdir):
    out = read_csv(workdir / "train_dec.csv")
    assert "score_decorrelated" in out.extra
    side = load(workdir / "train_dec.csv.json")
    assert side["command"] == "decorrelate"
    res = side["result"]
    assert res["approach"] == "split"
    assert res["independence_transported"] < res["independence_raw"]
    assert res["marginal_ks"] <= 0.02
    assert side["config"]["splits"] == [0.2, 0.4, 0.6]

    again = tmp_path / "reapplied.csv"
    assert run("decorrelate", "-i", workdir / "train.csv", "--load-map", workdir / "map.json",
               "-o", again) == 0
    first = out.extra["score_decorrelated"].astype(float)
    second = read_csv(again).extra["score_decorrelated"].astype(float)
    assert np.array_equal(first, second)


def test_decorrelate_passes_unknown_columns_through(tmp_path, workdir):
    src = read_csv(workdir / "train.csv").take(np.arange(3000))
    src = src.with_column("run_id", np.arange(3000).astype(str))
    path = tmp_path / "with_extra.csv"
    write_csv(src, path)
    out = tmp_path / "dec.csv"
    assert run("decorrelate", "-i", path, "--load-map", workdir / "map.json", "-o", out) == 0
    back = read_csv(out)
    assert list(back.extra) == ["run_id", "score_decorrelated"]
    assert back.extra["run_id"].tolist() == src.extra["run_id"].tolist()


def test_locscale_clamps_are_counted_in_sidecar(tmp_path, workdir):
    src = read_csv(workdir / "train.csv").take(np.arange(4000))
    score = src.score.copy()
    score[:3] = [0.0, 1.0, 1.0]
    path = tmp_path / "edges.csv"
    write_csv(EventSet(src.mass + 0.01, score, src.label, src.weight), path)
    out = tmp_path / "ls.csv"
    assert run("decorrelate", "-i", path, "--approach", "locscale", "--bandwidth-points", 4,
               "-o", out) == 0
    side = load(tmp_path / "ls.csv.json")
    # three clamped while fitting and the same three again when applying
    assert side["result"]["n_clamped"] == 6


# -- test ----------------------------------------------------------------------------

def test_known_background_with_matching_counts(tmp_path):
    mass = (np.arange(1000) + 0.5) / 1000
    ev = EventSet(mass, np.full(1000, 0.5), np.zeros(1000, np.int64), np.ones(1000))
    path = tmp_path / "grid.csv"
    write_csv(ev, path)
    out = tmp_path / "known.json"
    assert run("test", "-i", path, "--region", "0.4,0.6", "--known-background-mass", 0.2,
               "-o", out) == 0
    res = load(out)["result"]
    assert res["mode"] == "counting"
    assert res["lambda"] == pytest.approx(0.0, abs=1e-12)
    assert res["p_value"] == pytest.approx(0.5, abs=1e-12)


def test_censored_test_report_contents(tmp_path, workdir):
    out = tmp_path / "t.json"
    assert run("test", "-i", workdir / "mixed.csv", "--map", workdir / "map.json",
               "--region", "0.45,0.55", "-K", 10, "--cut-level", 0.5,
               "--bins-per-side", 20, "-o", out) == 0
    doc = load(out)
    res = doc["result"]
    for key in ("lambda", "std_error", "statistic", "p_value", "gamma", "n_surviving",
                "cut_threshold", "control_counts"):
        assert key in res, key
    assert res["n_surviving"] == pytest.approx(10_000, abs=2)
    assert len(res["control_counts"]) == 40
    assert doc["config"]["order"] == 10 and doc["seed"] is None

    fd = tmp_path / "fd.json"
    assert run("test", "--config", out, "--gradient", "fd",
               "-o", fd) == 0
    assert load(fd)["result"]["std_error"] == pytest.approx(
        res["std_error"], rel=1e-3)


def test_test_reads_region_and_order_from_calibration(tmp_path, workdir):
    cal = tmp_path / "cal.json"
    assert run("calibrate", "-i", workdir / "train.csv", "--region", "0.45,0.55",
               "-N", 5, "--n", 5000, "--k-grid", "5,10", "--bins-per-side", 10,
               "-o", cal) == 0
    out = tmp_path / "t.json"
    assert run("test", "-i", workdir / "mixed.csv", "--calibration", cal, "-o", out) == 0
    res = load(out)["result"]
    assert res["order"] == load(cal)["result"]["selected_k"]


# -- calibrate -----------------------------------------------------------------------

def test_calibrate_echoes_config_and_is_deterministic(tmp_path, workdir):
    a = tmp_path / "a.json"
    args = ("calibrate", "-i", workdir / "train.csv", "--signal", workdir / "mixed.csv",
            "-N", 6, "--n", 4000, "--k-grid", "5,10", "--seed", 3, "-o", a)
    assert run(*args) == 0
    first = a.read_bytes()
    assert run(*args, "--threads", 3) == 0
    assert a.read_bytes() == first
    doc = load(a)
    assert set(doc["config"]) == set(DEFAULTS["calibrate"])
    assert doc["config"]["alpha"] == 0.05 and doc["config"]["k_grid"] == [5, 10]
    assert DEFAULTS["calibrate"]["k_grid"] == [5, 10, 15, 20, 25, 30, 35, 40]
    assert (DEFAULTS["calibrate"]["n_datasets"], DEFAULTS["calibrate"]["n"]) == (500, 20_000)


def test_calibrate_rejects_small_validation(tmp_path, workdir):
    assert run("calibrate", "-i", workdir / "train.csv", "--region", "0.45,0.55",
               "--n", 50_000, "-N", 2, "-o", tmp_path / "x.json") == 2


# -- metrics -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def metrics_doc(workdir):
    out = workdir / "metrics.json"
    assert main(["metrics", "-i", str(workdir / "mixed.csv"), "--map", str(workdir / "map.json"),
                 "--curve", str(workdir / "curve.csv"), "-o", str(out)]) == 0
    return load(out)


def test_metrics_endpoint_equals_raw(tmp_path, workdir, metrics_doc):
    raw_only = tmp_path / "raw.json"
    assert run("metrics", "-i", workdir / "mixed.csv", "-o", raw_only) == 0
    assert load(raw_only)["result"]["raw"] == metrics_doc["result"]["raw"]
    assert metrics_doc["result"]["curve"][-1] == metrics_doc["result"]["raw"]
    header = (workdir / "curve.csv").read_text().splitlines()[0]
    assert header == "theta,r50,one_over_jsd,cut"


def test_metrics_jsd_falls_toward_raw(metrics_doc):
    jsd = [r["one_over_jsd"] for r in metrics_doc["result"]["curve"]]
    thetas = [r["theta"] for r in metrics_doc["result"]["curve"]]
    assert thetas == sorted(thetas)
    inversions = int(np.sum(np.diff(jsd) > 0))
    assert inversions <= 1
    assert jsd[0] >= 10 * jsd[-1]


def test_metrics_bins_change_jsd_not_r50(tmp_path, workdir, metrics_doc):
    out = tmp_path / "m.json"
    assert run("metrics", "-i", workdir / "mixed.csv", "--map", workdir / "map.json",
               "--bins", 7, "-o", out) == 0
    for a, b in zip(load(out)["result"]["curve"], metrics_doc["result"]["curve"]):
        assert a["r50"] == b["r50"]
        assert a["one_over_jsd"] != b["one_over_jsd"]


def test_metrics_needs_labels(tmp_path):
    path = tmp_path / "unlabeled.csv"
    path.write_text("mass,score\n0.1,0.2\n0.3,0.4\n")
    assert run("metrics", "-i", path) == 3


# -- power and reruns ----------------------------------------------------------------

SMALL_POWER = {
    "generator": {"seed": 5},
    "pipeline": {"lambdas": [0.0, 0.05], "cut_levels": [0.0, 0.5], "n_datasets": 4,
                 "n": 3000, "K": 5, "n_train": 3000, "n_cut_sample": 5000,
                 "n_validation_signal": 2000, "pool_background": 20000, "pool_signal": 2000,
                 "bins_per_side": 10},
}


def test_power_csv_and_rerun_is_bitwise(tmp_path):
    cfg = tmp_path / "power_cfg.json"
    cfg.write_text(json.dumps(SMALL_POWER))
    out, csv = tmp_path / "p.json", tmp_path / "p.csv"
    assert run("power", "--config", cfg, "-o", out, "--csv", csv) == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "lambda,cut,decorrelated,power,ci_lo,ci_hi,n_reps"
    assert len(lines) == 1 + 2 * 2 * 2
    doc = load(out)
    assert doc["seed"] == 5 and doc["version"]
    # the embedded config names the same output path, so the rerun overwrites it
    first = out.read_bytes()
    saved = tmp_path / "saved.json"
    saved.write_bytes(first)
    out.unlink()
    assert run("power", "--config", saved, "--threads", 2) == 0
    assert out.read_bytes() == first


def test_power_flags_override_config(tmp_path):
    cfg = tmp_path / "power_cfg.json"
    cfg.write_text(json.dumps(SMALL_POWER))
    out = tmp_path / "p.json"
    assert run("power", "--config", cfg, "-N", 2, "--cut-levels", "0", "--seed", 9,
               "--signal-sigma", 0.06, "-o", out) == 0
    doc = load(out)
    assert doc["config"]["pipeline"]["n_datasets"] == 2
    assert doc["config"]["generator"] == {"seed": 9, "signal_sigma": 0.06}
    assert doc["result"]["generator"]["signal_sigma"] == 0.06
    assert len(doc["result"]["cells"]) == 2 * 2


def test_report_from_another_command_is_rejected(tmp_path, workdir):
    assert run("simulate", "--config", workdir / "train_dec.csv.json") == 2


@pytest.mark.parametrize("command", ["simulate", "test", "metrics"])
def test_rerun_from_report_is_bitwise(tmp_path, workdir, command):
    first, second = tmp_path / "1", tmp_path / "2"
    if command == "simulate":
        argv = ("simulate", "--n", 500, "--lam", 0.1, "--seed", 4, "-o", first)
        assert run(*argv) == 0
        # the event file is the product; rerun it from an explicit config
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n": 500, "lam": 0.1, "seed": 4, "output": str(second)}))
        assert run("simulate", "--config", cfg) == 0
    else:
        extra = (("--region", "0.45,0.55", "-K", 5, "--bins-per-side", 10)
                 if command == "test" else ())
        assert run(command, "-i", workdir / "mixed.csv", "--map", workdir / "map.json",
                   *extra, "-o", first) == 0
        assert run(command, "--config", first, "-o", second) == 0
        doc1, doc2 = load(first), load(second)
        doc2["config"]["output"] = doc1["config"]["output"]
        assert doc1 == doc2
        return
    assert first.read_bytes() == second.read_bytes()
