import csv
import io
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binomtest

from gammaseek.cli import main
from gammaseek.config import RunConfig
from gammaseek.env import EnvConfig
from gammaseek.harness import (
    EPISODE_COLUMNS,
    RESULT_COLUMNS,
    EpisodeResult,
    EvalReport,
    MethodError,
    calibrate_cmd,
    curve_variance,
    evaluate,
    export_results,
    trial_seeds,
    wilson_interval,
)
from gammaseek.policy import PolicyNet, save_checkpoint

TINY = RunConfig().with_overrides({"eval.scan_max_steps": 200})


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    save_checkpoint(PolicyNet(EnvConfig().obs_width), path)
    return path


@given(st.integers(0, 200), st.integers(1, 200))
def test_wilson_matches_scipy(k, n):
    k = min(k, n)
    ci = binomtest(k, n).proportion_ci(confidence_level=0.95, method="wilson")
    lo, hi = wilson_interval(k, n)
    assert lo == pytest.approx(ci.low, abs=1e-9) and hi == pytest.approx(ci.high, abs=1e-9)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


def test_wilson_rejects_empty():
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_trial_seeds_stable_and_distinct():
    a = trial_seeds(0, 50)
    assert a == trial_seeds(0, 50) and len(set(a)) == 50
    assert a[:10] == trial_seeds(0, 10)
    assert a != trial_seeds(1, 50)


def test_curve_variance():
    curves = [[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]
    assert curve_variance(curves) == pytest.approx(np.var([0.0, 1.0, 2.0]) / 2)


def test_evaluate_validation(ckpt, tmp_path):
    with pytest.raises(ValueError):
        evaluate("random", 30, 2, 0)
    with pytest.raises(ValueError):
        evaluate("scan", 30, 0, 0)
    with pytest.raises(FileNotFoundError):
        evaluate("hybrid", 30, 2, 0)
    with pytest.raises(FileNotFoundError):
        evaluate("drl", 30, 2, 0, checkpoint=tmp_path / "gone.ckpt")


def test_method_failure_is_wrapped():
    # a policy built for the wrong observation width fails inside the episode
    with pytest.raises((MethodError, ValueError)):
        evaluate("drl", 30, 1, 0, policy=PolicyNet(7))


def test_evaluate_rows_and_matched_seeds(ckpt):
    rep = EvalReport()
    for m in ("scan", "drl", "hybrid"):
        rep.extend(evaluate(m, 30, 2, 0, config=TINY, checkpoint=ckpt))
    seeds = {m: [e.seed for e in rep.episodes if e.method == m] for m in ("scan", "drl", "hybrid")}
    assert seeds["scan"] == seeds["drl"] == seeds["hybrid"] == trial_seeds(0, 2)
    for r in rep.rows:
        assert r.n_trials == 2 and r.successes == round(r.success_rate * 2)
    again = EvalReport.from_episodes(rep.episodes)
    assert {(r.method, r.successes) for r in again.rows} == {(r.method, r.successes) for r in rep.rows}


def test_export_is_byte_stable_and_sorted(tmp_path):
    eps = [
        EpisodeResult("hybrid", 70.0, 0, 1, True, 60, 52, 8, 3.0),
        EpisodeResult("drl", 30.0, 0, 1, False, 150, 0, 150, 20.0),
        EpisodeResult("hybrid", 30.0, 0, 1, False, 150, 78, 72, 9.5),
    ]
    rep = EvalReport.from_episodes(eps)
    a = [p.read_bytes() for p in export_results(rep, tmp_path / "a")]
    b = [p.read_bytes() for p in export_results(EvalReport.from_episodes(eps[::-1]), tmp_path / "b")]
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a[0].decode())))
    assert [(r["method"], r["sigma"]) for r in rows] == [("drl", "30.0"), ("hybrid", "30.0"), ("hybrid", "70.0")]
    assert rows[0]["mean_steps"] == "nan"
    doc = json.loads(a[1])
    assert doc["columns"] == RESULT_COLUMNS and doc["n_episodes"] == 3


def test_empty_report_writes_headers(tmp_path):
    paths = export_results(EvalReport(), tmp_path)
    assert paths[0].read_text() == ",".join(RESULT_COLUMNS) + "\n"
    assert paths[2].read_text() == ",".join(EPISODE_COLUMNS) + "\n"


def test_export_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_results(EvalReport(), blocker / "sub")


def test_calibrate_cmd_modes(tmp_path):
    with pytest.raises(ValueError):
        calibrate_cmd()
    with pytest.raises(ValueError):
        calibrate_cmd(tmp_path / "x", synthetic=True)
    out = calibrate_cmd(synthetic=True, noiseless=True)
    assert out.params.l == pytest.approx(26.50, rel=1e-6)
    assert all(math.isclose(m, p, rel_tol=1e-6) for _, _, m, p in out.pairs())


# -- command line ---------------------------------------------------------------


def run(argv, tmp_path, capsys):
    rc = main(argv + ["--results-dir", str(tmp_path)])
    return rc, capsys.readouterr()


def test_cli_calibrate_and_config_echo(tmp_path, capsys):
    rc, io_ = run(["calibrate", "--synthetic", "--noiseless"], tmp_path, capsys)
    assert rc == 0 and "R^2 = 1" in io_.out
    assert (tmp_path / "calibration_report.json").is_file()
    assert (tmp_path / "calibration_pairs.csv").is_file()
    assert "env.sigma = 30.0" in (tmp_path / "config_used.txt").read_text()


def test_cli_exit_codes(tmp_path, capsys, ckpt):
    bad = tmp_path / "bad.cfg"
    bad.write_text("env.sigma = 30\nenv.sigma = 40\n")
    rc, io_ = run(["scan-demo", "--config", str(bad)], tmp_path, capsys)
    assert rc == 2 and "line 2" in io_.err
    malformed = tmp_path / "cal.csv"
    malformed.write_text("5, 0, 1, 10, 1\n5, x, 1, 10, 1\n")
    rc, io_ = run(["calibrate", "--input", str(malformed)], tmp_path, capsys)
    assert rc == 2 and "line 2" in io_.err
    rc, _ = run(["hybrid-run", "--checkpoint", str(tmp_path / "missing.ckpt")], tmp_path, capsys)
    assert rc == 2
    rc, _ = run(["evaluate", "--method", "drl", "--n", "1"], tmp_path, capsys)
    assert rc == 2
    rc, _ = run(["evaluate", "--method", "scan", "--n", "0"], tmp_path, capsys)
    assert rc == 2
    rc, _ = run(["nonsense"], tmp_path, capsys)
    assert rc == 2
    rc, _ = run(["calibrate", "--noiseless", "--input", str(malformed)], tmp_path, capsys)
    assert rc == 2


def test_cli_method_failure_exit_code(tmp_path, capsys):
    path = tmp_path / "narrow.ckpt"
    save_checkpoint(PolicyNet(7), path)
    rc, io_ = run(["evaluate", "--method", "drl", "--n", "1", "--checkpoint", str(path)], tmp_path, capsys)
    assert rc in (1, 2) and io_.err


def test_cli_results_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GAMMASEEK_RESULTS", str(tmp_path / "envdir"))
    assert main(["scan-demo", "--seed", "1"]) == 0
    assert (tmp_path / "envdir" / "scan_demo.json").is_file()
    capsys.readouterr()


def test_cli_hybrid_run_outputs(tmp_path, capsys, ckpt):
    rc, io_ = run(["hybrid-run", "--checkpoint", str(ckpt), "--seed", "3"], tmp_path, capsys)
    assert rc == 0 and "phase I" in io_.out
    doc = json.loads((tmp_path / "hybrid_episode.json").read_text())
    rows = list(csv.DictReader(open(tmp_path / "hybrid_trace.csv")))
    assert len(rows) == doc["total_steps"]
    assert sum(r["phase"] == "1" for r in rows) == doc["phase1_steps"]
