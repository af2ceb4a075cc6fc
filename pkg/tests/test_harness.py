import json
from dataclasses import replace

import numpy as np
import pytest

from hybridmatch import cli, harness
from hybridmatch.config import (
    SEED_ENV,
    ConfigError,
    experiment_from,
    fingerprint,
    load_settings,
    market_from,
)
from hybridmatch.decision import GapModel, GridSpec, TrainParams
from hybridmatch.market import MarketConfig
from hybridmatch.policies import HybridConfig

FAST = ["--market.lambda", "30", "--market.T", "10", "--market.T0", "5", "--experiment.k", "2"]


@pytest.fixture
def model_file(tmp_path):
    m = GapModel.init([2, 4, 1], np.array([-2.0, 0.05]), np.array([2.0, 2.0]), seed=1)
    path = tmp_path / "model.json"
    m.save(path)
    return str(path)


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_settings_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("market:\n  lambda: 50\nexperiment.seed: 3\nhybrid.tau: 0.2\n")
    s = load_settings(cfg, "paper", {"hybrid.tau": "0.3"}, env={})
    assert s["market.lambda"] == 50.0 and s["market.T"] == 100.0
    assert s["experiment.seed"] == 3 and s["hybrid.tau"] == 0.3
    s = load_settings(cfg, None, {}, env={SEED_ENV: "77"})
    assert s["experiment.seed"] == 77
    s = load_settings(cfg, None, {"experiment.seed": "5"}, env={SEED_ENV: "77"})
    assert s["experiment.seed"] == 5


def test_settings_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_settings(overrides={"market.nope": 1}, env={})
    with pytest.raises(ConfigError):
        load_settings(overrides={"market.lambda": "abc"}, env={})
    with pytest.raises(ConfigError):
        load_settings(profile="huge", env={})
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_settings(bad, env={})
    with pytest.raises(ConfigError):
        load_settings(tmp_path / "missing.yaml", env={})


def test_density_sets_p_unless_given():
    s = load_settings(overrides={"market.d": "4"}, env={})
    assert market_from(s).p == pytest.approx(0.04)
    s = load_settings(overrides={"market.d": "4", "market.p": "0.5"}, env={})
    assert market_from(s).p == 0.5


def test_invalid_experiment_settings():
    for over in ({"experiment.k": "0"}, {"sweep.axis": "banana", "sweep.values": "1"},
                 {"experiment.policy": "lazy"}, {"sweep.axis": "d", "sweep.values": "500"},
                 {"sweep.axis": "d"}, {"market.T0": "60"}):
        with pytest.raises(ConfigError):
            experiment_from(load_settings(overrides=over, env={}))


def test_fingerprint_tracks_settings():
    a = load_settings(env={})
    b = load_settings(overrides={"hybrid.tau": "0.2"}, env={})
    assert fingerprint(a) == fingerprint(dict(a))
    assert fingerprint(a) != fingerprint(b)


def test_simulate_writes_csv_with_comment(tmp_path, capsys):
    code, out, _ = run(["simulate", *FAST], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# hybridmatch simulate config_fingerprint=")
    assert lines[1].split(",") == harness.SWEEP_COLUMNS
    assert [ln.split(",")[0] for ln in lines[2:]] == ["greedy", "patient"]


def test_simulate_trace_output(tmp_path, capsys):
    trace = tmp_path / "trace.json"
    code, _, _ = run(["simulate", *FAST, "--experiment.policy", "greedy", "--trace", str(trace)], capsys)
    assert code == 0
    d = json.loads(trace.read_text())
    c = d["counters"]
    assert c["A_full"] == c["M_full"] + c["D_full"] + c["Z_T_full"]


def test_exit_codes(tmp_path, capsys, model_file):
    assert run(["simulate", *FAST, "--market.lambda", "-3"], capsys)[0] == 1
    assert run(["simulate", *FAST, "--experiment.policy", "hybrid"], capsys)[0] == 1
    assert run(["simulate", *FAST, "--experiment.policy", "hybrid",
                "--hybrid.model", str(tmp_path / "none.json")], capsys)[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["simulate", *FAST, "--experiment.policy", "hybrid", "--hybrid.model", str(bad)], capsys)[0] == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run(["simulate", *FAST, "--output.path", str(blocker / "x.csv")], capsys)[0] == 2
    # mu large enough that every sojourn overflows to infinity
    assert run(["simulate", *FAST, "--market.mu", "1e6", "--market.sigma", "0"], capsys)[0] == 2
    assert run(["simulate", *FAST, "--experiment.policy", "hybrid", "--hybrid.model", model_file], capsys)[0] == 0


def test_sweep_is_byte_identical_across_runs(tmp_path, capsys):
    args = ["sweep", *FAST, "--sweep.axis", "d", "--sweep.values", "2,8"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run([*args, "--output.path", str(a)], capsys)[0] == 0
    assert run([*args, "--output.path", str(b)], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(harness.read_csv(a)) == 4


def test_parallel_sweep_matches_serial(tmp_path, capsys):
    args = ["sweep", *FAST, "--sweep.axis", "d", "--sweep.values", "2,8"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run([*args, "--output.path", str(a)], capsys)
    run([*args, "--output.path", str(b), "--experiment.workers", "2"], capsys)
    assert a.read_bytes() == b.read_bytes()


def test_inserting_a_sweep_point_leaves_others_unchanged():
    base = {"market.lambda": "30", "market.T": "10", "market.T0": "5", "experiment.k": "3", "sweep.axis": "d"}
    rows_a = harness.run_experiment(experiment_from(load_settings(overrides=dict(base, **{"sweep.values": "2,8"}), env={})))
    rows_b = harness.run_experiment(experiment_from(load_settings(overrides=dict(base, **{"sweep.values": "2,5,8"}), env={})))
    key = lambda r: (r["policy"], r["d"])
    b = {key(r): r for r in rows_b}
    for r in rows_a:
        assert b[key(r)] == r


def test_seeds_are_shared_across_policies():
    m = MarketConfig(lam=10, p=0.1, T=5)
    assert harness.run_seed(1, m, 0) == harness.run_seed(1, m, 0)
    assert harness.run_seed(1, m, 0) != harness.run_seed(1, m, 1)
    assert harness.run_seed(1, m, 0) != harness.run_seed(1, replace(m, p=0.2), 0)


def test_hybrid_usage_columns_are_consistent(model_file):
    s = load_settings(overrides={"market.lambda": "50", "market.T": "20", "market.T0": "10", "experiment.k": "2",
                                 "experiment.policy": "hybrid", "hybrid.model": model_file,
                                 "sweep.axis": "w", "sweep.values": "0.3,1"}, env={})
    rows = harness.run_experiment(experiment_from(s))
    for r in rows:
        assert r["usage_patient"] + r["usage_greedy"] == pytest.approx(1.0)
        assert r["switch_count_mean"] >= 0


def test_tiny_calibration_round_trip(tmp_path):
    grid = GridSpec(-0.2, 0.2, 0.2, 0.5, 1.5, 0.5)
    sim = MarketConfig(lam=30, p=0.2, T=10, T0=5, seed=1)
    model, rep = harness.run_calibration(grid, sim, 2, TrainParams(epochs=200, holdout=0.0),
                                         tmp_path / "m.json", tmp_path / "ds.csv")
    back = GapModel.load(tmp_path / "m.json")
    assert back.predict(0.0, 1.0) == model.predict(0.0, 1.0)
    assert len(harness.read_csv(tmp_path / "ds.csv")) == 9
    assert json.loads((tmp_path / "m.report.json").read_text())["n_train"] == 9


def test_heatmap_rows(tmp_path, capsys, model_file):
    out = tmp_path / "hm"
    code, _, _ = run(["heatmap", *FAST, "--grid.mu_min", "0", "--grid.mu_max", "0.2",
                      "--grid.sigma_min", "0.5", "--grid.sigma_max", "0.55", "--calibrate.k", "1",
                      "--hybrid.model", model_file, "--output.path", str(out)], capsys)
    assert code == 0
    rows = harness.read_csv(out / "heatmap.csv")
    assert len(rows) == 4
    assert list(rows[0]) == harness.HEATMAP_COLUMNS
    header = (out / "contours_oracle.csv").read_text().splitlines()[1]
    assert header.split(",") == harness.CONTOUR_COLUMNS


def test_schedule_report_window_rows(tmp_path, capsys, model_file):
    out = tmp_path / "sched.csv"
    code, _, _ = run(["schedule", "--market.lambda", "20", "--market.T", "100", "--market.T0", "50",
                      "--hybrid.model", model_file, "--hybrid.w", "0.3", "--output.path", str(out)], capsys)
    assert code == 0
    rows = harness.read_csv(out)
    assert len(rows) == 17
    assert float(rows[0]["start"]) == pytest.approx(95.1)
    assert float(rows[-1]["end"]) == 100.0
    assert {r["policy"] for r in rows} <= {"greedy", "patient"}


def test_schedule_needs_a_model(capsys):
    assert run(["schedule", *FAST], capsys)[0] == 1


def test_schedule_rows_match_trace(model_file):
    sim = MarketConfig(lam=30, p=0.2, T=6, seed=2)
    cfg = HybridConfig(tau=0.1, w=1.0, gap_model=GapModel.load(model_file))
    rows, trace = harness.run_schedule_report(cfg, sim, 0.0, 6.0)
    assert [r["policy"] for r in rows] == [e.kind.value for e in trace.policy_schedule]
    assert rows[0]["mu_hat"] is None


def test_reproduce_smoke(tmp_path, capsys):
    out = tmp_path / "rep"
    code, stdout, _ = run(["reproduce", "--market.lambda", "20", "--market.T", "12", "--market.T0", "6",
                           "--experiment.k", "2", "--calibrate.k", "1", "--train.epochs", "50",
                           "--grid.mu_min", "-0.2", "--grid.mu_max", "0.2", "--grid.sigma_min", "0.5",
                           "--grid.sigma_max", "0.6", "--sweep.values", "2,8", "--output.path", str(out)], capsys)
    assert code == 0
    names = {p.name for p in out.rglob("*") if p.is_file()}
    for f in ("model.json", "dataset.csv", "heatmap.csv", "contours_oracle.csv", "contours_fitted.csv",
              "fig4_tau_sweep.csv", "fig5_schedule.csv", "fig6_policy_usage.csv", "fig7_window_sweep.csv"):
        assert f in names
    fig4 = harness.read_csv(out / "fig4_tau_sweep.csv")
    assert len(fig4) == 2 * 2 + 3 * 2
