import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from mantrack import constants as K
from mantrack.dynamics import ForceModelConfig
from mantrack.filter import semi_major_axis
from mantrack.harness.cli import main
from mantrack.harness.metrics import (
    RunMetrics, TrialResult, aggregate, envelope_fraction, envelopes, is_divergent,
)
from mantrack.harness.montecarlo import monte_carlo, run_trial, trial_passes, trial_truth
from mantrack.harness.outputs import emit_outputs, read_results, summarize
from mantrack.harness.scenario import (
    ScenarioConfig, TruthRun, TruthSpec, UntrackableScenario, builtin_scenarios, load_scenario,
    orbital_period, resolve_scenario, schedule_passes, simulate_truth, truth_thrust,
)
from mantrack.measurement import default_network, measurement_function, station_inertial

TINY = """
[scenario]
name = tiny
duration_h = 8
min_gap_s = 3000
trials = 2
seed = 5
truth_degree = 4
[truth]
kind = constant
magnitude_um_s2 = 5
[filter]
particles = 60
neighbors = 8
nodes = 5
iterations = 2
sigma_um_s2 = 5
sigma_max_um_s2 = 40
high_degree = 2
segments = constant
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def short_truth():
    sc = ScenarioConfig(duration=36 * 3600.0, truth_degree=2)
    return simulate_truth(sc.x0, truth_thrust(TruthSpec(), sc.duration, sc.x0, None), sc.duration,
                          ForceModelConfig.low_fidelity())


def test_constant_kind():
    tp = truth_thrust(TruthSpec("constant", 300 * K.UM_S2), 3600.0, ScenarioConfig().x0, None)
    np.testing.assert_allclose(tp.accel, [[0.0, 3e-7, 0.0]], rtol=1e-12)
    assert tp.frame == "ric"


def test_consistency_kind_redraws_every_segment(rng):
    tp = truth_thrust(TruthSpec("consistency", 50 * K.UM_S2), 48 * 3600.0, ScenarioConfig().x0, rng)
    np.testing.assert_allclose(np.diff(tp.bounds)[:-1], 16800.0)
    assert tp.n_segments == math.ceil(48 * 3600 / 16800)
    assert len({tuple(a) for a in tp.accel}) == tp.n_segments


def test_initiation_kind_is_ballistic_first_day():
    x0 = ScenarioConfig().x0
    tp = truth_thrust(TruthSpec("initiation", 300 * K.UM_S2, start=86400.0), 48 * 3600.0, x0, None)
    before = tp.bounds[1:] <= 86400.0
    assert np.all(tp.accel[before] == 0)
    assert np.any(tp.accel[~before] != 0)


def test_apogee_raising_duty_cycle():
    x0 = ScenarioConfig().x0
    T0 = orbital_period(x0)
    tp = truth_thrust(TruthSpec("apogee_raising", 300 * K.UM_S2), 10 * T0, x0, None)
    on = np.any(tp.accel != 0, axis=1)
    dur = np.diff(tp.bounds)
    assert np.sum(dur[on]) == pytest.approx(5 * T0, rel=1e-9)
    np.testing.assert_allclose(dur[on][1:-1], T0 / 2, rtol=1e-9)


def test_autocorrelated_lag_one(rng):
    spec = TruthSpec("autocorrelated", 100 * K.UM_S2)
    tp = truth_thrust(spec, 1e5 * 60.0, ScenarioConfig().x0, rng)
    a = tp.accel[:, 0]
    rho = np.corrcoef(a[:-1], a[1:])[0, 1]
    assert rho == pytest.approx(0.99, abs=0.005)
    assert np.std(tp.accel) == pytest.approx(100 * K.UM_S2, rel=0.15)


def test_truth_spec_validation():
    with pytest.raises(ValueError):
        TruthSpec("warp")


def test_min_gap_infinite_gives_one_pass(short_truth):
    assert len(schedule_passes(short_truth, default_network(), math.inf)) == 1


def test_min_gap_zero_measures_every_visible_tick(short_truth):
    from mantrack.measurement import elevation
    stations = default_network()
    passes = schedule_passes(short_truth, stations, 0.0)
    el = np.max([elevation(short_truth.states, s, short_truth.epochs) for s in stations], axis=0)
    assert sum(len(p) for p in passes) == int(np.sum(el >= 0))


def test_pass_gaps_respect_min_gap(short_truth):
    passes = schedule_passes(short_truth, default_network(), 5000.0)
    assert len(passes) >= 2
    for a, b in zip(passes, passes[1:]):
        assert b.start - a.end >= 5000.0
    for p in passes:
        assert np.all(np.diff(p.epochs) == 60.0)


def test_untrackable(short_truth):
    with pytest.raises(UntrackableScenario):
        schedule_passes(short_truth, default_network(), 0.0, min_elevation=math.radians(90.5))


def test_measurement_noise_is_white(short_truth, rng):
    from mantrack.measurement import radar_noise, wrap_residual
    stations = default_network()
    passes = schedule_passes(short_truth, stations, 0.0, rng=rng)
    sd = np.sqrt(np.diag(radar_noise()))
    res = []
    for p in passes:
        for m in p.measurements:
            rs, vs = station_inertial(stations[m.station_id], m.epoch)
            res.append(wrap_residual(m.y - measurement_function(short_truth.at(m.epoch), rs, vs)) / sd)
    res = np.array(res)
    # lag-1 pairs pooled over the four channels
    a, b = res[:-1].T.ravel(), res[1:].T.ravel()
    assert a.size > 1000
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_consistency_gap_statistics():
    sc = resolve_scenario("consistency")
    truth = trial_truth(sc, 0)
    passes = trial_passes(sc, truth, 0)
    gap = np.mean(np.diff([p.start for p in passes]))
    assert gap == pytest.approx(16800.0, rel=0.2)


def test_apogee_raising_semi_major_axis_rises():
    sc = replace(resolve_scenario("apogee_b1"), duration=3 * 3600.0)
    tp = truth_thrust(sc.truth, sc.duration, sc.x0, None)
    tr = simulate_truth(sc.x0, tp, sc.duration, ForceModelConfig.two_body())
    a = np.array([semi_major_axis(x) for x in tr.states])
    for lo, hi, acc in zip(tp.bounds[:-1], tp.bounds[1:], tp.accel):
        sel = (tr.epochs >= lo) & (tr.epochs <= hi)
        if np.any(acc != 0) and sel.sum() > 2:
            assert np.all(np.diff(a[sel]) > 0)


def test_truth_lookup_rejects_off_grid(short_truth):
    with pytest.raises(KeyError):
        short_truth.at(30.0)


def test_bundled_scenarios_load():
    names = builtin_scenarios()
    for n in ("consistency", "constant", "apogee_b1", "apogee_b3", "initiation", "autocorrelated"):
        assert n in names
    c = resolve_scenario("consistency")
    assert c.redraw_thrust_per_trial and c.truth.magnitude == pytest.approx(50 * K.UM_S2)
    assert not resolve_scenario("constant").redraw_thrust_per_trial
    b3 = resolve_scenario("apogee_b3")
    assert b3.filter.repeat_within_gap and b3.filter.sigma == pytest.approx(25 * K.UM_S2)
    with pytest.raises(FileNotFoundError, match="bundled"):
        resolve_scenario("nope")


def test_scenario_file_keys(tiny):
    sc = load_scenario(tiny)
    assert sc.name == "tiny" and sc.trials == 2 and sc.seed == 5 and sc.duration == 8 * 3600.0
    assert sc.filter.N == 60 and sc.filter.k == 8 and sc.filter.high.gravity_degree == 2


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(duration=0.0)
    with pytest.raises(ValueError):
        ScenarioConfig(trials=0)


def _result(trial, err, sig, failed=False):
    n = len(err)
    return TrialResult(trial, np.arange(n) * 100.0, np.array(err, float), np.array(sig, float),
                       np.ones(n, int), failed)


def test_perfect_estimate_has_zero_z():
    r = _result(0, np.zeros((3, 6)), np.ones((3, 6)))
    assert np.all(r.z_scores == 0)
    m = aggregate([r])
    assert m.rmse_pos == 0 and m.z_std == 0 and m.pct_outside_3sigma == 0


def test_divergence_rule():
    assert not is_divergent([11, 1, 11], [1, 1, 1])
    assert is_divergent([1, 11, 12], [1, 1, 1])
    assert _result(0, np.zeros((1, 6)), np.ones((1, 6)), failed=True).diverged


def test_aggregate_and_validation():
    a = _result(0, np.full((2, 6), 0.5), np.ones((2, 6)))
    b = _result(1, np.full((2, 6), 4.0), np.ones((2, 6)))
    m = aggregate([a, b])
    assert m.pct_outside_3sigma == 50.0 and m.divergences == 0 and m.trials == 2
    assert m.rmse_pos == pytest.approx(math.sqrt((3 * 0.25 + 3 * 16) / 2))
    d = m.to_dict()
    assert d["n_samples"] == 4 and set(d) >= {"z_std_position", "z_std_velocity"}
    with pytest.raises(ValueError):
        RunMetrics(-1.0, 0.0, np.zeros((0, 6)), 0.0, 0, 1)
    with pytest.raises(ValueError):
        RunMetrics(0.0, 0.0, np.zeros((0, 6)), 101.0, 0, 1)
    with pytest.raises(ValueError):
        aggregate([])


def test_envelope_fraction():
    a = _result(0, [[1.0] + [0] * 5, [1.0] + [0] * 5], np.full((2, 6), 1.0))
    b = _result(1, [[9.0] + [0] * 5, [2.0] + [0] * 5], np.full((2, 6), 0.1))
    # envelope is 3*sqrt(3) per pass from trial a
    assert envelope_fraction([a, b]) == pytest.approx(0.75)
    env = envelopes([a, b])
    np.testing.assert_allclose(env["max3_pos"], 3 * math.sqrt(3))
    with pytest.raises(ValueError):
        envelope_fraction([])


def test_emit_outputs_files_and_rows(tmp_path):
    rs = [_result(0, np.full((3, 6), 0.1), np.ones((3, 6))), _result(1, np.full((2, 6), 0.2), np.ones((2, 6)))]
    m = emit_outputs(rs, tmp_path / "o", scenario={"name": "x"})
    for f in ("metrics.json", "errors.csv", "zscores.csv", "trials.csv", "envelope.csv",
              "error_position.svg", "error_velocity.svg"):
        assert (tmp_path / "o" / f).is_file()
    with open(tmp_path / "o" / "errors.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 5
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["scenario"] == {"name": "x"}
    back = read_results(tmp_path / "o")
    assert summarize(back) == pytest.approx({k: v for k, v in m.items() if k != "scenario"})


def test_emit_outputs_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_outputs([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_outputs([_result(0, np.zeros((1, 6)), np.ones((1, 6)))], blocker / "sub")


def test_campaign_is_reproducible(tiny, tmp_path):
    sc = load_scenario(tiny)
    outs = []
    for k in range(2):
        c = monte_carlo(sc)
        emit_outputs(c.results, tmp_path / str(k), plots=k == 0)
        outs.append(tmp_path / str(k))
    for f in ("errors.csv", "zscores.csv", "trials.csv", "envelope.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    r = run_trial(sc, 0)
    assert r.result.epochs.size == len(r.passes)


def test_cli_help_and_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert main(["truth", "--scenario", "missing_scenario", "--out", str(tmp_path)]) == 1
    assert main(["analyze", "--out", str(tmp_path / "nothing")]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_truth_measure_run_analyze(tiny, tmp_path):
    out = tmp_path / "o"
    assert main(["truth", "--scenario", str(tiny), "--out", str(out)]) == 0
    assert (out / "truth.csv").is_file()
    assert main(["measure", "--scenario", str(tiny), "--out", str(out), "--seed", "9"]) == 0
    assert (out / "measurements.csv").is_file()
    rc = main(["montecarlo", "--scenario", str(tiny), "--out", str(out), "--trials", "2", "--threads", "1"])
    assert rc in (0, 2)
    assert main(["analyze", "--out", str(out)]) == rc
    assert (out / "analysis.json").is_file()


def test_cli_divergence_exit_code(tmp_path):
    r = _result(0, np.full((3, 6), 100.0), np.ones((3, 6)))
    emit_outputs([r], tmp_path, plots=False)
    assert main(["analyze", "--out", str(tmp_path)]) == 2


def test_cli_rare_event_grid(tmp_path):
    rc = main(["rare-event-grid", "--out", str(tmp_path), "--points", "4", "--trials", "20",
               "--particles", "200", "--seed", "3"])
    assert rc == 0
    s = json.loads((tmp_path / "rare_event_summary.json").read_text())
    assert len(s["argmin_sigma_empirical"]) == 4
    assert (tmp_path / "rare_event_grid.csv").is_file()
