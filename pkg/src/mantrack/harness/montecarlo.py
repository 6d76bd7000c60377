"""Seeded Monte Carlo trials: truth, measurements, filter, metrics."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mantrack.dynamics import ThrustProfile
from mantrack.filter import FilterHistory, run
from mantrack.harness.metrics import RunMetrics, TrialResult, aggregate, trial_result
from mantrack.harness.scenario import (
    ScenarioConfig, TruthRun, schedule_passes, simulate_truth, truth_thrust,
)
from mantrack.measurement import MeasurementPass

log = logging.getLogger(__name__)

# stream tags of the (seed, trial, tag[, pass]) generator keys
_THRUST, _INITIAL, _NOISE, _FILTER = 1, 2, 3, 4


def stream(seed: int, trial: int, tag: int, *more: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial), tag, *map(int, more)]))


def trial_thrust(sc: ScenarioConfig, trial: int) -> ThrustProfile:
    """Truth thrust, shared by all trials unless the scenario redraws it per trial."""
    key = trial if sc.redraw_thrust_per_trial else 0
    return truth_thrust(sc.truth, sc.duration, sc.x0, stream(sc.seed, key, _THRUST))


def trial_truth(sc: ScenarioConfig, trial: int) -> TruthRun:
    x0 = sc.x0 + sc.sigma0 * stream(sc.seed, trial, _INITIAL).standard_normal(6)
    return simulate_truth(x0, trial_thrust(sc, trial), sc.duration, sc.truth_cfg, sc.cadence)


def trial_passes(sc: ScenarioConfig, truth: TruthRun, trial: int) -> list[MeasurementPass]:
    return schedule_passes(truth, sc.stations, sc.min_gap, sc.cadence, sc.min_elevation,
                           rng=stream(sc.seed, trial, _NOISE))


@dataclass
class TrialOutput:
    result: TrialResult
    history: FilterHistory | None
    passes: list[MeasurementPass] = field(repr=False)


def run_trial(sc: ScenarioConfig, trial: int) -> TrialOutput:
    truth = trial_truth(sc, trial)
    passes = trial_passes(sc, truth, trial)
    try:
        hist = run(sc.x0, sc.P0, passes, sc.filter, lambda k: stream(sc.seed, trial, _FILTER, k),
                   sc.station_map)
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        # a trial that breaks the filter counts as a divergence
        log.warning("trial %d failed: %s", trial, exc)
        return TrialOutput(trial_result(trial, [], truth.at, failed=True, message=str(exc)), None, passes)
    return TrialOutput(trial_result(trial, hist.records, truth.at), hist, passes)


def _run_one(args):
    sc, trial = args
    return run_trial(sc, trial)


@dataclass
class CampaignResult:
    scenario: ScenarioConfig
    trials: list[TrialOutput]
    metrics: RunMetrics

    @property
    def results(self) -> list[TrialResult]:
        return [t.result for t in self.trials]


def monte_carlo(sc: ScenarioConfig, threads: int = 1, progress=None) -> CampaignResult:
    """Run ``sc.trials`` independent trials, in worker processes when ``threads`` > 1.

    Results are ordered by trial index whatever the worker count, so the
    outputs depend only on the scenario and its seed.
    """
    if sc.trials < 1:
        raise ValueError("trials must be at least 1")
    jobs = [(sc, i) for i in range(sc.trials)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            outs = []
            for o in ex.map(_run_one, jobs):
                outs.append(o)
                if progress:
                    progress(o)
    else:
        outs = []
        for j in jobs:
            o = _run_one(j)
            outs.append(o)
            if progress:
                progress(o)
    return CampaignResult(sc, outs, aggregate([o.result for o in outs]))
