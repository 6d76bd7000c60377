"""Scenario definition, truth simulation and pass scheduling."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mantrack import constants as K
from mantrack.dynamics import ForceModelConfig, ThrustProfile, propagate
from mantrack.dynamics.core import InertialState
from mantrack.filter import FilterConfig
from mantrack.laplace import MvLaplace, ml_sample
from mantrack.measurement import (
    GroundStation, MeasurementPass, default_network, elevation, measure, radar_noise,
)

TRUTH_KINDS = ("none", "consistency", "constant", "apogee_raising", "initiation", "sparse", "autocorrelated")

# Initial conditions: Cartesian state [km, km/s] and 1-sigma [km, km/s]
X0_MEAN = np.array([0.0, 5001.048, 5001.048, -7.510139, 0.0, 0.0])
X0_SIGMA = np.array([1.0, 1.0, 1.0, 1e-3, 1e-3, 1e-3])


class UntrackableScenario(RuntimeError):
    pass


@dataclass
class TruthSpec:
    kind: str = "none"
    magnitude: float = 0.0  # km/s^2: std for random kinds, level for deterministic ones
    segment: float = 16800.0  # s, consistency redraw period
    start: float = 0.0  # maneuver start [s] (initiation)
    ar_factor: float = 0.99
    ar_step: float = 60.0
    frame: str = "ric"

    def __post_init__(self):
        if self.kind not in TRUTH_KINDS:
            raise ValueError(f"unknown truth thrust kind {self.kind!r}")


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    truth: TruthSpec = field(default_factory=TruthSpec)
    x0: np.ndarray = field(default_factory=lambda: X0_MEAN.copy())
    sigma0: np.ndarray = field(default_factory=lambda: X0_SIGMA.copy())
    duration: float = 48 * 3600.0
    min_gap: float = 15000.0
    cadence: float = 60.0
    min_elevation: float = 0.0
    trials: int = 50
    seed: int = 1
    truth_degree: int = 8
    stations: list[GroundStation] = field(default_factory=default_network)
    filter: FilterConfig = field(default_factory=FilterConfig)
    redraw_thrust_per_trial: bool = False

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.min_gap < 0:
            raise ValueError("min_gap must be non-negative")

    @property
    def P0(self) -> np.ndarray:
        return np.diag(self.sigma0**2)

    @property
    def truth_cfg(self) -> ForceModelConfig:
        return ForceModelConfig.truth(self.truth_degree)

    @property
    def station_map(self) -> dict[int, GroundStation]:
        return {s.id: s for s in self.stations}


def orbital_period(x, mu: float = K.MU_EARTH) -> float:
    x = np.asarray(x, dtype=float)
    a = 1.0 / (2.0 / np.linalg.norm(x[:3]) - x[3:6] @ x[3:6] / mu)
    return 2.0 * math.pi * math.sqrt(a**3 / mu)


def _grid(t0, t1, step):
    n = max(1, int(math.ceil((t1 - t0) / step - 1e-9)))
    b = t0 + step * np.arange(n + 1)
    b[-1] = t1
    return b


def truth_thrust(spec: TruthSpec, duration: float, x0, rng: np.random.Generator) -> ThrustProfile:
    """Truth thrust profile over [0, duration] for the scenario kind."""
    kind = spec.kind
    a = spec.magnitude
    if kind == "none" or (a == 0 and kind != "consistency"):
        return ThrustProfile(np.array([0.0, duration]), np.zeros((1, 3)), spec.frame)
    if kind == "consistency":
        b = _grid(0.0, duration, spec.segment)
        acc = ml_sample(MvLaplace(np.eye(3) * a * a), rng, b.size - 1)
        return ThrustProfile(b, acc, spec.frame)
    if kind == "constant":
        return ThrustProfile(np.array([0.0, duration]), np.array([[0.0, a, 0.0]]), spec.frame)
    if kind in ("apogee_raising", "initiation", "sparse"):
        T0 = orbital_period(x0)
        start = spec.start if kind == "initiation" else 0.0
        # on for (t mod T0) < T0/4 or > 3T0/4, counted from the maneuver start
        edges = [0.0]
        on = []
        if start > 0:
            edges.append(start)
            on.append(False)
        k = 0
        while True:
            base = start + k * T0
            for lo, hi, state in ((0.0, 0.25, True), (0.25, 0.75, False), (0.75, 1.0, True)):
                t_hi = base + hi * T0
                on.append(state)
                edges.append(min(t_hi, duration))
                if t_hi >= duration:
                    break
            if edges[-1] >= duration:
                break
            k += 1
        edges = np.array(edges)
        acc = np.array([[0.0, a, 0.0] if s else [0.0, 0.0, 0.0] for s in on])
        keep = np.diff(edges) > 0
        return _merge(ThrustProfile(np.concatenate([[edges[0]], edges[1:][keep]]), acc[keep], spec.frame))
    if kind == "autocorrelated":
        b = _grid(0.0, duration, spec.ar_step)
        n = b.size - 1
        phi = spec.ar_factor
        acc = np.empty((n, 3))
        acc[0] = a * rng.standard_normal(3)
        innov = a * math.sqrt(1.0 - phi * phi)
        for i in range(1, n):
            acc[i] = phi * acc[i - 1] + innov * rng.standard_normal(3)
        return ThrustProfile(b, acc, spec.frame)
    raise ValueError(kind)


def _merge(tp: ThrustProfile) -> ThrustProfile:
    """Join adjacent segments with equal acceleration."""
    b = [tp.bounds[0]]
    acc = []
    for i in range(tp.n_segments):
        if acc and np.array_equal(acc[-1], tp.accel[i]):
            b[-1] = tp.bounds[i + 1]
            continue
        acc.append(tp.accel[i])
        b.append(tp.bounds[i + 1])
    return ThrustProfile(np.array(b), np.array(acc), tp.frame)


@dataclass
class TruthRun:
    epochs: np.ndarray
    states: np.ndarray  # (k, 6) on the measurement tick grid
    thrust: ThrustProfile

    def at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.epochs, t))
        if i >= self.epochs.size or abs(self.epochs[i] - t) > 1e-6:
            raise KeyError(f"epoch {t} not on the truth grid")
        return self.states[i]


def simulate_truth(x0, thrust: ThrustProfile, duration: float, cfg: ForceModelConfig,
                   cadence: float = 60.0, tol: float = 1e-11) -> TruthRun:
    ticks = _grid(0.0, duration, cadence)
    traj = propagate(InertialState.from_vector(x0, 0.0), thrust, duration, cfg, tol=tol, epochs=ticks[1:])
    idx = np.searchsorted(traj.epochs, ticks)
    return TruthRun(ticks, traj.states[idx], thrust)


def schedule_passes(truth: TruthRun, stations, min_gap: float, cadence: float = 60.0,
                    min_elevation: float = 0.0, R=None, rng: np.random.Generator | None = None,
                    omega: float = K.OMEGA_EARTH) -> list[MeasurementPass]:
    """Measurement passes on the truth tick grid.

    A tick is measured when some station sees the target and either a pass
    is in progress or ``min_gap`` has elapsed since the previous pass ended.
    The highest-elevation station takes the measurement. A pass ends when
    visibility lapses for more than one cadence.
    """
    R = radar_noise() if R is None else R
    el = np.stack([elevation(truth.states, s, truth.epochs, omega) for s in stations], axis=1)
    best = np.argmax(el, axis=1)
    vis = el[np.arange(el.shape[0]), best] >= min_elevation
    passes: list[MeasurementPass] = []
    cur: list = []
    last_end = -math.inf
    last_vis_t = -math.inf
    for i, t in enumerate(truth.epochs):
        if cur and t - last_vis_t > cadence + 1e-9:
            passes.append(MeasurementPass(cur))
            last_end = cur[-1].epoch
            cur = []
        if not vis[i]:
            continue
        if cur or t - last_end >= min_gap:
            st = stations[best[i]]
            cur.append(measure(truth.states[i], st, t, R, rng, omega))
            last_vis_t = t
    if cur:
        passes.append(MeasurementPass(cur))
    if not passes:
        raise UntrackableScenario("untrackable scenario")
    return passes


def _floats(s: str) -> np.ndarray:
    return np.array([float(v) for v in s.replace(",", " ").split()])


def load_scenario(path) -> ScenarioConfig:
    """Read an INI scenario file; the bundled ``scenarios/*.ini`` show every key."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    text = Path(path).read_text()
    cp.read_string(text)
    g = cp["scenario"] if cp.has_section("scenario") else {}
    t = cp["truth"] if cp.has_section("truth") else {}
    f = cp["filter"] if cp.has_section("filter") else {}
    um = K.UM_S2
    truth = TruthSpec(
        kind=t.get("kind", "none"),
        magnitude=float(t.get("magnitude_um_s2", 0.0)) * um,
        segment=float(t.get("segment_s", 16800.0)),
        start=float(t.get("start_s", 0.0)),
        ar_factor=float(t.get("ar_factor", 0.99)),
        ar_step=float(t.get("ar_step_s", 60.0)),
        frame=t.get("frame", "ric"),
    )
    high_degree = int(f.get("high_degree", 8))
    fc = FilterConfig(
        N=int(f.get("particles", 2500)),
        k=int(f.get("neighbors", 99)),
        sigma=float(f.get("sigma_um_s2", 50.0)) * um,
        sigma_max=float(f.get("sigma_max_um_s2", 800.0)) * um,
        n_components=int(f.get("proposal_components", 9)),
        alpha0=float(f.get("alpha0", 0.3)),
        r=int(f.get("nodes", 50)),
        prune_ratio=float(f.get("prune_ratio", 1e-10)),
        iterations=int(f.get("iterations", 10)),
        damping=float(f.get("damping", 0.7)),
        constant_thrust=f.get("segments", "constant") == "constant",
        repeat_within_gap=f.get("segments", "constant") == "repeat",
        tol=float(f.get("tol", 1e-10)),
        high=ForceModelConfig.high_fidelity(high_degree),
    )
    sc = ScenarioConfig(
        name=g.get("name", Path(path).stem),
        truth=truth,
        x0=_floats(g["x0"]) if "x0" in g else X0_MEAN.copy(),
        sigma0=_floats(g["sigma0"]) if "sigma0" in g else X0_SIGMA.copy(),
        duration=float(g.get("duration_h", 48.0)) * 3600.0,
        min_gap=float(g.get("min_gap_s", 15000.0)),
        cadence=float(g.get("cadence_s", 60.0)),
        trials=int(g.get("trials", 50)),
        seed=int(g.get("seed", 1)),
        truth_degree=int(g.get("truth_degree", 8)),
        filter=fc,
        redraw_thrust_per_trial=truth.kind == "consistency",
    )
    return sc


SCENARIO_DIR = Path(__file__).with_name("scenarios")


def builtin_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.ini"))


def resolve_scenario(name_or_path) -> ScenarioConfig:
    """Load a scenario file, or a bundled scenario by name."""
    p = Path(name_or_path)
    if p.is_file():
        return load_scenario(p)
    bundled = SCENARIO_DIR / f"{name_or_path}.ini"
    if bundled.is_file():
        return load_scenario(bundled)
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name_or_path!r} "
                            f"(bundled: {', '.join(builtin_scenarios())})")


def with_overrides(sc: ScenarioConfig, seed=None, trials=None) -> ScenarioConfig:
    kw = {}
    if seed is not None:
        kw["seed"] = int(seed)
    if trials is not None:
        kw["trials"] = int(trials)
    return replace(sc, **kw) if kw else sc
