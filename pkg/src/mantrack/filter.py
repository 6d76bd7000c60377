"""Maneuver-tolerant tracking filter.

Each measurement gap goes through the same loop: sample states from the
posterior mixture, sample thrust profiles from a wide Laplace proposal and
weight them, propagate with multi-fidelity collocation, regularize into a
Gaussian mixture, then update every component with an iterated batch over
the pass.
"""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from mantrack import constants as K
from mantrack.dynamics import ForceModelConfig, propagate_ensemble
from mantrack.engmf import CanonicalScaler, GaussianMixture, regularize
from mantrack.laplace import ProposalMixture, log_importance_weight, mixture_sample
from mantrack.measurement import (
    MeasurementPass, GroundStation, ibls_update, measurement_function, measurement_partials,
    pass_weight_update, prune, station_inertial, thrust_prior_variance,
)
from mantrack.mfcolloc import (
    RankDeficientWarning, canonical_scale, coefficients, mf_propagate_ensemble, select_nodes,
    stack_snapshots, synthesize_correction, unstack,
)

log = logging.getLogger(__name__)


class PriorConstructionError(RuntimeError):
    pass


@dataclass
class FilterConfig:
    N: int = 2500
    k: int = 99
    sigma: float = 50e-9  # assumed thrust std per axis [km/s^2]
    sigma_max: float = 800e-9
    n_components: int = 9
    alpha0: float = 0.3
    r: int = 50  # collocation nodes
    prune_ratio: float = 1e-10
    iterations: int = 10
    damping: float = 0.7
    constant_thrust: bool = True  # one segment per gap
    repeat_within_gap: bool = False
    repeat_every: int = 4
    frame: str = "ric"
    tol: float = 1e-10
    fd_step: float = 1e-6  # canonical units
    joint_likelihood: bool = False
    low: ForceModelConfig = field(default_factory=ForceModelConfig.low_fidelity)
    high: ForceModelConfig = field(default_factory=ForceModelConfig.high_fidelity)

    def __post_init__(self):
        if not self.N > self.k >= 2:
            raise ValueError("need N > k >= 2")
        if not 0 < self.prune_ratio < 1:
            raise ValueError("prune ratio must lie in (0, 1)")

    def proposal(self, d: int) -> ProposalMixture:
        return ProposalMixture.default(self.sigma, self.sigma_max, d, self.n_components, self.alpha0)

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("low", "high")}
        d["high_degree"] = self.high.gravity_degree
        return d


def segment_count(dt: float, a: float, mu: float = K.MU_EARTH) -> int:
    """About four thrust segments per orbit: floor(4 dt n / 2 pi), at least one."""
    if dt <= 0 or a <= 0:
        raise ValueError("need positive gap and semi-major axis")
    return max(1, int(math.floor(4.0 * dt / (2.0 * math.pi) * math.sqrt(mu / a**3))))


def semi_major_axis(x, mu: float = K.MU_EARTH) -> float:
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x[:3])
    v2 = float(x[3:6] @ x[3:6])
    return 1.0 / (2.0 / r - v2 / mu)


@dataclass
class PosteriorMixture:
    mixture: GaussianMixture
    epoch: float

    @property
    def mean(self) -> np.ndarray:
        return self.mixture.mean()

    @property
    def cov(self) -> np.ndarray:
        return self.mixture.covariance()

    @classmethod
    def gaussian(cls, mean, cov, epoch: float) -> "PosteriorMixture":
        return cls(GaussianMixture(np.asarray(mean, float)[None], np.asarray(cov, float)[None], np.ones(1)), epoch)


@dataclass
class ThrustSamples:
    bounds: np.ndarray  # nseg + 1 epochs
    accel: np.ndarray  # (N, nseg, 3)
    log_weights: np.ndarray
    n_unique: int  # independent segments per profile


def gap_grid(t0: float, t1: float, x_ref, cfg: FilterConfig):
    """Segment boundaries over a gap and the number of independent segments."""
    if cfg.constant_thrust:
        return np.array([t0, t1]), 1
    n = segment_count(t1 - t0, semi_major_axis(x_ref, cfg.low.mu), cfg.low.mu)
    n_unique = min(cfg.repeat_every, n) if cfg.repeat_within_gap else n
    return np.linspace(t0, t1, n + 1), n_unique


def sample_thrust(t0: float, t1: float, x_ref, cfg: FilterConfig, rng: np.random.Generator,
                  n: int | None = None) -> ThrustSamples:
    n = cfg.N if n is None else n
    bounds, n_unique = gap_grid(t0, t1, x_ref, cfg)
    nseg = bounds.size - 1
    p = cfg.proposal(3 * n_unique)
    t, _ = mixture_sample(p, rng, n)
    lw = log_importance_weight(t, p)
    # repeat the unique segments cyclically across the gap
    t = t.reshape(n, n_unique, 3)
    accel = t[:, np.arange(nseg) % n_unique, :]
    return ThrustSamples(bounds, accel, lw, n_unique)


@dataclass
class TransitionalPrior:
    mixture: GaussianMixture
    epoch: float
    thrust: ThrustSamples
    particles: np.ndarray
    kept: np.ndarray  # particle indices that became mixture components
    log_weights: np.ndarray | None = None  # normalised, per component

    @property
    def kept_thrust(self) -> np.ndarray:
        return self.thrust.accel[self.kept, : self.thrust.n_unique, :]


def build_transitional_prior(post: PosteriorMixture, t_next: float, cfg: FilterConfig,
                             rng: np.random.Generator, thrust: ThrustSamples | None = None,
                             regularize_kernels: bool = True) -> TransitionalPrior:
    """Sample, weight, propagate and regularize the ensemble up to ``t_next``."""
    if not t_next > post.epoch:
        raise ValueError("next pass must start after the posterior epoch")
    X0 = post.mixture.sample(rng, cfg.N)
    if thrust is None:
        thrust = sample_thrust(post.epoch, t_next, post.mean, cfg, rng)
    res = mf_propagate_ensemble(X0, post.epoch, [t_next], cfg.low, cfg.high, min(cfg.r, cfg.N),
                                accel=thrust.accel, bounds=thrust.bounds, frame=cfg.frame, tol=cfg.tol)
    Xf = res.states[:, -1]
    lw = np.where(res.valid, thrust.log_weights, -np.inf)
    if not np.any(np.isfinite(lw)):
        raise PriorConstructionError("prior construction failed")
    # keep every valid particle: a weight that underflows here can still win
    # once the pass likelihood is applied
    ok = np.isfinite(lw)
    lv = lw[ok] - logsumexp(lw[ok])
    Xv, wv = Xf[ok], np.exp(lv)
    if regularize_kernels:
        k = min(cfg.k, Xv.shape[0] - 1)
        mix = regularize(Xv, wv, k, CanonicalScaler(cfg.low.Re, cfg.low.mu))
    else:
        mix = GaussianMixture(Xv.copy(), np.zeros((Xv.shape[0], 6, 6)), wv)
    return TransitionalPrior(mix, t_next, thrust, Xf, np.flatnonzero(ok), lv)


class PassModel:
    """Predicted measurements and anchor-mapped partials over a pass.

    Nominal trajectories are corrected by collocation on the nominal
    low-fidelity outputs; STMs use central differences of the low-fidelity
    model. ``freeze_after_build`` keeps the first interpolant for every later
    call.
    """

    def __init__(self, ps: MeasurementPass, cfg: FilterConfig, stations: dict[int, GroundStation],
                 freeze_after_build: bool = False):
        self.cfg = cfg
        self.epochs = ps.epochs
        self.t0 = float(self.epochs[0])
        rs, vs = [], []
        for m in ps.measurements:
            r, v = station_inertial(stations[m.station_id], m.epoch, cfg.low.earth_rotation_rate)
            rs.append(r)
            vs.append(v)
        self.rs, self.vs = np.array(rs), np.array(vs)
        self.freeze = freeze_after_build
        self.interp = None
        scale = canonical_scale(cfg.low.mu, cfg.low.Re)
        acc_unit = cfg.low.mu / cfg.low.Re**2
        self.step = cfg.fd_step * np.concatenate([scale, np.full(3, acc_unit)])
        self.scale = scale
        self.calls = 0
        self.last_chi = None
        self.last_end = None

    def _low(self, chi: np.ndarray):
        n = chi.shape[0]
        p = chi.shape[1]
        eye = np.eye(p) * self.step
        pert = np.concatenate([chi[:, None, :], chi[:, None, :] + eye[None], chi[:, None, :] - eye[None]], axis=1)
        flat = pert.reshape(-1, p)
        t_end = float(self.epochs[-1])
        if t_end > self.t0:
            acc = flat[:, None, 6:9]
            bounds = np.array([self.t0, t_end])
            _, out, status = propagate_ensemble(flat[:, :6], self.t0, self.epochs, self.cfg.low, acc, bounds,
                                                self.cfg.frame, self.cfg.tol)
            states = np.concatenate([flat[:, None, :6], out], axis=1)
        else:
            states = flat[:, None, :6].copy()
            status = np.zeros(flat.shape[0], dtype=int)
        states = states.reshape(n, 2 * p + 1, -1, 6)
        status = status.reshape(n, 2 * p + 1).max(axis=1)
        F = (states[:, 1:p + 1] - states[:, p + 1:]) / (2.0 * self.step)[None, :, None, None]
        F = np.transpose(F, (0, 2, 3, 1))  # (n, m, 6, p)
        return states[:, 0], F, status

    def _correct(self, chi: np.ndarray, low: np.ndarray, status: np.ndarray) -> np.ndarray:
        ids = np.flatnonzero(status == 0)
        out = low.copy()
        if ids.size == 0 or self.cfg.r <= 0:
            return out
        XL = stack_snapshots(low[ids], self.scale)
        if self.interp is None or not self.freeze:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RankDeficientWarning)
                interp = select_nodes(XL, min(self.cfg.r, ids.size))
            nodes = chi[ids[interp.node_ids]]
            t_end = float(self.epochs[-1])
            if t_end > self.t0:
                _, high, _ = propagate_ensemble(nodes[:, :6], self.t0, self.epochs, self.cfg.high,
                                                nodes[:, None, 6:9], np.array([self.t0, t_end]),
                                                self.cfg.frame, self.cfg.tol)
                high = np.concatenate([nodes[:, None, :6], high], axis=1)
            else:
                high = nodes[:, None, :6].copy()
            interp.node_high_outputs = stack_snapshots(high, self.scale)
            self.interp = interp
        c = coefficients(self.interp, XL)
        # additive form: iterates move off the node span of a held interpolant
        out[ids] = unstack(synthesize_correction(self.interp, c, XL), low.shape[1], self.scale)
        return out

    def __call__(self, chi: np.ndarray):
        chi = np.atleast_2d(chi)
        low, F, status = self._low(chi)
        xs = self._correct(chi, low, status)
        ybar = measurement_function(xs, self.rs[None], self.vs[None])
        Hx = measurement_partials(xs, self.rs[None], self.vs[None])
        HF = np.einsum("nmij,nmjp->nmip", Hx, F)
        self.calls += 1
        self.last_chi = chi.copy()
        self.last_end = (xs[:, -1].copy(), F[:, -1].copy())
        self.last_status = status
        return ybar, HF


@dataclass
class PassDiagnostics:
    pass_index: int
    start: float
    end: float
    n_measurements: int
    n_prior: int
    n_survivors: int
    max_weight: float
    ess: float
    status: str
    mean_nis: float
    seconds: float


def _augmented_prior(prior: GaussianMixture, Qp: np.ndarray):
    n = len(prior)
    chi = np.concatenate([prior.means, np.zeros((n, 3))], axis=1)
    P = np.zeros((n, 9, 9))
    P[:, :6, :6] = prior.covs
    P[:, 6:, 6:] = Qp
    return chi, P


def _propagated_cov(F, P):
    cov = np.einsum("nij,njk,nlk->nil", F, P, F)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def process_pass(prior: GaussianMixture, thrust: np.ndarray, ps: MeasurementPass, cfg: FilterConfig,
                 stations: dict[int, GroundStation], index: int = 0,
                 log_weights: np.ndarray | None = None) -> tuple[PosteriorMixture, PassDiagnostics]:
    """Weight, prune and iterate the batch update for every component of ``prior``.

    ``thrust`` is (n, n_segments, 3): each component's sampled gap thrust,
    which sets its thrust prior variance for the pass. ``log_weights``
    overrides the log of the prior weights.
    """
    t_start = time.perf_counter()
    n0 = len(prior)
    Qp = np.array([thrust_prior_variance(a) for a in thrust])
    chi, P = _augmented_prior(prior, Qp)
    y = ps.y
    R = ps.R
    model1 = PassModel(ps, cfg, stations)
    ybar, HF = model1(chi)
    wu = pass_weight_update(prior.weights, ybar, y, HF, P, R, joint=cfg.joint_likelihood,
                            log_prior_weights=log_weights)
    if wu.status != "ok":
        log.warning("pass %d rejected; propagating the prior ballistically", index)
        xe, Fe = model1.last_end
        ce = _propagated_cov(Fe, P)
        post = GaussianMixture(xe, ce, prior.weights / prior.weights.sum())
        diag = PassDiagnostics(index, ps.start, ps.end, len(ps), n0, n0, float(post.weights.max()), 0.0,
                               "pass rejected", math.nan, time.perf_counter() - t_start)
        return PosteriorMixture(post, ps.end), diag
    keep = prune(wu.weights, cfg.prune_ratio)
    w = wu.weights[keep] / wu.weights[keep].sum()
    model2 = PassModel(ps, cfg, stations, freeze_after_build=True)
    res = ibls_update(chi[keep], P[keep], y, R, model1, iterations=cfg.iterations, damping=cfg.damping,
                      first=(ybar[keep], HF[keep]), model_after_first=model2)
    last = model2 if cfg.iterations > 0 else model1
    xe, Fe = last.last_end
    same = last.last_chi is not None and last.last_chi.shape == res.mean.shape and np.array_equal(last.last_chi, res.mean)
    if not same:
        last(res.mean)
        xe, Fe = last.last_end
    good = (res.status != 1) & (last.last_status == 0)
    if not np.any(good):
        good = np.ones(keep.size, dtype=bool)
    cov = _propagated_cov(Fe, res.cov)
    wg = w[good] / w[good].sum()
    post = GaussianMixture(xe[good], cov[good], wg)
    nis = float(np.mean(res.cost[good] / (4 * len(ps)))) if np.any(good) else math.nan
    diag = PassDiagnostics(index, ps.start, ps.end, len(ps), n0, int(good.sum()), float(wg.max()),
                           float(1.0 / np.sum(wg**2)), "ok", nis, time.perf_counter() - t_start)
    return PosteriorMixture(post, ps.end), diag


@dataclass
class PassRecord:
    epoch: float
    mean: np.ndarray
    cov: np.ndarray
    n_components: int
    prior_mean: np.ndarray | None = None
    prior_cov: np.ndarray | None = None


@dataclass
class FilterHistory:
    records: list[PassRecord]
    diagnostics: list[PassDiagnostics]
    seconds: float = 0.0

    def diagnostics_json(self) -> str:
        return json.dumps([asdict(d) for d in self.diagnostics], indent=2)

    def write(self, path) -> None:
        Path(path).write_text(self.diagnostics_json())


def run(x0_mean, P0, passes: list[MeasurementPass], cfg: FilterConfig, rng_factory,
        stations: dict[int, GroundStation], t0: float = 0.0) -> FilterHistory:
    """Alternate transitional-prior construction and pass updates over all passes.

    ``rng_factory(pass_index)`` returns the generator for that gap, so runs
    are reproducible pass by pass.
    """
    t_start = time.perf_counter()
    post = PosteriorMixture.gaussian(x0_mean, P0, t0)
    records, diags = [], []
    for k, ps in enumerate(passes):
        rng = rng_factory(k)
        if ps.start > post.epoch:
            tp = build_transitional_prior(post, ps.start, cfg, rng)
            prior_mix, thrust, lw = tp.mixture, tp.kept_thrust, tp.log_weights
        else:
            # pass opens at the posterior epoch: no gap to bridge
            prior_mix, lw = post.mixture, None
            thrust = np.zeros((len(prior_mix), 1, 3))
        post, d = process_pass(prior_mix, thrust, ps, cfg, stations, k, log_weights=lw)
        diags.append(d)
        records.append(PassRecord(post.epoch, post.mean, post.cov, len(post.mixture),
                                  prior_mix.mean(), prior_mix.covariance()))
        log.info("pass %d: %d -> %d components, %.1f s", k, d.n_prior, d.n_survivors, d.seconds)
    return FilterHistory(records, diags, time.perf_counter() - t_start)
