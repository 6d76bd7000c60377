"""Radar measurement model, station geometry and the per-pass batch update.

Measurements are y = (range, range-rate, right ascension, declination) of
the target relative to a ground station on a uniformly rotating spherical
Earth. Angles are stored in radians.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from mantrack import constants as K

log = logging.getLogger(__name__)

EPS_Q = 1e-12**2  # floor on the per-axis thrust prior variance [(km/s^2)^2]


def radar_noise(range_km=0.1, range_rate_kms=0.003, ra_deg=0.15, dec_deg=0.15) -> np.ndarray:
    """Diagonal R with the angle standard deviations converted from degrees once."""
    sd = np.array([range_km, range_rate_kms, math.radians(ra_deg), math.radians(dec_deg)])
    return np.diag(sd * sd)


@dataclass(frozen=True)
class GroundStation:
    latitude: float  # rad
    longitude: float  # rad
    radius: float = K.R_EARTH
    id: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("station radius must be positive")

    @classmethod
    def from_degrees(cls, lat_deg, lon_deg, radius=K.R_EARTH, id=0) -> "GroundStation":
        return cls(math.radians(lat_deg), math.radians(lon_deg), radius, id)

    @property
    def body_fixed(self) -> np.ndarray:
        cl = math.cos(self.latitude)
        return self.radius * np.array([cl * math.cos(self.longitude), cl * math.sin(self.longitude),
                                       math.sin(self.latitude)])


def default_network() -> list[GroundStation]:
    return [GroundStation.from_degrees(lat, 83.65, id=i) for i, lat in enumerate((44.77, 0.0, -44.77))]


def station_inertial(station: GroundStation, epoch, omega: float = K.OMEGA_EARTH, theta0: float = 0.0):
    """Inertial position and velocity of a station; vectorised over epochs."""
    ep = np.asarray(epoch, dtype=float)
    th = theta0 + omega * ep
    c, s = np.cos(th), np.sin(th)
    b = station.body_fixed
    r = np.stack([c * b[0] - s * b[1], s * b[0] + c * b[1], np.broadcast_to(b[2], th.shape)], axis=-1)
    v = np.stack([-omega * r[..., 1], omega * r[..., 0], np.zeros(th.shape)], axis=-1)
    return r, v


@dataclass(frozen=True)
class RadarMeasurement:
    epoch: float
    station_id: int
    y: np.ndarray
    R: np.ndarray = field(default_factory=radar_noise)


@dataclass
class MeasurementPass:
    measurements: list[RadarMeasurement]

    def __post_init__(self):
        if not self.measurements:
            raise ValueError("a pass needs at least one measurement")
        ep = [m.epoch for m in self.measurements]
        if any(b <= a for a, b in zip(ep, ep[1:])):
            raise ValueError("pass epochs must be strictly increasing")

    def __len__(self):
        return len(self.measurements)

    @property
    def epochs(self) -> np.ndarray:
        return np.array([m.epoch for m in self.measurements])

    @property
    def start(self) -> float:
        return self.measurements[0].epoch

    @property
    def end(self) -> float:
        return self.measurements[-1].epoch

    @property
    def y(self) -> np.ndarray:
        return np.array([m.y for m in self.measurements])

    @property
    def station_ids(self) -> np.ndarray:
        return np.array([m.station_id for m in self.measurements], dtype=int)

    @property
    def R(self) -> np.ndarray:
        return np.array([m.R for m in self.measurements])


def _relative(x, rs, vs):
    x = np.asarray(x, dtype=float)
    return x[..., :3] - rs, x[..., 3:6] - vs


def measurement_function(x, rs, vs) -> np.ndarray:
    """h(x) for states (..., 6) relative to station position/velocity (..., 3)."""
    rho, rhod = _relative(x, rs, vs)
    rng = np.linalg.norm(rho, axis=-1)
    if np.any(rng == 0):
        raise ValueError("target coincides with station")
    rr = np.sum(rho * rhod, axis=-1) / rng
    ra = np.arctan2(rho[..., 1], rho[..., 0])
    dec = np.arcsin(np.clip(rho[..., 2] / rng, -1.0, 1.0))
    return np.stack([rng, rr, ra, dec], axis=-1)


def measurement_partials(x, rs, vs) -> np.ndarray:
    """(..., 4, 6) partials of h with respect to position and velocity."""
    rho, rhod = _relative(x, rs, vs)
    rng = np.linalg.norm(rho, axis=-1)
    u = rho / rng[..., None]
    rr = np.sum(u * rhod, axis=-1)
    rxy2 = rho[..., 0] ** 2 + rho[..., 1] ** 2
    if np.any(rxy2 <= 1e-18 * rng**2):
        raise ValueError("angle singularity")
    rxy = np.sqrt(rxy2)
    H = np.zeros(rho.shape[:-1] + (4, 6))
    H[..., 0, :3] = u
    H[..., 1, :3] = (rhod - rr[..., None] * u) / rng[..., None]
    H[..., 1, 3:] = u
    H[..., 2, 0] = -rho[..., 1] / rxy2
    H[..., 2, 1] = rho[..., 0] / rxy2
    r2 = rng**2
    H[..., 3, 0] = -rho[..., 0] * rho[..., 2] / (r2 * rxy)
    H[..., 3, 1] = -rho[..., 1] * rho[..., 2] / (r2 * rxy)
    H[..., 3, 2] = rxy / r2
    return H


def measure(state, station: GroundStation, epoch: float, R=None, rng: np.random.Generator | None = None,
            omega: float = K.OMEGA_EARTH) -> RadarMeasurement:
    """Geometric radar measurement of a 6-vector state, noisy when ``rng`` is given."""
    R = radar_noise() if R is None else np.asarray(R, dtype=float)
    rs, vs = station_inertial(station, epoch, omega)
    y = measurement_function(np.asarray(state, dtype=float), rs, vs)
    if rng is not None:
        y = y + np.linalg.cholesky(R) @ rng.standard_normal(4)
        y[2] = (y[2] + math.pi) % (2 * math.pi) - math.pi
    return RadarMeasurement(float(epoch), station.id, y, R)


def measurement_jacobian(state, station: GroundStation, epoch: float, omega: float = K.OMEGA_EARTH) -> np.ndarray:
    """4x9 Jacobian over the augmented state; thrust columns are zero."""
    rs, vs = station_inertial(station, epoch, omega)
    H = np.zeros((4, 9))
    H[:, :6] = measurement_partials(np.asarray(state, dtype=float)[:6], rs, vs)
    return H


def elevation(state, station: GroundStation, epoch, omega: float = K.OMEGA_EARTH) -> np.ndarray:
    rs, _ = station_inertial(station, epoch, omega)
    rho = np.asarray(state, dtype=float)[..., :3] - rs
    up = rs / np.linalg.norm(rs, axis=-1, keepdims=True)
    return np.arcsin(np.clip(np.sum(rho * up, axis=-1) / np.linalg.norm(rho, axis=-1), -1.0, 1.0))


def visibility(state, station: GroundStation, epoch, min_elevation: float = 0.0,
               omega: float = K.OMEGA_EARTH):
    """True where the target is at or above ``min_elevation`` (inclusive)."""
    rs, _ = station_inertial(station, epoch, omega)
    rho = np.asarray(state, dtype=float)[..., :3] - rs
    up = rs / np.linalg.norm(rs, axis=-1, keepdims=True)
    s = np.sum(rho * up, axis=-1)
    n = np.linalg.norm(rho, axis=-1)
    # compare sines to keep the horizon boundary exact
    vis = s >= n * math.sin(min_elevation) if min_elevation != 0.0 else s >= 0.0
    return bool(vis) if np.ndim(vis) == 0 else vis


def wrap_residual(res: np.ndarray) -> np.ndarray:
    """Wrap the right-ascension residual into [-pi, pi)."""
    res = np.array(res, dtype=float, copy=True)
    res[..., 2] = (res[..., 2] + math.pi) % (2 * math.pi) - math.pi
    return res


def pass_log_likelihood(ybar, y, HF, P, R) -> np.ndarray:
    """Log of the pass likelihood for each component.

    ybar: (n, m, 4) predicted measurements; y: (m, 4); HF: (n, m, 4, p)
    partials mapped to the pass-start anchor; P: (n, p, p) anchor covariance;
    R: (4, 4) or (m, 4, 4).
    """
    ybar = np.asarray(ybar, dtype=float)
    n, m, q = ybar.shape
    R = np.broadcast_to(np.asarray(R, dtype=float), (m, q, q))
    S = np.einsum("nmij,njk,nmlk->nmil", HF, P, HF) + R[None]
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    res = wrap_residual(np.asarray(y, dtype=float)[None] - ybar)
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, res[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    ll = -0.5 * (np.sum(z * z, axis=-1) + logdet + q * math.log(2 * math.pi))
    return ll.sum(axis=1)


def pass_log_likelihood_joint(ybar, y, HF, P, R) -> np.ndarray:
    """Log pass likelihood with the prior correlation between measurements kept.

    The stacked innovation covariance is H P H^T + blockdiag(R), so a state
    offset shared by every measurement of the pass is counted once.
    """
    ybar = np.asarray(ybar, dtype=float)
    n, m, q = ybar.shape
    R = np.broadcast_to(np.asarray(R, dtype=float), (m, q, q))
    H = np.asarray(HF, dtype=float).reshape(n, m * q, -1)
    S = np.einsum("nij,njk,nlk->nil", H, P, H)
    idx = np.arange(m * q).reshape(m, q)
    for j in range(m):
        S[:, idx[j][:, None], idx[j][None, :]] += R[j]
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    res = wrap_residual(np.asarray(y, dtype=float)[None] - ybar).reshape(n, m * q)
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, res[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (np.sum(z * z, axis=-1) + logdet + m * q * math.log(2 * math.pi))


@dataclass
class WeightUpdate:
    weights: np.ndarray
    log_likelihood: np.ndarray
    status: str = "ok"


def pass_weight_update(prior_weights, ybar, y, HF, P, R, joint: bool = False,
                       log_prior_weights=None) -> WeightUpdate:
    """Multiply prior weights by the Gaussian pass likelihoods in log space and normalise.

    ``log_prior_weights``, when given, replaces ``log(prior_weights)`` so that
    prior weights far below double-precision range still compete.
    """
    w0 = np.asarray(prior_weights, dtype=float)
    ll = (pass_log_likelihood_joint if joint else pass_log_likelihood)(ybar, y, HF, P, R)
    with np.errstate(divide="ignore"):
        lw = (np.log(w0) if log_prior_weights is None else np.asarray(log_prior_weights, float)) + ll
    top = np.max(lw) if lw.size else -np.inf
    if not np.isfinite(top):
        return WeightUpdate(np.zeros_like(w0), ll, "pass rejected")
    w = np.exp(lw - top)
    return WeightUpdate(w / w.sum(), ll)


def prune(weights, ratio_threshold: float = 1e-10) -> np.ndarray:
    """Indices of components at or above ``ratio_threshold`` times the maximum weight."""
    w = np.asarray(weights, dtype=float)
    return np.flatnonzero(w >= ratio_threshold * w.max())


def prune_weights(weights, ratio_threshold: float = 1e-10):
    keep = prune(weights, ratio_threshold)
    w = np.asarray(weights, dtype=float)[keep]
    return keep, w / w.sum()


def thrust_prior_variance(accel, floor: float = EPS_Q) -> np.ndarray:
    """Isotropic 3x3 prior of the pass thrust: I t't / (3 n_segments), floored."""
    a = np.atleast_2d(np.asarray(accel, dtype=float))
    n = a.shape[0]
    if n < 1:
        raise ValueError("need at least one thrust segment")
    return np.eye(3) * max(float(np.sum(a * a)) / (3.0 * n), floor)


# pass model: chi (n, p) -> (ybar (n, m, 4), HF (n, m, 4, p))
PassModel = Callable[[np.ndarray], tuple]


@dataclass
class BatchResult:
    mean: np.ndarray  # (n, p) anchor estimate
    info: np.ndarray  # (n, p, p) information matrix at the final linearisation
    cov: np.ndarray  # (n, p, p)
    cost: np.ndarray
    status: np.ndarray  # 0 ok, 1 degenerate, 2 reverted to best iterate


def _batch_cost(dx, Pinv, res, Rinv):
    prior = np.einsum("ni,nij,nj->n", dx, Pinv, dx)
    meas = np.einsum("nmi,mij,nmj->n", res, Rinv, res)
    return prior + meas


def _normal_step(chi, chi_bar, Pinv, ybar, HF, y, Rinv):
    res = wrap_residual(y[None] - ybar)
    info = Pinv + np.einsum("nmip,mij,nmjq->npq", HF, Rinv, HF)
    rhs = np.einsum("npq,nq->np", Pinv, chi_bar - chi) + np.einsum("nmip,mij,nmj->np", HF, Rinv, res)
    return res, info, rhs


def _jacobi(A: np.ndarray) -> np.ndarray:
    d = np.diagonal(A, axis1=-2, axis2=-1)
    return 1.0 / np.sqrt(np.where(d > 0, d, 1.0))


def _scaled_inv(A: np.ndarray) -> np.ndarray:
    """Inverse of symmetric positive-definite matrices with widely spread diagonals."""
    s = _jacobi(A)
    return np.linalg.inv(A * s[..., :, None] * s[..., None, :]) * s[..., :, None] * s[..., None, :]


def ibls_update(chi_bar, P_bar, y, R, model: PassModel, iterations: int = 10, damping: float = 0.7,
                first: tuple | None = None, model_after_first: PassModel | None = None) -> BatchResult:
    """Damped Gauss-Newton batch over a pass, vectorised over components.

    ``model`` maps anchor states to predicted measurements and anchor-mapped
    partials. ``first`` optionally supplies the model output at ``chi_bar``
    (already computed for the weights). ``model_after_first`` replaces
    ``model`` from the second iteration on.
    """
    chi_bar = np.atleast_2d(np.asarray(chi_bar, dtype=float))
    n, p = chi_bar.shape
    y = np.asarray(y, dtype=float)
    m = y.shape[0]
    R = np.broadcast_to(np.asarray(R, dtype=float), (m, 4, 4))
    Rinv = np.linalg.inv(R)
    P_bar = 0.5 * (P_bar + np.swapaxes(P_bar, -1, -2))
    Pinv = _scaled_inv(P_bar)
    Pinv = 0.5 * (Pinv + np.swapaxes(Pinv, -1, -2))
    chi = chi_bar.copy()
    status = np.zeros(n, dtype=int)
    best = chi.copy()
    best_cost = np.full(n, np.inf)
    best_info = np.repeat(Pinv[:1] * 0, n, axis=0)
    rises = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    info = Pinv.copy()
    for it in range(iterations + 1):
        mdl = model if (it == 0 or model_after_first is None) else model_after_first
        if it == 0 and first is not None:
            ybar, HF = first
        else:
            ybar, HF = mdl(chi)
        res, info, rhs = _normal_step(chi, chi_bar, Pinv, ybar, HF, y, Rinv)
        cost = _batch_cost(chi - chi_bar, Pinv, res, Rinv)
        improved = cost < best_cost
        rises = np.where(improved, 0, rises + 1)
        upd = improved & active
        best[upd], best_cost[upd], best_info[upd] = chi[upd], cost[upd], info[upd]
        diverged = active & (rises >= 3)
        if np.any(diverged):
            log.warning("batch cost rose on %d components; reverting to best iterate", int(diverged.sum()))
            status[diverged] = 2
            active &= ~diverged
        if it == iterations or not np.any(active):
            break
        # thrust and state information differ by up to ~1e20; solve in Jacobi-scaled form
        sc = _jacobi(info)
        info_s = info * sc[:, :, None] * sc[:, None, :]
        try:
            delta = sc * np.linalg.solve(info_s, (sc * rhs)[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = np.zeros_like(rhs)
            for i in range(n):
                try:
                    delta[i] = sc[i] * np.linalg.solve(info_s[i], sc[i] * rhs[i])
                except np.linalg.LinAlgError:
                    status[i] = 1
                    active[i] = False
        chi = np.where(active[:, None], chi + damping * delta, chi)
    # final iterate unless reverted; the covariance comes from its own linearisation
    keep = status == 0
    mean = np.where(keep[:, None], chi, best)
    info_out = np.where(keep[:, None, None], info, best_info)
    info_out = 0.5 * (info_out + np.swapaxes(info_out, -1, -2))
    cov = np.full_like(info_out, np.nan)
    ok = status != 1
    if np.any(ok):
        cov[ok] = _scaled_inv(info_out[ok])
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return BatchResult(mean, info_out, cov, np.where(keep, cost, best_cost), status)


def write_measurements(path, passes: list[MeasurementPass]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch_s", "station_id", "range_km", "range_rate_kms", "ra_rad", "dec_rad", "pass"])
        for k, ps in enumerate(passes):
            for m in ps.measurements:
                w.writerow([repr(m.epoch), m.station_id] + [repr(float(v)) for v in m.y] + [k])


def read_measurements(path, R=None) -> list[MeasurementPass]:
    R = radar_noise() if R is None else R
    groups: dict[int, list[RadarMeasurement]] = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            y = np.array([float(row[c]) for c in ("range_km", "range_rate_kms", "ra_rad", "dec_rad")])
            m = RadarMeasurement(float(row["epoch_s"]), int(row["station_id"]), y, R)
            groups.setdefault(int(row.get("pass") or 0), []).append(m)
    return [MeasurementPass(groups[k]) for k in sorted(groups)]
