"""Orbit propagation with piecewise-constant thrust."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from mantrack import constants as K
from mantrack.dynamics import _kernels
from mantrack.dynamics.gravity import unnormalized_coefficients


class PropagationError(RuntimeError):
    """Raised when an orbit cannot be propagated."""


@dataclass(frozen=True)
class InertialState:
    r: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, x, t: float = 0.0) -> "InertialState":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:6], t)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])


@dataclass(frozen=True)
class ThrustProfile:
    """Piecewise-constant thrust.

    ``bounds`` holds the n+1 segment boundary epochs, ``accel`` the (n, 3)
    accelerations in km/s^2. ``frame`` is ``"ric"`` (rotating with the
    orbit) or ``"inertial"``.
    """

    bounds: np.ndarray
    accel: np.ndarray
    frame: str = "ric"

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float).ravel()
        a = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if b.size == 0:
            if a.shape[0]:
                raise ValueError("thrust accelerations without boundaries")
        else:
            if a.shape[0] != b.size - 1:
                raise ValueError("need len(bounds) == n_segments + 1")
            if np.any(np.diff(b) <= 0):
                raise ValueError("thrust segments must have t_start < t_end")
        if self.frame not in ("ric", "inertial"):
            raise ValueError(f"unknown thrust frame {self.frame!r}")
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "accel", a)

    @classmethod
    def none(cls) -> "ThrustProfile":
        return cls(np.empty(0), np.empty((0, 3)))

    @classmethod
    def uniform(cls, t0: float, tf: float, accel, frame: str = "ric") -> "ThrustProfile":
        a = np.asarray(accel, dtype=float).reshape(-1, 3)
        return cls(np.linspace(t0, tf, a.shape[0] + 1), a, frame)

    @property
    def n_segments(self) -> int:
        return self.accel.shape[0]

    @property
    def segments(self):
        return [(self.bounds[i], self.bounds[i + 1], self.accel[i]) for i in range(self.n_segments)]

    def at(self, t: float) -> np.ndarray:
        if self.n_segments == 0 or t < self.bounds[0] or t >= self.bounds[-1]:
            return np.zeros(3)
        return self.accel[np.searchsorted(self.bounds, t, side="right") - 1]

    def window(self, t0: float, tf: float) -> "ThrustProfile":
        """Restrict to [t0, tf], splitting segments at the window edges."""
        if self.n_segments == 0 or tf <= self.bounds[0] or t0 >= self.bounds[-1]:
            return ThrustProfile(np.array([t0, tf]), np.zeros((1, 3)), self.frame)
        inner = self.bounds[(self.bounds > t0) & (self.bounds < tf)]
        b = np.concatenate([[t0], inner, [tf]])
        mids = 0.5 * (b[:-1] + b[1:])
        a = np.array([self.at(m) for m in mids])
        return ThrustProfile(b, a, self.frame)


@dataclass(frozen=True)
class ForceModelConfig:
    mu: float = K.MU_EARTH
    Re: float = K.R_EARTH
    gravity_degree: int = 0
    gravity_order: int = 0
    zonal_j2_only: bool = False
    third_bodies: tuple = ()
    drag: dict | None = None
    srp: dict | None = None
    earth_rotation_rate: float = K.OMEGA_EARTH
    epoch_jd: float = K.EPOCH_JD

    def __post_init__(self):
        if self.gravity_degree < 0 or self.gravity_order < 0:
            raise ValueError("gravity degree/order must be >= 0")
        for b in self.third_bodies:
            if b not in ("sun", "moon"):
                raise ValueError(f"unsupported third body {b!r}")

    @classmethod
    def two_body(cls) -> "ForceModelConfig":
        return cls()

    @classmethod
    def low_fidelity(cls) -> "ForceModelConfig":
        return cls(gravity_degree=2, gravity_order=0, zonal_j2_only=True)

    @classmethod
    def high_fidelity(cls, degree: int = 8) -> "ForceModelConfig":
        return cls(gravity_degree=degree, gravity_order=degree, third_bodies=("sun", "moon"))

    @classmethod
    def truth(cls, degree: int = 8, mass=500.0, area=1.0, cd=2.0, cr=1.5) -> "ForceModelConfig":
        # exponential atmosphere band at 700 km
        drag = {"cd": cd, "area": area, "mass": mass, "rho0": 3.614e-14, "h0": 700.0, "H": 88.667}
        srp = {"cr": cr, "area": area, "mass": mass}
        return cls(gravity_degree=degree, gravity_order=degree, third_bodies=("sun", "moon"),
                   drag=drag, srp=srp)

    @cached_property
    def _packed(self):
        p = np.zeros(_kernels.N_PARAMS)
        p[_kernels.P_MU] = self.mu
        p[_kernels.P_RE] = self.Re
        p[_kernels.P_OMEGA] = self.earth_rotation_rate
        p[_kernels.P_DEGREE] = self.gravity_degree
        p[_kernels.P_SUN] = 1.0 if "sun" in self.third_bodies else 0.0
        p[_kernels.P_MOON] = 1.0 if "moon" in self.third_bodies else 0.0
        p[_kernels.P_EPOCH_JD] = self.epoch_jd
        if self.drag:
            d = self.drag
            p[_kernels.P_CDAM] = d["cd"] * d["area"] / d["mass"]
            p[_kernels.P_RHO0] = d["rho0"]
            p[_kernels.P_H0] = d["h0"]
            p[_kernels.P_HSCALE] = d["H"]
        if self.srp:
            p[_kernels.P_CRAM] = self.srp["cr"] * self.srp["area"] / self.srp["mass"]
        p[_kernels.P_IMPACT] = self.Re
        zonal = self.zonal_j2_only and self.gravity_degree == 2
        p[_kernels.P_ZONAL] = 1.0 if zonal else 0.0
        if self.gravity_degree > 0:
            C, S = unnormalized_coefficients(self.gravity_degree, self.gravity_order,
                                             zonal_only_j2=self.zonal_j2_only)
        else:
            C = np.ones((1, 1))
            S = np.zeros((1, 1))
        return p, C, S

    def packed(self, ric: bool = True):
        p, C, S = self._packed
        p = p.copy()
        p[_kernels.P_RIC] = 1.0 if ric else 0.0
        return p, C, S

    def with_coefficients(self, C: np.ndarray, S: np.ndarray) -> "_CustomField":
        return _CustomField(self, np.asarray(C, float), np.asarray(S, float))


@dataclass(frozen=True)
class _CustomField:
    """Force model with explicitly supplied unnormalized coefficients (tests)."""

    base: ForceModelConfig
    C: np.ndarray
    S: np.ndarray
    mu: float = field(init=False)
    Re: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "mu", self.base.mu)
        object.__setattr__(self, "Re", self.base.Re)

    def packed(self, ric: bool = True):
        p, _, _ = self.base.packed(ric)
        p = p.copy()
        p[_kernels.P_DEGREE] = self.C.shape[0] - 1
        p[_kernels.P_ZONAL] = 0.0
        return p, self.C, self.S


@dataclass(frozen=True)
class Trajectory:
    epochs: np.ndarray
    states: np.ndarray  # (k, 6)

    def state(self, i: int) -> InertialState:
        return InertialState.from_vector(self.states[i], float(self.epochs[i]))

    def __len__(self):
        return len(self.epochs)

    def at(self, t: float) -> np.ndarray:
        i = int(np.flatnonzero(np.isclose(self.epochs, t, rtol=0, atol=1e-9))[0])
        return self.states[i]


def _check_state(x: np.ndarray, cfg) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid state")
    if np.linalg.norm(x[:3]) <= cfg.Re / 2:
        raise ValueError("subsurface state")


def acceleration(state: InertialState, cfg: ForceModelConfig) -> np.ndarray:
    """Total non-thrust acceleration [km/s^2] at ``state``."""
    y = state.vector
    _check_state(y, cfg)
    p, C, S = cfg.packed()
    out = np.empty(3)
    _kernels.total_accel(float(state.t), y, p, C, S, out)
    return out


def ric_frame(state: InertialState) -> np.ndarray:
    """Rotation whose columns are the radial, in-track and cross-track unit vectors."""
    r, v = state.r, state.v
    rn = np.linalg.norm(r)
    h = np.cross(r, v)
    hn = np.linalg.norm(h)
    if rn == 0 or hn <= 1e-12 * rn * max(np.linalg.norm(v), 1e-300):
        raise ValueError("degenerate orbit frame")
    R = r / rn
    C = h / hn
    I = np.cross(C, R)
    return np.column_stack([R, I, C])


def ric_frames(X: np.ndarray) -> np.ndarray:
    """Vectorised :func:`ric_frame` for (n, 6) states -> (n, 3, 3)."""
    r = X[:, :3]
    h = np.cross(r, X[:, 3:6])
    R = r / np.linalg.norm(r, axis=1, keepdims=True)
    C = h / np.linalg.norm(h, axis=1, keepdims=True)
    I = np.cross(C, R)
    return np.stack([R, I, C], axis=2)


def _stop_plan(t0: float, epochs, bounds: np.ndarray):
    epochs = np.asarray(epochs, dtype=float).ravel()
    inner = bounds[(bounds > t0) & (bounds <= epochs.max())] if bounds.size else np.empty(0)
    stops = np.unique(np.concatenate([epochs[epochs > t0], inner]))
    if bounds.size:
        seg = np.searchsorted(bounds, stops, side="left") - 1
        # interval (stops[j-1], stops[j]] lies inside segment seg if 0 <= seg < nseg
        seg = np.where((seg >= 0) & (seg < bounds.size - 1), seg, -1)
    else:
        seg = np.full(stops.size, -1)
    return stops, seg.astype(np.int64)


def propagate_ensemble(X0: np.ndarray, t0: float, epochs, cfg, accel=None, bounds=None,
                       frame: str = "ric", tol: float = 1e-10):
    """Propagate an (n, 6) ensemble sharing one thrust segment grid.

    ``accel`` is (n, nseg, 3) or None; ``bounds`` the common nseg+1 segment
    epochs. Returns ``(stops, states (n, k, 6), status (n,))`` where ``stops``
    are all requested epochs > t0 merged with the segment boundaries, and
    status is 0 for success, 1 for impact, 2 for step underflow.
    """
    X0 = np.ascontiguousarray(np.atleast_2d(X0), dtype=float)
    n = X0.shape[0]
    bounds = np.empty(0) if bounds is None else np.asarray(bounds, dtype=float)
    if accel is None or bounds.size == 0:
        acc = np.zeros((n, 1, 3))
        bounds = np.empty(0)
    else:
        acc = np.ascontiguousarray(np.broadcast_to(np.asarray(accel, float), (n, bounds.size - 1, 3)))
    stops, seg = _stop_plan(t0, epochs, bounds)
    if stops.size == 0:
        return stops, np.empty((n, 0, 6)), np.zeros(n, dtype=np.int64)
    p, C, S = cfg.packed(ric=(frame == "ric"))
    out, status, _ = _kernels.integrate_ensemble(X0, float(t0), stops, seg, acc, p, C, S,
                                                 float(tol), float(tol), 30.0)
    return stops, out, status


def propagate(x0: InertialState, thrust: ThrustProfile | None, tf: float, cfg,
              tol: float = 1e-10, epochs=None) -> Trajectory:
    """Propagate one state to ``tf``.

    The trajectory contains t0, every thrust-segment boundary in (t0, tf],
    any extra ``epochs`` and ``tf``.
    """
    t0 = float(x0.t)
    if tf < t0:
        raise ValueError("tf must not precede the initial epoch")
    y0 = x0.vector
    _check_state(y0, cfg)
    if tf == t0:
        return Trajectory(np.array([t0]), y0[None, :].copy())
    thrust = thrust or ThrustProfile.none()
    if thrust.n_segments and (thrust.bounds[0] < t0 - 1e-9 or thrust.bounds[-1] > tf + 1e-9):
        raise ValueError("thrust segments extend beyond the propagation window")
    req = np.asarray([tf] if epochs is None else list(epochs) + [tf], dtype=float)
    stops, out, status = propagate_ensemble(
        y0[None, :], t0, req, cfg,
        accel=thrust.accel[None] if thrust.n_segments else None,
        bounds=thrust.bounds if thrust.n_segments else None,
        frame=thrust.frame, tol=tol)
    if status[0] == _kernels.STATUS_IMPACT:
        raise PropagationError("impact")
    if status[0] != _kernels.STATUS_OK:
        raise PropagationError("propagation failed")
    return Trajectory(np.concatenate([[t0], stops]), np.vstack([y0[None, :], out[0]]))


def stm_finite_difference(x0: InertialState, thrust: ThrustProfile | None, epochs, cfg,
                          step, tol: float = 1e-12) -> list[np.ndarray]:
    """Central-difference 6x6 STMs from ``x0`` to each epoch, thrust held fixed."""
    step = np.asarray(step, dtype=float).reshape(6)
    if np.any(step <= 0):
        raise ValueError("finite-difference steps must be positive")
    epochs = np.asarray(epochs, dtype=float).ravel()
    t0 = float(x0.t)
    y0 = x0.vector
    X = np.empty((12, 6))
    for j in range(6):
        X[2 * j] = y0
        X[2 * j + 1] = y0
        X[2 * j, j] += step[j]
        X[2 * j + 1, j] -= step[j]
    thrust = thrust or ThrustProfile.none()
    later = epochs[epochs > t0]
    if later.size:
        stops, out, status = propagate_ensemble(
            X, t0, later, cfg,
            accel=thrust.accel[None] if thrust.n_segments else None,
            bounds=thrust.bounds if thrust.n_segments else None,
            frame=thrust.frame, tol=tol)
        if np.any(status != 0):
            raise PropagationError("propagation failed")
    result = []
    for t in epochs:
        if t <= t0:
            result.append(np.eye(6))
            continue
        k = int(np.searchsorted(stops, t))
        F = np.empty((6, 6))
        for j in range(6):
            F[:, j] = (out[2 * j, k] - out[2 * j + 1, k]) / (2 * step[j])
        result.append(F)
    return result
