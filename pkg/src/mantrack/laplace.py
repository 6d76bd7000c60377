"""Zero-mean multivariate Laplace distribution and its importance-sampling mixture.

The density is

    f(t) = 2 / sqrt(|2 pi Q|) * (q / 2)^(v/2) * K_v(sqrt(2 q)),   q = t' Q^-1 t,

with v = (2 - d) / 2. All evaluation happens in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, kve, logsumexp


@dataclass(frozen=True)
class MvLaplace:
    Q: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T, rtol=1e-12, atol=0):
            raise ValueError("Q must be symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "_chol", np.linalg.cholesky(Q))

    @property
    def d(self) -> int:
        return self.Q.shape[0]

    @property
    def v(self) -> float:
        return (2.0 - self.d) / 2.0

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def mahalanobis(self, t) -> np.ndarray:
        """||t||_{Q^-1} for t of shape (d,) or (n, d)."""
        t = np.atleast_2d(np.asarray(t, dtype=float))
        z = np.linalg.solve(self._chol, t.T)
        return np.sqrt(np.sum(z * z, axis=0))

    def scaled(self, a: float) -> "MvLaplace":
        return MvLaplace(self.Q * a * a)


def log_bessel_k(v: float, z) -> np.ndarray:
    """log K_v(z) for z > 0.

    Half-integer orders use the terminating series
    K_{n+1/2}(z) = sqrt(pi / 2z) e^-z sum_k (n+k)! / (k! (n-k)! (2z)^k);
    other orders go through the exponentially scaled ``scipy.special.kve``.
    """
    z = np.asarray(z, dtype=float)
    v = abs(v)
    n = v - 0.5
    if abs(n - round(n)) < 1e-12:
        n = int(round(n))
        k = np.arange(n + 1)
        logc = gammaln(n + k + 1) - gammaln(k + 1) - gammaln(n - k + 1) - k * math.log(2.0)
        terms = logc[:, None] - k[:, None] * np.log(z.ravel())[None, :]
        s = logsumexp(terms, axis=0).reshape(z.shape)
        return 0.5 * math.log(math.pi / 2.0) - 0.5 * np.log(z) - z + s
    return np.log(kve(v, z)) - z


def ml_logpdf(t, dist: MvLaplace | np.ndarray) -> np.ndarray:
    """Log density of the zero-mean multivariate Laplace.

    Returns +inf at t = 0 when d >= 2, where the density is unbounded.
    """
    dist = dist if isinstance(dist, MvLaplace) else MvLaplace(dist)
    t = np.asarray(t, dtype=float)
    single = t.ndim == 0 or (t.ndim == 1 and t.size == dist.d)
    tt = t.reshape(-1, dist.d)
    m = dist.mahalanobis(tt)
    q = m * m
    d = dist.d
    v = dist.v
    out = np.empty(m.shape)
    pos = m > 0
    base = math.log(2.0) - 0.5 * (d * math.log(2 * math.pi) + dist.logdet)
    out[pos] = base + 0.5 * v * np.log(q[pos] / 2.0) + log_bessel_k(v, np.sqrt(2.0 * q[pos]))
    if d == 1:
        # K_{1/2}: f(0) = 1 / sqrt(2 Q)
        out[~pos] = -0.5 * math.log(2.0 * dist.Q[0, 0])
    else:
        out[~pos] = np.inf
    return float(out[0]) if single else out


def ml_sample(dist: MvLaplace | np.ndarray, rng: np.random.Generator, size: int | None = None,
              tau=None) -> np.ndarray:
    """Draw t = sqrt(tau) * r with tau ~ Exp(1), r ~ N(0, Q)."""
    dist = dist if isinstance(dist, MvLaplace) else MvLaplace(dist)
    n = 1 if size is None else size
    g = rng.standard_normal((n, dist.d)) @ dist._chol.T
    if tau is None:
        tau = rng.standard_exponential(n)
    t = np.sqrt(np.asarray(tau, dtype=float)).reshape(-1, 1) * g
    return t[0] if size is None else t


@dataclass(frozen=True)
class ProposalMixture:
    """Scale mixture of Laplace densities: component 0 is the base, i >= 1 use a_i^2 Q."""

    base: MvLaplace
    weights: np.ndarray  # alpha_0..alpha_n
    scales: np.ndarray  # a_1..a_n

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        a = np.asarray(self.scales, dtype=float).ravel()
        if w.size != a.size + 1:
            raise ValueError("need len(weights) == len(scales) + 1")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-12):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(a <= 0):
            raise ValueError("scales must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "scales", a)

    @property
    def all_scales(self) -> np.ndarray:
        return np.concatenate([[1.0], self.scales])

    @classmethod
    def default(cls, sigma: float, sigma_max: float, d: int, n_components: int = 9,
                alpha0: float = 0.3) -> "ProposalMixture":
        """Log-spaced scales from 1 to sigma_max / sigma; alpha0 on the base, rest equal."""
        base = MvLaplace(np.eye(d) * sigma**2)
        if n_components == 1 or sigma_max <= sigma:
            return cls(base, np.array([1.0]), np.empty(0))
        a = np.logspace(0.0, math.log10(sigma_max / sigma), n_components)[1:]
        w = np.concatenate([[alpha0], np.full(n_components - 1, (1.0 - alpha0) / (n_components - 1))])
        return cls(base, w, a)

    @classmethod
    def single(cls, dist: MvLaplace, scale: float = 1.0) -> "ProposalMixture":
        if scale == 1.0:
            return cls(dist, np.array([1.0]), np.empty(0))
        return cls(dist, np.array([0.0, 1.0]), np.array([scale]))


def mixture_sample(p: ProposalMixture, rng: np.random.Generator, size: int | None = None):
    """Sample (t, component_index); component 0 is the unscaled base."""
    n = 1 if size is None else size
    u = rng.random(n)
    idx = np.searchsorted(np.cumsum(p.weights), u, side="left")
    idx = np.minimum(idx, p.weights.size - 1)
    t = ml_sample(p.base, rng, n) * p.all_scales[idx][:, None]
    if size is None:
        return t[0], int(idx[0])
    return t, idx


def mixture_logpdf(t, p: ProposalMixture) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1, p.base.d)
    terms = []
    for a, w in zip(p.all_scales, p.weights):
        if w == 0:
            continue
        terms.append(math.log(w) + ml_logpdf(t, p.base.scaled(a)))
    return logsumexp(np.array(terms), axis=0)


def log_importance_weight(t, p: ProposalMixture) -> np.ndarray:
    """log[f_ML(t; Q) / sum_l alpha_l f_ML(t; a_l^2 Q)].

    At t = 0 (d >= 2) both densities diverge; the ratio tends to
    1 / sum_l alpha_l a_l^-2 and that limit is returned.
    """
    t = np.asarray(t, dtype=float).reshape(-1, p.base.d)
    m = p.base.mahalanobis(t)
    out = np.empty(m.shape)
    zero = m == 0
    if np.any(~zero):
        out[~zero] = ml_logpdf(t[~zero], p.base) - mixture_logpdf(t[~zero], p)
    if np.any(zero):
        if p.base.d == 1:
            out[zero] = -math.log(np.sum(p.weights / p.all_scales))
        else:
            out[zero] = -math.log(np.sum(p.weights / p.all_scales**2))
    return out


def importance_weight(t, p: ProposalMixture):
    t = np.asarray(t, dtype=float)
    single = t.ndim == 0 or (t.ndim == 1 and t.size == p.base.d)
    w = np.exp(log_importance_weight(t.reshape(-1, p.base.d), p))
    return float(w[0]) if single else w


def log_thrust_cost(t, Q) -> float:
    """Large-thrust part of the log density: -sqrt(2) m + (1 - v) log m, m = ||t||_{Q^-1}."""
    dist = Q if isinstance(Q, MvLaplace) else MvLaplace(Q)
    m = dist.mahalanobis(np.asarray(t, dtype=float).reshape(-1, dist.d))
    if np.any(m == 0):
        raise ValueError("undefined at origin")
    val = -math.sqrt(2.0) * m + (1.0 - dist.v) * np.log(m)
    return float(val[0]) if val.size == 1 else val


def log_joint_posterior_approx(x0, t, xbar0, P0, y, R, H, Pf, measurement_fn, Q) -> float:
    """Large-thrust log posterior of (x0, t) up to its normalising constant.

    ``measurement_fn(x0, t)`` returns the predicted measurement h(x_f).
    """
    x0 = np.asarray(x0, dtype=float)
    dx = x0 - np.asarray(xbar0, dtype=float)
    prior = -0.5 * dx @ np.linalg.solve(P0, dx)
    res = np.asarray(measurement_fn(x0, t), dtype=float) - np.asarray(y, dtype=float)
    S = H @ Pf @ H.T + R
    lik = -0.5 * res @ np.linalg.solve(S, res)
    return float(prior + lik + log_thrust_cost(t, Q))
