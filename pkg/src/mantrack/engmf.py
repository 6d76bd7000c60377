"""Ensemble Gaussian mixture regularization with kNN-gated kernels.

Each particle becomes a Gaussian kernel centred on it. The kernel
covariance is the outer-product sum of displacements to every particle
within the distance of its k-th nearest neighbour, divided by k - 1; the
neighbour search runs in canonical units so positions and velocities are
commensurate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from mantrack import constants as K

JITTER_RATIO = 1e-12
JITTER_SCALE = 1e-10


@dataclass(frozen=True)
class CanonicalScaler:
    Re: float = K.R_EARTH
    mu: float = K.MU_EARTH

    def __post_init__(self):
        if self.Re <= 0 or self.mu <= 0:
            raise ValueError("canonical units need positive Re and mu")

    @property
    def scale(self) -> np.ndarray:
        vu = np.sqrt(self.mu / self.Re)
        return np.array([self.Re] * 3 + [vu] * 3)

    def to_canonical(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = self.scale
        d = x.shape[-1]
        return x / (np.concatenate([s, np.ones(d - 6)]) if d > 6 else s)

    def from_canonical(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = self.scale
        d = x.shape[-1]
        return x * (np.concatenate([s, np.ones(d - 6)]) if d > 6 else s)

    def cov_from_canonical(self, P) -> np.ndarray:
        s = self.scale
        return P * s[:, None] * s[None, :]

    def cov_to_canonical(self, P) -> np.ndarray:
        s = self.scale
        return P / (s[:, None] * s[None, :])


@dataclass
class MixtureComponent:
    mean: np.ndarray
    cov: np.ndarray
    weight: float


@dataclass
class GaussianMixture:
    """Vectorised mixture: means (n, d), covs (n, d, d), weights (n,)."""

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def components(self) -> list[MixtureComponent]:
        return [MixtureComponent(m, P, float(w)) for m, P, w in zip(self.means, self.covs, self.weights)]

    @classmethod
    def from_components(cls, comps) -> "GaussianMixture":
        return cls(np.array([c.mean for c in comps]), np.array([c.cov for c in comps]),
                   np.array([c.weight for c in comps], dtype=float))

    def normalized(self) -> "GaussianMixture":
        return GaussianMixture(self.means, self.covs, self.weights / self.weights.sum())

    def mean(self) -> np.ndarray:
        w = self.weights / self.weights.sum()
        return w @ self.means

    def covariance(self) -> np.ndarray:
        """Total covariance: spread of the means plus the weighted kernels."""
        w = self.weights / self.weights.sum()
        mu = w @ self.means
        dx = self.means - mu
        return np.einsum("i,ij,ik->jk", w, dx, dx) + np.einsum("i,ijk->jk", w, self.covs)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w = self.weights / self.weights.sum()
        idx = rng.choice(w.size, size=n, p=w)
        L = np.linalg.cholesky(_psd(self.covs))
        z = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", L[idx], z)


def _psd(covs: np.ndarray) -> np.ndarray:
    """Symmetrise and add a tiny ridge so Cholesky succeeds on PSD input."""
    c = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    d = c.shape[-1]
    tr = np.trace(c, axis1=-2, axis2=-1)
    ridge = np.maximum(tr, 1e-300)[..., None, None] * 1e-14 * np.eye(d)
    return c + ridge


class NeighborIndex:
    """Exact k-nearest-neighbour queries in canonical space."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self.tree = cKDTree(self.points)

    def knn(self, k: int, idx=None):
        """Distances and indices of the k nearest other points (self excluded)."""
        q = self.points if idx is None else self.points[np.atleast_1d(idx)]
        d, j = self.tree.query(q, k=k + 1)
        return d[:, 1:], j[:, 1:], d[:, k]


def _jitter(P: np.ndarray) -> np.ndarray:
    """Add eps*I where the kernel is numerically singular (collinear neighbours)."""
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    ev = np.linalg.eigvalsh(P)
    d = P.shape[-1]
    bad = ev[..., 0] < JITTER_RATIO * ev[..., -1]
    if np.any(bad):
        tr = np.trace(P, axis1=-2, axis2=-1)
        eps = JITTER_SCALE * tr / d
        P = P.copy()
        P[bad] += eps[bad, None, None] * np.eye(d)
    return P


def gated_covariances(points: np.ndarray, k: int, jitter: bool = True) -> np.ndarray:
    """kNN-gated kernel covariance for every point of an (N, d) cloud."""
    if k < 2:
        raise ValueError("k must exceed 1")
    points = np.asarray(points, dtype=float)
    N = points.shape[0]
    if N <= k:
        raise ValueError("need more points than neighbours")
    index = NeighborIndex(points)
    dist, nbr, h = index.knn(k)
    # self-term contributes zero; ties at exactly h are included by the query order
    disp = points[:, None, :] - points[nbr]
    P = np.einsum("nki,nkj->nij", disp, disp) / (k - 1)
    return _jitter(P) if jitter else P


def knn_gated_covariance(points: np.ndarray, i: int, k: int, jitter: bool = True) -> np.ndarray:
    """Gated covariance of one kernel: displacements from point i to its k nearest neighbours."""
    if k < 2:
        raise ValueError("k must exceed 1")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] <= k:
        raise ValueError("need more points than neighbours")
    d = np.linalg.norm(points - points[i], axis=1)
    d[i] = np.inf
    order = np.argsort(d, kind="stable")
    h = d[order[k - 1]]
    gate = d <= h
    disp = points[i] - points[gate]
    P = disp.T @ disp / (k - 1)
    return _jitter(P[None])[0] if jitter else P


def regularize(states: np.ndarray, weights: np.ndarray, k: int,
               scaler: CanonicalScaler | None = None, jitter: bool = True) -> GaussianMixture:
    """Turn weighted (N, 6) particles into a kNN-gated Gaussian mixture."""
    scaler = scaler or CanonicalScaler()
    X = np.asarray(states, dtype=float)
    w = np.asarray(weights, dtype=float)
    Pc = gated_covariances(scaler.to_canonical(X), k, jitter=jitter)
    s = scaler.scale
    P = Pc * s[None, :, None] * s[None, None, :]
    return GaussianMixture(X.copy(), P, w / w.sum())


def silverman_covariance(states: np.ndarray, weights=None) -> np.ndarray:
    """Silverman's rule of thumb: (4/(d+2))^(2/(d+4)) N^(-2/(d+4)) times the sample covariance."""
    X = np.asarray(states, dtype=float)
    N, d = X.shape
    if N < 2:
        raise ValueError("need at least two particles")
    w = np.full(N, 1.0 / N) if weights is None else np.asarray(weights, float) / np.sum(weights)
    mu = w @ X
    dx = X - mu
    cov = np.einsum("i,ij,ik->jk", w, dx, dx) / (1.0 - np.sum(w * w))
    beta = (4.0 / (d + 2)) ** (2.0 / (d + 4))
    return beta * N ** (-2.0 / (d + 4)) * cov


def classic_knn_covariance(points: np.ndarray, i: int, k: int) -> np.ndarray:
    """Isotropic kernel h_i^2 I, h_i the distance to the k-th nearest neighbour."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.linalg.norm(points - points[i], axis=1)
    d[i] = np.inf
    h = np.sort(d)[k - 1]
    return h * h * np.eye(points.shape[1])


def regularize_silverman(states, weights, scaler=None) -> GaussianMixture:
    X = np.asarray(states, dtype=float)
    P = silverman_covariance(X, weights)
    return GaussianMixture(X.copy(), np.broadcast_to(P, (X.shape[0],) + P.shape).copy(),
                           np.asarray(weights, float) / np.sum(weights))


def regularize_classic_knn(states, weights, k, scaler=None) -> GaussianMixture:
    scaler = scaler or CanonicalScaler()
    X = np.asarray(states, dtype=float)
    _, _, h = NeighborIndex(scaler.to_canonical(X)).knn(k)
    Pc = (h * h)[:, None, None] * np.eye(X.shape[1])
    s = scaler.scale
    return GaussianMixture(X.copy(), Pc * s[None, :, None] * s[None, None, :],
                           np.asarray(weights, float) / np.sum(weights))


def mixture_logpdf(mixture: GaussianMixture, x) -> np.ndarray:
    """log sum_i w_i N(x; m_i, P_i) for x of shape (d,) or (q, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = mixture.dim
    try:
        L = np.linalg.cholesky(mixture.covs)
    except np.linalg.LinAlgError:
        for i, P in enumerate(mixture.covs):
            try:
                np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                raise ValueError(f"mixture component {i} has a singular covariance") from None
        raise
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    w = mixture.weights / mixture.weights.sum()
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    const = logw - 0.5 * (logdet + d * np.log(2 * np.pi))
    if x.shape[0] <= len(mixture):
        out = np.empty(x.shape[0])
        for q, xq in enumerate(x):
            z = np.linalg.solve(L, (xq[None, :] - mixture.means)[..., None])[..., 0]
            out[q] = logsumexp(const - 0.5 * np.sum(z * z, axis=1))
        return out
    # many queries, few components: loop over components instead
    terms = np.empty((len(mixture), x.shape[0]))
    for i in range(len(mixture)):
        z = solve_triangular(L[i], (x - mixture.means[i]).T, lower=True)
        terms[i] = const[i] - 0.5 * np.sum(z * z, axis=0)
    return logsumexp(terms, axis=0)


def mixture_pdf(mixture: GaussianMixture, x) -> np.ndarray:
    return np.exp(mixture_logpdf(mixture, x))


def mixture_total_sigma(mixture: GaussianMixture) -> tuple[float, float]:
    """(sqrt(trace P_rr), sqrt(trace P_vv)) of the total mixture covariance."""
    P = mixture.covariance()
    return float(np.sqrt(max(np.trace(P[:3, :3]), 0.0))), float(np.sqrt(max(np.trace(P[3:6, 3:6]), 0.0)))
