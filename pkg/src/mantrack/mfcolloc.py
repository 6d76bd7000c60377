"""Bi-fidelity stochastic collocation.

Interpolation nodes are picked greedily from low-fidelity snapshots with a
partial pivoted Cholesky factorisation of the snapshot Gramian. Every
sample is then expressed in the node basis using low-fidelity inner
products, and the same coefficients combine the node high-fidelity outputs.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from mantrack import constants as K
from mantrack.dynamics import propagate_ensemble

log = logging.getLogger(__name__)

PIVOT_FLOOR = 1e-12


class RankDeficientWarning(UserWarning):
    pass


@dataclass
class MFInterpolant:
    node_ids: np.ndarray
    L: np.ndarray
    node_low_outputs: np.ndarray  # (m, r)
    node_high_outputs: np.ndarray | None = None  # (m, r)
    pivots: np.ndarray = field(default_factory=lambda: np.empty(0))
    status: str = "ok"

    @property
    def r(self) -> int:
        return len(self.node_ids)


def select_nodes(X_L: np.ndarray, r: int, floor: float = PIVOT_FLOOR) -> MFInterpolant:
    """Greedy node selection on the columns of the (m, N) snapshot matrix.

    Each pivot is the column farthest from the span of the nodes chosen so
    far; the pivot values are those squared residual distances. Selection
    stops early (status ``"rank deficient"``) once a pivot falls below
    ``floor`` times the first one.
    """
    X_L = np.asarray(X_L, dtype=float)
    m, N = X_L.shape
    if not 1 <= r <= N:
        raise ValueError("need 1 <= r <= N")
    d = np.einsum("ij,ij->j", X_L, X_L)
    Lfull = np.zeros((N, r))
    nodes = []
    pivots = []
    status = "ok"
    d0 = d.max()
    for i in range(r):
        p = int(np.argmax(d))
        dp = d[p]
        if dp <= 0 or (i > 0 and dp <= floor * d0) or d0 <= 0:
            status = "rank deficient"
            break
        g = X_L.T @ X_L[:, p]
        row = (g - Lfull[:, :i] @ Lfull[p, :i]) / np.sqrt(dp)
        Lfull[:, i] = row
        d = d - row**2
        d[p] = 0.0
        for q in nodes:
            d[q] = 0.0
        nodes.append(p)
        pivots.append(dp)
    if status != "ok":
        warnings.warn(f"only {len(nodes)} of {r} nodes found", RankDeficientWarning, stacklevel=2)
    node_ids = np.array(nodes, dtype=int)
    L = Lfull[node_ids][:, : len(nodes)]
    return MFInterpolant(node_ids, L, X_L[:, node_ids].copy(), pivots=np.array(pivots), status=status)


def coefficients(interp: MFInterpolant, xL_query: np.ndarray) -> np.ndarray:
    """Solve L L^T c = g with g the inner products against the nodes.

    ``xL_query`` may be one vector (m,) or a matrix (m, q) of queries.
    """
    xq = np.asarray(xL_query, dtype=float)
    if xq.shape[0] != interp.node_low_outputs.shape[0]:
        raise ValueError("query dimension does not match the node outputs")
    if interp.r == 0 or np.any(np.diag(interp.L) <= 0):
        raise ValueError("rank deficient interpolant")
    g = interp.node_low_outputs.T @ xq
    z = solve_triangular(interp.L, g, lower=True)
    return solve_triangular(interp.L.T, z, lower=False)


def synthesize(interp: MFInterpolant, c: np.ndarray) -> np.ndarray:
    """Surrogate high-fidelity output(s) sum_n c_n f^H(node_n)."""
    if interp.node_high_outputs is None:
        raise ValueError("high-fidelity node outputs not populated")
    c = np.asarray(c, dtype=float)
    if c.shape[0] != interp.r:
        raise ValueError("coefficient count does not match node count")
    return interp.node_high_outputs @ c


def synthesize_correction(interp: MFInterpolant, c: np.ndarray, xL_query: np.ndarray) -> np.ndarray:
    """Surrogate x^L + sum_n c_n (f^H - f^L)(node_n).

    Equals :func:`synthesize` when the query lies in the span of the node
    low-fidelity outputs. Away from that span only the high-low correction
    is interpolated, so a held interpolant stays accurate for queries that
    drift from the nodes it was built on.
    """
    if interp.node_high_outputs is None:
        raise ValueError("high-fidelity node outputs not populated")
    c = np.asarray(c, dtype=float)
    if c.shape[0] != interp.r:
        raise ValueError("coefficient count does not match node count")
    return np.asarray(xL_query, dtype=float) + (interp.node_high_outputs - interp.node_low_outputs) @ c


def canonical_scale(mu: float = K.MU_EARTH, Re: float = K.R_EARTH) -> np.ndarray:
    vu = np.sqrt(mu / Re)
    return np.array([Re, Re, Re, vu, vu, vu])


def stack_snapshots(states: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """(n, k, 6) states -> (6k, n) canonical snapshot matrix."""
    n, k, _ = states.shape
    return (states / scale).reshape(n, 6 * k).T


def unstack(columns: np.ndarray, k: int, scale: np.ndarray) -> np.ndarray:
    n = columns.shape[1]
    return columns.T.reshape(n, k, 6) * scale


@dataclass
class MFEnsembleResult:
    epochs: np.ndarray  # output epochs including t0
    states: np.ndarray  # (n, k, 6) corrected trajectories
    low_states: np.ndarray
    valid: np.ndarray
    interp: MFInterpolant | None


def mf_propagate_ensemble(X0, t0, epochs, low_cfg, high_cfg, r, accel=None, bounds=None,
                          frame="ric", tol=1e-10, include_initial=True) -> MFEnsembleResult:
    """Low-fidelity ensemble propagation corrected by r high-fidelity nodes.

    Outputs are the requested ``epochs`` merged with the segment
    ``bounds``; when ``include_initial`` the initial states are stacked too.
    Failed particles are flagged in ``valid`` and kept out of the Gramian.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    n = X0.shape[0]
    stops, low, status = propagate_ensemble(X0, t0, epochs, low_cfg, accel, bounds, frame, tol)
    valid = status == 0
    if include_initial:
        low = np.concatenate([X0[:, None, :], low], axis=1)
        out_epochs = np.concatenate([[t0], stops])
    else:
        out_epochs = stops
    k = low.shape[1]
    corrected = low.copy()
    ids = np.flatnonzero(valid)
    if ids.size == 0:
        return MFEnsembleResult(out_epochs, corrected, low, valid, None)
    scale = canonical_scale(low_cfg.mu, low_cfg.Re)
    XL = stack_snapshots(low[ids], scale)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        interp = select_nodes(XL, min(r, ids.size))
    node_particles = ids[interp.node_ids]
    acc_nodes = None if accel is None else np.broadcast_to(accel, (n,) + np.shape(accel)[-2:])[node_particles]
    _, high, hstat = propagate_ensemble(X0[node_particles], t0, epochs, high_cfg, acc_nodes, bounds, frame, tol)
    if include_initial:
        high = np.concatenate([X0[node_particles][:, None, :], high], axis=1)
    if np.any(hstat != 0):
        log.warning("high-fidelity node propagation failed for %d nodes", int(np.sum(hstat != 0)))
    interp.node_high_outputs = stack_snapshots(high, scale)
    c = coefficients(interp, XL)
    corrected[ids] = unstack(synthesize(interp, c), k, scale)
    # nodes take their own high output exactly; c = e_j holds only to Gram conditioning
    corrected[node_particles] = high
    return MFEnsembleResult(out_epochs, corrected, low, valid, interp)
