"""Pass-end error statistics for Monte Carlo campaigns."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_RUN = 2


@dataclass
class TrialResult:
    """Pass-end estimates of one trial against its truth.

    ``errors`` and ``sigmas`` are (n_passes, 6); ``failed`` marks a trial
    whose filter raised before the last pass.
    """

    trial: int
    epochs: np.ndarray
    errors: np.ndarray
    sigmas: np.ndarray
    n_components: np.ndarray
    failed: bool = False
    message: str = ""

    @property
    def z_scores(self) -> np.ndarray:
        return self.errors / self.sigmas

    @property
    def err_pos(self) -> np.ndarray:
        return np.linalg.norm(self.errors[:, :3], axis=1)

    @property
    def err_vel(self) -> np.ndarray:
        return np.linalg.norm(self.errors[:, 3:6], axis=1)

    @property
    def sigma3_pos(self) -> np.ndarray:
        return 3.0 * np.sqrt(np.sum(self.sigmas[:, :3] ** 2, axis=1))

    @property
    def sigma3_vel(self) -> np.ndarray:
        return 3.0 * np.sqrt(np.sum(self.sigmas[:, 3:6] ** 2, axis=1))

    @property
    def diverged(self) -> bool:
        return self.failed or is_divergent(self.err_pos, self.sigma3_pos)


def is_divergent(err_pos, sigma3_pos, factor: float = DIVERGENCE_FACTOR, run: int = DIVERGENCE_RUN) -> bool:
    """Position error beyond ``factor`` times the filter's own 3-sigma at ``run`` consecutive pass ends."""
    bad = np.asarray(err_pos) > factor * np.asarray(sigma3_pos)
    streak = 0
    for b in bad:
        streak = streak + 1 if b else 0
        if streak >= run:
            return True
    return False


def trial_result(trial: int, records, truth_at, failed: bool = False, message: str = "") -> TrialResult:
    """Build a TrialResult from filter pass records and a truth lookup ``truth_at(epoch)``."""
    if records:
        epochs = np.array([r.epoch for r in records])
        err = np.array([truth_at(r.epoch) - r.mean for r in records])
        sig = np.array([np.sqrt(np.clip(np.diag(r.cov), 0.0, None)) for r in records])
        ncomp = np.array([r.n_components for r in records])
    else:
        epochs, err, sig, ncomp = np.empty(0), np.empty((0, 6)), np.empty((0, 6)), np.empty(0, int)
    return TrialResult(trial, epochs, err, sig, ncomp, failed, message)


@dataclass
class RunMetrics:
    rmse_pos: float  # km
    rmse_vel: float  # km/s
    z_scores: np.ndarray = field(repr=False)  # pooled per-axis samples, (n, 6)
    pct_outside_3sigma: float
    divergences: int
    trials: int

    def __post_init__(self):
        if self.rmse_pos < 0 or self.rmse_vel < 0:
            raise ValueError("rmse must be non-negative")
        if not 0.0 <= self.pct_outside_3sigma <= 100.0:
            raise ValueError("percentage outside 3 sigma must lie in [0, 100]")

    @property
    def z_std(self) -> float:
        return float(np.std(self.z_scores)) if self.z_scores.size else float("nan")

    @property
    def z_bias(self) -> float:
        return float(np.mean(self.z_scores)) if self.z_scores.size else float("nan")

    def to_dict(self) -> dict:
        z = self.z_scores
        return {
            "trials": self.trials,
            "rmse_pos_km": self.rmse_pos,
            "rmse_vel_kms": self.rmse_vel,
            "z_std": self.z_std,
            "z_bias": self.z_bias,
            "z_std_position": float(np.std(z[:, :3])) if z.size else None,
            "z_std_velocity": float(np.std(z[:, 3:])) if z.size else None,
            "pct_outside_3sigma": self.pct_outside_3sigma,
            "divergences": self.divergences,
            "n_samples": int(z.shape[0]),
        }


def aggregate(results: list[TrialResult], skip_diverged: bool = True) -> RunMetrics:
    """Pool pass-end errors over trials.

    RMSE and Z-scores exclude diverged trials when ``skip_diverged``, so one
    lost track does not swamp the statistics; the count is reported apart.
    """
    if not results:
        raise ValueError("no trial results")
    div = sum(r.diverged for r in results)
    use = [r for r in results if not (skip_diverged and r.diverged) and r.epochs.size]
    if use:
        err = np.concatenate([r.errors for r in use])
        z = np.concatenate([r.z_scores for r in use])
        rp = float(np.sqrt(np.mean(np.sum(err[:, :3] ** 2, axis=1))))
        rv = float(np.sqrt(np.mean(np.sum(err[:, 3:6] ** 2, axis=1))))
        pct = float(100.0 * np.mean(np.abs(z) > 3.0))
    else:
        z, rp, rv, pct = np.empty((0, 6)), 0.0, 0.0, 0.0
    return RunMetrics(rp, rv, z, pct, int(div), len(results))


def envelope_fraction(results: list[TrialResult]) -> float:
    """Share of pass-end position errors inside the max-over-trials 3-sigma envelope.

    Trials are aligned by pass index; the envelope at each index is the
    largest 3-sigma position bound any trial reported there.
    """
    if not results:
        raise ValueError("no trial results")
    good = [r for r in results if r.epochs.size]
    if not good:
        return float("nan")
    n = max(r.epochs.size for r in good)
    env = np.zeros(n)
    for r in good:
        env[: r.epochs.size] = np.maximum(env[: r.epochs.size], r.sigma3_pos)
    inside = [r.err_pos <= env[: r.epochs.size] for r in good]
    return float(np.mean(np.concatenate(inside)))


def envelopes(results: list[TrialResult]):
    """Per pass index: mean epoch, mean and max 3-sigma position and velocity bounds."""
    good = [r for r in results if r.epochs.size]
    n = max((r.epochs.size for r in good), default=0)
    out = {k: np.full(n, np.nan) for k in ("epoch", "mean3_pos", "max3_pos", "mean3_vel", "max3_vel")}
    for i in range(n):
        rs = [r for r in good if r.epochs.size > i]
        out["epoch"][i] = np.mean([r.epochs[i] for r in rs])
        p = np.array([r.sigma3_pos[i] for r in rs])
        v = np.array([r.sigma3_vel[i] for r in rs])
        out["mean3_pos"][i], out["max3_pos"][i] = p.mean(), p.max()
        out["mean3_vel"][i], out["max3_vel"][i] = v.mean(), v.max()
    return out
