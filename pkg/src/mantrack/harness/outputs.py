"""Campaign artifacts: metrics JSON, per-pass CSVs and error-vs-time plots."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from mantrack.harness.metrics import TrialResult, aggregate, envelope_fraction, envelopes

ERROR_COLUMNS = ["trial", "pass", "epoch_s", "err_pos_km", "err_vel_kms", "sigma3_pos_km",
                 "sigma3_vel_kms", "n_components"]
AXES = ["x", "y", "z", "vx", "vy", "vz"]
DETAIL_COLUMNS = [f"err_{a}" for a in AXES] + [f"sigma_{a}" for a in AXES]
Z_COLUMNS = ["trial", "pass", "epoch_s", "z_x", "z_y", "z_z", "z_vx", "z_vy", "z_vz"]


def _prepare(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def write_errors_csv(path, results: list[TrialResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ERROR_COLUMNS + DETAIL_COLUMNS)
        for r in results:
            for i in range(r.epochs.size):
                w.writerow([r.trial, i, f"{r.epochs[i]:.3f}", f"{r.err_pos[i]:.9e}", f"{r.err_vel[i]:.9e}",
                            f"{r.sigma3_pos[i]:.9e}", f"{r.sigma3_vel[i]:.9e}", int(r.n_components[i])]
                           + [f"{v:.12e}" for v in np.concatenate([r.errors[i], r.sigmas[i]])])


def write_trials_csv(path, results: list[TrialResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "n_passes", "failed", "diverged", "message"])
        for r in results:
            w.writerow([r.trial, r.epochs.size, int(r.failed), int(r.diverged), r.message])


def write_zscores_csv(path, results: list[TrialResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(Z_COLUMNS)
        for r in results:
            z = r.z_scores
            for i in range(r.epochs.size):
                w.writerow([r.trial, i, f"{r.epochs[i]:.3f}"] + [f"{v:.9e}" for v in z[i]])


def read_results(out) -> list[TrialResult]:
    """Rebuild per-trial pass-end results from errors.csv and trials.csv."""
    out = Path(out)
    with open(out / "errors.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_trial: dict[int, list] = {}
    for r in rows:
        by_trial.setdefault(int(r["trial"]), []).append(r)
    status = {}
    tpath = out / "trials.csv"
    if tpath.exists():
        with open(tpath, newline="") as fh:
            status = {int(r["trial"]): r for r in csv.DictReader(fh)}
    results = []
    for t in sorted(set(by_trial) | set(status)):
        rs = by_trial.get(t, [])
        st = status.get(t, {})
        detail = np.array([[float(r[c]) for c in DETAIL_COLUMNS] for r in rs]).reshape(-1, 12)
        results.append(TrialResult(t, np.array([float(r["epoch_s"]) for r in rs]), detail[:, :6],
                                   detail[:, 6:], np.array([int(r["n_components"]) for r in rs], dtype=int),
                                   failed=st.get("failed", "0") == "1", message=st.get("message", "")))
    return results


def summarize(results: list[TrialResult]) -> dict:
    m = aggregate(results).to_dict()
    m["pct_inside_max3sigma_envelope"] = 100.0 * envelope_fraction(results)
    return m


def _plot(path, env, results, key, err_attr, unit):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mantrack"
    fig, ax = plt.subplots(figsize=(7, 4))
    for r in results:
        if r.epochs.size:
            ax.semilogy(r.epochs / 3600.0, getattr(r, err_attr), ".", color="0.5", ms=3)
    h = env["epoch"] / 3600.0
    ax.semilogy(h, env[f"max3_{key}"], "r-", label="max 3-sigma")
    ax.semilogy(h, env[f"mean3_{key}"], "b--", label="mean 3-sigma")
    ax.set_xlabel("time [h]")
    ax.set_ylabel(f"{key} error [{unit}]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_outputs(results: list[TrialResult], out, scenario: dict | None = None, diagnostics=None,
                 plots: bool = True) -> dict:
    """Write metrics.json, the per-pass CSVs and the SVG error plots into ``out``."""
    if not results:
        raise ValueError("no trial results to emit")
    out = _prepare(out)
    write_errors_csv(out / "errors.csv", results)
    write_zscores_csv(out / "zscores.csv", results)
    write_trials_csv(out / "trials.csv", results)
    metrics = summarize(results)
    if scenario is not None:
        metrics["scenario"] = scenario
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True, default=float) + "\n")
    env = envelopes(results)
    with open(out / "envelope.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        keys = ["epoch", "mean3_pos", "max3_pos", "mean3_vel", "max3_vel"]
        w.writerow(["pass"] + keys)
        for i in range(env["epoch"].size):
            w.writerow([i] + [f"{env[k][i]:.9e}" for k in keys])
    if diagnostics is not None:
        (out / "diagnostics.json").write_text(json.dumps(
            {str(t): [asdict(d) for d in ds] for t, ds in diagnostics.items()}, indent=2) + "\n")
    if plots:
        _plot(out / "error_position.svg", env, results, "pos", "err_pos", "km")
        _plot(out / "error_velocity.svg", env, results, "vel", "err_vel", "km/s")
    return metrics
