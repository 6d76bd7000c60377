"""Command-line entry point: ``mantrack <subcommand> [options]``.

Exit codes: 0 on success, 2 when a divergence is detected, 1 on error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2

log = logging.getLogger("mantrack")


def _scenario(args):
    from mantrack.harness.scenario import resolve_scenario, with_overrides

    sc = resolve_scenario(args.scenario)
    return with_overrides(sc, seed=args.seed, trials=getattr(args, "trials", None))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_truth(path, truth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch_s", "x_km", "y_km", "z_km", "vx_kms", "vy_kms", "vz_kms",
                    "a1_kms2", "a2_kms2", "a3_kms2"])
        tp = truth.thrust
        seg = np.clip(np.searchsorted(tp.bounds, truth.epochs, side="right") - 1, 0, tp.n_segments - 1)
        for t, x, a in zip(truth.epochs, truth.states, tp.accel[seg]):
            w.writerow([f"{t:.3f}"] + [f"{v:.12e}" for v in x] + [f"{v:.6e}" for v in a])


def cmd_truth(args) -> int:
    from mantrack.harness.montecarlo import trial_truth

    sc = _scenario(args)
    truth = trial_truth(sc, args.trial)
    _write_truth(_out(args) / "truth.csv", truth)
    print(f"truth: {truth.epochs.size} epochs over {sc.duration / 3600:.1f} h, "
          f"{truth.thrust.n_segments} thrust segments ({truth.thrust.frame})")
    return EXIT_OK


def cmd_measure(args) -> int:
    from mantrack.harness.montecarlo import trial_passes, trial_truth
    from mantrack.measurement import write_measurements

    sc = _scenario(args)
    truth = trial_truth(sc, args.trial)
    passes = trial_passes(sc, truth, args.trial)
    out = _out(args)
    _write_truth(out / "truth.csv", truth)
    write_measurements(out / "measurements.csv", passes)
    gaps = np.diff([p.start for p in passes])
    print(f"measure: {len(passes)} passes, {sum(len(p) for p in passes)} measurements, "
          f"mean start-to-start gap {gaps.mean() if gaps.size else math.nan:.0f} s")
    return EXIT_OK


def _emit(campaign, out) -> dict:
    from mantrack.harness.outputs import emit_outputs

    diags = {t.result.trial: t.history.diagnostics for t in campaign.trials if t.history is not None}
    scen = {"name": campaign.scenario.name, "seed": campaign.scenario.seed,
            "trials": campaign.scenario.trials, "filter": campaign.scenario.filter.summary()}
    return emit_outputs(campaign.results, out, scenario=scen, diagnostics=diags)


def _report(m: dict) -> int:
    print(f"trials {m['trials']}  position RMSE {1e3 * m['rmse_pos_km']:.0f} m  "
          f"velocity RMSE {1e3 * m['rmse_vel_kms']:.3f} m/s  z std {m['z_std']:.3f}  "
          f"z bias {m['z_bias']:+.3f}  outside 3-sigma {m['pct_outside_3sigma']:.2f}%  "
          f"inside max envelope {m['pct_inside_max3sigma_envelope']:.1f}%  divergences {m['divergences']}")
    return EXIT_DIVERGED if m["divergences"] else EXIT_OK


def cmd_run(args) -> int:
    from dataclasses import replace

    from mantrack.harness.montecarlo import CampaignResult, run_trial
    from mantrack.harness.metrics import aggregate
    from mantrack.measurement import write_measurements

    sc = replace(_scenario(args), trials=1)
    o = run_trial(sc, args.trial)
    out = _out(args)
    write_measurements(out / "measurements.csv", o.passes)
    return _report(_emit(CampaignResult(sc, [o], aggregate([o.result])), out))


def cmd_montecarlo(args) -> int:
    from mantrack.harness.montecarlo import monte_carlo

    sc = _scenario(args)

    def progress(o):
        r = o.result
        tail = f"{1e3 * r.err_pos[-1]:.0f} m at the last pass" if r.epochs.size else r.message
        print(f"trial {r.trial}: {r.epochs.size} passes, {tail}{'  DIVERGED' if r.diverged else ''}",
              flush=True)

    campaign = monte_carlo(sc, threads=args.threads, progress=progress)
    return _report(_emit(campaign, _out(args)))


def cmd_rare_event_grid(args) -> int:
    from mantrack.rare_event import RatioExperimentConfig, default_grids, empirical_rmse_grid

    y, s = default_grids(args.points, args.y_max, args.sigma_max)
    cfg = RatioExperimentConfig(trials=args.trials or 1000, N=args.particles, dims=args.dims)
    grid = empirical_rmse_grid(y, s, cfg, np.random.default_rng(np.random.SeedSequence([args.seed or 0])))
    out = _out(args)
    grid.to_csv(out / "rare_event_grid.csv")
    sel = (y >= 2.0) & (y <= 8.0)
    best = grid.argmin_sigma("empirical", refine=True)
    slope = float(np.polyfit(y[sel], best[sel], 1)[0]) if sel.sum() > 1 else math.nan
    summary = {"argmin_sigma_empirical": best.tolist(),
               "argmin_sigma_predicted": grid.argmin_sigma("predicted", refine=True).tolist(),
               "y": y.tolist(), "argmin_slope_y2_8": slope}
    (out / "rare_event_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"rare-event grid {y.size}x{s.size} written; argmin slope over y in [2, 8]: {slope:.3f}")
    return EXIT_OK


def cmd_prior_demo(args) -> int:
    from mantrack.harness.prior_demo import PriorDemoConfig, prior_demo, write_rows

    rows = prior_demo(PriorDemoConfig(), np.random.default_rng(np.random.SeedSequence([args.seed or 0])))
    write_rows(_out(args) / "prior_demo.csv", rows)
    for r in rows:
        print(f"{r.mode:8s} regularized={int(r.regularized)}  pos {r.sigma_pos:8.3f} km  "
              f"vel {1e3 * r.sigma_vel:8.3f} m/s  max weight {r.max_weight:.3f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from mantrack.harness.outputs import read_results, summarize

    out = Path(args.out)
    if not (out / "errors.csv").is_file():
        raise FileNotFoundError(f"{out / 'errors.csv'} not found; run montecarlo first")
    m = summarize(read_results(out))
    (out / "analysis.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    return _report(m)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mantrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, scenario=True, trials=False, threads=False, help=""):
        sp = sub.add_parser(name, help=help)
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
            sp.add_argument("--trial", type=int, default=0, help="trial index for single-trial commands")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        if trials:
            sp.add_argument("--trials", type=int, default=None)
        if threads:
            sp.add_argument("--threads", type=int, default=1, help="worker processes")
        sp.set_defaults(func=fn)
        return sp

    add("truth", cmd_truth, help="simulate the truth trajectory")
    add("measure", cmd_measure, help="simulate truth and radar passes")
    add("run", cmd_run, help="filter one trial")
    add("montecarlo", cmd_montecarlo, trials=True, threads=True, help="run a Monte Carlo campaign")
    sp = add("rare-event-grid", cmd_rare_event_grid, scenario=False, trials=True,
             help="RMSE of the importance-sampled ratio estimator over (y, proposal sigma)")
    sp.add_argument("--points", type=int, default=25)
    sp.add_argument("--y-max", type=float, default=8.0)
    sp.add_argument("--sigma-max", type=float, default=20.0)
    sp.add_argument("--particles", type=int, default=2500)
    sp.add_argument("--dims", type=int, default=1, choices=(1, 6))
    add("prior-demo", cmd_prior_demo, scenario=False, help="transitional-prior spread table")
    add("analyze", cmd_analyze, scenario=False, help="recompute metrics from a campaign directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_ERROR
    except Exception as exc:  # report and map to the error exit code
        if args.verbose:
            log.exception("failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
