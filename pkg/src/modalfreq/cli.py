"""Command-line driver: simulate, modes, predict, scan.

Every subcommand writes plain CSV into ``--out`` and prints a short summary.
Exit status is 0 on success, 1 when a numerical step fails and 2 for bad
input (missing files, malformed scenarios, out-of-range options).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import simulator as sim
from .dynamics import init_dynamic_state
from .grid import (CaseError, GenTrip, GridCase, LoadStep, NoDisturbance, Scenario, builtin_case_path,
                   load_case, parse_scenario, scale_inertia, solve_power_flow)
from .modal import participation_factors
from .nadir import coi_response
from .study import IMBALANCE_MODES, ape, modal_study, predict, sensitivity_scan

DEFAULT_FACTORS = tuple(round(0.5 + 0.1 * k, 1) for k in range(11))


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    case_path: Path
    scenario: Scenario
    horizon: float = 30.0
    dt: float = 0.01
    pf_threshold: float = 0.001
    slow_cutoff: float = 10.0
    inertia_scale: float = 0.5
    out: Path = Path(".")
    imbalance: str = "settled"

    def __post_init__(self):
        if not self.horizon > 0:
            raise InputError("--horizon must be positive")
        if not self.dt > 0:
            raise InputError("--dt must be positive")
        if self.dt > self.horizon:
            raise InputError("--dt must not exceed --horizon")
        if not 0 < self.pf_threshold < 1:
            raise InputError("--pf-threshold must lie strictly between 0 and 1")
        if not self.slow_cutoff > 0:
            raise InputError("--slow-cutoff must be positive")
        if not self.inertia_scale > 0:
            raise InputError("--inertia-scale must be positive")
        if self.imbalance not in IMBALANCE_MODES:
            raise InputError(f"--imbalance must be one of {', '.join(IMBALANCE_MODES)}")


def resolve_case_path(text: str) -> Path:
    """A file path, or the name of a bundled case such as ``ieee39``."""
    p = Path(text)
    if p.suffix or p.exists():
        return p
    bundled = builtin_case_path(text)
    return bundled if bundled.exists() else p


def load_study_case(cfg: StudyConfig) -> GridCase:
    case = load_case(cfg.case_path)
    s = cfg.scenario
    if isinstance(s, LoadStep) and s.bus not in case.bus_ids:
        raise CaseError(f"scenario references unknown bus {s.bus}")
    if isinstance(s, GenTrip) and s.gen not in {g.id for g in case.generators}:
        raise CaseError(f"scenario references unknown generator {s.gen}")
    if cfg.inertia_scale != 1.0:
        case = scale_inertia(case, cfg.inertia_scale)
    return case


def _fmt(v, spec=".6f") -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return format(v, spec)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: StudyConfig) -> int:
    case = load_study_case(cfg)
    pf = solve_power_flow(case)
    layout, state = init_dynamic_state(case, pf)
    traj = sim.simulate(case, layout, state, cfg.scenario, cfg.horizon, cfg.dt)
    cfg.out.mkdir(parents=True, exist_ok=True)
    sim.write_trajectory_csv(traj, cfg.out / "trajectory.csv", cfg.out / "coi_frequency.csv")
    _, hz = sim.coi_frequency(traj)
    t_n, f_n = sim.find_nadir_numeric(traj.t, hz)
    print(f"nadir {f_n:.2f} Hz @ {t_n:.2f} s")
    return 0


MODE_HEADER = ["index", "real", "imag", "damping_ratio", "freq_hz", "governor_pf", "coi_share",
               "selected", "state_1", "pf_1", "state_2", "pf_2", "state_3", "pf_3"]


def mode_rows(study):
    """One row per eigenvalue, slowest decay first."""
    lam = study.basis.eigenvalues
    pfm = study.pf_matrix
    labels = study.layout.labels()
    gov_pf = dict(zip(study.modes.indices, study.modes.governor_pf))
    share = dict(zip(study.modes.indices, study.modes.coi_share))
    order = sorted(range(lam.size), key=lambda i: (-round(lam[i].real, 10), round(lam[i].imag, 10)))
    rows = []
    for rank, i in enumerate(order):
        mag = abs(lam[i])
        zeta = -lam[i].real / mag if mag > 0 else 1.0
        top = np.argsort(-pfm[i], kind="stable")[:3]
        row = [rank, f"{lam[i].real:.6f}", f"{lam[i].imag:.6f}", f"{zeta:.6f}",
               f"{abs(lam[i].imag) / (2 * np.pi):.6f}", _fmt(gov_pf.get(i)), _fmt(share.get(i)),
               int(i in gov_pf)]
        for k in top:
            row += [labels[k], f"{pfm[i, k]:.6f}"]
        rows.append(row)
    return rows


def cmd_modes(cfg: StudyConfig) -> int:
    case = load_study_case(cfg)
    study = modal_study(case, cfg.scenario, cfg.pf_threshold, cfg.slow_cutoff)
    lam = study.basis.eigenvalues
    _write_csv(cfg.out / "modes.csv", MODE_HEADER, mode_rows(study))
    n_slow = int(np.sum(np.abs(lam) <= cfg.slow_cutoff))
    print(f"{lam.size} states, {study.layout.l} algebraic variables; "
          f"max real part {lam.real.max():.4f}; {n_slow} modes with |lambda| <= {cfg.slow_cutoff:g}")
    print(f"selected {study.modes.n_real} real mode(s) and {study.modes.n_pairs} pair(s):")
    for i, g, s in zip(study.modes.indices, study.modes.governor_pf, study.modes.coi_share):
        l = lam[i]
        print(f"  {l.real:.4f} {l.imag:+.4f}j  governor PF {g:.4f}  COI share {s:.3f}")
    return 0


PREDICTION_HEADER = ["scenario", "dp_pu", "f_e_hz", "t_nadir_pred_s", "f_nadir_pred_hz",
                     "t_nadir_actual_s", "f_nadir_actual_hz", "ape_nadir_pct", "ape_time_pct",
                     "fallback"]


def cmd_predict(cfg: StudyConfig, skip_oracle: bool = False) -> int:
    case = load_study_case(cfg)
    if isinstance(cfg.scenario, NoDisturbance):
        raise InputError("prediction needs a disturbance scenario")
    study = modal_study(case, cfg.scenario, cfg.pf_threshold, cfg.slow_cutoff)
    dp, dev, coeffs, pred = predict(study, case, cfg.scenario, imbalance=cfg.imbalance)
    t = cfg.dt * np.arange(int(round(cfg.horizon / cfg.dt)) + 1)
    f_pred = dev.f_e + coi_response(coeffs, t) * case.f_nom
    curve_cols = [t, f_pred]
    actual = [None, None, None, None]
    if not skip_oracle:
        pf = solve_power_flow(case)
        layout, state = init_dynamic_state(case, pf)
        traj = sim.simulate(case, layout, state, cfg.scenario, cfg.horizon, cfg.dt)
        _, hz = sim.coi_frequency(traj)
        t_a, f_a = sim.find_nadir_numeric(traj.t, hz)
        actual = [t_a, f_a, ape(pred.f_nadir, f_a), ape(pred.t_nadir, t_a)]
        curve_cols.append(hz)
    row = [cfg.scenario.id, _fmt(dp), _fmt(dev.f_e), _fmt(pred.t_nadir), _fmt(pred.f_nadir),
           _fmt(actual[0]), _fmt(actual[1]), _fmt(actual[2]), _fmt(actual[3]), int(pred.fallback)]
    _write_csv(cfg.out / "prediction.csv", PREDICTION_HEADER, [row])
    header = ["t", "f_pred_hz"] + ([] if skip_oracle else ["f_actual_hz"])
    _write_csv(cfg.out / "predicted_coi.csv", header,
               [[f"{c[k]:.6f}" if j == 0 else f"{c[k]:.9f}" for j, c in enumerate(curve_cols)]
                for k in range(t.size)])
    print(f"predicted nadir {pred.f_nadir:.2f} Hz @ {pred.t_nadir:.2f} s "
          f"(settled frequency {dev.f_e:.3f} Hz)")
    if not skip_oracle:
        print(f"simulated nadir {actual[1]:.2f} Hz @ {actual[0]:.2f} s; "
              f"APE nadir {actual[2]:.4f}%, time {actual[3]:.2f}%")
    return 0


SCAN_HEADER = ["factor", "ok", "dp_pu", "f_e_hz", "t_nadir_pred_s", "f_nadir_pred_hz",
               "t_nadir_actual_s", "f_nadir_actual_hz", "ape_nadir_pct", "ape_time_pct",
               "eig_drift", "fallback", "error"]


def cmd_scan(cfg: StudyConfig, factors, workers: int = 1) -> int:
    factors = [float(f) for f in factors]
    bad = [f for f in factors if not 0.5 <= f <= 1.5]
    if bad:
        raise InputError(f"scale factors must lie in [0.5, 1.5]; got {', '.join(f'{f:g}' for f in bad)}")
    if not isinstance(cfg.scenario, LoadStep):
        raise InputError("the scan supports load-step scenarios only")
    case = load_study_case(cfg)
    rows = sensitivity_scan(case, cfg.scenario, factors, cfg.horizon, cfg.dt, cfg.pf_threshold,
                            cfg.slow_cutoff, workers=workers, imbalance=cfg.imbalance)
    out = []
    for r in rows:
        out.append([f"{r.factor:.3f}", int(r.ok), _fmt(r.dp), _fmt(r.f_e), _fmt(r.t_pred),
                    _fmt(r.f_pred), _fmt(r.t_actual), _fmt(r.f_actual), _fmt(r.ape_nadir),
                    _fmt(r.ape_time), _fmt(r.eig_drift), int(r.fallback), r.error])
        if r.ok:
            print(f"x{r.factor:.2f}: predicted {r.f_pred:.4f} Hz, simulated {r.f_actual:.4f} Hz, "
                  f"APE {r.ape_nadir:.4f}%")
        else:
            print(f"x{r.factor:.2f}: failed ({r.error})")
    _write_csv(cfg.out / "scan.csv", SCAN_HEADER, out)
    return 0 if any(r.ok for r in rows) else 1


# ---------------------------------------------------------------------------
# argument handling


def _factor_list(text: str):
    try:
        return [float(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad factor list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", default="ieee39", help="case file or bundled case name (default ieee39)")
    common.add_argument("--scenario", default="load-step:15:20",
                        help="load-step:BUS:PCT, gen-trip:GEN or none (default load-step:15:20)")
    common.add_argument("--horizon", type=float, default=30.0, help="simulated time in s")
    common.add_argument("--dt", type=float, default=0.01, help="integration step in s")
    common.add_argument("--pf-threshold", type=float, default=0.001,
                        help="minimum governor participation factor of a retained mode")
    common.add_argument("--slow-cutoff", type=float, default=10.0,
                        help="largest |eigenvalue| (rad/s) of a retained mode")
    common.add_argument("--inertia-scale", type=float, default=0.5, help="multiplier on every H")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--imbalance", default="settled", choices=IMBALANCE_MODES,
                        help="power imbalance used for the settled frequency")

    p = argparse.ArgumentParser(prog="modalfreq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="nonlinear time-domain simulation")
    sub.add_parser("modes", parents=[common], help="eigenvalues and selected slow modes")
    pp = sub.add_parser("predict", parents=[common], help="modal nadir prediction vs simulation")
    pp.add_argument("--skip-oracle", action="store_true", help="prediction only, no simulation")
    ps = sub.add_parser("scan", parents=[common], help="loading sensitivity scan")
    ps.add_argument("--factors", type=_factor_list, default=list(DEFAULT_FACTORS),
                    help="comma-separated scale factors in [0.5, 1.5]")
    ps.add_argument("--workers", type=int, default=min(len(DEFAULT_FACTORS), os.cpu_count() or 1),
                    help="parallel simulations")
    return p


def config_from_args(args) -> StudyConfig:
    return StudyConfig(resolve_case_path(args.case), parse_scenario(args.scenario), args.horizon,
                       args.dt, args.pf_threshold, args.slow_cutoff, args.inertia_scale,
                       Path(args.out), args.imbalance)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        cfg = config_from_args(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "modes":
            return cmd_modes(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.skip_oracle)
        return cmd_scan(cfg, args.factors, max(1, args.workers))
    except (InputError, CaseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
