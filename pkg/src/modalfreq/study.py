"""End-to-end pipelines: linear analysis, nadir prediction, oracle runs, scans."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import simulator as sim
from .dynamics import CoiWeights, StateLayout, SystemState, coi_weights, init_dynamic_state, project_state
from .grid import (GenTrip, GridCase, NoDisturbance, PowerFlowSolution, Scenario, apply_scenario,
                   disturbance_power, scale_operating_point, solve_power_flow)
from .linearize import LinearModel, equilibrate, linearize
from .modal import ModalBasis, ModeSet, eigendecompose, participation_factors, select_modes
from .nadir import (NadirPrediction, build_delta_x0, modal_coefficients, post_fault_frequency,
                    predict_nadir, settled_imbalance, system_droops)

IMBALANCE_MODES = ("settled", "nominal")


@dataclass
class ModalStudy:
    """Linear model and retained modes for one operating point.

    For a generator trip everything refers to the post-trip system: the
    layout lacks the tripped unit and the linearization point is the
    post-trip equilibrium.
    """

    case: GridCase  # case the modes belong to
    layout: StateLayout
    x0: SystemState  # state at t = 0+ in ``layout``
    pf: PowerFlowSolution  # pre-disturbance power flow
    linear: LinearModel
    basis: ModalBasis
    pf_matrix: np.ndarray
    weights: CoiWeights
    modes: ModeSet


def modal_study(case: GridCase, scenario: Scenario | None = None, threshold: float = 0.001,
                slow_cutoff: float = 10.0, min_coi_share: float = 0.05) -> ModalStudy:
    scenario = scenario or NoDisturbance()
    pf = solve_power_flow(case)
    layout, state = init_dynamic_state(case, pf)
    lin_case = case
    if isinstance(scenario, GenTrip):
        lin_case = apply_scenario(case, scenario)
        layout, state = project_state(layout, state, lin_case)
        eq = equilibrate(lin_case, layout, state)
    else:
        eq = state
    lm = linearize(lin_case, layout, eq)
    basis = eigendecompose(lm.a_s)
    pfm = participation_factors(basis)
    weights = coi_weights(lin_case)
    modes = select_modes(basis, pfm, layout, weights, threshold, slow_cutoff, min_coi_share)
    return ModalStudy(lin_case, layout, state, pf, lm, basis, pfm, weights, modes)


def predict(study: ModalStudy, case: GridCase, scenario: Scenario, pf: PowerFlowSolution | None = None,
            x0: SystemState | None = None, pc=None, literal_real_term: bool = False,
            imbalance: str = "settled"):
    """Nadir prediction for ``scenario`` on ``case`` using the modes in ``study``.

    ``case`` may differ from the one the study was built for (scaled
    operating points reuse the base-case modes); ``x0`` and the governor load
    references ``pc`` then describe that case and default to the study's own.

    ``imbalance`` picks the power that sets the settled frequency:
    "nominal" is the lost generation or added load alone, "settled" adds
    the change in network losses from a static droop-sharing power flow.
    """
    if imbalance not in IMBALANCE_MODES:
        raise ValueError(f"imbalance must be one of {IMBALANCE_MODES}")
    pf = pf or study.pf
    if imbalance == "settled":
        dp = settled_imbalance(case, scenario, pf)
    else:
        dp = disturbance_power(case, scenario, pf)
    post = apply_scenario(case, scenario)
    droops = system_droops(post)
    dw, _ = post_fault_frequency(dp, droops, case.f_nom)
    x0 = x0 or study.x0
    pc = study.layout.pc if pc is None else pc
    dev = build_delta_x0(study.layout, x0, dw, droops, pc, case.f_nom)
    coeffs = modal_coefficients(study.basis, study.modes, dev.dx0, study.weights, study.layout)
    pred = predict_nadir(coeffs, dev.f_e, f_nom=case.f_nom, deficit=dp > 0,
                         literal_real_term=literal_real_term)
    return dp, dev, coeffs, pred


def run_oracle(case: GridCase, scenario: Scenario, horizon: float = 30.0, dt: float = 0.01):
    """Nonlinear simulation from the pre-disturbance equilibrium."""
    pf = solve_power_flow(case)
    layout, state = init_dynamic_state(case, pf)
    traj = sim.simulate(case, layout, state, scenario, horizon, dt)
    _, hz = sim.coi_frequency(traj)
    t_n, f_n = sim.find_nadir_numeric(traj.t, hz)
    return traj, hz, t_n, f_n


def ape(pred: float, actual: float) -> float:
    return abs(pred - actual) / abs(actual) * 100.0


@dataclass(frozen=True)
class ScanRow:
    factor: float
    ok: bool
    dp: float = float("nan")
    f_e: float = float("nan")
    t_pred: float = float("nan")
    f_pred: float = float("nan")
    t_actual: float = float("nan")
    f_actual: float = float("nan")
    ape_nadir: float = float("nan")
    ape_time: float = float("nan")
    eig_drift: float = float("nan")
    fallback: bool = False
    error: str = ""


def _eig_drift(base: ModalStudy, other: ModalStudy) -> float:
    """Largest relative move of a retained base eigenvalue to its nearest retained match."""
    lam_b = base.basis.eigenvalues[list(base.modes.indices)]
    lam_o = other.basis.eigenvalues[list(other.modes.indices)]
    return float(max(np.min(np.abs(lam_o - l)) / abs(l) for l in lam_b))


def _stability_note(case, scenario, layout, state) -> str:
    """Explains an oracle failure by the stability of the post-disturbance equilibrium."""
    try:
        post = apply_scenario(case, scenario)
        eq = equilibrate(post, layout, state)
        lam = np.linalg.eigvals(linearize(post, layout, eq).a_s)
    except Exception:
        return "; no post-disturbance equilibrium found"
    worst = lam[np.argmax(lam.real)]
    if worst.real > 0:
        return (f"; post-disturbance equilibrium is small-signal unstable "
                f"(eigenvalue {worst.real:.3f}{worst.imag:+.3f}j)")
    return ""


def _scan_one(args):
    base_case, factor, scenario, base, horizon, dt, threshold, slow_cutoff, min_share, imbalance = args
    try:
        case = scale_operating_point(base_case, factor)
        pf = solve_power_flow(case)
        layout, state = init_dynamic_state(case, pf)
        if layout.gen_ids != base.layout.gen_ids or layout.n != base.layout.n:
            raise ValueError("scaled case has a different state layout")
        dp, dev, _, pred = predict(base, case, scenario, pf, state, layout.pc, imbalance=imbalance)
        own = modal_study(case, scenario, threshold, slow_cutoff, min_share)
        try:
            traj = sim.simulate(case, layout, state, scenario, horizon, dt)
        except sim.SimulationError as exc:
            raise sim.SimulationError(f"{exc}{_stability_note(case, scenario, layout, state)}",
                                      exc.t, exc.residual) from None
        _, hz = sim.coi_frequency(traj)
        t_a, f_a = sim.find_nadir_numeric(traj.t, hz)
        vals = (dp, dev.f_e, pred.t_nadir, pred.f_nadir, t_a, f_a, ape(pred.f_nadir, f_a),
                ape(pred.t_nadir, t_a), _eig_drift(base, own))
        return ScanRow(factor, True, *(float(v) for v in vals), fallback=bool(pred.fallback))
    except Exception as exc:  # a failed factor becomes a marked row
        return ScanRow(factor, False, error=f"{type(exc).__name__}: {exc}")


def sensitivity_scan(base_case: GridCase, scenario: Scenario, factors, horizon: float = 30.0,
                     dt: float = 0.01, threshold: float = 0.001, slow_cutoff: float = 10.0,
                     min_coi_share: float = 0.05, workers: int = 1,
                     imbalance: str = "settled") -> list[ScanRow]:
    """Scale load and generation by each factor and compare prediction with simulation.

    Predictions reuse the modes of the unscaled case. Rows come back in the
    order of ``factors`` whatever the number of workers.
    """
    factors = [float(f) for f in factors]
    bad = [f for f in factors if not 0.5 <= f <= 1.5]
    if bad:
        raise ValueError(f"scale factors must lie in [0.5, 1.5]; got {bad}")
    if isinstance(scenario, GenTrip):
        raise ValueError("the scan reuses one state layout, so it supports load steps only")
    base = modal_study(base_case, scenario, threshold, slow_cutoff, min_coi_share)
    jobs = [(base_case, f, scenario, base, horizon, dt, threshold, slow_cutoff, min_coi_share,
             imbalance) for f in factors]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_scan_one, jobs))
    return [_scan_one(j) for j in jobs]
