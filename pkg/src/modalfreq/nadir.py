"""Analytic frequency-nadir prediction from a truncated modal COI response.

Internally frequencies are pu speed deviations. ``dw`` is the post-fault
steady-state change omega_e - omega_0, negative after a generation deficit
(``dp > 0``). The initial deviation is ``x0 - x_e`` so the speed entries
equal (f_0 - f_e) / f_nom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import root

from .dynamics import LOAD_EXPONENTS, GOVERNOR_STATES, CoiWeights, StateLayout, SystemState, coi_weights
from .grid import (GenTrip, GridCase, LoadStep, NoDisturbance, PowerFlowSolution, Scenario, apply_scenario,
                   build_ybus, disturbance_power)
from .modal import ModalBasis, ModeSet

__all__ = [
    "CoiWeights", "coi_weights", "DisturbanceSpec", "InitialDeviation", "ModalCoefficients",
    "NadirExpansion", "NadirPrediction", "NadirError", "post_fault_frequency", "system_droops",
    "settled_imbalance",
    "build_delta_x0", "modal_coefficients", "coi_response", "coi_derivative",
    "taylor_coefficients", "predict_nadir", "initial_expansion_point",
]


class NadirError(RuntimeError):
    pass


@dataclass(frozen=True)
class DisturbanceSpec:
    dp: float  # pu on system base, > 0 for a generation deficit
    kind: str  # "load-step" | "gen-trip"
    scenario: str

    def __post_init__(self):
        if self.dp == 0:
            raise ValueError("power imbalance must be nonzero")


def disturbance_spec(case: GridCase, scenario: Scenario, pf: PowerFlowSolution | None = None):
    kind = "gen-trip" if isinstance(scenario, GenTrip) else "load-step" if isinstance(scenario, LoadStep) else "none"
    return DisturbanceSpec(disturbance_power(case, scenario, pf), kind, scenario.id)


@dataclass(frozen=True)
class InitialDeviation:
    dx0: np.ndarray
    f_e: float
    f_0: float
    dw: float


def system_droops(case: GridCase) -> np.ndarray:
    """Droops converted to the system MVA base, in generator order."""
    return np.array([case.governor_for(g.id).r * case.base_mva / g.mva for g in case.generators])


def settled_imbalance(case: GridCase, scenario: Scenario, pf: PowerFlowSolution,
                      tol: float = 1e-10) -> float:
    """Imbalance including the change in network losses, in pu.

    Solves a static power flow of the post-disturbance network in which the
    remaining units pick up power in proportion to their droop gains,
    generator buses hold their pre-disturbance voltage and loads follow the
    case's voltage exponents around their pre-disturbance voltage. Returns
    the total extra generation the droops must supply, which is what sets
    the settled frequency. No time simulation is involved.
    """
    if isinstance(scenario, NoDisturbance):
        return 0.0
    post = apply_scenario(case, scenario)
    idx = post.bus_index()
    n = len(post.buses)
    y = build_ybus(post)
    v_pre = np.abs(pf.v)
    pre_pg = {g.id: float(pf.pg[k]) for k, g in enumerate(case.generators)}
    pg0 = np.array([pre_pg[g.id] for g in post.generators])
    gains = 1.0 / system_droops(post)
    gen_bus = np.array([idx[g.bus] for g in post.generators])
    fixed_v = sorted(set(gen_bus.tolist()))
    free_v = [i for i in range(n) if i not in set(fixed_v)]
    ref = gen_bus[0]
    free_a = [i for i in range(n) if i != ref]
    pl = np.array([b.pload for b in post.buses])
    ql = np.array([b.qload for b in post.buses])
    p_exp, q_exp = LOAD_EXPONENTS[post.load_model]
    na = len(free_a)

    def unpack(z):
        va = np.angle(pf.v).copy()
        vm = v_pre.copy()
        va[free_a] = z[:na]
        vm[free_v] = z[na:-1]
        return vm * np.exp(1j * va), z[-1]

    def mismatch(z):
        v, s = unpack(z)
        ratio = np.abs(v) / v_pre
        inj = -(pl * ratio ** p_exp + 1j * ql * ratio ** q_exp)
        np.add.at(inj, gen_bus, (pg0 + gains * s).astype(complex))
        f = v * np.conj(y @ v) - inj
        # generator buses: reactive output is free, so only P must balance there
        return np.r_[f.real, f.imag[free_v]]

    z0 = np.r_[np.angle(pf.v)[free_a], v_pre[free_v], 0.0]
    sol = root(mismatch, z0, method="hybr", tol=tol)
    if not sol.success or np.max(np.abs(mismatch(sol.x))) > 1e-8:
        raise NadirError(f"post-disturbance power flow failed: {sol.message}")
    return float(gains.sum() * sol.x[-1])


def post_fault_frequency(dp: float, droops, f_nom: float = 60.0, f_0: float | None = None):
    """Steady-state speed change (pu) and frequency (Hz) after an imbalance ``dp``."""
    droops = np.asarray(droops, float)
    if droops.size == 0:
        raise ValueError("no droop data")
    if np.any(droops <= 0):
        raise ValueError("droops must be positive")
    if dp == 0:
        raise ValueError("power imbalance must be nonzero")
    f_0 = f_nom if f_0 is None else f_0
    dw = -dp / np.sum(1.0 / droops)
    return dw, f_0 + dw * f_nom


def build_delta_x0(layout: StateLayout, x0: SystemState, dw: float, droops, pc,
                   f_nom: float = 60.0, f_0: float | None = None) -> InitialDeviation:
    """x0 minus the estimated post-fault equilibrium, on speeds and governors only."""
    droops = np.asarray(droops, float)
    pc = np.asarray(pc, float)
    ng = len(layout.gen_ids)
    if droops.shape != (ng,) or pc.shape != (ng,):
        raise ValueError("droop and load-reference vectors must have one entry per generator")
    for s in ("omega",) + GOVERNOR_STATES:
        if s not in layout.index or np.any(layout.index[s] < 0):
            raise ValueError(f"layout has no '{s}' state for every generator")
    gain = dw / droops  # y1, y3 and tm all move by -dw/R at the new equilibrium
    dx0 = np.zeros(layout.n)
    x = x0.x
    ix = layout.index
    dx0[ix["omega"]] = x[ix["omega"]] - (1.0 + dw)
    dx0[ix["y1"]] = x[ix["y1"]] + gain
    dx0[ix["y3"]] = x[ix["y3"]] + gain
    dx0[ix["tm"]] = x[ix["tm"]] - (pc - gain)
    f_0 = f_nom if f_0 is None else f_0
    return InitialDeviation(dx0, f_0 + dw * f_nom, f_0, dw)


@dataclass(frozen=True)
class ModalCoefficients:
    """COI weights of the retained modes.

    ``pairs`` rows are (alpha, beta, E, F, r_c, theta) for the member with
    beta > 0; ``reals`` rows are (lambda, gamma).
    """

    modes: tuple[int, ...]
    gamma: np.ndarray
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    reals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.gamma)


def modal_coefficients(basis: ModalBasis, modes, dx0, weights: CoiWeights, layout: StateLayout,
                       tol: float = 1e-9) -> ModalCoefficients:
    idx = list(modes.indices if isinstance(modes, ModeSet) else modes)
    if not idx:
        raise ValueError("empty mode set")
    if tuple(weights.gen_ids) != layout.gen_ids:
        raise ValueError("COI weights do not match the layout's generators")
    dx0 = np.asarray(dx0, float)
    lam = basis.eigenvalues
    spd = layout.speed_idx
    gamma = np.array([(basis.w[:, i] @ dx0) * (weights.c @ basis.v[spd, i]) for i in idx])
    scale = max(np.abs(gamma).max(), 1e-300)
    pairs, reals, done = [], [], set()
    for k, i in enumerate(idx):
        if lam[i].imag == 0:
            reals.append((lam[i].real, gamma[k].real))
            continue
        if k in done:
            continue
        j = next((m for m, ii in enumerate(idx) if m != k and m not in done
                  and abs(lam[ii] - np.conj(lam[i])) <= 1e-9 * max(1.0, abs(lam[i]))), None)
        if j is None:
            raise ValueError(f"mode {lam[i]:.6g} has no conjugate partner in the set")
        if abs(gamma[j] - np.conj(gamma[k])) > tol * scale:
            raise ValueError(f"coefficients of the pair at {lam[i]:.6g} are not conjugate")
        done.update((k, j))
        top = k if lam[i].imag > 0 else j
        g = gamma[top]
        lt = lam[idx[top]]
        pairs.append((lt.real, lt.imag, g.real, g.imag, abs(g), np.arctan2(g.imag, g.real)))
    return ModalCoefficients(tuple(idx), gamma, np.array(pairs).reshape(-1, 6),
                             np.array(reals).reshape(-1, 2))


def coi_response(coeffs: ModalCoefficients, times) -> np.ndarray:
    """COI speed deviation from x_e (pu) at ``times``."""
    t = np.asarray(times, float)
    out = np.zeros_like(t)
    for a, b, _, _, rc, th in coeffs.pairs:
        out += 2.0 * rc * np.exp(a * t) * np.cos(b * t + th)
    for lr, gr in coeffs.reals:
        out += gr * np.exp(lr * t)
    return out


def coi_derivative(coeffs: ModalCoefficients, times) -> np.ndarray:
    t = np.asarray(times, float)
    out = np.zeros_like(t)
    for a, b, _, _, rc, th in coeffs.pairs:
        amp = 2.0 * rc * np.hypot(a, b)
        out += amp * np.exp(a * t) * np.cos(b * t + th + np.arctan2(b, a))
    for lr, gr in coeffs.reals:
        out += lr * gr * np.exp(lr * t)
    return out


def _coi_second_derivative(coeffs: ModalCoefficients, t: float) -> float:
    out = 0.0
    for a, b, _, _, rc, th in coeffs.pairs:
        k2 = np.hypot(a, b)
        out += 2.0 * rc * k2 * k2 * np.exp(a * t) * np.cos(b * t + th + 2 * np.arctan2(b, a))
    for lr, gr in coeffs.reals:
        out += lr * lr * gr * np.exp(lr * t)
    return float(out)


@dataclass(frozen=True)
class NadirExpansion:
    """Second-order expansion of the COI derivative about ``tau``.

    The per-pair quantities refer to the first (dominant) pair; ``a`` holds
    the summed quadratic coefficients a1..a6.
    """

    tau: float
    psi: float
    phi: float
    amplitude: float  # R
    k1: float
    k2: float
    a: tuple[float, float, float, float, float, float]

    @property
    def quadratic(self) -> tuple[float, float, float]:
        a1, a2, a3, a4, a5, a6 = self.a
        return a1 + a4, a2 + a5, a3 + a6


def taylor_coefficients(coeffs: ModalCoefficients, tau: float,
                        literal_real_term: bool = False) -> NadirExpansion:
    """Quadratic a t^2 + b t + c matching the COI derivative to second order at ``tau``.

    ``literal_real_term`` evaluates the real-mode curvature term at t = 0
    instead of at ``tau``, for comparison with that common variant; the
    default keeps the expansion consistent.
    """
    if tau < 0:
        raise ValueError("expansion point must be non-negative")
    if coeffs.pairs.shape[0] == 0 and coeffs.reals.shape[0] == 0:
        raise ValueError("no modes to expand")
    a1 = a2 = a3 = 0.0
    head = None
    for a, b, _, _, rc, th in coeffs.pairs:
        if a == 0 and b == 0:
            raise ValueError("degenerate oscillatory pair")
        k2 = np.hypot(a, b)
        phi = np.arctan2(b, a)
        amp = 2.0 * rc * k2
        k1 = amp * np.exp(a * tau)
        psi = b * tau + th + phi
        curv = (a * a - b * b) / 2.0 * np.cos(psi) - a * b * np.sin(psi)
        a1 += k1 * curv
        a2 += k1 * (k2 * np.cos(psi + phi) - ((a * a - b * b) * np.cos(psi) - 2 * a * b * np.sin(psi)) * tau)
        a3 += k1 * (np.cos(psi) - k2 * np.cos(psi + phi) * tau + curv * tau * tau)
        if head is None:
            head = (psi, phi, amp, k1, k2)
    a4 = a5 = a6 = 0.0
    for lr, gr in coeffs.reals:
        e = np.exp(lr * tau)
        a4 += lr ** 3 * (1.0 if literal_real_term else e) * gr / 2.0
        a5 += lr ** 2 * e * (1.0 - lr * tau) * gr
        a6 += lr * e * (1.0 - lr * tau + lr * lr * tau * tau / 2.0) * gr
    if head is None:
        head = (0.0, 0.0, 0.0, 0.0, 0.0)
    coef = tuple(float(v) for v in (a1, a2, a3, a4, a5, a6))
    return NadirExpansion(float(tau), *(float(v) for v in head), coef)


def initial_expansion_point(coeffs: ModalCoefficients, deficit: bool = True) -> float:
    """First time the oscillatory part of the derivative turns upward.

    That is beta t + theta + phi = 3 pi / 2 (pi / 2 for a peak), wrapped into
    (0, 2 pi / beta], using the first pair.
    """
    if coeffs.pairs.shape[0] == 0:
        return 1.0
    a, b, _, _, _, th = coeffs.pairs[0]
    period = 2 * np.pi / b
    target = 1.5 * np.pi if deficit else 0.5 * np.pi
    tau = np.mod((target - th - np.arctan2(b, a)) / b, period)
    return float(period if tau <= 0 else tau)


@dataclass(frozen=True)
class NadirPrediction:
    t_nadir: float
    f_nadir: float
    f_e: float
    modes: tuple[int, ...]
    iterations: int
    fallback: bool
    tau0: float
    expansion: NadirExpansion | None = None


def _root(quad) -> float | None:
    a, b, c = quad
    if a == 0:
        return -c / b if b != 0 and -c / b > 0 else None
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    sq = np.sqrt(disc)
    for r in ((-b + sq) / (2 * a), (-b - sq) / (2 * a)):
        if r > 0:
            return float(r)
    return None


def _dense_extremum(coeffs, sign, t_max=60.0, step=1e-3):
    t = np.arange(0.0, t_max + step / 2, step)
    y = sign * coi_response(coeffs, t)
    k = int(np.argmin(y))
    if k == 0 or k == t.size - 1:
        raise NadirError("the modal response has no interior extremum in [0, 60] s")
    y0, y1, y2 = y[k - 1:k + 2]
    den = y0 - 2 * y1 + y2
    s = 0.5 * (y0 - y2) / den if den > 0 else 0.0
    return float(t[k] + s * step)


def predict_nadir(coeffs: ModalCoefficients, f_e: float, tau0: float | None = None,
                  f_nom: float = 60.0, deficit: bool = True, tol: float = 1e-4,
                  max_iter: int = 50, literal_real_term: bool = False) -> NadirPrediction:
    """Nadir time and frequency by repeated expansion of the COI derivative.

    For a surplus (``deficit=False``) the same procedure finds the peak.
    Falls back to a dense scan of the modal response when the quadratic has
    no usable root, the iteration does not settle, or it settles on a
    stationary point of the wrong kind.
    """
    if coeffs.is_zero:
        raise NadirError("all modal coefficients are zero")
    if tau0 is None:
        tau0 = initial_expansion_point(coeffs, deficit)
    if not tau0 > 0:
        raise ValueError("initial expansion point must be positive")
    sign = 1.0 if deficit else -1.0
    tau, it, t_star, exp = tau0, 0, None, None
    while it < max_iter:
        it += 1
        exp = taylor_coefficients(coeffs, tau, literal_real_term)
        t_new = _root(exp.quadratic)
        if t_new is None:
            break
        if abs(t_new - tau) < tol:
            t_star = t_new
            break
        tau = t_new
    fallback = t_star is None or sign * _coi_second_derivative(coeffs, t_star) <= 0
    if fallback:
        t_star = _dense_extremum(coeffs, sign)
    f_nadir = f_e + float(coi_response(coeffs, t_star)) * f_nom
    return NadirPrediction(float(t_star), f_nadir, f_e, coeffs.modes, it, fallback, float(tau0),
                           None if fallback else exp)
