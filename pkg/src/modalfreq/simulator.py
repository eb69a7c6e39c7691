"""Nonlinear time-domain integration of the machine/network DAE.

Implicit trapezoidal rule with a simultaneous Newton solve of the
differential and algebraic equations at every step. The iteration matrix
is a finite-difference Jacobian that is reused across steps (chord
Newton) and refreshed whenever convergence slows down; steps that still
fail are split in half.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .dynamics import (CoiWeights, StateLayout, SystemState, coi_weights, get_model,
                       project_state)
from .grid import GenTrip, GridCase, NoDisturbance, Scenario, apply_scenario
from .linearize import numerical_jacobian


class SimulationError(RuntimeError):
    """Newton failure at a time step; carries the time and the residual."""

    def __init__(self, msg: str, t: float, residual: float):
        super().__init__(msg)
        self.t = t
        self.residual = residual


# Callables invoked as hook(case, scenario) on every simulate() call.
# Used by tooling that needs to know whether the oracle ran.
simulation_hooks: list = []


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray  # samples x states
    y: np.ndarray  # samples x algebraic variables
    layout: StateLayout
    case: GridCase  # the post-disturbance case actually integrated
    scenario: str
    newton_iterations: int = 0
    jacobian_updates: int = 0

    @property
    def state_names(self) -> list[str]:
        return self.layout.labels()

    def state(self, k: int) -> SystemState:
        return SystemState(self.x[k].copy(), self.y[k].copy(), float(self.t[k]))


def _solve_algebraic(model, x, y, tol, max_iter=30):
    """Re-solve g(x, y) = 0 for y with x frozen (used for the jump at t = 0+)."""
    for _ in range(max_iter):
        r = model.g(x, y)
        if np.max(np.abs(r)) <= tol:
            return y
        jac = numerical_jacobian(lambda yy: model.g(x, yy), y)
        try:
            y = y - np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            raise SimulationError("algebraic Jacobian is singular", 0.0, float(np.max(np.abs(r)))) from None
    r = np.max(np.abs(model.g(x, y)))
    if r > tol:
        raise SimulationError(f"algebraic equations did not converge at t=0+ (|g|={r:.2e})", 0.0, r)
    return y


def simulate(case: GridCase, layout: StateLayout, state0: SystemState,
             scenario: Scenario | None = None, horizon: float = 30.0, dt: float = 0.01,
             tol: float = 1e-8, max_iter: int = 25, max_halvings: int = 4) -> Trajectory:
    """Integrate from ``state0`` with ``scenario`` applied at t = 0+.

    A step whose Newton solve fails even with a fresh iteration matrix is
    retried as two half steps, at most ``max_halvings`` levels deep. Output
    stays on the uniform ``dt`` grid.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least one step")
    scenario = scenario or NoDisturbance()
    for hook in list(simulation_hooks):
        hook(case, scenario)

    post = apply_scenario(case, scenario)
    if isinstance(scenario, GenTrip):
        layout, state0 = project_state(layout, state0, post)
    model = get_model(post, layout)
    n = layout.n

    x = state0.x.copy()
    y = _solve_algebraic(model, x, state0.y.copy(), tol)

    steps = int(round(horizon / dt))
    ts = state0.t + dt * np.arange(steps + 1)
    xs = np.empty((steps + 1, n))
    ys = np.empty((steps + 1, layout.l))
    xs[0], ys[0] = x, y

    eye = np.eye(n)

    def residual(z, x_old, f_old, h):
        xn, yn = z[:n], z[n:]
        return np.concatenate([xn - x_old - 0.5 * h * (model.f(xn, yn) + f_old), model.g(xn, yn)])

    def factor(z, h):
        jac = numerical_jacobian(model.fg, z)
        jac[:n] *= -0.5 * h
        jac[:n, :n] += eye
        return la.lu_factor(jac)

    stats = {"updates": 1, "iterations": 0}
    cache = {"h": dt}

    def newton(z, f_old, h, lu):
        """Chord iterations from z; returns (z_new, converged, residual)."""
        x_old = z[:n].copy()
        z_new = z.copy()
        r = residual(z_new, x_old, f_old, h)
        err = np.max(np.abs(r))
        it = 0
        prev = np.inf
        while err > tol and it < max_iter:
            z_new -= la.lu_solve(lu, r)
            r = residual(z_new, x_old, f_old, h)
            prev, err = err, np.max(np.abs(r))
            it += 1
            if not np.isfinite(err) or (it > 3 and err > 0.5 * prev):
                break
        stats["iterations"] += it
        return z_new, err <= tol, err

    def step(z, f_old, h, t_end, depth=0):
        """Advance z by h, refreshing the matrix and then halving the step on failure."""
        if cache["h"] != h:
            cache["lu"], cache["h"] = factor(z, h), h
            stats["updates"] += 1
        z_new, ok, err = newton(z, f_old, h, cache["lu"])
        if ok:
            return z_new
        # slow or diverging: rebuild the iteration matrix at the last good point
        cache["lu"] = factor(z, h)
        stats["updates"] += 1
        z_new, ok, err = newton(z, f_old, h, cache["lu"])
        if ok:
            return z_new
        if depth >= max_halvings:
            raise SimulationError(f"Newton did not converge at t={t_end:.4f} s "
                                  f"(residual {err:.2e})", float(t_end), float(err))
        z_mid = step(z, f_old, 0.5 * h, t_end - 0.5 * h, depth + 1)
        return step(z_mid, model.f(z_mid[:n], z_mid[n:]), 0.5 * h, t_end, depth + 1)

    z = np.concatenate([x, y])
    cache["lu"] = factor(z, dt)
    f_old = model.f(x, y)
    for k in range(1, steps + 1):
        z = step(z, f_old, dt, float(ts[k]))
        xs[k], ys[k] = z[:n], z[n:]
        f_old = model.f(z[:n], z[n:])
    return Trajectory(ts, xs, ys, layout, post, scenario.id, stats["iterations"], stats["updates"])


def coi_frequency(traj: Trajectory, weights: CoiWeights | None = None):
    """Centre-of-inertia speed (pu) and frequency (Hz) at every stored time."""
    if weights is None:
        weights = coi_weights(traj.case)
    if tuple(weights.gen_ids) != traj.layout.gen_ids:
        raise ValueError(f"weights are for generators {tuple(weights.gen_ids)}, "
                         f"trajectory has {traj.layout.gen_ids}")
    speed = traj.x[:, traj.layout.speed_idx] @ weights.c
    return speed, speed * traj.case.f_nom


def find_nadir_numeric(t, f) -> tuple[float, float]:
    """Sample minimum refined by a parabola through it and its two neighbours."""
    t = np.asarray(t, float)
    f = np.asarray(f, float)
    if f.size == 0:
        raise ValueError("empty series")
    k = int(np.argmin(f))
    if k == 0 or k == f.size - 1:
        return float(t[k]), float(f[k])
    t3, f3 = t[k - 1:k + 2], f[k - 1:k + 2]
    c2, c1, c0 = np.polyfit(t3 - t[k], f3, 2)
    if c2 <= 0:
        return float(t[k]), float(f[k])
    s = -c1 / (2 * c2)
    return float(t[k] + s), float(c0 - c1 * c1 / (4 * c2))


def write_trajectory_csv(traj: Trajectory, states_path, coi_path, weights: CoiWeights | None = None):
    _, hz = coi_frequency(traj, weights)
    with open(states_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + traj.state_names)
        for k in range(traj.t.size):
            w.writerow([f"{traj.t[k]:.6f}"] + [f"{v:.12e}" for v in traj.x[k]])
    with open(coi_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "f_coi_hz"])
        for k in range(traj.t.size):
            w.writerow([f"{traj.t[k]:.6f}", f"{hz[k]:.12f}"])
