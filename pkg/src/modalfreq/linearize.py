"""Equilibrium solve, finite-difference Jacobians and Kron reduction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .dynamics import StateLayout, SystemState, get_model
from .grid import GridCase


class EquilibriumError(RuntimeError):
    pass


class SingularAlgebraicError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LinearModel:
    a_s: np.ndarray
    j1: np.ndarray
    j2: np.ndarray
    j3: np.ndarray
    j4: np.ndarray
    equilibrium: SystemState
    layout: StateLayout
    j4_cond: float


def _fd_step(v: np.ndarray) -> np.ndarray:
    return np.maximum(1e-6, 1e-6 * np.abs(v))


def numerical_jacobian(fun, z: np.ndarray, m: int | None = None) -> np.ndarray:
    """Central differences, one column per variable."""
    h = _fd_step(z)
    cols = []
    for k in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[k] += h[k]
        zm[k] -= h[k]
        cols.append((fun(zp) - fun(zm)) / (2 * h[k]))
    return np.column_stack(cols)


def jacobians(case: GridCase, layout: StateLayout, eq: SystemState):
    """(J1, J2, J3, J4) = d(f, g)/d(x, y) at ``eq``."""
    model = get_model(case, layout)
    n = layout.n
    z = np.concatenate([eq.x, eq.y])
    jac = numerical_jacobian(model.fg, z)
    return jac[:n, :n], jac[:n, n:], jac[n:, :n], jac[n:, n:]


def kron_reduce(j1, j2, j3, j4, names: list[str] | None = None) -> np.ndarray:
    """A_s = J1 - J2 J4^-1 J3 through an LU factorization of J4."""
    j4 = np.atleast_2d(np.asarray(j4, float))
    j1, j2, j3 = (np.atleast_2d(np.asarray(m, float)) for m in (j1, j2, j3))
    with warnings.catch_warnings():
        # singularity is detected and reported below
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(j4, check_finite=True)
    diag = np.abs(np.diag(lu))
    scale = max(np.abs(j4).max(), 1.0)
    if np.min(diag) <= 1e-13 * scale:
        k = int(np.argmin(diag))
        # pivot row k of the permuted factor corresponds to this original equation
        perm = np.arange(j4.shape[0])
        for i, p in enumerate(piv):
            perm[i], perm[p] = perm[p], perm[i]
        row = int(perm[k])
        label = names[row] if names is not None else f"#{row}"
        raise SingularAlgebraicError(f"J4 is singular; worst-conditioned algebraic equation: {label}")
    return j1 - j2 @ la.lu_solve((lu, piv), j3)


def linearize(case: GridCase, layout: StateLayout, eq: SystemState) -> LinearModel:
    j1, j2, j3, j4 = jacobians(case, layout, eq)
    a_s = kron_reduce(j1, j2, j3, j4, list(layout.alg_names))
    return LinearModel(a_s, j1, j2, j3, j4, eq, layout, float(np.linalg.cond(j4)))


def equilibrate(case: GridCase, layout: StateLayout, guess: SystemState,
                tol: float = 1e-10, max_iter: int = 50) -> SystemState:
    """Newton solve of f = 0, g = 0 starting at ``guess``."""
    model = get_model(case, layout)
    n = layout.n
    z = np.concatenate([guess.x, guess.y])
    r = model.fg(z)
    err = np.max(np.abs(r))
    it = 0
    while err > tol:
        if it >= max_iter:
            raise EquilibriumError(f"equilibrium not found in {max_iter} iterations (residual {err:.2e})")
        it += 1
        jac = numerical_jacobian(model.fg, z)
        try:
            lu = la.lu_factor(jac)
        except (ValueError, la.LinAlgError):
            raise EquilibriumError("combined Jacobian is singular") from None
        if np.min(np.abs(np.diag(lu[0]))) < 1e-12 * max(1.0, np.abs(jac).max()):
            raise EquilibriumError("combined Jacobian is singular (no frequency-regulating equilibrium)")
        dz = la.lu_solve(lu, -r)
        # damped step keeps the first iterations inside the basin
        step = 1.0
        while True:
            z_new = z + step * dz
            r_new = model.fg(z_new)
            e_new = np.max(np.abs(r_new))
            if e_new < err or step < 1e-3:
                break
            step *= 0.5
        z, r, err = z_new, r_new, e_new
        if not np.isfinite(err):
            raise EquilibriumError("Newton iteration diverged")
    return SystemState(z[:n].copy(), z[n:].copy(), guess.t)


def dump_matrix(path, a: np.ndarray) -> None:
    np.savetxt(path, a, fmt="%.16e")
