"""Eigenstructure of the reduced state matrix: modes, participation, reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .dynamics import GOVERNOR_STATES, CoiWeights, StateLayout


class ModalError(RuntimeError):
    pass


class EmptySelectionError(ModalError):
    pass


@dataclass(frozen=True)
class ModalBasis:
    """Eigenvalues with right (columns of ``v``) and left (columns of ``w``)
    eigenvectors scaled so that ``w.T @ v == I``.

    ``v`` columns have unit 2-norm. ``sensitivity`` holds |vl_i^H v_i| for
    unit left/right vectors, i.e. the reciprocal eigenvalue condition numbers.
    """

    eigenvalues: np.ndarray
    v: np.ndarray
    w: np.ndarray
    sensitivity: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenvalues.size


def eigendecompose(a: np.ndarray, min_overlap: float = 1e-12) -> ModalBasis:
    a = np.asarray(a, float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("state matrix must be square")
    try:
        lam, vl, vr = la.eig(a, left=True, right=True)
    except la.LinAlgError as exc:
        raise ModalError(f"eigensolver failed: {exc}") from None
    vr = vr / np.linalg.norm(vr, axis=0)
    vl = vl / np.linalg.norm(vl, axis=0)
    overlap = np.abs(np.sum(vl.conj() * vr, axis=0))
    if np.any(overlap < min_overlap):
        k = int(np.argmin(overlap))
        raise ModalError(f"matrix is (nearly) defective at eigenvalue {lam[k]:.6g}; "
                         f"left/right overlap {overlap[k]:.1e}")
    try:
        w = np.linalg.inv(vr).T
    except np.linalg.LinAlgError:
        raise ModalError("right eigenvector matrix is singular (defective matrix)") from None
    return ModalBasis(lam, vr, w, overlap)


def participation_factors(basis: ModalBasis) -> np.ndarray:
    """Rows are modes, columns are states; each row sums to one."""
    p = np.abs(basis.v * basis.w).T
    return p / p.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ModeSet:
    indices: tuple[int, ...]
    kinds: tuple[str, ...]  # "real" | "pair", per index
    governor_pf: tuple[float, ...]
    coi_share: tuple[float, ...]

    def __len__(self):
        return len(self.indices)

    @property
    def n_real(self) -> int:
        return sum(k == "real" for k in self.kinds)

    @property
    def n_pairs(self) -> int:
        return sum(k == "pair" for k in self.kinds) // 2


def _conjugate_partner(lam: np.ndarray, i: int) -> int:
    d = np.abs(lam - np.conj(lam[i]))
    d[i] = np.inf
    return int(np.argmin(d))


def coi_participation(basis: ModalBasis, layout: StateLayout, weights: CoiWeights) -> np.ndarray:
    """Share of each mode in the COI speed response to a uniform speed offset.

    For mode i this is (c' v_i)(w_i' b) with c the inertia weights on the
    speed states and b the all-ones speed direction. The shares sum to one
    over the full spectrum; conjugate modes get conjugate values.
    """
    if tuple(weights.gen_ids) != layout.gen_ids:
        raise ValueError("COI weights do not match the layout's generators")
    spd = layout.speed_idx
    return (weights.c @ basis.v[spd]) * basis.w[spd].sum(axis=0)


def select_modes(basis: ModalBasis, pf: np.ndarray, layout: StateLayout, weights: CoiWeights,
                 threshold: float = 0.001, slow_cutoff: float = 10.0,
                 min_coi_share: float = 0.05) -> ModeSet:
    """Slow governor-driven modes that shape the COI frequency.

    A mode is kept when |lambda| <= ``slow_cutoff``, some governor state has
    participation above ``threshold`` and its COI share magnitude is at least
    ``min_coi_share``. The set is closed under conjugation.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if slow_cutoff <= 0:
        raise ValueError("slow-mode cutoff must be positive")
    lam = basis.eigenvalues
    gov_cols = np.concatenate([layout.index[s] for s in GOVERNOR_STATES])
    gov_pf = pf[:, gov_cols].max(axis=1)
    share = np.abs(coi_participation(basis, layout, weights))
    keep = (np.abs(lam) <= slow_cutoff) & (gov_pf > threshold) & (share >= min_coi_share)
    chosen = set(np.flatnonzero(keep).tolist())
    for i in list(chosen):
        if lam[i].imag != 0:
            chosen.add(_conjugate_partner(lam, i))
    if not chosen:
        raise EmptySelectionError(f"no mode passes the participation threshold {threshold:g}; "
                                  "lower the threshold or raise the slow-mode cutoff")
    idx = sorted(chosen, key=lambda i: (-lam[i].real, lam[i].imag))
    kinds = tuple("pair" if lam[i].imag != 0 else "real" for i in idx)
    return ModeSet(tuple(idx), kinds, tuple(float(gov_pf[i]) for i in idx),
                   tuple(float(share[i]) for i in idx))


def modal_response(basis: ModalBasis, dx0: np.ndarray, modes, times) -> np.ndarray:
    """Truncated modal sum, states x times."""
    dx0 = np.asarray(dx0, float)
    if dx0.shape != (basis.n,):
        raise ValueError(f"initial deviation has shape {dx0.shape}, expected ({basis.n},)")
    idx = np.asarray(modes.indices if isinstance(modes, ModeSet) else modes, dtype=int)
    t = np.atleast_1d(np.asarray(times, float))
    lam = basis.eigenvalues[idx]
    q0 = basis.w[:, idx].T @ dx0
    out = (basis.v[:, idx] * q0) @ np.exp(np.outer(lam, t))
    scale = max(1.0, np.abs(out).max())
    if np.abs(out.imag).max() > 1e-10 * scale:
        raise ModalError("modal sum is not real; mode set is not closed under conjugation")
    return out.real
