"""Differential-algebraic machine model: x' = f(x, y), 0 = g(x, y).

Per generator: two-axis machine (4 states), IEEE DC1A-type exciter
(5 states) and an IEESGO-style turbine/governor (5 states). Rotor angles
are measured in the rotating frame of a reference machine, whose own angle
is therefore not a state. The normative equations are in
``docs/device_equations.md``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .grid import GridCase, PowerFlowSolution, build_ybus

# voltage exponents (active, reactive) of the dynamic load models
LOAD_EXPONENTS = {"impedance": (2, 2), "current": (1, 1), "power": (0, 0), "mixed": (0, 2)}

MACHINE_STATES = ("delta", "omega", "eq1", "ed1")
EXCITER_STATES = ("vm", "xll", "vr", "efd", "rf")
GOVERNOR_STATES = ("y1", "y2", "y3", "xrh", "tm")
BLOCK = MACHINE_STATES + EXCITER_STATES + GOVERNOR_STATES


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StateLayout:
    """Ordering of differential and algebraic variables.

    ``index[kind][k]`` is the position of state ``kind`` of the k-th
    in-service generator (``-1`` for the reference machine's angle).
    ``vref``, ``pc`` and ``v0`` are the operating setpoints fixed at
    initialization (AVR reference, governor load reference, and the bus
    voltage magnitudes the voltage-dependent loads are referred to).
    """

    gen_ids: tuple[int, ...]
    ref_gen: int
    names: tuple[tuple[int, str], ...]
    alg_names: tuple[str, ...]
    index: dict
    vref: np.ndarray
    pc: np.ndarray
    v0: np.ndarray

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def l(self) -> int:
        return len(self.alg_names)

    @property
    def speed_idx(self) -> np.ndarray:
        """The index set of rotor speeds, one per in-service generator."""
        return self.index["omega"]

    @property
    def governor_idx(self) -> dict:
        return {k: self.index[k] for k in GOVERNOR_STATES}

    def machine_block(self, gen_id: int) -> list[int]:
        k = self.gen_ids.index(gen_id)
        return [int(self.index[s][k]) for s in BLOCK if self.index[s][k] >= 0]

    def state_kind(self, i: int) -> str:
        return self.names[i][1]

    def labels(self) -> list[str]:
        return [f"{name}_{gid}" for gid, name in self.names]


@dataclass
class SystemState:
    x: np.ndarray
    y: np.ndarray
    t: float = 0.0

    def copy(self) -> "SystemState":
        return SystemState(self.x.copy(), self.y.copy(), self.t)


def make_layout(case: GridCase, ref_gen: int, vref, pc, v0) -> StateLayout:
    gen_ids = tuple(g.id for g in case.generators)
    if ref_gen not in gen_ids:
        raise ValueError(f"reference generator {ref_gen} is not in service")
    names = []
    index = {s: np.full(len(gen_ids), -1, dtype=int) for s in BLOCK}
    for k, gid in enumerate(gen_ids):
        for s in BLOCK:
            if s == "delta" and gid == ref_gen:
                continue
            index[s][k] = len(names)
            names.append((gid, s))
    nb = len(case.buses)
    alg = [f"vre_{b.id}" for b in case.buses] + [f"vim_{b.id}" for b in case.buses]
    alg += [f"id_{g}" for g in gen_ids] + [f"iq_{g}" for g in gen_ids]
    assert len(alg) == 2 * nb + 2 * len(gen_ids)
    return StateLayout(gen_ids, ref_gen, tuple(names), tuple(alg), index,
                       np.asarray(vref, float), np.asarray(pc, float), np.asarray(v0, float))


def default_reference(case: GridCase) -> int:
    slack = next(b.id for b in case.buses if b.type == "slack")
    return next(g.id for g in case.generators if g.bus == slack)


class DynamicModel:
    """Vectorized residuals for one (case, layout) pair."""

    def __init__(self, case: GridCase, layout: StateLayout):
        if tuple(g.id for g in case.generators) != layout.gen_ids:
            raise ValueError("layout does not match the case's in-service generators")
        self.case = case
        self.layout = layout
        gens = case.generators
        self.ng = ng = len(gens)
        self.nb = nb = len(case.buses)
        self.n = layout.n
        self.l = layout.l
        bidx = case.bus_index()
        self.gbus = np.array([bidx[g.bus] for g in gens])
        a = lambda attr: np.array([getattr(g, attr) for g in gens], float)
        self.h, self.d, self.ra = a("h"), a("d"), a("ra")
        self.xd, self.xq, self.xd1, self.xq1 = a("xd"), a("xq"), a("xd1"), a("xq1")
        self.td01, self.tq01 = a("td01"), a("tq01")
        exc = [case.exciter_for(g.id) for g in gens]
        e = lambda attr: np.array([getattr(x, attr) for x in exc], float)
        self.tr, self.tb, self.tc = e("tr"), e("tb"), e("tc")
        self.ka, self.ta, self.ke, self.te = e("ka"), e("ta"), e("ke"), e("te")
        self.kf, self.tf = e("kf"), e("tf")
        self.vrmax, self.vrmin = e("vrmax"), e("vrmin")
        gov = [case.governor_for(g.id) for g in gens]
        q = lambda attr: np.array([getattr(x, attr) for x in gov], float)
        self.droop = q("r")
        self.k1 = (a("mva") / case.base_mva) / self.droop  # system base
        self.t1, self.t2, self.t3 = q("t1"), q("t2"), q("t3")
        self.t4, self.t5, self.t6, self.k2 = q("t4"), q("t5"), q("t6"), q("k2")
        self.wb = 2 * np.pi * case.f_nom
        self.limits = case.exciter_limits
        ref_k = layout.gen_ids.index(layout.ref_gen)
        self.ref_k = ref_k
        ix = layout.index
        self.ix = {s: ix[s] for s in BLOCK}
        self.delta_mask = ix["delta"] >= 0
        p_exp, q_exp = LOAD_EXPONENTS[case.load_model]
        ybus = build_ybus(case)
        if (p_exp, q_exp) == (2, 2):
            self.yaug = ybus + np.diag(load_admittance(case, layout.v0))
            self.pload = None
        else:
            self.yaug = ybus
            self.pload = np.array([b.pload for b in case.buses])
            self.qload = np.array([b.qload for b in case.buses])
            self.load_exp = (p_exp, q_exp)

    # -- helpers -----------------------------------------------------------
    def angles(self, x: np.ndarray) -> np.ndarray:
        dl = np.zeros(self.ng)
        dl[self.delta_mask] = x[self.ix["delta"][self.delta_mask]]
        return dl

    def split_y(self, y: np.ndarray):
        nb, ng = self.nb, self.ng
        v = y[:nb] + 1j * y[nb:2 * nb]
        return v, y[2 * nb:2 * nb + ng], y[2 * nb + ng:]

    def electrical_torque(self, x, y):
        _, i_d, i_q = self.split_y(y)
        ed1, eq1 = x[self.ix["ed1"]], x[self.ix["eq1"]]
        return ed1 * i_d + eq1 * i_q + (self.xq1 - self.xd1) * i_d * i_q

    # -- residuals ---------------------------------------------------------
    def f(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ix = self.ix
        v, i_d, i_q = self.split_y(y)
        om = x[ix["omega"]]
        eq1, ed1 = x[ix["eq1"]], x[ix["ed1"]]
        vm, xll, vr, efd, rf = (x[ix[s]] for s in EXCITER_STATES)
        y1, y2, y3, xrh, tm = (x[ix[s]] for s in GOVERNOR_STATES)

        out = np.empty(self.n)
        dm = self.delta_mask
        out[ix["delta"][dm]] = self.wb * (om[dm] - om[self.ref_k])
        te = ed1 * i_d + eq1 * i_q + (self.xq1 - self.xd1) * i_d * i_q
        out[ix["omega"]] = (tm - te - self.d * (om - 1.0)) / (2.0 * self.h)
        out[ix["eq1"]] = (-eq1 - (self.xd - self.xd1) * i_d + efd) / self.td01
        out[ix["ed1"]] = (-ed1 + (self.xq - self.xq1) * i_q) / self.tq01

        vt = np.abs(v[self.gbus])
        out[ix["vm"]] = (vt - vm) / self.tr
        err = self.layout.vref - vm + rf - self.kf / self.tf * efd
        out[ix["xll"]] = (err - xll) / self.tb
        ell = xll + self.tc / self.tb * (err - xll)
        dvr = (self.ka * ell - vr) / self.ta
        if self.limits:
            dvr = np.where((vr >= self.vrmax) & (dvr > 0) | (vr <= self.vrmin) & (dvr < 0), 0.0, dvr)
        out[ix["vr"]] = dvr
        out[ix["efd"]] = (-self.ke * efd + vr) / self.te
        out[ix["rf"]] = (-rf + self.kf / self.tf * efd) / self.tf

        u = self.k1 * (1.0 - om)
        dy1 = (u - y1) / self.t1
        out[ix["y1"]] = dy1
        out[ix["y2"]] = -dy1 - y2 / self.t3
        lead = y1 + (1.0 - self.t2 / self.t3) * y2
        dy3 = (lead - y3) / self.t4
        out[ix["y3"]] = dy3
        out[ix["xrh"]] = -xrh / self.t5 - dy3
        mix = self.layout.pc + y3 + (1.0 - self.k2) * xrh
        out[ix["tm"]] = (mix - tm) / self.t6
        return out

    def g(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        v, i_d, i_q = self.split_y(y)
        dl = self.angles(x)
        ed1, eq1 = x[self.ix["ed1"]], x[self.ix["eq1"]]
        rot = np.exp(-1j * (dl - np.pi / 2))
        vdq = v[self.gbus] * rot
        gd = ed1 - vdq.real - self.ra * i_d + self.xq1 * i_q
        gq = eq1 - vdq.imag - self.ra * i_q - self.xd1 * i_d
        inj = np.zeros(self.nb, dtype=complex)
        np.add.at(inj, self.gbus, (i_d + 1j * i_q) / rot)
        kcl = self.yaug @ v - inj
        if self.pload is not None:
            ratio = np.abs(v) / self.layout.v0
            p_exp, q_exp = self.load_exp
            sl = self.pload * ratio ** p_exp + 1j * self.qload * ratio ** q_exp
            kcl += np.conj(sl / v)
        return np.concatenate([kcl.real, kcl.imag, gd, gq])

    def fg(self, z: np.ndarray) -> np.ndarray:
        return np.concatenate([self.f(z[:self.n], z[self.n:]), self.g(z[:self.n], z[self.n:])])

    def coi_speed(self, x: np.ndarray) -> np.ndarray:
        """Inertia-weighted mean speed; ``x`` may be (n,) or (n, T)."""
        w = self.h / self.h.sum()
        return w @ x[self.ix["omega"]]


@dataclass(frozen=True)
class CoiWeights:
    """Inertia shares of the in-service machines, in generator order."""

    gen_ids: tuple[int, ...]
    h: np.ndarray
    c: np.ndarray

    @property
    def h_total(self) -> float:
        return float(self.h.sum())


def coi_weights(case: GridCase) -> CoiWeights:
    if not case.generators:
        raise ValueError("no generator in service")
    h = np.array([g.h for g in case.generators], float)
    total = h.sum()
    if not total > 0:
        raise ValueError("total inertia is zero")
    return CoiWeights(tuple(g.id for g in case.generators), h, h / total)


def load_admittance(case: GridCase, v0: np.ndarray) -> np.ndarray:
    """Constant-impedance equivalents of the PQ loads at voltage magnitudes ``v0``."""
    p = np.array([b.pload for b in case.buses])
    q = np.array([b.qload for b in case.buses])
    return (p - 1j * q) / np.asarray(v0) ** 2


_MODEL_CACHE: "OrderedDict[tuple[int, int], tuple]" = OrderedDict()


def get_model(case: GridCase, layout: StateLayout) -> DynamicModel:
    key = (id(case), id(layout))
    hit = _MODEL_CACHE.get(key)
    if hit is not None and hit[0] is case and hit[1] is layout:
        _MODEL_CACHE.move_to_end(key)
        return hit[2]
    model = DynamicModel(case, layout)
    _MODEL_CACHE[key] = (case, layout, model)
    while len(_MODEL_CACHE) > 32:
        _MODEL_CACHE.popitem(last=False)
    return model


def _check_dims(layout: StateLayout, state: SystemState):
    if state.x.shape != (layout.n,) or state.y.shape != (layout.l,):
        raise ValueError(f"state dimensions {state.x.shape}/{state.y.shape} do not match layout "
                         f"({layout.n}, {layout.l})")


def residual_f(layout: StateLayout, case: GridCase, state: SystemState) -> np.ndarray:
    _check_dims(layout, state)
    return get_model(case, layout).f(state.x, state.y)


def residual_g(layout: StateLayout, case: GridCase, state: SystemState) -> np.ndarray:
    _check_dims(layout, state)
    return get_model(case, layout).g(state.x, state.y)


def init_dynamic_state(case: GridCase, pf: PowerFlowSolution, ref_gen: int | None = None,
                       tol_f: float = 1e-8, tol_g: float = 1e-10) -> tuple[StateLayout, SystemState]:
    """Steady state consistent with a converged power flow, all speeds 1 pu."""
    if ref_gen is None:
        ref_gen = default_reference(case)
    gens = case.generators
    ng = len(gens)
    bidx = case.bus_index()
    gb = np.array([bidx[g.bus] for g in gens])
    a = lambda attr: np.array([getattr(g, attr) for g in gens], float)
    ra, xq, xd, xd1, xq1 = a("ra"), a("xq"), a("xd"), a("xd1"), a("xq1")
    vg = pf.v[gb]
    ig = np.conj((pf.pg + 1j * pf.qg) / vg)
    delta = np.angle(vg + (ra + 1j * xq) * ig)
    rot = np.exp(-1j * (delta - np.pi / 2))
    idq, vdq = ig * rot, vg * rot
    i_d, i_q = idq.real, idq.imag
    ed1 = vdq.real + ra * i_d - xq1 * i_q
    eq1 = vdq.imag + ra * i_q + xd1 * i_d
    efd = eq1 + (xd - xd1) * i_d
    tm = ed1 * i_d + eq1 * i_q + (xq1 - xd1) * i_d * i_q

    exc = [case.exciter_for(g.id) for g in gens]
    ka = np.array([e.ka for e in exc])
    ke = np.array([e.ke for e in exc])
    kf = np.array([e.kf for e in exc])
    tf = np.array([e.tf for e in exc])
    vr = ke * efd
    rf = kf / tf * efd
    vm = np.abs(vg)
    err = vr / ka
    vref = vm + err

    ref_k = [g.id for g in gens].index(ref_gen)
    shift = delta[ref_k]
    layout = make_layout(case, ref_gen, vref, tm.copy(), np.abs(pf.v))
    values = {
        "delta": delta - shift, "omega": np.ones(ng), "eq1": eq1, "ed1": ed1,
        "vm": vm, "xll": err, "vr": vr, "efd": efd, "rf": rf,
        "y1": np.zeros(ng), "y2": np.zeros(ng), "y3": np.zeros(ng), "xrh": np.zeros(ng), "tm": tm,
    }
    x = np.empty(layout.n)
    for s, idx in layout.index.items():
        m = idx >= 0
        x[idx[m]] = values[s][m]
    v = pf.v * np.exp(-1j * shift)
    y = np.concatenate([v.real, v.imag, i_d, i_q])
    state = SystemState(x, y, 0.0)
    model = get_model(case, layout)
    rf_, rg_ = np.max(np.abs(model.f(x, y))), np.max(np.abs(model.g(x, y)))
    if rf_ > tol_f or rg_ > tol_g:
        raise InitializationError(f"initialization residual too large: |f|={rf_:.2e}, |g|={rg_:.2e}")
    return layout, state


def project_state(layout: StateLayout, state: SystemState, case_post: GridCase,
                  ref_gen: int | None = None) -> tuple[StateLayout, SystemState]:
    """Restrict a state to the generators still in service in ``case_post``.

    The reference frame moves to ``ref_gen`` (default: the post-disturbance
    slack unit) if the old reference machine is gone.
    """
    keep = [g.id for g in case_post.generators]
    if ref_gen is None:
        ref_gen = layout.ref_gen if layout.ref_gen in keep else default_reference(case_post)
    old_k = {gid: k for k, gid in enumerate(layout.gen_ids)}
    sel = np.array([old_k[g] for g in keep])
    nb = len(case_post.buses)
    ng_old = len(layout.gen_ids)
    dl_old = np.zeros(ng_old)
    m = layout.index["delta"] >= 0
    dl_old[m] = state.x[layout.index["delta"][m]]
    shift = dl_old[old_k[ref_gen]]
    new = make_layout(case_post, ref_gen, layout.vref[sel], layout.pc[sel], layout.v0)
    x = np.empty(new.n)
    for s, idx in new.index.items():
        mm = idx >= 0
        if s == "delta":
            vals = dl_old[sel] - shift
        else:
            vals = state.x[layout.index[s][sel]]
        x[idx[mm]] = vals[mm]
    v = (state.y[:nb] + 1j * state.y[nb:2 * nb]) * np.exp(-1j * shift)
    i_d = state.y[2 * nb:2 * nb + ng_old][sel]
    i_q = state.y[2 * nb + ng_old:][sel]
    y = np.concatenate([v.real, v.imag, i_d, i_q])
    return new, SystemState(x, y, state.t)
