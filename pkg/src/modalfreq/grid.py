"""Grid case data, network admittance matrix and AC power flow."""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class CaseError(ValueError):
    """Raised for unreadable or invalid case files."""


class PowerFlowError(RuntimeError):
    """Raised when Newton-Raphson fails to converge."""

    def __init__(self, message: str, mismatch: float, iterations: int):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class Bus:
    id: int
    type: str  # "slack" | "PV" | "PQ"
    vset: float = 1.0
    pload: float = 0.0
    qload: float = 0.0
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    mva: float
    pg: float
    h: float
    d: float = 0.0
    ra: float = 0.0
    xd: float = 1.0
    xq: float = 1.0
    xd1: float = 0.3
    xq1: float = 0.3
    td01: float = 6.0
    tq01: float = 1.0


@dataclass(frozen=True)
class Exciter:
    gen: int
    tr: float = 0.02
    tb: float = 1.0
    tc: float = 1.0
    ka: float = 20.0
    ta: float = 0.2
    ke: float = 1.0
    te: float = 0.314
    kf: float = 0.063
    tf: float = 0.35
    vrmax: float = 10.0
    vrmin: float = -10.0


@dataclass(frozen=True)
class Governor:
    gen: int
    r: float = 0.05  # droop, pu on machine base
    t1: float = 0.1
    t2: float = 0.0
    t3: float = 0.1
    t4: float = 0.1
    t5: float = 7.0
    t6: float = 0.3
    k2: float = 0.3


@dataclass(frozen=True)
class GridCase:
    """Static network plus dynamic device data, all pu on ``base_mva``.

    Exception: inertia constants ``h`` are in seconds on system base and
    ``f_nom`` is in Hz. Droops are on the machine's own MVA base.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    exciters: tuple[Exciter, ...]
    governors: tuple[Governor, ...]
    base_mva: float = 100.0
    f_nom: float = 60.0
    name: str = ""
    provenance: str = ""
    exciter_limits: bool = False
    load_model: str = "impedance"  # dynamic load representation, see LOAD_MODELS

    def __post_init__(self):
        validate_case(self)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def exciter_for(self, gen_id: int) -> Exciter:
        for e in self.exciters:
            if e.gen == gen_id:
                return e
        raise KeyError(gen_id)

    def governor_for(self, gen_id: int) -> Governor:
        for g in self.governors:
            if g.gen == gen_id:
                return g
        raise KeyError(gen_id)

    def total_load(self) -> float:
        return sum(b.pload for b in self.buses)


LOAD_MODELS = ("impedance", "current", "power", "mixed")


def validate_case(case: GridCase) -> None:
    if case.load_model not in LOAD_MODELS:
        raise CaseError(f"load_model must be one of {', '.join(LOAD_MODELS)}; got {case.load_model!r}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise CaseError(f"bus ids must be unique; duplicated: {dup}")
    known = set(ids)
    slack = [b.id for b in case.buses if b.type == "slack"]
    if len(slack) != 1:
        raise CaseError(f"exactly one slack bus required, found {len(slack)}")
    for b in case.buses:
        if b.type not in ("slack", "PV", "PQ"):
            raise CaseError(f"bus {b.id}: unknown type {b.type!r}")
    for br in case.branches:
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        if br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus}: series reactance must be nonzero")
        if br.tap <= 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus}: tap ratio must be positive")
    gen_ids = [g.id for g in case.generators]
    if len(set(gen_ids)) != len(gen_ids):
        raise CaseError("generator ids must be unique")
    for g in case.generators:
        if g.bus not in known:
            raise CaseError(f"generator {g.id} references unknown bus {g.bus}")
        if not g.h > 0:
            raise CaseError(f"generator {g.id}: inertia H must be positive")
        if not g.mva > 0:
            raise CaseError(f"generator {g.id}: MVA base must be positive")
    for dev, label in ((case.exciters, "exciter"), (case.governors, "governor")):
        seen = [d.gen for d in dev]
        if len(set(seen)) != len(seen):
            raise CaseError(f"more than one {label} on a generator")
        if set(seen) != set(gen_ids):
            missing = sorted(set(gen_ids) - set(seen))
            extra = sorted(set(seen) - set(gen_ids))
            raise CaseError(f"{label} set must cover every generator (missing {missing}, unknown {extra})")
    for gov in case.governors:
        if not gov.r > 0:
            raise CaseError(f"governor on generator {gov.gen}: droop R must be positive")
    slack_bus = slack[0]
    if not any(g.bus == slack_bus for g in case.generators):
        raise CaseError(f"slack bus {slack_bus} has no generator")


# ---------------------------------------------------------------------------
# case file I/O

_SECTIONS = {
    "buses": (Bus, {"id": "id", "type": "type", "vset": "vset", "pload": "pload",
                    "qload": "qload", "gs": "gs", "bs": "bs"}),
    "branches": (Branch, {"from": "from_bus", "to": "to_bus", "r": "r", "x": "x",
                          "b": "b", "tap": "tap"}),
    "generators": (Generator, {f.name: f.name for f in dataclasses.fields(Generator)}),
    "exciters": (Exciter, {f.name: f.name for f in dataclasses.fields(Exciter)}),
    "governors": (Governor, {f.name: f.name for f in dataclasses.fields(Governor)}),
}
_SYSTEM_KEYS = {"base_mva", "f_nom", "name", "provenance", "exciter_limits", "load_model"}


def _rows(section: str, table: dict) -> list:
    cls, colmap = _SECTIONS[section]
    unknown = set(table) - {"columns", "rows"}
    if unknown:
        raise CaseError(f"[{section}]: unknown keys {sorted(unknown)}")
    columns = table.get("columns")
    rows = table.get("rows", [])
    if not isinstance(columns, list):
        raise CaseError(f"[{section}]: 'columns' list is required")
    bad = [c for c in columns if c not in colmap]
    if bad:
        raise CaseError(f"[{section}]: unknown fields {bad}")
    out = []
    for k, row in enumerate(rows):
        if len(row) != len(columns):
            raise CaseError(f"[{section}] row {k + 1}: expected {len(columns)} values, got {len(row)}")
        kwargs = {colmap[c]: v for c, v in zip(columns, row)}
        try:
            out.append(cls(**kwargs))
        except TypeError as exc:
            raise CaseError(f"[{section}] row {k + 1}: {exc}") from None
    return out


def parse_case(text: str) -> GridCase:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise CaseError(f"parse error: {exc}") from None
    unknown = set(doc) - set(_SECTIONS) - {"system"}
    if unknown:
        raise CaseError(f"unknown sections {sorted(unknown)}")
    system = doc.get("system", {})
    bad = set(system) - _SYSTEM_KEYS
    if bad:
        raise CaseError(f"[system]: unknown fields {sorted(bad)}")
    if "buses" not in doc:
        raise CaseError("missing [buses] section")
    parts = {s: tuple(_rows(s, doc[s])) if s in doc else () for s in _SECTIONS}
    return GridCase(
        buses=parts["buses"],
        branches=parts["branches"],
        generators=parts["generators"],
        exciters=parts["exciters"],
        governors=parts["governors"],
        base_mva=float(system.get("base_mva", 100.0)),
        f_nom=float(system.get("f_nom", 60.0)),
        name=str(system.get("name", "")),
        provenance=str(system.get("provenance", "")),
        exciter_limits=bool(system.get("exciter_limits", False)),
        load_model=str(system.get("load_model", "impedance")),
    )


def load_case(path: Union[str, Path]) -> GridCase:
    """Read and validate a case file (see ``docs/case_format.md``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read case file {path}: {exc.strerror}") from None
    return parse_case(text)


def builtin_case_path(name: str) -> Path:
    return Path(__file__).parent / "data" / f"{name}.toml"


# ---------------------------------------------------------------------------
# network


def build_ybus(case: GridCase) -> np.ndarray:
    """Dense bus admittance matrix; off-nominal taps sit on the from side."""
    idx = case.bus_index()
    n = len(case.buses)
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b
        a = br.tap
        y[f, f] += (ys + bc) / (a * a)
        y[t, t] += ys + bc
        y[f, t] -= ys / a
        y[t, f] -= ys / a
    for i, b in enumerate(case.buses):
        y[i, i] += complex(b.gs, b.bs)
    return y


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray  # complex bus voltages, bus order of the case
    pg: np.ndarray  # per generator, system base
    qg: np.ndarray
    mismatch: float
    iterations: int

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)


def _bus_injection_schedule(case: GridCase):
    idx = case.bus_index()
    p = np.array([-b.pload for b in case.buses])
    q = np.array([-b.qload for b in case.buses])
    for g in case.generators:
        p[idx[g.bus]] += g.pg
    return p, q


def solve_power_flow(case: GridCase, tol: float = 1e-10, max_iter: int = 30) -> PowerFlowSolution:
    """Polar Newton-Raphson from a flat start.

    Generator reactive outputs are unconstrained; Q at a bus with several
    machines is split in proportion to MVA rating.
    """
    y = build_ybus(case)
    idx = case.bus_index()
    n = len(case.buses)
    gen_buses = {g.bus for g in case.generators}
    types = []
    for b in case.buses:
        t = b.type
        if t == "PV" and b.id not in gen_buses:
            t = "PQ"
        types.append(t)
    ref = [i for i, t in enumerate(types) if t == "slack"]
    pv = [i for i, t in enumerate(types) if t == "PV"]
    pq = [i for i, t in enumerate(types) if t == "PQ"]
    vm = np.ones(n)
    va = np.zeros(n)
    for i in ref + pv:
        vm[i] = case.buses[i].vset
    p_sched, q_sched = _bus_injection_schedule(case)

    pvpq = pv + pq
    npvpq, npq = len(pvpq), len(pq)

    def mismatch(v):
        s = v * np.conj(y @ v)
        return np.r_[s.real[pvpq] - p_sched[pvpq], s.imag[pq] - q_sched[pq]]

    v = vm * np.exp(1j * va)
    f = mismatch(v)
    err = np.max(np.abs(f)) if f.size else 0.0
    it = 0
    while err > tol:
        if it >= max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations (max mismatch {err:.3e} pu)",
                err, it)
        it += 1
        # standard complex-derivative Jacobian blocks
        ibus = y @ v
        dv_m = np.diag(v / np.abs(v))
        ds_dvm = np.diag(v) @ np.conj(y @ dv_m) + np.diag(np.conj(ibus)) @ dv_m
        ds_dva = 1j * np.diag(v) @ np.conj(np.diag(ibus) - y @ np.diag(v))
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular power-flow Jacobian", err, it) from None
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:npvpq + npq]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        err = np.max(np.abs(f)) if f.size else 0.0
        if not np.isfinite(err) or np.any(vm <= 0):
            raise PowerFlowError(f"power flow diverged at iteration {it}", float("inf"), it)

    s = v * np.conj(y @ v)
    pg = np.zeros(len(case.generators))
    qg = np.zeros(len(case.generators))
    for bi in range(n):
        gens = [k for k, g in enumerate(case.generators) if idx[g.bus] == bi]
        if not gens:
            continue
        b = case.buses[bi]
        p_net = s[bi].real + b.pload
        q_net = s[bi].imag + b.qload
        mva = np.array([case.generators[k].mva for k in gens])
        if types[bi] == "slack":
            pfix = sum(case.generators[k].pg for k in gens[1:])
            pg[gens[0]] = p_net - pfix
            for k in gens[1:]:
                pg[k] = case.generators[k].pg
        else:
            for k in gens:
                pg[k] = case.generators[k].pg
        qg[gens] = q_net * mva / mva.sum()
    return PowerFlowSolution(v=v, pg=pg, qg=qg, mismatch=float(err), iterations=it)


def branch_losses(case: GridCase, v: np.ndarray) -> float:
    """Total active power loss, from per-branch terminal flows."""
    idx = case.bus_index()
    loss = 0.0
    for br in case.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b
        a = br.tap
        i_f = (ys + bc) / (a * a) * v[f] - ys / a * v[t]
        i_t = -ys / a * v[f] + (ys + bc) * v[t]
        loss += (v[f] * np.conj(i_f) + v[t] * np.conj(i_t)).real
    for i, b in enumerate(case.buses):
        loss += b.gs * abs(v[i]) ** 2
    return float(loss)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class LoadStep:
    bus: int
    pct: float

    @property
    def id(self) -> str:
        return f"load-step:{self.bus}:{self.pct:g}"


@dataclass(frozen=True)
class GenTrip:
    gen: int

    @property
    def id(self) -> str:
        return f"gen-trip:{self.gen}"


@dataclass(frozen=True)
class NoDisturbance:
    @property
    def id(self) -> str:
        return "none"


Scenario = Union[LoadStep, GenTrip, NoDisturbance]


def parse_scenario(text: str) -> Scenario:
    """``load-step:BUS:PCT``, ``gen-trip:GEN`` or ``none``."""
    parts = text.strip().split(":")
    try:
        if parts[0] == "load-step" and len(parts) == 3:
            return LoadStep(int(parts[1]), float(parts[2]))
        if parts[0] == "gen-trip" and len(parts) == 2:
            return GenTrip(int(parts[1]))
    except ValueError:
        pass
    if parts == ["none"]:
        return NoDisturbance()
    raise CaseError(f"bad scenario {text!r}; expected load-step:BUS:PCT or gen-trip:GEN")


def apply_scenario(case: GridCase, scenario: Scenario) -> GridCase:
    """Post-disturbance case. The input case is left untouched."""
    if isinstance(scenario, NoDisturbance):
        return case
    if isinstance(scenario, LoadStep):
        if scenario.bus not in case.bus_ids:
            raise CaseError(f"load step references unknown bus {scenario.bus}")
        k = 1.0 + scenario.pct / 100.0
        buses = tuple(replace(b, pload=b.pload * k, qload=b.qload * k) if b.id == scenario.bus else b
                      for b in case.buses)
        return replace(case, buses=buses)
    if isinstance(scenario, GenTrip):
        gen = next((g for g in case.generators if g.id == scenario.gen), None)
        if gen is None:
            raise CaseError(f"generator trip references unknown generator {scenario.gen}")
        if len(case.generators) == 1:
            raise CaseError("cannot trip the only generator")
        gens = tuple(g for g in case.generators if g.id != gen.id)
        buses = list(case.buses)
        slack = next(b for b in buses if b.type == "slack")
        if gen.bus == slack.id and not any(g.bus == slack.id for g in gens):
            # hand the slack role to the largest remaining unit
            new = max(gens, key=lambda g: g.mva)
            buses = [replace(b, type="slack") if b.id == new.bus else
                     replace(b, type="PQ") if b.id == slack.id else b for b in buses]
        elif not any(g.bus == gen.bus for g in gens):
            buses = [replace(b, type="PQ") if b.id == gen.bus else b for b in buses]
        return replace(
            case,
            buses=tuple(buses),
            generators=gens,
            exciters=tuple(e for e in case.exciters if e.gen != gen.id),
            governors=tuple(g for g in case.governors if g.gen != gen.id),
        )
    raise TypeError(f"unsupported scenario {scenario!r}")


def scale_inertia(case: GridCase, k: float) -> GridCase:
    return replace(case, generators=tuple(replace(g, h=g.h * k) for g in case.generators))


def scale_operating_point(case: GridCase, k: float) -> GridCase:
    """Scale every load and every generator dispatch by ``k``."""
    buses = tuple(replace(b, pload=b.pload * k, qload=b.qload * k) for b in case.buses)
    gens = tuple(replace(g, pg=g.pg * k) for g in case.generators)
    return replace(case, buses=buses, generators=gens)


def disturbance_power(case: GridCase, scenario: Scenario, pf: PowerFlowSolution | None = None) -> float:
    """Signed imbalance in pu; positive means a generation deficit."""
    if isinstance(scenario, LoadStep):
        bus = next(b for b in case.buses if b.id == scenario.bus)
        return bus.pload * scenario.pct / 100.0
    if isinstance(scenario, GenTrip):
        k = next(i for i, g in enumerate(case.generators) if g.id == scenario.gen)
        return float(pf.pg[k]) if pf is not None else case.generators[k].pg
    return 0.0
