"""Case ingestion, validation and time-series emission.

A case is a single JSON document (schema version 1) describing buses,
branches, sources, machines with controllers and operating points, an event
schedule and solver settings.  Loading validates referential integrity and
the structural invariants the simulator relies on (every generator bus has
shunt capacitance, the graph is connected, event times increase per target)
and reports element-level diagnostics.

Per-unit is the default unit system: branch reactances/susceptances and
machine reactances given at nominal frequency are converted to
seconds-consistent inductances/capacitances by dividing by omega0.  With
``unit_system: "si"`` the values are used as true ohms/henries/farads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .machine import MachineParams, GovParams, ExcParams
from .network import (
    Branch, Source, NetworkTopology, connected_components, _bus_capacitances,
)

SCHEMA_VERSION = 1

EVENT_KINDS = ("fault_on", "fault_off", "trip_branch", "trip_load",
               "trip_generator")

DEFAULT_R_FAULT = 1e-4


class CaseError(Exception):
    pass


class CaseParseError(CaseError):
    """Malformed JSON; carries line/column from the decoder."""


class CaseValidationError(CaseError):
    """Well-formed JSON that violates the case schema or its invariants."""


@dataclass(frozen=True)
class SourceSpec:
    sid: str
    bus: str
    magnitude: float
    angle: float = 0.0


@dataclass(frozen=True)
class BranchSpec:
    bid: str
    kind: str
    from_bus: str = ""
    to_bus: str = ""
    bus: str = ""
    r: float = 0.0
    x: float = 0.0     # pu reactance at omega0 (or inductance in SI cases)
    b: float = 0.0     # pu susceptance at omega0 (or capacitance in SI cases)
    ratio: float = 1.0


@dataclass(frozen=True)
class OperatingPoint:
    p: float
    q: float
    v: float
    angle: float = 0.0


@dataclass(frozen=True)
class MachineSpec:
    mid: str
    bus: str
    params: dict
    governor: dict
    exciter: dict
    operating_point: OperatingPoint


@dataclass(frozen=True)
class EventSpec:
    kind: str
    time: float
    bus: str = ""
    branch: str = ""
    machine: str = ""
    r_fault: float = DEFAULT_R_FAULT

    @property
    def target(self) -> str:
        return self.bus or self.branch or self.machine


@dataclass(frozen=True)
class SolverSettings:
    order: int = 30
    eps_imbalance: float = 1e-2
    dt_init: float = 5e-5
    dt_min: float = 1e-8
    dt_cap: float = 1e-3
    rho_max: float = 1.5
    eps_switch: float = 1e-5
    t_end: float = 1.0
    dense_interval: float | None = None


@dataclass(frozen=True)
class OutputSpec:
    states: object = "all"            # "all" or list of state names
    dense_interval: float | None = None


@dataclass(frozen=True)
class CaseConfig:
    name: str
    f_hz: float
    buses: tuple[str, ...]
    sources: tuple[SourceSpec, ...]
    branches: tuple[BranchSpec, ...]
    machines: tuple[MachineSpec, ...]
    events: tuple[EventSpec, ...]
    solver: SolverSettings
    output: OutputSpec
    unit_system: str = "pu"
    schema_version: int = SCHEMA_VERSION

    @property
    def omega0(self) -> float:
        return 2.0 * np.pi * self.f_hz


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _need(d: dict, key: str, where: str):
    if key not in d:
        raise CaseValidationError(f"{where}: missing required field {key!r}")
    return d[key]


def case_from_dict(doc: dict) -> CaseConfig:
    if not isinstance(doc, dict):
        raise CaseValidationError("case document must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CaseValidationError(
            f"unsupported schema_version {version!r}; this loader reads "
            f"version {SCHEMA_VERSION}")
    name = _need(doc, "name", "case")
    unit_system = doc.get("unit_system", "pu")
    if unit_system not in ("pu", "si"):
        raise CaseValidationError(f"unit_system must be 'pu' or 'si', got {unit_system!r}")
    f_hz = float(_need(doc, "f_hz", "case"))
    buses = tuple(str(b) for b in _need(doc, "buses", "case"))
    sources = tuple(
        SourceSpec(sid=str(_need(s, "id", "source")), bus=str(_need(s, "bus", "source")),
                   magnitude=float(_need(s, "magnitude", f"source {s.get('id')}")),
                   angle=float(s.get("angle", 0.0)))
        for s in doc.get("sources", []))
    branches = []
    for b in doc.get("branches", []):
        bid = str(_need(b, "id", "branch"))
        kind = str(_need(b, "kind", f"branch {bid}"))
        branches.append(BranchSpec(
            bid=bid, kind=kind,
            from_bus=str(b.get("from", "")), to_bus=str(b.get("to", "")),
            bus=str(b.get("bus", "")),
            r=float(b.get("r", 0.0)), x=float(b.get("x", 0.0)),
            b=float(b.get("b", 0.0)), ratio=float(b.get("ratio", 1.0))))
    machines = []
    for m in doc.get("machines", []):
        mid = str(_need(m, "id", "machine"))
        op = _need(m, "operating_point", f"machine {mid}")
        machines.append(MachineSpec(
            mid=mid, bus=str(_need(m, "bus", f"machine {mid}")),
            params=dict(_need(m, "params", f"machine {mid}")),
            governor=dict(_need(m, "governor", f"machine {mid}")),
            exciter=dict(_need(m, "exciter", f"machine {mid}")),
            operating_point=OperatingPoint(
                p=float(_need(op, "p", f"machine {mid} operating_point")),
                q=float(_need(op, "q", f"machine {mid} operating_point")),
                v=float(_need(op, "v", f"machine {mid} operating_point")),
                angle=float(op.get("angle", 0.0)))))
    events = []
    for e in doc.get("events", []):
        kind = str(_need(e, "kind", "event"))
        events.append(EventSpec(
            kind=kind, time=float(_need(e, "time", f"event {kind}")),
            bus=str(e.get("bus", "")), branch=str(e.get("branch", "")),
            machine=str(e.get("machine", "")),
            r_fault=float(e.get("r_fault", DEFAULT_R_FAULT))))
    solver = SolverSettings(**doc.get("solver", {}))
    out = doc.get("output", {})
    output = OutputSpec(states=out.get("states", "all"),
                        dense_interval=out.get("dense_interval"))
    case = CaseConfig(
        name=str(name), f_hz=f_hz, unit_system=unit_system, buses=buses,
        sources=sources, branches=tuple(branches), machines=tuple(machines),
        events=tuple(sorted(events, key=lambda e: e.time)),
        solver=solver, output=output)
    validate_case(case)
    return case


def loads_case(text: str) -> CaseConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(
            f"JSON parse error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    return case_from_dict(doc)


def load_case(path) -> CaseConfig:
    p = Path(path)
    if not p.exists():
        raise CaseError(f"case file not found: {p}")
    return loads_case(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_case(case: CaseConfig) -> None:
    bus_set = set(case.buses)
    if len(bus_set) != len(case.buses):
        raise CaseValidationError("duplicate bus ids")
    if case.f_hz <= 0:
        raise CaseValidationError("f_hz must be positive")
    ids: set = set()
    for s in case.sources:
        if s.bus not in bus_set:
            raise CaseValidationError(f"source {s.sid}: unknown bus {s.bus}")
        _claim(ids, s.sid, "source")
    shunt_kinds = ("shunt_c", "shunt_rl_load")
    for b in case.branches:
        _claim(ids, b.bid, "branch")
        if b.kind in ("series_rl", "transformer_rl", "pi_line"):
            for bus in (b.from_bus, b.to_bus):
                if bus not in bus_set:
                    raise CaseValidationError(
                        f"branch {b.bid}: unknown bus {bus!r}")
            if b.from_bus == b.to_bus:
                raise CaseValidationError(f"branch {b.bid}: from == to")
            if b.x <= 0:
                raise CaseValidationError(
                    f"branch {b.bid}: series reactance must be > 0")
            if b.kind == "pi_line" and b.b <= 0:
                raise CaseValidationError(
                    f"branch {b.bid}: pi-line charging must be > 0")
        elif b.kind in shunt_kinds:
            if b.bus not in bus_set:
                raise CaseValidationError(f"branch {b.bid}: unknown bus {b.bus!r}")
            if b.kind == "shunt_c" and b.b <= 0:
                raise CaseValidationError(
                    f"branch {b.bid}: shunt susceptance must be > 0")
            if b.kind == "shunt_rl_load" and b.x <= 0:
                raise CaseValidationError(
                    f"branch {b.bid}: load reactance must be > 0")
        else:
            raise CaseValidationError(f"branch {b.bid}: unknown kind {b.kind!r}")
        if b.r < 0:
            raise CaseValidationError(f"branch {b.bid}: negative resistance")
    # every generator bus needs shunt capacitance so the terminal voltage is
    # a state the machine can inject into
    bus_b = {}
    for b in case.branches:
        if b.kind == "shunt_c":
            bus_b[b.bus] = bus_b.get(b.bus, 0.0) + b.b
        elif b.kind == "pi_line":
            bus_b[b.from_bus] = bus_b.get(b.from_bus, 0.0) + b.b / 2.0
            bus_b[b.to_bus] = bus_b.get(b.to_bus, 0.0) + b.b / 2.0
    for m in case.machines:
        _claim(ids, m.mid, "machine")
        if m.bus not in bus_set:
            raise CaseValidationError(f"machine {m.mid}: unknown bus {m.bus}")
        if bus_b.get(m.bus, 0.0) <= 0.0:
            raise CaseValidationError(
                f"machine {m.mid}: generator bus {m.bus} has no shunt capacitor")
        if m.operating_point.v <= 0:
            raise CaseValidationError(
                f"machine {m.mid}: operating-point voltage must be positive")
    branch_ids = {b.bid for b in case.branches}
    machine_ids = {m.mid for m in case.machines}
    last_time: dict = {}
    for e in case.events:
        if e.kind not in EVENT_KINDS:
            raise CaseValidationError(f"event: unknown kind {e.kind!r}")
        if e.time <= 0:
            raise CaseValidationError(f"event {e.kind}: time must be > 0")
        if e.kind in ("fault_on", "fault_off"):
            if e.bus not in bus_set:
                raise CaseValidationError(f"event {e.kind}: unknown bus {e.bus!r}")
            if e.kind == "fault_on" and e.r_fault <= 0:
                raise CaseValidationError("fault_on: r_fault must be > 0")
        elif e.kind in ("trip_branch", "trip_load"):
            if e.branch not in branch_ids:
                raise CaseValidationError(
                    f"event {e.kind}: unknown branch {e.branch!r}")
        elif e.kind == "trip_generator":
            if e.machine not in machine_ids:
                raise CaseValidationError(
                    f"event trip_generator: unknown machine {e.machine!r}")
        key = (e.kind, e.target)
        if key in last_time and e.time <= last_time[key]:
            raise CaseValidationError(
                f"event {e.kind} on {e.target}: times must strictly increase")
        last_time[key] = e.time
    s = case.solver
    if not (s.dt_min <= s.dt_init <= s.dt_cap):
        raise CaseValidationError("solver: need dt_min <= dt_init <= dt_cap")
    if s.order < 2 or s.order > 64:
        raise CaseValidationError("solver: order must be in [2, 64]")
    if s.eps_imbalance <= 0 or s.eps_switch <= 0:
        raise CaseValidationError("solver: eps_imbalance and eps_switch must be > 0")
    if s.t_end <= 0:
        raise CaseValidationError("solver: t_end must be > 0")
    comps = connected_components(to_topology(case))
    if len(comps) > 1:
        raise CaseValidationError(
            f"network is not connected: {len(comps)} islands")


def _claim(ids: set, new: str, what: str):
    if new in ids:
        raise CaseValidationError(f"{what} id {new!r} is not unique")
    ids.add(new)


# ---------------------------------------------------------------------------
# Conversion to internal units
# ---------------------------------------------------------------------------

def to_topology(case: CaseConfig) -> NetworkTopology:
    w0 = case.omega0
    scale = w0 if case.unit_system == "pu" else 1.0
    branches = []
    for b in case.branches:
        branches.append(Branch(
            bid=b.bid, kind=b.kind, from_bus=b.from_bus, to_bus=b.to_bus,
            bus=b.bus, r=b.r, l=b.x / scale, c=b.b / scale, ratio=b.ratio))
    sources = tuple(Source(s.sid, s.bus, s.magnitude, s.angle)
                    for s in case.sources)
    gens = tuple((m.mid, m.bus) for m in case.machines)
    return NetworkTopology(buses=case.buses, branches=tuple(branches),
                           sources=sources, generators=gens, omega0=w0)


def machine_params_of(case: CaseConfig, spec: MachineSpec) -> MachineParams:
    raw = dict(spec.params)
    n_p = int(raw.pop("poles", raw.pop("n_p", 2)))
    if case.unit_system == "pu":
        return MachineParams.from_reactances(case.omega0, n_p=n_p, **raw)
    return MachineParams(omega0=case.omega0, n_p=n_p, **raw)


def gov_params_of(spec: MachineSpec) -> GovParams:
    return GovParams(**spec.governor)


def exc_params_of(spec: MachineSpec) -> ExcParams:
    return ExcParams(**spec.exciter)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def case_to_dict(case: CaseConfig) -> dict:
    doc = {
        "schema_version": case.schema_version,
        "name": case.name,
        "unit_system": case.unit_system,
        "f_hz": case.f_hz,
        "buses": list(case.buses),
        "sources": [{"id": s.sid, "bus": s.bus, "magnitude": s.magnitude,
                     "angle": s.angle} for s in case.sources],
        "branches": [],
        "machines": [],
        "events": [],
        "solver": asdict(case.solver),
        "output": {"states": case.output.states,
                   "dense_interval": case.output.dense_interval},
    }
    for b in case.branches:
        e = {"id": b.bid, "kind": b.kind}
        if b.kind in ("series_rl", "transformer_rl", "pi_line"):
            e.update({"from": b.from_bus, "to": b.to_bus})
        else:
            e["bus"] = b.bus
        e.update({"r": b.r, "x": b.x, "b": b.b, "ratio": b.ratio})
        doc["branches"].append(e)
    for m in case.machines:
        doc["machines"].append({
            "id": m.mid, "bus": m.bus, "params": dict(m.params),
            "governor": dict(m.governor), "exciter": dict(m.exciter),
            "operating_point": asdict(m.operating_point)})
    for ev in case.events:
        e = {"kind": ev.kind, "time": ev.time}
        if ev.bus:
            e["bus"] = ev.bus
        if ev.branch:
            e["branch"] = ev.branch
        if ev.machine:
            e["machine"] = ev.machine
        if ev.kind == "fault_on":
            e["r_fault"] = ev.r_fault
        doc["events"].append(e)
    return doc


def dumps_case(case: CaseConfig) -> str:
    return json.dumps(case_to_dict(case), indent=2, sort_keys=True)


def save_case(case: CaseConfig, path) -> None:
    Path(path).write_text(dumps_case(case) + "\n", encoding="utf-8")


def case_hash(case: CaseConfig) -> str:
    canon = json.dumps(case_to_dict(case), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def bundled_case_path(name: str) -> Path:
    """Path of one of the cases shipped with the package."""
    p = Path(__file__).parent / "cases" / f"{name}.json"
    if not p.exists():
        avail = sorted(q.stem for q in (Path(__file__).parent / "cases").glob("*.json"))
        raise CaseError(f"no bundled case {name!r}; available: {avail}")
    return p


# ---------------------------------------------------------------------------
# Time-series output
# ---------------------------------------------------------------------------

def write_timeseries(traj, selection, path, metadata: dict | None = None) -> None:
    """Write a trajectory as CSV: metadata comments, header, 17-digit floats.

    ``selection`` is "all" or a list of state names.  The first column is
    ``t_s``.  Identical runs produce byte-identical files.
    """
    names = list(traj.names)
    if selection == "all":
        sel_idx = list(range(len(names)))
    else:
        selection = list(selection)
        if not selection:
            raise CaseError("empty output selection")
        sel_idx = []
        for s in selection:
            if s not in names:
                raise CaseError(f"unknown output state {s!r}")
            sel_idx.append(names.index(s))
    lines = []
    for k, v in (metadata or {}).items():
        lines.append(f"# {k}: {v}")
    header = ",".join(["t_s"] + [_csv_field(names[i]) for i in sel_idx])
    lines.append(header)
    for row in range(traj.times.size):
        vals = [f"{traj.times[row]:.17g}"]
        vals += [f"{traj.values[row, i]:.17g}" for i in sel_idx]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _csv_field(s: str) -> str:
    if any(ch in s for ch in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s
