"""Linear state-space network assembled from three-phase R-L-C primitives.

Every inductive branch contributes one current state per phase and every bus
with shunt capacitance contributes one voltage state per phase; together they
form ``dx/dt = A x + B u`` where the inputs are ideal-source voltages and
generator injection currents.  Pi-section lines expand into a series R-L plus
half of the line charging merged into the capacitance of each end bus (one
voltage state per bus and phase, accumulating all shunt contributions).

Values are stored in seconds-consistent units (per-unit impedance divided by
nominal angular frequency, or plain SI); conversion from case files happens
in the case loader.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, field

import numpy as np

_SHIFTS = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
_PHASES = ("a", "b", "c")

SERIES_KINDS = ("series_rl", "transformer_rl", "pi_line")


class NetworkError(Exception):
    pass


class AssemblyError(NetworkError):
    """Topology cannot be stamped into a state-space model."""


class IslandingError(NetworkError):
    """An event left the network split into disconnected islands."""


class PhasorInitError(NetworkError):
    """Sinusoidal steady state of the linear network does not exist."""


@dataclass(frozen=True)
class Branch:
    """One network element.  ``l``/``c`` are in seconds-consistent units."""

    bid: str
    kind: str
    from_bus: str = ""
    to_bus: str = ""
    bus: str = ""            # shunt elements attach to a single bus
    r: float = 0.0
    l: float = 0.0
    c: float = 0.0
    ratio: float = 1.0


@dataclass(frozen=True)
class Source:
    sid: str
    bus: str
    magnitude: float
    angle: float


@dataclass(frozen=True)
class Fault:
    bus: str
    r_fault: float


@dataclass(frozen=True)
class NetworkTopology:
    buses: tuple[str, ...]
    branches: tuple[Branch, ...]
    sources: tuple[Source, ...]
    generators: tuple[tuple[str, str], ...]   # (machine id, bus)
    omega0: float
    faults: tuple[Fault, ...] = ()


@dataclass(frozen=True)
class LinearNetwork:
    """Stamped state-space model.  A, B are read-only after assembly."""

    A: np.ndarray
    B: np.ndarray
    state_keys: tuple            # ("i", branch, phase) | ("v", bus, phase)
    state_names: tuple[str, ...]
    input_keys: tuple            # ("src", id, phase) | ("inj", machine, phase)
    bus_vrows: dict              # bus -> (3,) int array of voltage-state rows
    machine_vrows: dict          # machine id -> (3,) terminal voltage rows
    machine_cols: dict           # machine id -> (3,) injection columns
    source_cols: dict            # source id -> (3,) columns
    bus_cap: dict                # bus -> accumulated shunt capacitance

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]


def _bus_capacitances(topo: NetworkTopology) -> dict:
    cap: dict = {}
    for br in topo.branches:
        if br.kind == "shunt_c":
            cap[br.bus] = cap.get(br.bus, 0.0) + br.c
        elif br.kind == "pi_line":
            cap[br.from_bus] = cap.get(br.from_bus, 0.0) + br.c / 2.0
            cap[br.to_bus] = cap.get(br.to_bus, 0.0) + br.c / 2.0
    return cap


def connected_components(topo: NetworkTopology) -> list[set]:
    """Bus islands under the series (bus-to-bus) branches."""
    adj = {b: set() for b in topo.buses}
    for br in topo.branches:
        if br.kind in SERIES_KINDS:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen: set = set()
    comps = []
    for b in topo.buses:
        if b in seen:
            continue
        stack, comp = [b], set()
        while stack:
            n = stack.pop()
            if n in comp:
                continue
            comp.add(n)
            stack.extend(adj[n] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def assemble_linear_network(topo: NetworkTopology) -> LinearNetwork:
    """Stamp the topology into A, B with one state per inductor current and
    per capacitive bus-phase voltage.

    Raises AssemblyError naming the element when an inductive branch lands on
    a bus that carries neither capacitance nor an ideal source, or when the
    topology contradicts itself (capacitor or machine on a source bus).
    """
    source_bus = {}
    for s in topo.sources:
        if s.bus in source_bus:
            raise AssemblyError(f"bus {s.bus} has more than one source")
        source_bus[s.bus] = s
    cap = _bus_capacitances(topo)
    for b in cap:
        if b in source_bus:
            raise AssemblyError(
                f"bus {b} carries both an ideal source and shunt capacitance")
    for mid, bus in topo.generators:
        if bus in source_bus:
            raise AssemblyError(f"machine {mid} attached to source bus {bus}")
        if cap.get(bus, 0.0) <= 0.0:
            raise AssemblyError(
                f"machine {mid}: generator bus {bus} has no shunt capacitance")
    for f in topo.faults:
        if f.bus in source_bus:
            raise AssemblyError(f"fault at source bus {f.bus}")
        if cap.get(f.bus, 0.0) <= 0.0:
            raise AssemblyError(f"fault at bus {f.bus} without capacitance")

    state_keys = []
    state_names = []
    inductive = [b for b in topo.branches if b.kind in SERIES_KINDS]
    loads = [b for b in topo.branches if b.kind == "shunt_rl_load"]
    for br in inductive + loads:
        for ph in _PHASES:
            state_keys.append(("i", br.bid, ph))
            state_names.append(f"{br.bid}.i{ph}")
    bus_vrows = {}
    for b in topo.buses:
        if cap.get(b, 0.0) > 0.0:
            rows = []
            for ph in _PHASES:
                rows.append(len(state_keys))
                state_keys.append(("v", b, ph))
                state_names.append(f"{b}.v{ph}")
            bus_vrows[b] = np.array(rows)

    input_keys = []
    source_cols = {}
    for s in topo.sources:
        source_cols[s.sid] = np.arange(len(input_keys), len(input_keys) + 3)
        for ph in _PHASES:
            input_keys.append(("src", s.sid, ph))
    machine_cols = {}
    for mid, _bus in topo.generators:
        machine_cols[mid] = np.arange(len(input_keys), len(input_keys) + 3)
        for ph in _PHASES:
            input_keys.append(("inj", mid, ph))

    n = len(state_keys)
    m = len(input_keys)
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    row_of = {k: i for i, k in enumerate(state_keys)}

    def terminal(bid, bus, row, ph_idx, sign, inv_l):
        """Resolve a branch terminal voltage to a state row or input column."""
        if bus in bus_vrows:
            A[row, bus_vrows[bus][ph_idx]] += sign * inv_l
        elif bus in source_bus:
            col = source_cols[source_bus[bus].sid][ph_idx]
            B[row, col] += sign * inv_l
        else:
            raise AssemblyError(
                f"branch {bid}: terminal bus {bus} has neither capacitance "
                f"nor a source (floating inductor terminal)")

    for br in inductive:
        eff = br.ratio ** 2
        r_eff, l_eff = br.r * eff, br.l * eff
        for pi, ph in enumerate(_PHASES):
            row = row_of[("i", br.bid, ph)]
            A[row, row] = -r_eff / l_eff
            terminal(br.bid, br.from_bus, row, pi, +1.0, 1.0 / l_eff)
            terminal(br.bid, br.to_bus, row, pi, -1.0, 1.0 / l_eff)
            # current contributions into the terminal capacitances
            if br.from_bus in bus_vrows:
                A[bus_vrows[br.from_bus][pi], row] -= 1.0 / cap[br.from_bus]
            if br.to_bus in bus_vrows:
                A[bus_vrows[br.to_bus][pi], row] += 1.0 / cap[br.to_bus]
    for br in loads:
        for pi, ph in enumerate(_PHASES):
            row = row_of[("i", br.bid, ph)]
            A[row, row] = -br.r / br.l
            terminal(br.bid, br.bus, row, pi, +1.0, 1.0 / br.l)
            if br.bus in bus_vrows:
                A[bus_vrows[br.bus][pi], row] -= 1.0 / cap[br.bus]
            else:
                raise AssemblyError(
                    f"load {br.bid}: bus {br.bus} has no capacitance")
    machine_vrows = {}
    for mid, bus in topo.generators:
        machine_vrows[mid] = bus_vrows[bus].copy()
        for pi in range(3):
            B[bus_vrows[bus][pi], machine_cols[mid][pi]] += 1.0 / cap[bus]
    for f in topo.faults:
        for pi in range(3):
            row = bus_vrows[f.bus][pi]
            A[row, row] -= 1.0 / (f.r_fault * cap[f.bus])

    A.flags.writeable = False
    B.flags.writeable = False
    return LinearNetwork(
        A=A, B=B,
        state_keys=tuple(state_keys), state_names=tuple(state_names),
        input_keys=tuple(input_keys),
        bus_vrows=bus_vrows, machine_vrows=machine_vrows,
        machine_cols=machine_cols, source_cols=source_cols,
        bus_cap=cap,
    )


def network_order_step(net: LinearNetwork, x2: np.ndarray, u: np.ndarray,
                       k: int) -> np.ndarray:
    """Order-(k+1) network coefficients: (A x[k] + B u[k]) / (k+1)."""
    return (net.A @ x2[:, k] + net.B @ u[:, k]) / (k + 1.0)


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

def apply_event(topo: NetworkTopology, kind: str, target: str,
                r_fault: float = 1e-4) -> NetworkTopology:
    """Return the re-stamped topology after a structural event.

    Faults stamp (and unstamp) a shunt resistance at a bus; trips remove
    branches, loads or generators.  Raises NetworkError for unknown targets.
    """
    if kind == "fault_on":
        if target not in topo.buses:
            raise NetworkError(f"fault_on: unknown bus {target}")
        if any(f.bus == target for f in topo.faults):
            raise NetworkError(f"fault_on: bus {target} already faulted")
        return replace(topo, faults=topo.faults + (Fault(target, r_fault),))
    if kind == "fault_off":
        kept = tuple(f for f in topo.faults if f.bus != target)
        if len(kept) == len(topo.faults):
            raise NetworkError(f"fault_off: no active fault at bus {target}")
        return replace(topo, faults=kept)
    if kind in ("trip_branch", "trip_load"):
        hit = [b for b in topo.branches if b.bid == target]
        if not hit:
            raise NetworkError(f"{kind}: unknown branch {target}")
        if kind == "trip_load" and hit[0].kind != "shunt_rl_load":
            raise NetworkError(f"trip_load: branch {target} is not a load")
        return replace(topo, branches=tuple(
            b for b in topo.branches if b.bid != target))
    if kind == "trip_generator":
        if not any(mid == target for mid, _ in topo.generators):
            raise NetworkError(f"trip_generator: unknown machine {target}")
        return replace(topo, generators=tuple(
            g for g in topo.generators if g[0] != target))
    raise NetworkError(f"unknown event kind {kind!r}")


def map_states(old: LinearNetwork, new: LinearNetwork,
               x_old: np.ndarray) -> np.ndarray:
    """Carry surviving state values across a re-stamp; dropped states vanish."""
    old_row = {k: i for i, k in enumerate(old.state_keys)}
    x_new = np.zeros(new.n_states)
    for i, k in enumerate(new.state_keys):
        j = old_row.get(k)
        if j is not None:
            x_new[i] = x_old[j]
    return x_new


# ---------------------------------------------------------------------------
# Sinusoidal steady state and input series
# ---------------------------------------------------------------------------

def init_network_steady_state(net: LinearNetwork, topo: NetworkTopology,
                              injections: dict | None = None):
    """Instantaneous t=0 network state of the balanced sinusoidal steady state.

    Solves the complex phasor system (j w0 I - A) X = B U for the phase-a
    phasors of every state (phases b/c are the rotated copies via the input
    phasors).  ``injections`` maps machine id to its phase-a current phasor.

    Returns (x0, state_phasors, input_phasors).
    """
    injections = injections or {}
    u_ph = np.zeros(net.n_inputs, dtype=complex)
    for s in topo.sources:
        base = s.magnitude * np.exp(1j * s.angle)
        u_ph[net.source_cols[s.sid]] = base * np.exp(1j * _SHIFTS)
    for mid, _bus in topo.generators:
        base = injections.get(mid, 0.0 + 0.0j)
        u_ph[net.machine_cols[mid]] = base * np.exp(1j * _SHIFTS)
    lhs = 1j * topo.omega0 * np.eye(net.n_states) - net.A
    try:
        x_ph = np.linalg.solve(lhs, net.B @ u_ph)
    except np.linalg.LinAlgError as exc:
        raise PhasorInitError(f"singular phasor system: {exc}") from exc
    return x_ph.real.copy(), x_ph, u_ph


def source_u_series(net: LinearNetwork, topo: NetworkTopology, t0: float,
                    order: int) -> np.ndarray:
    """Input coefficient matrix (m, N+1) with the source columns filled.

    A source column carries the Taylor coefficients of
    ``mag * cos(w0 (t0+tau) + phase)`` about tau = 0; machine-injection
    columns are left at zero for the stepper to fill order by order.
    """
    u = np.zeros((net.n_inputs, order + 1))
    w0 = topo.omega0
    for s in topo.sources:
        ang = w0 * t0 + s.angle + _SHIFTS
        cols = net.source_cols[s.sid]
        scale = s.magnitude
        for k in range(order + 1):
            u[cols, k] = scale * np.cos(ang + k * np.pi / 2.0)
            scale *= w0 / (k + 1.0)
    return u


def source_u_at(net: LinearNetwork, topo: NetworkTopology, t: float) -> np.ndarray:
    """Instantaneous input vector with only the source columns populated."""
    u = np.zeros(net.n_inputs)
    for s in topo.sources:
        u[net.source_cols[s.sid]] = s.magnitude * np.cos(
            topo.omega0 * t + s.angle + _SHIFTS)
    return u
