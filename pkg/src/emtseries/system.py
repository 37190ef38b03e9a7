"""Composition of a case into a runnable system and its steady-state seed.

The full state is laid out as the machine differential blocks (14 states per
machine, in case order) followed by the network state vector.  Both the
series stepper and the fixed-step reference integrators consume this layout,
so their trajectories are directly comparable column by column.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import machine as mech
from .caseio import (
    CaseConfig, EventSpec, machine_params_of, gov_params_of, exc_params_of,
    to_topology,
)
from .machine import Machine, init_machine_steady_state, N_X1
from .network import (
    NetworkTopology, LinearNetwork, assemble_linear_network, apply_event,
    map_states, init_network_steady_state, connected_components,
    IslandingError,
)


@dataclass
class Snapshot:
    """Order-0 values of every state at one instant."""

    t: float
    mach: list          # list of (14,) arrays, case order
    x2: np.ndarray

    def copy(self) -> "Snapshot":
        return Snapshot(self.t, [m.copy() for m in self.mach], self.x2.copy())

    def flat(self) -> np.ndarray:
        parts = list(self.mach) + [self.x2]
        return np.concatenate(parts) if parts else np.zeros(0)

    @staticmethod
    def from_flat(x: np.ndarray, n_mach: int, t: float) -> "Snapshot":
        mach = [x[i * N_X1:(i + 1) * N_X1].copy() for i in range(n_mach)]
        return Snapshot(t, mach, x[n_mach * N_X1:].copy())


@dataclass
class System:
    """One simulatable configuration (between structural events)."""

    case: CaseConfig
    topo: NetworkTopology
    net: LinearNetwork
    machines: list
    order: int

    @property
    def omega0(self) -> float:
        return self.topo.omega0

    @property
    def n_states(self) -> int:
        return len(self.machines) * N_X1 + self.net.n_states

    def state_names(self) -> list:
        names = []
        for m in self.machines:
            names += [f"{m.mid}.{n}" for n in mech.X1_NAMES]
        names += list(self.net.state_names)
        return names

    def x2_offset(self) -> int:
        return len(self.machines) * N_X1


def build_system(case: CaseConfig, order: int | None = None) -> System:
    n = case.solver.order if order is None else order
    topo = to_topology(case)
    net = assemble_linear_network(topo)
    machines = []
    for spec in case.machines:
        machines.append(Machine(
            spec.mid, machine_params_of(case, spec), gov_params_of(spec),
            exc_params_of(spec), n))
    return System(case=case, topo=topo, net=net, machines=machines, order=n)


def initialize(system: System) -> Snapshot:
    """Seed the balanced sinusoidal steady state.

    Machine injection phasors come from the declared operating points; the
    network phasor solve then fixes the actual terminal voltages, and each
    machine is initialised against its solved terminal so the combined system
    is an exact fixed point (controller references are derived here, not
    taken from the case).
    """
    case = system.case
    spec_of = {m.mid: m for m in case.machines}
    injections = {}
    for m in system.machines:
        op = spec_of[m.mid].operating_point
        v_decl = op.v * np.exp(1j * op.angle)
        injections[m.mid] = (op.p - 1j * op.q) / np.conj(v_decl)
    x2, x_ph, _u = init_network_steady_state(system.net, system.topo, injections)
    mach_vals = []
    for m in system.machines:
        op = spec_of[m.mid].operating_point
        rows = system.net.machine_vrows[m.mid]
        v_term = complex(x_ph[rows[0]])
        # initialise against the solved terminal voltage AND the committed
        # injection phasor so machine and network agree exactly
        init = init_machine_steady_state(m.par, m.gov, m.exc, op.p, op.q,
                                         v_term, i_phasor=injections[m.mid])
        m.gov = replace(m.gov, p_ref=init.p_ref)
        m.exc = replace(m.exc, v_ref=init.v_ref)
        m.sat_p1 = 0
        m.sat_efd = 0
        mach_vals.append(init.x1)
    return Snapshot(t=0.0, mach=mach_vals, x2=x2)


@dataclass
class Trajectory:
    """Sampled states on a shared column layout.

    Columns removed by structural events are NaN from the event on, so runs
    of different solvers over the same case stay column-aligned.
    """

    names: tuple
    times: np.ndarray
    values: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def columns(self, names) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.values[:, idx]

    def on_grid(self, interval: float, rel_tol: float = 1e-9):
        """Rows whose times sit on multiples of ``interval``.

        Returns (multiples, row indices); used to align trajectories sampled
        by different solvers on one comparison grid.
        """
        m = np.rint(self.times / interval)
        keep = np.abs(self.times - m * interval) <= rel_tol * interval
        mm = m[keep].astype(np.int64)
        rows = np.nonzero(keep)[0]
        _, first = np.unique(mm, return_index=True)
        return mm[first], rows[first]

    def bus_voltage_names(self):
        return [n for n in self.names if ".v" in n and n.split(".")[1] in
                ("va", "vb", "vc")]


def apply_event_to_system(system: System, snap: Snapshot, event: EventSpec,
                          allow_islanding: bool = False):
    """Re-stamp the network (and machine list) after a scheduled event.

    Returns (new system, new snapshot, list of human-readable notes).
    Surviving states keep their values; states of removed elements are
    discarded.
    """
    notes = []
    topo = apply_event(system.topo, event.kind, event.target, event.r_fault)
    machines = system.machines
    mach_vals = snap.mach
    if event.kind == "trip_generator":
        keep = [i for i, m in enumerate(machines) if m.mid != event.target]
        machines = [machines[i] for i in keep]
        mach_vals = [mach_vals[i] for i in keep]
        notes.append(f"machine {event.target} removed")
    comps = connected_components(topo)
    if len(comps) > 1:
        msg = (f"event {event.kind} on {event.target} splits the network "
               f"into {len(comps)} islands")
        if not allow_islanding:
            raise IslandingError(msg)
        notes.append("warning: " + msg)
    net = assemble_linear_network(topo)
    x2 = map_states(system.net, net, snap.x2)
    new_sys = System(case=system.case, topo=topo, net=net,
                     machines=machines, order=system.order)
    new_snap = Snapshot(t=snap.t, mach=[v.copy() for v in mach_vals], x2=x2)
    return new_sys, new_snap, notes
