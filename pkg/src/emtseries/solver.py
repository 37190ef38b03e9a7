"""Multistage high-order series integrator with imbalance step control.

Each step expands every state in Taylor coefficients about the step start by
one coupled order-by-order pass (machines and network exchange only
already-filled orders, so no within-order iteration exists), evaluates the
truncated series at the accepted step length, and re-seeds.  The step length
is governed by the network equation imbalance

    E(dt) = || A x[N] + B u[N] ||_inf * dt**N,

whose exact power law lets the controller invert the tolerance analytically.
Interior values come from evaluating the same polynomial (dense output), and
controller limit violations inside a step are located by bisection plus
quadratic interpolation on the series, after which the step is truncated at
the switch instant and the limited state is pinned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import machine as mech
from .caseio import CaseConfig, EventSpec
from .machine import Machine, MachineError, N_X1
from .network import LinearNetwork, network_order_step, source_u_series
from .series import eval_series, eval_series_many, eval_series_derivative
from .system import (
    System, Snapshot, Trajectory, build_system, initialize,
    apply_event_to_system,
)


class SolverError(Exception):
    pass


class DivergenceError(SolverError):
    """A coefficient went non-finite; carries the offending state and order."""


class StiffnessAbortError(SolverError):
    """The minimum step cannot satisfy the imbalance threshold."""


@dataclass(frozen=True)
class SolverConfig:
    order: int = 30
    eps_imbalance: float = 1e-2
    dt_init: float = 5e-5
    dt_min: float = 1e-8
    dt_cap: float = 1e-3
    rho_max: float = 1.5
    eps_switch: float = 1e-5
    t_end: float = 1.0
    dense_interval: float | None = None
    switch_detection: bool = True
    imbalance_mode: str = "network"        # or "full"
    keep_coefficients: bool = False
    allow_islanding: bool = False
    record_states: object = "all"
    shrink_safety: float = 0.9
    max_steps: int = 2_000_000
    max_forced_consecutive: int = 25

    def __post_init__(self):
        if not (self.dt_min <= self.dt_init <= self.dt_cap):
            raise SolverError("need dt_min <= dt_init <= dt_cap")
        if self.order < 2 or self.order > 64:
            raise SolverError("order must be in [2, 64]")
        if self.eps_imbalance <= 0 or self.eps_switch <= 0:
            raise SolverError("eps_imbalance and eps_switch must be > 0")
        if self.imbalance_mode not in ("network", "full"):
            raise SolverError("imbalance_mode must be 'network' or 'full'")

    @staticmethod
    def from_case(case: CaseConfig, **overrides) -> "SolverConfig":
        s = case.solver
        kw = dict(order=s.order, eps_imbalance=s.eps_imbalance,
                  dt_init=s.dt_init, dt_min=s.dt_min, dt_cap=s.dt_cap,
                  rho_max=s.rho_max, eps_switch=s.eps_switch, t_end=s.t_end,
                  dense_interval=(case.output.dense_interval
                                  if case.output.dense_interval is not None
                                  else s.dense_interval),
                  record_states=case.output.states)
        kw.update(overrides)
        return SolverConfig(**kw)


@dataclass(frozen=True)
class SwitchEvent:
    machine: str
    state: str               # "p1" or "efd"
    direction: int           # +1 upper limit, -1 lower limit
    limit: float
    t_switch: float          # absolute time
    bracket: tuple           # (a, b) absolute
    interpolation_fallback: bool = False


@dataclass
class StepRecord:
    t_start: float
    dt: float
    imbalance: float
    forced_min: bool
    end: Snapshot
    dense_times: np.ndarray
    switch_events: list
    x3_end: list                      # per machine: dict of closure values
    residual_full: float | None = None
    start: Snapshot | None = None
    coefficients: dict | None = None


@dataclass
class SimulationResult:
    trajectory: Trajectory
    records: list
    switches: list
    event_log: list
    final: Snapshot

    @property
    def accepted_dts(self) -> np.ndarray:
        return np.array([r.dt for r in self.records])

    @property
    def mean_dt(self) -> float:
        return float(self.accepted_dts.mean())


# ---------------------------------------------------------------------------
# Per-step coefficient generation
# ---------------------------------------------------------------------------

class Stepper:
    """Owns the per-step coefficient buffers for one system configuration."""

    def __init__(self, system: System):
        self.system = system
        self.n = system.order
        n1 = self.n + 1
        net = system.net
        self.x2 = np.full((net.n_states, n1), np.nan)
        self.u = np.zeros((net.n_inputs, n1))
        self.vterm = [np.full((3, n1), np.nan) for _ in system.machines]
        self._vrows = [net.machine_vrows[m.mid] for m in system.machines]
        self._ucols = [net.machine_cols[m.mid] for m in system.machines]
        self.imbalance_coeff = np.nan
        self.tail_coeff = 0.0
        self.t0 = 0.0

    def fill(self, snap: Snapshot) -> float:
        """Run the coupled order-by-order pass; returns the imbalance
        coefficient C = ||A x[N] + B u[N]||_inf (independent of dt)."""
        sys_, n = self.system, self.n
        net = sys_.net
        self.t0 = snap.t
        self.x2.fill(np.nan)
        self.x2[:, 0] = snap.x2
        self.u = source_u_series(net, sys_.topo, snap.t, n)
        machines = sys_.machines
        for i, m in enumerate(machines):
            m.seed_step(snap.t, snap.mach[i])
            self.vterm[i].fill(np.nan)
            self.vterm[i][:, 0] = snap.x2[self._vrows[i]]
            m.algebraic_order(0, self.vterm[i])
        for k in range(n):
            for i, m in enumerate(machines):
                m.differential_order(k, self.vterm[i])
                self.u[self._ucols[i], k] = m.x1[mech.IDX_IA:mech.IDX_IC + 1, k]
            self.x2[:, k + 1] = network_order_step(net, self.x2, self.u, k)
            for i, m in enumerate(machines):
                self.vterm[i][:, k + 1] = self.x2[self._vrows[i], k + 1]
                m.algebraic_order(k + 1, self.vterm[i])
        for i, m in enumerate(machines):
            self.u[self._ucols[i], n] = m.x1[mech.IDX_IA:mech.IDX_IC + 1, n]
        self._check_finite()
        resid = net.A @ self.x2[:, n] + net.B @ self.u[:, n]
        self.imbalance_coeff = float(np.max(np.abs(resid))) if resid.size else 0.0
        # machine-block convergence guard: the last computed series term plays
        # the same role for the machine states that A x[N] + B u[N] plays for
        # the network (the terminal-magnitude sqrt recursion can lose its
        # convergence radius when the dq voltage orbit passes near zero, which
        # the network imbalance alone cannot see)
        tail = 0.0
        for m in machines:
            tail = max(tail, float(np.max(np.abs(m.x1[:, n]))),
                       abs(float(m.v_t[n])))
        self.tail_coeff = tail
        return self.imbalance_coeff

    def _check_finite(self):
        for m in self.system.machines:
            try:
                m.check_finite()
            except MachineError as exc:
                raise DivergenceError(str(exc)) from exc
        if not np.all(np.isfinite(self.x2)):
            bad = np.argwhere(~np.isfinite(self.x2))
            row, k = bad[0]
            raise DivergenceError(
                f"non-finite coefficient for network state "
                f"{self.system.net.state_names[row]} at order {k}")

    def imbalance_at(self, dt: float) -> float:
        return self.imbalance_coeff * dt ** self.n

    def end_snapshot(self, dt: float, t_new: float) -> Snapshot:
        mach = [m.end_values(dt) for m in self.system.machines]
        return Snapshot(t=t_new, mach=mach, x2=eval_series(self.x2, dt))

    def x3_end(self, dt: float) -> list:
        out = []
        for m in self.system.machines:
            out.append({
                "pe": float(eval_series(m.p_e, dt)),
                "pm": float(eval_series(m.p_m, dt)),
                "vt": float(eval_series(m.v_t, dt)),
                "id": float(eval_series(m.i_0dq[1], dt)),
                "iq": float(eval_series(m.i_0dq[2], dt)),
                "vd": float(eval_series(m.v_0dq[1], dt)),
                "vq": float(eval_series(m.v_0dq[2], dt)),
            })
        return out

    def full_residual(self, dt: float) -> float:
        """Direct substitution residual ||xdot_series - f(x_series)||_inf at dt."""
        from .reference import rhs_eval
        sys_ = self.system
        snap = self.end_snapshot(dt, 0.0)
        x = snap.flat()
        xdot = np.concatenate(
            [eval_series_derivative(m.x1, dt) for m in sys_.machines]
            + [eval_series_derivative(self.x2, dt)])
        f = rhs_eval(sys_, self.t0 + dt, x)
        return float(np.max(np.abs(xdot - f)))


# ---------------------------------------------------------------------------
# Spec-level operations
# ---------------------------------------------------------------------------

def advance_step(system: System, snap: Snapshot, dt_trial: float,
                 stepper: Stepper | None = None):
    """Expand one step to full order and evaluate it at ``dt_trial``.

    Returns (stepper holding the coefficient set, E(dt_trial), end snapshot).
    """
    st = stepper or Stepper(system)
    st.fill(snap)
    e = st.imbalance_at(dt_trial)
    end = st.end_snapshot(dt_trial, snap.t + dt_trial)
    return st, e, end


def imbalance(net: LinearNetwork, x2_coeffs: np.ndarray, u_coeffs: np.ndarray,
              dt: float) -> float:
    """E(dt) = ||A x[N] + B u[N]||_inf * dt**N over the network block."""
    n = x2_coeffs.shape[1] - 1
    resid = net.A @ x2_coeffs[:, n] + net.B @ u_coeffs[:, n]
    c = float(np.max(np.abs(resid))) if resid.size else 0.0
    return c * dt ** n


def propose_step(c_coeff: float, cfg: SolverConfig, dt_prev: float | None) -> float:
    """Largest admissible step from the imbalance coefficient, growth-capped."""
    if c_coeff > 0.0:
        dt_max = math.exp((math.log(cfg.eps_imbalance) - math.log(c_coeff))
                          / cfg.order)
    else:
        dt_max = cfg.dt_cap
    dt = dt_max if dt_prev is None else min(dt_max, cfg.rho_max * dt_prev)
    if dt_prev is None:
        dt = min(dt, cfg.dt_init)
    return min(max(dt, cfg.dt_min), cfg.dt_cap)


def dense_output(coeffs: np.ndarray, taus, dt: float) -> np.ndarray:
    """Evaluate step coefficients at offsets inside the accepted step.

    ``taus`` outside [0, dt] raise a range error; the value at dt is exactly
    the step-end value (same polynomial).
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if np.any(taus < 0.0) or np.any(taus > dt):
        raise SolverError(f"dense-output sample outside [0, {dt}]")
    return np.stack([eval_series(coeffs, float(tau)) for tau in taus], axis=-1)


@dataclass(frozen=True)
class _Detection:
    tau: float
    a: float
    b: float
    fallback: bool


def detect_limit_switch(coeffs: np.ndarray, limit: float, direction: int,
                        dt: float, eps_switch: float) -> _Detection | None:
    """Locate the instant a limited state crosses its bound inside a step.

    Bisection on [0, dt] (violation at the right endpoint is the entry
    condition) narrows the bracket to ``eps_switch``, then a quadratic through
    the bracket endpoints and midpoint pins the crossing.  Falls back to the
    bracket midpoint (flagged) when the interpolant has no root in range.
    """
    sign = 1.0 if direction >= 0 else -1.0

    def over(tau):
        return sign * (float(eval_series(coeffs, tau)) - limit) >= 0.0

    if not over(dt):
        return None
    a, b = 0.0, dt
    while b - a > eps_switch:
        mid = 0.5 * (a + b)
        if over(mid):
            b = mid
        else:
            a = mid
    h = 0.5 * (b - a)
    y0 = float(eval_series(coeffs, a)) - limit
    y1 = float(eval_series(coeffs, a + h)) - limit
    y2 = float(eval_series(coeffs, b)) - limit
    tau, fb = _quad_root(a, h, y0, y1, y2)
    if fb:
        tau = a + h
    tau = min(max(tau, a), b)
    return _Detection(tau=tau, a=a, b=b, fallback=fb)


def _quad_root(a: float, h: float, y0: float, y1: float, y2: float):
    """Earliest root in [a, a+2h] of the quadratic through three equispaced
    samples; returns (root, fallback_flag)."""
    if h <= 0.0:
        return a, False
    c2 = (y2 - 2.0 * y1 + y0) / (2.0 * h * h)
    c1 = (-3.0 * y0 + 4.0 * y1 - y2) / (2.0 * h)
    roots = []
    if c2 == 0.0:
        if c1 != 0.0:
            roots = [-y0 / c1]
    else:
        disc = c1 * c1 - 4.0 * c2 * y0
        if disc < 0.0:
            return a + h, True
        sq = math.sqrt(disc)
        roots = [(-c1 - sq) / (2.0 * c2), (-c1 + sq) / (2.0 * c2)]
    tol = 1e-12 * max(1.0, 2.0 * h)
    inside = [r for r in roots if -tol <= r <= 2.0 * h + tol]
    if not inside:
        return a + h, True
    return a + min(inside), False


# ---------------------------------------------------------------------------
# Trajectory recording
# ---------------------------------------------------------------------------

class _Recorder:
    def __init__(self, system: System, selection):
        self.names = tuple(system.state_names())
        if selection == "all":
            sel = list(self.names)
        else:
            sel = list(selection)
            if not sel:
                raise SolverError("empty output selection")
            for s in sel:
                if s not in self.names:
                    raise SolverError(f"unknown output state {s!r}")
        self.sel = tuple(sel)
        self.times: list = []
        self.rows: list = []
        self.rebind(system)

    def rebind(self, system: System):
        """Re-resolve selected names against the current system layout."""
        self._mach_groups = []      # (machine index, x1 rows, sel positions)
        self._net_rows = []         # x2 rows
        self._net_pos = []          # matching sel positions
        idx_of = {m.mid: i for i, m in enumerate(system.machines)}
        net_idx = {n: i for i, n in enumerate(system.net.state_names)}
        per_mach: dict = {}
        for pos, name in enumerate(self.sel):
            head, _, tail = name.partition(".")
            if head in idx_of and tail in mech.X1_NAMES:
                per_mach.setdefault(idx_of[head], ([], []))
                per_mach[idx_of[head]][0].append(mech.X1_NAMES.index(tail))
                per_mach[idx_of[head]][1].append(pos)
            elif name in net_idx:
                self._net_rows.append(net_idx[name])
                self._net_pos.append(pos)
            # names of removed elements record NaN from here on
        for mi, (rows, poss) in per_mach.items():
            self._mach_groups.append((mi, np.array(rows), np.array(poss)))
        self._net_rows = np.array(self._net_rows, dtype=np.int64)
        self._net_pos = np.array(self._net_pos, dtype=np.int64)

    def add_snapshot(self, snap: Snapshot):
        row = np.full(len(self.sel), np.nan)
        for mi, rows, poss in self._mach_groups:
            row[poss] = snap.mach[mi][rows]
        row[self._net_pos] = snap.x2[self._net_rows]
        self.times.append(snap.t)
        self.rows.append(row)

    def add_samples(self, stepper: Stepper, t_abs: np.ndarray, taus: np.ndarray):
        block = np.full((taus.size, len(self.sel)), np.nan)
        for mi, rows, poss in self._mach_groups:
            vals = eval_series_many(stepper.system.machines[mi].x1[rows], taus)
            block[:, poss] = vals.T
        if self._net_rows.size:
            block[:, self._net_pos] = eval_series_many(
                stepper.x2[self._net_rows], taus).T
        self.times.extend(t_abs.tolist())
        self.rows.extend(block)

    def trajectory(self) -> Trajectory:
        return Trajectory(names=self.sel,
                          times=np.array(self.times),
                          values=np.vstack(self.rows) if self.rows else
                          np.zeros((0, len(self.sel))))


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

_LIMIT_CHECKS = (
    ("p1", mech.IDX_P1, +1, lambda m: m.gov.p_max, lambda m: m.sat_p1),
    ("p1", mech.IDX_P1, -1, lambda m: m.gov.p_min, lambda m: m.sat_p1),
    ("efd", mech.IDX_EFD, +1, lambda m: m.exc.e_max, lambda m: m.sat_efd),
    ("efd", mech.IDX_EFD, -1, lambda m: m.exc.e_min, lambda m: m.sat_efd),
)


def simulate(case: CaseConfig, cfg: SolverConfig | None = None,
             system: System | None = None,
             snap: Snapshot | None = None) -> SimulationResult:
    """Run the multistage series integration of a case to cfg.t_end."""
    cfg = cfg or SolverConfig.from_case(case)
    system = system or build_system(case, cfg.order)
    if system.order != cfg.order:
        raise SolverError("system was built with a different order")
    snap = snap.copy() if snap is not None else initialize(system)
    recorder = _Recorder(system, cfg.record_states)
    recorder.add_snapshot(snap)
    events = [e for e in case.events if snap.t < e.time <= cfg.t_end]
    events.sort(key=lambda e: e.time)
    ev_i = 0
    records: list = []
    switches: list = []
    event_log: list = []
    stepper = Stepper(system)
    dt_prev: float | None = None
    forced_run = 0
    t = snap.t
    tiny = 1e-12
    while t < cfg.t_end - tiny * max(1.0, cfg.t_end):
        if len(records) >= cfg.max_steps:
            raise SolverError(f"step budget exceeded ({cfg.max_steps})")
        boundary = events[ev_i].time if ev_i < len(events) else cfg.t_end
        for mi, m in enumerate(system.machines):
            m.refresh_saturation(snap.mach[mi])
        c_coeff = stepper.fill(snap)
        dt = propose_step(max(c_coeff, stepper.tail_coeff), cfg, dt_prev)
        hit_boundary = False
        if t + dt >= boundary - cfg.dt_min:
            dt = boundary - t
            hit_boundary = True
        e_val = stepper.imbalance_at(dt)
        forced = False
        if e_val > cfg.eps_imbalance:
            # exact power law: one analytic shrink lands on the admissible step
            while e_val > cfg.eps_imbalance and dt > cfg.dt_min:
                dt = max(cfg.dt_min,
                         cfg.shrink_safety * dt
                         * (cfg.eps_imbalance / e_val) ** (1.0 / cfg.order))
                e_val = stepper.imbalance_at(dt)
            hit_boundary = False
            if e_val > cfg.eps_imbalance:
                forced = True
        residual_full = None
        if cfg.imbalance_mode == "full":
            residual_full = stepper.full_residual(dt)
            it = 0
            while residual_full > cfg.eps_imbalance and dt > cfg.dt_min and it < 12:
                dt = max(cfg.dt_min, 0.5 * dt)
                residual_full = stepper.full_residual(dt)
                hit_boundary = False
                it += 1
            if residual_full > cfg.eps_imbalance and dt <= cfg.dt_min:
                forced = True
            e_val = stepper.imbalance_at(dt)
        if forced:
            forced_run += 1
            if forced_run > cfg.max_forced_consecutive:
                raise StiffnessAbortError(
                    f"t={t:.6e}: minimum step {cfg.dt_min} still exceeds the "
                    f"imbalance threshold (E={e_val:.3e} > "
                    f"{cfg.eps_imbalance:.3e}); dynamics too stiff for the "
                    f"configured floor")
        else:
            forced_run = 0
        # controller limit switches inside the step
        step_switches = []
        if cfg.switch_detection:
            dets = []
            for mi, m in enumerate(system.machines):
                for sname, srow, direction, limit_of, flag_of in _LIMIT_CHECKS:
                    if flag_of(m) != 0:
                        continue
                    det = detect_limit_switch(m.x1[srow], limit_of(m),
                                              direction, dt, cfg.eps_switch)
                    if det is not None:
                        dets.append((det.tau, mi, m, sname, srow, direction,
                                     limit_of(m), det))
            if dets:
                tau_min = min(d[0] for d in dets)
                dt_eff = max(tau_min, cfg.dt_min)
                hit_boundary = False
                for tau, mi, m, sname, srow, direction, limit, det in dets:
                    if tau == tau_min:
                        step_switches.append(SwitchEvent(
                            machine=m.mid, state=sname, direction=direction,
                            limit=limit, t_switch=t + tau,
                            bracket=(t + det.a, t + det.b),
                            interpolation_fallback=det.fallback))
                dt = dt_eff
                e_val = stepper.imbalance_at(dt)
        t_new = boundary if hit_boundary else t + dt
        end = stepper.end_snapshot(dt, t_new)
        for sw in step_switches:
            mi = next(i for i, m in enumerate(system.machines)
                      if m.mid == sw.machine)
            row = mech.IDX_P1 if sw.state == "p1" else mech.IDX_EFD
            end.mach[mi][row] = sw.limit
        # dense samples strictly inside the step
        dense_times = np.zeros(0)
        if cfg.dense_interval:
            dtau = cfg.dense_interval
            eps_t = tiny * max(1.0, t_new)
            k0 = math.floor((t + eps_t) / dtau) + 1
            k1 = math.ceil((t_new - eps_t) / dtau) - 1
            if k1 >= k0:
                dense_times = np.arange(k0, k1 + 1, dtype=np.float64) * dtau
                recorder.add_samples(stepper, dense_times, dense_times - t)
        recorder.add_snapshot(end)
        rec = StepRecord(
            t_start=t, dt=dt, imbalance=e_val, forced_min=forced, end=end,
            dense_times=dense_times, switch_events=step_switches,
            x3_end=stepper.x3_end(dt), residual_full=residual_full)
        if cfg.keep_coefficients:
            rec.start = snap.copy()
            rec.coefficients = {
                "x2": stepper.x2.copy(),
                "u": stepper.u.copy(),
                "machines": {m.mid: m.x1.copy() for m in system.machines},
            }
        records.append(rec)
        switches.extend(step_switches)
        for sw in step_switches:
            event_log.append((sw.t_switch,
                              f"switch {sw.machine}.{sw.state} "
                              f"{'upper' if sw.direction > 0 else 'lower'} "
                              f"limit {sw.limit:g}"))
        snap = end
        t = t_new
        # conservative restart from dt_init after a switch truncation
        dt_prev = None if step_switches else dt
        if hit_boundary and ev_i < len(events):
            while ev_i < len(events) and events[ev_i].time == boundary:
                e = events[ev_i]
                system, snap, notes = apply_event_to_system(
                    system, snap, e, cfg.allow_islanding)
                event_log.append((t, f"event {e.kind} {e.target}"))
                for note in notes:
                    event_log.append((t, note))
                ev_i += 1
            stepper = Stepper(system)
            recorder.rebind(system)
            dt_prev = None
    return SimulationResult(
        trajectory=recorder.trajectory(), records=records, switches=switches,
        event_log=event_log, final=snap)
