"""Fixed-step reference integrators over the identical state-space model.

Classical RK4 and implicit trapezoidal (fixed-point inner iteration) drive
the same right-hand side the series stepper expands: machine algebraic
closure resolved pointwise, controller limits enforced by derivative masking
inside the RHS plus projection after each step, scheduled events applied at
the nearest grid point.  The inner loops are numba-compiled; a one-call
Python wrapper of the RHS is exposed for residual checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .machine import N_X1
from .system import System, Snapshot, Trajectory, build_system, initialize, \
    apply_event_to_system
from .caseio import CaseConfig

_SHIFT_B = -2.0 * np.pi / 3.0
_SHIFT_C = 2.0 * np.pi / 3.0

# column layout of the packed per-machine parameter matrix
(_W0, _2H, _D, _PES, _RS, _RFDL, _R1DL, _R1QL, _R2QL, _ILFD, _IL1D, _IL1Q,
 _IL2Q, _LPAD, _LPAQ, _ADI, _ADFD, _AD1D, _ADE, _AQI, _AQ1Q, _AQ2Q, _EFDS,
 _DL3, _T1, _T2, _T3, _RG, _DT, _PREF, _PMAX, _PMIN, _KE, _TE, _TAB, _VREF,
 _EMAX, _EMIN) = range(38)
_NPAR = 38


class ReferenceError(Exception):
    pass


class DivergenceError(ReferenceError):
    pass


def pack_system(system: System):
    """Flatten machines + network into plain arrays for the compiled RHS."""
    n_m = len(system.machines)
    par = np.zeros((max(n_m, 1), _NPAR))
    s0 = np.zeros((max(n_m, 1), 3, 3))
    vrows = np.zeros((max(n_m, 1), 3), dtype=np.int64)
    ucols = np.zeros((max(n_m, 1), 3), dtype=np.int64)
    for i, m in enumerate(system.machines):
        p, c, g, e = m.par, m.c, m.gov, m.exc
        par[i] = [p.omega0, 2.0 * p.h, p.d, c.pe_scale, p.r_s,
                  p.r_fd / p.l_fd, p.r_1d / p.l_1d, p.r_1q / p.l_1q,
                  p.r_2q / p.l_2q, 1.0 / p.l_fd, 1.0 / p.l_1d, 1.0 / p.l_1q,
                  1.0 / p.l_2q, c.lpp_ad, c.lpp_aq, c.ad_i, c.ad_fd, c.ad_1d,
                  c.ad_efd, c.aq_i, c.aq_1q, c.aq_2q, c.efd_scale, c.dl3,
                  g.t_1, g.t_2, g.t_3, g.r_g, g.d_t, g.p_ref, g.p_max,
                  g.p_min, e.k_e, e.t_e, e.t_a + e.t_b, e.v_ref, e.e_max,
                  e.e_min]
        s0[i] = m.c.s0
        vrows[i] = system.x2_offset() + system.net.machine_vrows[m.mid]
        ucols[i] = system.net.machine_cols[m.mid]
    m_in = system.net.n_inputs
    u_amp = np.zeros(max(m_in, 1))
    u_phase = np.zeros(max(m_in, 1))
    u_is_src = np.zeros(max(m_in, 1), dtype=np.int8)
    for s in system.topo.sources:
        cols = system.net.source_cols[s.sid]
        for pi, shift in enumerate((0.0, _SHIFT_B, _SHIFT_C)):
            u_amp[cols[pi]] = s.magnitude
            u_phase[cols[pi]] = s.angle + shift
            u_is_src[cols[pi]] = 1
    A = np.ascontiguousarray(system.net.A)
    B = np.ascontiguousarray(system.net.B)
    return (n_m, par, s0, vrows, ucols, A, B, u_amp, u_phase, u_is_src,
            system.omega0)


@njit(cache=True)
def _solve3(M, b, out):
    det = (M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
           - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
           + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]))
    d0 = (b[0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
          - M[0, 1] * (b[1] * M[2, 2] - M[1, 2] * b[2])
          + M[0, 2] * (b[1] * M[2, 1] - M[1, 1] * b[2]))
    d1 = (M[0, 0] * (b[1] * M[2, 2] - M[1, 2] * b[2])
          - b[0] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
          + M[0, 2] * (M[1, 0] * b[2] - b[1] * M[2, 0]))
    d2 = (M[0, 0] * (M[1, 1] * b[2] - b[1] * M[2, 1])
          - M[0, 1] * (M[1, 0] * b[2] - b[1] * M[2, 0])
          + b[0] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]))
    out[0] = d0 / det
    out[1] = d1 / det
    out[2] = d2 / det


@njit(cache=True)
def _rhs(t, x, dx, u, n_m, par, s0, vrows, ucols, A, B, u_amp, u_phase,
         u_is_src, w0):
    m_in = u.shape[0]
    for j in range(m_in):
        if u_is_src[j]:
            u[j] = u_amp[j] * math.cos(w0 * t + u_phase[j])
        else:
            u[j] = 0.0
    Mloc = np.empty((3, 3))
    rhs3 = np.empty(3)
    di = np.empty(3)
    for im in range(n_m):
        q = par[im]
        base = im * 14
        dw = x[base + 1]
        lfd = x[base + 2]
        l1d = x[base + 3]
        l1q = x[base + 4]
        l2q = x[base + 5]
        theta = x[base + 6]
        ia = x[base + 7]
        ib = x[base + 8]
        ic = x[base + 9]
        p1 = x[base + 10]
        p2 = x[base + 11]
        efd = x[base + 12]
        v1 = x[base + 13]
        w = q[_W0] + dw
        ca = math.cos(theta)
        sa = math.sin(theta)
        cb = math.cos(theta + _SHIFT_B)
        sb = math.sin(theta + _SHIFT_B)
        cc = math.cos(theta + _SHIFT_C)
        sc = math.sin(theta + _SHIFT_C)
        va = x[vrows[im, 0]]
        vb = x[vrows[im, 1]]
        vc = x[vrows[im, 2]]
        i_d = (2.0 / 3.0) * (ca * ia + cb * ib + cc * ic)
        i_q = -(2.0 / 3.0) * (sa * ia + sb * ib + sc * ic)
        v_d = (2.0 / 3.0) * (ca * va + cb * vb + cc * vc)
        v_q = -(2.0 / 3.0) * (sa * va + sb * vb + sc * vc)
        lam_ad = q[_LPAD] * (-i_d + lfd * q[_ILFD] + l1d * q[_IL1D])
        lam_aq = q[_LPAQ] * (-i_q + l1q * q[_IL1Q] + l2q * q[_IL2Q])
        lam_d_pp = q[_LPAD] * (lfd * q[_ILFD] + l1d * q[_IL1D])
        lam_q_pp = q[_LPAQ] * (l1q * q[_IL1Q] + l2q * q[_IL2Q])
        efd_volt = efd * q[_EFDS]
        vpp_d = (q[_ADI] * i_d + q[_ADFD] * lfd + q[_AD1D] * l1d
                 - lam_q_pp * w + q[_ADE] * efd_volt)
        vpp_q = q[_AQI] * i_q + q[_AQ1Q] * l1q + q[_AQ2Q] * l2q + lam_d_pp * w
        vpa = ca * vpp_d - sa * vpp_q
        vpb = cb * vpp_d - sb * vpp_q
        vpc = cc * vpp_d - sc * vpp_q
        c2 = math.cos(2.0 * theta)
        s2 = math.sin(2.0 * theta)
        dl3 = q[_DL3]
        for r in range(3):
            for cix in range(3):
                Mloc[r, cix] = s0[im, r, cix]
        # cos(2*theta + phi) with the six phase offsets; dM/dt analogous
        c23 = -0.5
        s23 = 0.8660254037844386
        cm = dl3 * (c23 * c2 + s23 * s2)   # cos(2t - 2pi/3)
        cp = dl3 * (c23 * c2 - s23 * s2)   # cos(2t + 2pi/3)
        c0 = dl3 * c2
        Mloc[0, 0] += c0
        Mloc[1, 1] += cp
        Mloc[2, 2] += cm
        Mloc[0, 1] += cm
        Mloc[1, 0] += cm
        Mloc[0, 2] += cp
        Mloc[2, 0] += cp
        Mloc[1, 2] += c0
        Mloc[2, 1] += c0
        fs = -2.0 * w * dl3
        sm = fs * (c23 * s2 - s23 * c2)    # d/dt phase -2pi/3
        sp = fs * (c23 * s2 + s23 * c2)
        sd0 = fs * s2
        d00 = sd0
        d11 = sp
        d22 = sm
        d01 = sm
        d02 = sp
        d12 = sd0
        rs = q[_RS]
        rhs3[0] = -(va + rs * ia - vpa + d00 * ia + d01 * ib + d02 * ic)
        rhs3[1] = -(vb + rs * ib - vpb + d01 * ia + d11 * ib + d12 * ic)
        rhs3[2] = -(vc + rs * ic - vpc + d02 * ia + d12 * ib + d22 * ic)
        _solve3(Mloc, rhs3, di)
        pe = q[_PES] * w * (lam_ad * i_q - lam_aq * i_d)
        pm = p2 - q[_DT] * dw
        dp1 = ((q[_PREF] - dw) / q[_RG] - p1) / q[_T1]
        if (p1 >= q[_PMAX] and dp1 > 0.0) or (p1 <= q[_PMIN] and dp1 < 0.0):
            dp1 = 0.0
        dp2 = (q[_T2] * dp1 + p1 - p2) / q[_T3]
        vt = math.sqrt(v_d * v_d + v_q * v_q)
        defd = (q[_KE] * v1 - efd) / q[_TE]
        if (efd >= q[_EMAX] and defd > 0.0) or (efd <= q[_EMIN] and defd < 0.0):
            defd = 0.0
        dv1 = (q[_VREF] - v1 - vt) / q[_TAB]
        dx[base + 0] = dw
        dx[base + 1] = (q[_W0] / q[_2H]) * (pm - pe - q[_D] * dw / q[_W0])
        dx[base + 2] = efd_volt - q[_RFDL] * (lfd - lam_ad)
        dx[base + 3] = -q[_R1DL] * (l1d - lam_ad)
        dx[base + 4] = -q[_R1QL] * (l1q - lam_aq)
        dx[base + 5] = -q[_R2QL] * (l2q - lam_aq)
        dx[base + 6] = w
        dx[base + 7] = di[0]
        dx[base + 8] = di[1]
        dx[base + 9] = di[2]
        dx[base + 10] = dp1
        dx[base + 11] = dp2
        dx[base + 12] = defd
        dx[base + 13] = dv1
        u[ucols[im, 0]] = ia
        u[ucols[im, 1]] = ib
        u[ucols[im, 2]] = ic
    off = n_m * 14
    n2 = A.shape[0]
    for r in range(n2):
        acc = 0.0
        for cix in range(n2):
            acc += A[r, cix] * x[off + cix]
        for cix in range(u.shape[0]):
            acc += B[r, cix] * u[cix]
        dx[off + r] = acc


@njit(cache=True)
def _clamp_limits(x, n_m, par):
    for im in range(n_m):
        base = im * 14
        if x[base + 10] > par[im, _PMAX]:
            x[base + 10] = par[im, _PMAX]
        elif x[base + 10] < par[im, _PMIN]:
            x[base + 10] = par[im, _PMIN]
        if x[base + 12] > par[im, _EMAX]:
            x[base + 12] = par[im, _EMAX]
        elif x[base + 12] < par[im, _EMIN]:
            x[base + 12] = par[im, _EMIN]


@njit(cache=True)
def _rk4_segment(x, step0, nsteps, dt, save_every, out_t, out_v, row0,
                 n_m, par, s0, vrows, ucols, A, B, u_amp, u_phase, u_is_src,
                 w0):
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xt = np.empty(n)
    u = np.empty(u_amp.shape[0])
    row = row0
    for i in range(nsteps):
        g = step0 + i
        t = g * dt
        _rhs(t, x, k1, u, n_m, par, s0, vrows, ucols, A, B, u_amp, u_phase,
             u_is_src, w0)
        for j in range(n):
            xt[j] = x[j] + 0.5 * dt * k1[j]
        _rhs(t + 0.5 * dt, xt, k2, u, n_m, par, s0, vrows, ucols, A, B,
             u_amp, u_phase, u_is_src, w0)
        for j in range(n):
            xt[j] = x[j] + 0.5 * dt * k2[j]
        _rhs(t + 0.5 * dt, xt, k3, u, n_m, par, s0, vrows, ucols, A, B,
             u_amp, u_phase, u_is_src, w0)
        for j in range(n):
            xt[j] = x[j] + dt * k3[j]
        _rhs(t + dt, xt, k4, u, n_m, par, s0, vrows, ucols, A, B, u_amp,
             u_phase, u_is_src, w0)
        for j in range(n):
            x[j] += (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        _clamp_limits(x, n_m, par)
        if (g + 1) % save_every == 0:
            out_t[row] = (g + 1) * dt
            out_v[row, :] = x
            row += 1
        if not np.isfinite(x[0]):
            return -1
    return row


@njit(cache=True)
def _trap_segment(x, step0, nsteps, dt, save_every, out_t, out_v, row0,
                  tol, maxit, n_m, par, s0, vrows, ucols, A, B, u_amp,
                  u_phase, u_is_src, w0):
    n = x.shape[0]
    f0 = np.empty(n)
    f1 = np.empty(n)
    xn = np.empty(n)
    u = np.empty(u_amp.shape[0])
    row = row0
    for i in range(nsteps):
        g = step0 + i
        t = g * dt
        _rhs(t, x, f0, u, n_m, par, s0, vrows, ucols, A, B, u_amp, u_phase,
             u_is_src, w0)
        for j in range(n):
            xn[j] = x[j] + dt * f0[j]
        converged = False
        for _ in range(maxit):
            _rhs(t + dt, xn, f1, u, n_m, par, s0, vrows, ucols, A, B, u_amp,
                 u_phase, u_is_src, w0)
            diff = 0.0
            for j in range(n):
                v = x[j] + 0.5 * dt * (f0[j] + f1[j])
                d = abs(v - xn[j])
                if d > diff:
                    diff = d
                xn[j] = v
            if diff <= tol:
                converged = True
                break
        if not converged:
            return -2
        for j in range(n):
            x[j] = xn[j]
        _clamp_limits(x, n_m, par)
        if (g + 1) % save_every == 0:
            out_t[row] = (g + 1) * dt
            out_v[row, :] = x
            row += 1
        if not np.isfinite(x[0]):
            return -1
    return row


def rhs_eval(system: System, t: float, x: np.ndarray) -> np.ndarray:
    """One full right-hand-side evaluation (Python entry, for tests/residuals)."""
    pk = pack_system(system)
    dx = np.zeros_like(x)
    u = np.zeros(max(system.net.n_inputs, 1))
    _rhs(t, np.ascontiguousarray(x, dtype=float), dx, u, *pk)
    return dx


def _run_fixed(case: CaseConfig, dt: float, t_end: float, method: str,
               save_interval=None, initial: Snapshot | None = None,
               with_events: bool = True, trap_tol: float = 1e-10,
               trap_maxit: int = 100) -> Trajectory:
    if dt <= 0:
        raise ReferenceError("fixed step must be positive")
    system = build_system(case, order=2)
    snap = initial.copy() if initial is not None else initialize(system)
    names = tuple(system.state_names())
    save_every = max(1, int(round((save_interval or 1e-5) / dt)))
    total = int(round(t_end / dt))
    events = [e for e in case.events if with_events and
              0.0 < e.time <= t_end]
    bounds = sorted({int(round(e.time / dt)) for e in events} | {total})
    nrows = total // save_every + 1
    out_t = np.zeros(nrows + 1)
    out_v = np.full((nrows + 1, len(names)), np.nan)
    out_v[0, :] = snap.flat()
    row = 1
    col_map = np.arange(len(names))
    x = snap.flat().copy()
    step0 = 0
    for nb in bounds:
        nsteps = nb - step0
        if nsteps > 0:
            pk = pack_system(system)
            seg_rows = (step0 + nsteps) // save_every - step0 // save_every
            seg_t = np.zeros(seg_rows + 1)
            seg_v = np.zeros((seg_rows + 1, x.size))
            fn = _rk4_segment if method == "rk4" else None
            if method == "rk4":
                r = _rk4_segment(x, step0, nsteps, dt, save_every, seg_t,
                                 seg_v, 0, *pk)
            else:
                r = _trap_segment(x, step0, nsteps, dt, save_every, seg_t,
                                  seg_v, 0, trap_tol, trap_maxit, *pk)
            if r == -1:
                raise DivergenceError(f"{method}: non-finite state near step {step0}")
            if r == -2:
                raise DivergenceError("trapezoidal inner iteration did not converge")
            out_t[row:row + r] = seg_t[:r]
            out_v[row:row + r][:, col_map] = seg_v[:r]
            row += r
        step0 = nb
        t_now = nb * dt
        for e in events:
            if int(round(e.time / dt)) == nb:
                n_m = len(system.machines)
                snap_now = Snapshot.from_flat(x, n_m, t_now)
                system, snap_now, _notes = apply_event_to_system(
                    system, snap_now, e)
                x = snap_now.flat().copy()
                keep = [names.index(n) for n in system.state_names()]
                col_map = np.array(keep, dtype=np.int64)
    return Trajectory(names=names, times=out_t[:row].copy(),
                      values=out_v[:row].copy())


def rk4_run(case: CaseConfig, dt_fixed: float, t_end: float,
            save_interval=None, initial: Snapshot | None = None,
            with_events: bool = True) -> Trajectory:
    """Classical fixed-step RK4 benchmark over the full system."""
    return _run_fixed(case, dt_fixed, t_end, "rk4", save_interval, initial,
                      with_events)


def trapezoidal_run(case: CaseConfig, dt_fixed: float, t_end: float,
                    save_interval=None, initial: Snapshot | None = None,
                    with_events: bool = True, tol: float = 1e-10) -> Trajectory:
    """Implicit trapezoidal rule with fixed-point inner iteration."""
    return _run_fixed(case, dt_fixed, t_end, "trap", save_interval, initial,
                      with_events, trap_tol=tol)


def steady_state_residual(system: System, snap: Snapshot) -> float:
    """Infinity norm of d/dt on the rotor-frame and network states at a
    supposed steady state (stator/abc rows excluded: they carry the nominal
    sinusoidal rates)."""
    dx = rhs_eval(system, snap.t, snap.flat())
    res = 0.0
    for i in range(len(system.machines)):
        base = i * N_X1
        rows = [base + 1, base + 2, base + 3, base + 4, base + 5,
                base + 10, base + 11, base + 12, base + 13]
        res = max(res, float(np.max(np.abs(dx[rows]))))
    off = system.x2_offset()
    x = snap.flat()
    w0 = system.omega0
    # network: compare against the analytic derivative of the phasor solution
    from .network import init_network_steady_state
    spec_of = {m.mid: m for m in system.case.machines}
    injections = {}
    for m in system.machines:
        op = spec_of[m.mid].operating_point
        injections[m.mid] = (op.p - 1j * op.q) / np.conj(
            op.v * np.exp(1j * op.angle))
    _x0, x_ph, _u = init_network_steady_state(system.net, system.topo,
                                              injections)
    xdot = (1j * w0 * x_ph * np.exp(1j * w0 * snap.t)).real
    res = max(res, float(np.max(np.abs(dx[off:] - xdot))) if x_ph.size else 0.0)
    return res
