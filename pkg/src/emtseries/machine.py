"""Voltage-behind-reactance synchronous machine and its controllers.

Per-order Taylor-coefficient recursions for a round/salient-rotor machine in
phase coordinates: swing dynamics, four rotor-winding fluxes, a rotating
subtransient stator inductance matrix, the Park / inverse-Park coupling
between rotor-frame algebraic quantities and the abc stator circuit, plus a
droop governor (TGOV1 shape) and a first-order-lag exciter (SEXS shape) with
hard output limits that freeze the limited state while it is pinned.

Unit conventions
----------------
Voltages and currents are per unit (peak convention: a 1.0 pu balanced set
has instantaneous phase peaks of 1.0).  Inductances are stored divided by the
nominal angular frequency so that time stays in seconds; rotor speed
``w = w0 + dw`` is in electrical rad/s.  The exciter output ``efd`` is kept
in the conventional per-unit scale (air-gap line normalisation) and converted
to a field-circuit forcing voltage with the factor ``r_fd / (w0 l_ad)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .series import (
    PowerSeries,
    SeriesMatrix,
    conv_at,
    eval_series,
    sincos_series,
    sincos_extend,
    MAGNITUDE_FLOOR,
)

_COS23 = -0.5
_SIN23 = np.sqrt(3.0) / 2.0
_SHIFTS = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])

# Phase offsets of the cos(2*theta + phi) entries of the subtransient
# inductance matrix.
_PH = np.array([[0.0, -1.0, 1.0],
                [-1.0, 1.0, 0.0],
                [1.0, 0.0, -1.0]]) * (2.0 * np.pi / 3.0)
_CPH = np.cos(_PH)
_SPH = np.sin(_PH)

# x1 state layout for one machine
IDX_DELTA, IDX_DOMEGA, IDX_LFD, IDX_L1D, IDX_L1Q, IDX_L2Q, IDX_THETA = range(7)
IDX_IA, IDX_IB, IDX_IC = 7, 8, 9
IDX_P1, IDX_P2, IDX_EFD, IDX_V1 = 10, 11, 12, 13
N_X1 = 14

X1_NAMES = ("delta", "domega", "lfd", "l1d", "l1q", "l2q", "theta",
            "ia", "ib", "ic", "p1", "p2", "efd", "v1")


class MachineError(Exception):
    pass


class InitializationError(MachineError):
    """Requested operating point is not reachable within the machine limits."""


def _parallel(*vals: float) -> float:
    return 1.0 / sum(1.0 / v for v in vals)


@dataclass(frozen=True)
class MachineParams:
    """Electrical and mechanical parameters, inductances in seconds units.

    ``from_reactances`` converts conventional per-unit reactances by dividing
    by ``omega0``; SI-unit cases pass true inductances through unchanged.
    """

    h: float            # inertia constant, s
    d: float            # damping torque coefficient
    omega0: float       # nominal electrical speed, rad/s
    n_p: int            # pole count, even
    r_s: float
    r_fd: float
    r_1d: float
    r_1q: float
    r_2q: float
    l_fd: float
    l_1d: float
    l_1q: float
    l_2q: float
    l_ad: float
    l_aq: float
    l_ls: float
    l_0: float

    def __post_init__(self):
        for name in ("l_fd", "l_1d", "l_1q", "l_2q", "l_ad", "l_aq", "l_ls", "l_0"):
            if getattr(self, name) <= 0:
                raise MachineError(f"inductance {name} must be > 0")
        if self.h <= 0:
            raise MachineError("inertia constant must be > 0")
        if self.n_p < 2 or self.n_p % 2:
            raise MachineError("pole count must be an even integer >= 2")

    @staticmethod
    def from_reactances(omega0: float, **pu) -> "MachineParams":
        conv = {k[2:] if k.startswith("x_") else k: v for k, v in pu.items()}
        ls = {f"l_{k}": conv[k] / omega0
              for k in ("fd", "1d", "1q", "2q", "ad", "aq", "ls", "0")}
        return MachineParams(
            h=conv["h"], d=conv["d"], omega0=omega0, n_p=int(conv["n_p"]),
            r_s=conv["r_s"], r_fd=conv["r_fd"], r_1d=conv["r_1d"],
            r_1q=conv["r_1q"], r_2q=conv["r_2q"], **ls)

    @property
    def lpp_ad(self) -> float:
        """d-axis subtransient mutual: l_ad // l_fd // l_1d."""
        return _parallel(self.l_ad, self.l_fd, self.l_1d)

    @property
    def lpp_aq(self) -> float:
        return _parallel(self.l_aq, self.l_1q, self.l_2q)


@dataclass(frozen=True)
class GovParams:
    r_g: float
    t_1: float
    t_2: float
    t_3: float
    d_t: float
    p_max: float
    p_min: float
    p_ref: float = 0.0

    def __post_init__(self):
        if self.t_1 <= 0 or self.t_3 <= 0:
            raise MachineError("governor time constants t_1, t_3 must be > 0")
        if not self.p_min < self.p_max:
            raise MachineError("governor requires p_min < p_max")


@dataclass(frozen=True)
class ExcParams:
    k_e: float
    t_e: float
    t_a: float
    t_b: float
    e_max: float
    e_min: float
    v_ref: float = 0.0

    def __post_init__(self):
        if self.t_e <= 0 or self.t_b <= 0:
            raise MachineError("exciter time constants t_e, t_b must be > 0")
        if not self.e_min < self.e_max:
            raise MachineError("exciter requires e_min < e_max")


class MachineConstants:
    """Derived coefficient bundle, computed once per machine."""

    def __init__(self, p: MachineParams):
        la, lq = p.lpp_ad, p.lpp_aq
        self.lpp_ad = la
        self.lpp_aq = lq
        # subtransient-voltage coefficients (coefficients of i, fluxes, efd)
        self.ad_i = -(p.r_fd / p.l_fd ** 2 + p.r_1d / p.l_1d ** 2) * la ** 2
        self.ad_fd = (-(p.r_fd * la / p.l_fd ** 2) * (1.0 - la / p.l_fd)
                      + la ** 2 * p.r_1d / (p.l_1d ** 2 * p.l_fd))
        self.ad_1d = (la ** 2 * p.r_fd / (p.l_fd ** 2 * p.l_1d)
                      - (p.r_1d * la / p.l_1d ** 2) * (1.0 - la / p.l_1d))
        self.ad_efd = la / p.l_fd
        self.aq_i = -(p.r_1q / p.l_1q ** 2 + p.r_2q / p.l_2q ** 2) * lq ** 2
        self.aq_1q = (-(p.r_1q * lq / p.l_1q ** 2) * (1.0 - lq / p.l_1q)
                      + lq ** 2 * p.r_2q / (p.l_2q ** 2 * p.l_1q))
        self.aq_2q = (lq ** 2 * p.r_1q / (p.l_1q ** 2 * p.l_2q)
                      - (p.r_2q * lq / p.l_2q ** 2) * (1.0 - lq / p.l_2q))
        # rotating inductance matrix: constant part and double-angle amplitude
        s_diag = p.l_ls + (p.l_0 - p.l_ls + la + lq) / 3.0
        s_off = (2.0 * p.l_0 - 2.0 * p.l_ls - la - lq) / 6.0
        self.s0 = np.where(np.eye(3) > 0.5, s_diag, s_off)
        self.dl3 = (la - lq) / 3.0
        self.efd_scale = p.r_fd / (p.omega0 * p.l_ad)
        self.pe_scale = 3.0 * p.n_p / 4.0
        # synchronous reactances for phasor initialisation
        self.x_d = p.omega0 * (p.l_ls + p.l_ad)
        self.x_q = p.omega0 * (p.l_ls + p.l_aq)


# ---------------------------------------------------------------------------
# Park transform kernels (order-wise matrix-vector products)
# ---------------------------------------------------------------------------

def _park_at(sin_t: np.ndarray, cos_t: np.ndarray, abc: np.ndarray, k: int):
    """Order-k (0, d, q) coefficients of the Park transform of abc series."""
    ca = conv_at(cos_t, abc[0], k)
    sa = conv_at(sin_t, abc[0], k)
    cb = conv_at(cos_t, abc[1], k)
    sb = conv_at(sin_t, abc[1], k)
    cc = conv_at(cos_t, abc[2], k)
    sc = conv_at(sin_t, abc[2], k)
    z0 = (abc[0, k] + abc[1, k] + abc[2, k]) / 3.0
    zd = (2.0 / 3.0) * (ca + (_COS23 * cb + _SIN23 * sb) + (_COS23 * cc - _SIN23 * sc))
    zq = -(2.0 / 3.0) * (sa + (_COS23 * sb - _SIN23 * cb) + (_COS23 * sc + _SIN23 * cc))
    return z0, zd, zq


def _inv_park_at(sin_t: np.ndarray, cos_t: np.ndarray, zdq: np.ndarray, k: int):
    """Order-k abc coefficients of the inverse Park transform of (0, d, q) series."""
    cd = conv_at(cos_t, zdq[1], k)
    sd = conv_at(sin_t, zdq[1], k)
    cq = conv_at(cos_t, zdq[2], k)
    sq = conv_at(sin_t, zdq[2], k)
    z0 = zdq[0, k]
    za = z0 + cd - sq
    zb = z0 + (_COS23 * cd + _SIN23 * sd) - (_COS23 * sq - _SIN23 * cq)
    zc = z0 + (_COS23 * cd - _SIN23 * sd) - (_COS23 * sq + _SIN23 * cq)
    return za, zb, zc


def park_order(theta: PowerSeries, abc, k: int) -> np.ndarray:
    """Order-k 0dq coefficients of the Park transform of three phase series."""
    s, c = sincos_series(theta)
    stack = np.vstack([x.coeffs for x in abc])
    return np.array(_park_at(s.coeffs, c.coeffs, stack, k))


def inv_park_order(theta: PowerSeries, zdq, k: int) -> np.ndarray:
    """Order-k abc coefficients of the inverse Park transform of 0dq series."""
    s, c = sincos_series(theta)
    stack = np.vstack([x.coeffs for x in zdq])
    return np.array(_inv_park_at(s.coeffs, c.coeffs, stack, k))


def build_inductance_series(theta: PowerSeries, p: MachineParams) -> SeriesMatrix:
    """Series of the 3x3 rotating subtransient inductance matrix.

    Entries are constant plus (lpp_ad - lpp_aq)/3 * cos(2*theta + phi) with the
    six phase offsets phi; symmetric at every order.
    """
    c = MachineConstants(p)
    n = theta.order
    two_theta = PowerSeries(2.0 * theta.coeffs, theta.t0)
    s2, c2 = sincos_series(two_theta)
    coeffs = np.zeros((3, 3, n + 1))
    coeffs[:, :, 0] = c.s0
    for k in range(n + 1):
        coeffs[:, :, k] += c.dl3 * (_CPH * c2.coeffs[k] - _SPH * s2.coeffs[k])
    return SeriesMatrix(coeffs, theta.t0)


# ---------------------------------------------------------------------------
# Per-machine series state
# ---------------------------------------------------------------------------

class Machine:
    """One generator with its controllers and per-step coefficient arrays.

    Owned by a single simulation.  ``seed_step`` resets the arrays for a new
    step (poisoning unfilled orders with NaN so that any out-of-order read
    surfaces as a non-finite coefficient), then ``algebraic_order`` /
    ``differential_order`` fill them order by order.
    """

    def __init__(self, mid: str, params: MachineParams, gov: GovParams,
                 exc: ExcParams, order: int):
        self.mid = mid
        self.par = params
        self.gov = gov
        self.exc = exc
        self.c = MachineConstants(params)
        self.n = order
        n1 = order + 1
        self.x1 = np.full((N_X1, n1), np.nan)
        self.sin_t = np.full(n1, np.nan)
        self.cos_t = np.full(n1, np.nan)
        self.sin_2t = np.full(n1, np.nan)
        self.cos_2t = np.full(n1, np.nan)
        self.theta2 = np.full(n1, np.nan)
        self.lpp = np.full((3, 3, n1), np.nan)
        self.lpp0_inv = np.empty((3, 3))
        # algebraic (closure) series
        self.i_0dq = np.full((3, n1), np.nan)
        self.v_0dq = np.full((3, n1), np.nan)
        self.vpp_dq0 = np.full((3, n1), np.nan)   # rows: 0, d, q
        self.vpp_abc = np.full((3, n1), np.nan)
        self.lam_ad = np.full(n1, np.nan)
        self.lam_aq = np.full(n1, np.nan)
        self.lam_d_pp = np.full(n1, np.nan)
        self.lam_q_pp = np.full(n1, np.nan)
        self.omega = np.full(n1, np.nan)
        self.efd_v = np.full(n1, np.nan)
        self.p_e = np.full(n1, np.nan)
        self.p_m = np.full(n1, np.nan)
        self.v_t = np.full(n1, np.nan)
        self._w_mix = np.full(n1, np.nan)
        self.sat_p1 = 0      # +1 pinned at p_max, -1 at p_min, 0 free
        self.sat_efd = 0
        self.vt_frozen = False
        self.t0 = 0.0

    # -- saturation ---------------------------------------------------------

    def gov_rate0(self, x1_0: np.ndarray) -> float:
        """Unconstrained dp1/dt at the step start."""
        g = self.gov
        return ((g.p_ref - x1_0[IDX_DOMEGA]) / g.r_g - x1_0[IDX_P1]) / g.t_1

    def exc_rate0(self, x1_0: np.ndarray) -> float:
        """Unconstrained d(efd)/dt at the step start."""
        e = self.exc
        return (e.k_e * x1_0[IDX_V1] - x1_0[IDX_EFD]) / e.t_e

    def refresh_saturation(self, x1_0: np.ndarray) -> None:
        """Recompute pin flags from order-0 values and outward rate signs."""
        g, e = self.gov, self.exc
        rp = self.gov_rate0(x1_0)
        if x1_0[IDX_P1] >= g.p_max and rp >= 0.0:
            self.sat_p1 = 1
        elif x1_0[IDX_P1] <= g.p_min and rp <= 0.0:
            self.sat_p1 = -1
        else:
            self.sat_p1 = 0
        re = self.exc_rate0(x1_0)
        if x1_0[IDX_EFD] >= e.e_max and re >= 0.0:
            self.sat_efd = 1
        elif x1_0[IDX_EFD] <= e.e_min and re <= 0.0:
            self.sat_efd = -1
        else:
            self.sat_efd = 0

    # -- per-step fill ------------------------------------------------------

    def seed_step(self, t0: float, x1_0: np.ndarray) -> None:
        self.t0 = t0
        for a in (self.x1, self.sin_t, self.cos_t, self.sin_2t, self.cos_2t,
                  self.theta2, self.i_0dq, self.v_0dq, self.vpp_dq0,
                  self.vpp_abc, self.lam_ad, self.lam_aq, self.lam_d_pp,
                  self.lam_q_pp, self.omega, self.efd_v, self.p_e, self.p_m,
                  self.v_t, self._w_mix):
            a.fill(np.nan)
        self.lpp.fill(np.nan)
        self.x1[:, 0] = x1_0
        if self.sat_p1:
            self.x1[IDX_P1, 1:] = 0.0
        if self.sat_efd:
            self.x1[IDX_EFD, 1:] = 0.0
        self.vpp_dq0[0, :] = 0.0      # no zero-sequence subtransient voltage
        th = x1_0[IDX_THETA]
        self.sin_t[0] = np.sin(th)
        self.cos_t[0] = np.cos(th)
        self.theta2[0] = 2.0 * th
        self.sin_2t[0] = np.sin(2.0 * th)
        self.cos_2t[0] = np.cos(2.0 * th)
        self.lpp[:, :, 0] = self.c.s0 + self.c.dl3 * (
            _CPH * self.cos_2t[0] - _SPH * self.sin_2t[0])
        self.lpp0_inv = np.linalg.inv(self.lpp[:, :, 0])
        self.vt_frozen = False

    def algebraic_order(self, k: int, v_abc: np.ndarray) -> None:
        """Fill the algebraic-closure coefficients at order k.

        Requires the differential states through order k and the terminal
        voltage series ``v_abc`` (3, N+1) through order k.
        """
        p, c = self.par, self.c
        x1 = self.x1
        i_abc = x1[IDX_IA:IDX_IC + 1]
        self.i_0dq[:, k] = _park_at(self.sin_t, self.cos_t, i_abc, k)
        self.v_0dq[:, k] = _park_at(self.sin_t, self.cos_t, v_abc, k)
        i_d = self.i_0dq[1]
        i_q = self.i_0dq[2]
        self.lam_ad[k] = c.lpp_ad * (-i_d[k] + x1[IDX_LFD, k] / p.l_fd
                                     + x1[IDX_L1D, k] / p.l_1d)
        self.lam_aq[k] = c.lpp_aq * (-i_q[k] + x1[IDX_L1Q, k] / p.l_1q
                                     + x1[IDX_L2Q, k] / p.l_2q)
        self.lam_d_pp[k] = c.lpp_ad * (x1[IDX_LFD, k] / p.l_fd
                                       + x1[IDX_L1D, k] / p.l_1d)
        self.lam_q_pp[k] = c.lpp_aq * (x1[IDX_L1Q, k] / p.l_1q
                                       + x1[IDX_L2Q, k] / p.l_2q)
        self.omega[k] = (p.omega0 if k == 0 else 0.0) + x1[IDX_DOMEGA, k]
        self.efd_v[k] = x1[IDX_EFD, k] * c.efd_scale
        self.vpp_dq0[1, k] = (c.ad_i * i_d[k] + c.ad_fd * x1[IDX_LFD, k]
                              + c.ad_1d * x1[IDX_L1D, k]
                              - conv_at(self.lam_q_pp, self.omega, k)
                              + c.ad_efd * self.efd_v[k])
        self.vpp_dq0[2, k] = (c.aq_i * i_q[k] + c.aq_1q * x1[IDX_L1Q, k]
                              + c.aq_2q * x1[IDX_L2Q, k]
                              + conv_at(self.lam_d_pp, self.omega, k))
        self.vpp_abc[:, k] = _inv_park_at(self.sin_t, self.cos_t, self.vpp_dq0, k)
        self._w_mix[k] = conv_at(self.lam_ad, i_q, k) - conv_at(self.lam_aq, i_d, k)
        self.p_e[k] = c.pe_scale * conv_at(self.omega, self._w_mix, k)
        self.p_m[k] = x1[IDX_P2, k] - self.gov.d_t * x1[IDX_DOMEGA, k]
        # terminal voltage magnitude via the sqrt recursion on (v_d, v_q)
        if k == 0:
            s0 = self.v_0dq[1, 0] ** 2 + self.v_0dq[2, 0] ** 2
            self.vt_frozen = s0 < MAGNITUDE_FLOOR
            self.v_t[0] = np.sqrt(s0)
        elif self.vt_frozen:
            self.v_t[k] = 0.0
        else:
            s_k = (conv_at(self.v_0dq[1], self.v_0dq[1], k)
                   + conv_at(self.v_0dq[2], self.v_0dq[2], k))
            self.v_t[k] = (s_k - np.dot(self.v_t[1:k], self.v_t[k - 1:0:-1])) \
                / (2.0 * self.v_t[0])

    def differential_order(self, k: int, v_abc: np.ndarray) -> None:
        """Fill all differential-state coefficients at order k+1.

        Requires ``algebraic_order(k)`` already run and terminal voltage
        through order k.  Extends the angle sine/cosine series and the
        inductance matrix to order k+1 on the way (the stator current solve
        needs them there).
        """
        p, c = self.par, self.c
        x1 = self.x1
        kp1 = k + 1
        x1[IDX_DELTA, kp1] = x1[IDX_DOMEGA, k] / kp1
        x1[IDX_DOMEGA, kp1] = (p.omega0 / (2.0 * p.h)) * (
            self.p_m[k] - self.p_e[k] - p.d * x1[IDX_DOMEGA, k] / p.omega0) / kp1
        rl = p.r_fd / p.l_fd
        x1[IDX_LFD, kp1] = (self.efd_v[k] - rl * (x1[IDX_LFD, k] - self.lam_ad[k])) / kp1
        x1[IDX_L1D, kp1] = -(p.r_1d / p.l_1d) * (x1[IDX_L1D, k] - self.lam_ad[k]) / kp1
        x1[IDX_L1Q, kp1] = -(p.r_1q / p.l_1q) * (x1[IDX_L1Q, k] - self.lam_aq[k]) / kp1
        x1[IDX_L2Q, kp1] = -(p.r_2q / p.l_2q) * (x1[IDX_L2Q, k] - self.lam_aq[k]) / kp1
        x1[IDX_THETA, kp1] = self.omega[k] / kp1
        self.theta2[kp1] = 2.0 * x1[IDX_THETA, kp1]
        sincos_extend(x1[IDX_THETA], self.sin_t, self.cos_t, kp1)
        sincos_extend(self.theta2, self.sin_2t, self.cos_2t, kp1)
        self.lpp[:, :, kp1] = self.c.dl3 * (
            _CPH * self.cos_2t[kp1] - _SPH * self.sin_2t[kp1])
        i_abc = x1[IDX_IA:IDX_IC + 1]
        rhs = (self.vpp_abc[:, k] - v_abc[:, k] - p.r_s * i_abc[:, k]) / kp1
        if self.c.dl3 != 0.0:
            # exact convolved form of the rotating-inductance stator equation
            rhs = rhs - np.einsum("abj,bj->a", self.lpp[:, :, 1:kp1 + 1],
                                  i_abc[:, k::-1])
        x1[IDX_IA:IDX_IC + 1, kp1] = self.lpp0_inv @ rhs
        self.tgov1_order(k)
        self.sexs_order(k)

    def tgov1_order(self, k: int) -> None:
        """Governor recursion: p1[k+1], p2[k+1] (p1 pinned to 0 when saturated)."""
        g = self.gov
        x1 = self.x1
        kp1 = k + 1
        if not self.sat_p1:
            ref = g.p_ref if k == 0 else 0.0
            x1[IDX_P1, kp1] = ((ref - x1[IDX_DOMEGA, k]) / g.r_g
                               - x1[IDX_P1, k]) / (g.t_1 * kp1)
        x1[IDX_P2, kp1] = (kp1 * g.t_2 * x1[IDX_P1, kp1]
                           + x1[IDX_P1, k] - x1[IDX_P2, k]) / (g.t_3 * kp1)

    def sexs_order(self, k: int) -> None:
        """Exciter recursion: efd[k+1], v1[k+1] (efd pinned to 0 when saturated)."""
        e = self.exc
        x1 = self.x1
        kp1 = k + 1
        if not self.sat_efd:
            x1[IDX_EFD, kp1] = (e.k_e * x1[IDX_V1, k] - x1[IDX_EFD, k]) / (e.t_e * kp1)
        self.efd_v[kp1] = x1[IDX_EFD, kp1] * self.c.efd_scale
        ref = e.v_ref if k == 0 else 0.0
        x1[IDX_V1, kp1] = (ref - x1[IDX_V1, k] - self.v_t[k]) / ((e.t_b + e.t_a) * kp1)

    def end_values(self, dt: float) -> np.ndarray:
        return eval_series(self.x1, dt)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.x1)):
            bad = np.argwhere(~np.isfinite(self.x1))
            s, k = bad[0]
            raise MachineError(
                f"machine {self.mid}: non-finite coefficient for "
                f"{X1_NAMES[s]} at order {k}")


# Spec-level functional aliases over the Machine fill methods.

def machine_algebraic_order(m: Machine, k: int, v_abc: np.ndarray) -> None:
    m.algebraic_order(k, v_abc)


def machine_differential_order(m: Machine, k: int, v_abc: np.ndarray) -> None:
    m.differential_order(k, v_abc)


def tgov1_order(m: Machine, k: int) -> None:
    m.tgov1_order(k)


def sexs_order(m: Machine, k: int) -> None:
    m.sexs_order(k)


# ---------------------------------------------------------------------------
# Steady-state initialisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MachineInit:
    x1: np.ndarray          # order-0 values of all 14 differential states
    p_ref: float
    v_ref: float
    i_phasor: complex       # phase-a injection phasor (peak convention)
    e_fd: float             # field forcing voltage (internal volts)
    p_e: float


def balanced_instantaneous(phasor: complex, omega0: float, t: float) -> np.ndarray:
    """Instantaneous abc samples of a balanced set given its phase-a phasor."""
    return np.abs(phasor) * np.cos(omega0 * t + np.angle(phasor) + _SHIFTS)


def init_machine_steady_state(p: MachineParams, gov: GovParams, exc: ExcParams,
                              p_out: float, q_out: float, v_phasor: complex,
                              i_phasor: complex | None = None) -> MachineInit:
    """Order-0 state for balanced sinusoidal steady state at a terminal phasor.

    Standard phasor construction: locate the rotor from the voltage behind
    quadrature-axis impedance, resolve dq currents, back out the field current
    and winding fluxes, then place every controller at its fixed point.
    ``i_phasor`` overrides the (p_out, q_out)-derived stator current when the
    caller has already committed an injection into a network solution.
    Raises InitializationError when the required field voltage or governor
    valve position falls outside its limits.
    """
    if abs(v_phasor) <= 0.0:
        raise InitializationError("terminal voltage magnitude must be positive")
    c = MachineConstants(p)
    if i_phasor is None:
        i_ph = (p_out - 1j * q_out) / np.conj(v_phasor)
    else:
        i_ph = i_phasor
    e_q = v_phasor + (p.r_s + 1j * c.x_q) * i_ph
    theta0 = float(np.angle(e_q) - np.pi / 2.0)
    vdq = v_phasor * np.exp(-1j * theta0)
    idq = i_ph * np.exp(-1j * theta0)
    v_d, v_q = vdq.real, vdq.imag
    i_d, i_q = idq.real, idq.imag
    e_i = v_q + p.r_s * i_q + c.x_d * i_d
    i_fd = e_i / (p.omega0 * p.l_ad)
    e_fd = p.r_fd * i_fd
    lam_ad = p.l_ad * (-i_d + i_fd)
    lam_aq = -p.l_aq * i_q
    omega = p.omega0
    p_e = c.pe_scale * omega * (lam_ad * i_q - lam_aq * i_d)
    efd0 = e_fd / c.efd_scale     # == e_i, the per-unit field voltage
    if not exc.e_min <= efd0 <= exc.e_max:
        raise InitializationError(
            f"required field voltage {efd0:.4f} outside "
            f"[{exc.e_min}, {exc.e_max}]")
    p1 = p_e
    if not gov.p_min <= p1 <= gov.p_max:
        raise InitializationError(
            f"required valve position {p1:.4f} outside "
            f"[{gov.p_min}, {gov.p_max}]")
    v1 = efd0 / exc.k_e
    x1 = np.empty(N_X1)
    x1[IDX_DELTA] = theta0
    x1[IDX_DOMEGA] = 0.0
    x1[IDX_LFD] = p.l_fd * i_fd + lam_ad
    x1[IDX_L1D] = lam_ad
    x1[IDX_L1Q] = lam_aq
    x1[IDX_L2Q] = lam_aq
    x1[IDX_THETA] = theta0
    x1[IDX_IA:IDX_IC + 1] = balanced_instantaneous(i_ph, p.omega0, 0.0)
    x1[IDX_P1] = p1
    x1[IDX_P2] = p1
    x1[IDX_EFD] = efd0
    x1[IDX_V1] = v1
    return MachineInit(
        x1=x1,
        p_ref=gov.r_g * p1,
        v_ref=v1 + abs(v_phasor),
        i_phasor=complex(i_ph),
        e_fd=float(e_fd),
        p_e=float(p_e),
    )
