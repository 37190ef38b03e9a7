"""Truncated power-series arithmetic on Taylor coefficients.

A trajectory over one integration step is represented by the scaled Taylor
coefficients x[k] = (1/k!) d^k x/dt^k of the solution about the step start.
This module provides the coefficient-level recursions that the component
models are built from: linear combination, Cauchy product, the mutual
sine/cosine recursion, the square-root-of-sum-of-squares recursion, order-wise
matrix products, and Horner evaluation of the truncated series.

Coefficients are always stored about local step time (t - t0); ``t0`` is
carried as metadata only, which keeps coefficient magnitudes well scaled.
All arithmetic is 64-bit floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Highest supported truncation order.
MAX_ORDER = 64

# Floor on g[0]^2 + h[0]^2 below which the magnitude recursion (which divides
# by 2*f[0]) is refused and the caller must fall back to a frozen magnitude.
MAGNITUDE_FLOOR = 1e-12

_COS23 = -0.5            # cos(2*pi/3)
_SIN23 = np.sqrt(3.0) / 2.0


class SeriesError(Exception):
    """Base class for series arithmetic failures."""


class OrderMismatchError(SeriesError):
    """Operands do not share the same truncation order (or t0)."""


class NonFiniteError(SeriesError):
    """A coefficient or evaluation result is NaN or infinite."""


class MagnitudeFloorError(SeriesError):
    """Order-0 magnitude too small for the square-root recursion."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PowerSeries:
    """Taylor coefficients x[0..N] of one scalar state about a step start.

    coeffs[0] is the state value at t0.  Construction validates that every
    coefficient is finite; a NaN/Inf is an error, never silent.
    """

    coeffs: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        c = _readonly(np.atleast_1d(self.coeffs))
        if c.ndim != 1 or c.size < 1:
            raise SeriesError("coefficients must be a non-empty 1-D array")
        if c.size - 1 > MAX_ORDER:
            raise SeriesError(f"order {c.size - 1} exceeds MAX_ORDER={MAX_ORDER}")
        if not np.all(np.isfinite(c)):
            raise NonFiniteError("non-finite series coefficient")
        object.__setattr__(self, "coeffs", c)

    @property
    def order(self) -> int:
        return self.coeffs.size - 1

    def eval(self, dt: float) -> float:
        return series_eval(self, dt)

    @staticmethod
    def constant(value: float, order: int, t0: float = 0.0) -> "PowerSeries":
        c = np.zeros(order + 1)
        c[0] = value
        return PowerSeries(c, t0)


def _check_pair(g: PowerSeries, h: PowerSeries):
    if g.order != h.order or g.t0 != h.t0:
        raise OrderMismatchError(
            f"operands disagree: order {g.order} vs {h.order}, t0 {g.t0} vs {h.t0}"
        )


# ---------------------------------------------------------------------------
# Array-level kernels.  The machine and solver modules run these directly on
# preallocated coefficient arrays; the PowerSeries wrappers below delegate
# here so both paths share one implementation.
# ---------------------------------------------------------------------------

def conv_at(g: np.ndarray, h: np.ndarray, k: int) -> float:
    """k-th coefficient of the Cauchy product: sum_m g[m] h[k-m]."""
    return float(np.dot(g[: k + 1], h[k::-1]))


def cauchy_product(g: np.ndarray, h: np.ndarray, n: int) -> np.ndarray:
    """Coefficients 0..n of the truncated product of two coefficient arrays."""
    return np.convolve(g[: n + 1], h[: n + 1])[: n + 1]


def sincos_extend(h: np.ndarray, s: np.ndarray, c: np.ndarray, k: int) -> None:
    """Fill s[k], c[k] for s = sin(h), c = cos(h), given orders < k.

    Mutual recursion: s[k] = (1/k) sum_{m<k} (k-m) c[m] h[k-m] and the
    corresponding negated form for c[k].  Order 0 must be seeded by the
    caller as sin(h[0]), cos(h[0]).
    """
    hp = np.arange(k, 0, -1) * h[k:0:-1]  # (k-m) * h[k-m], m = 0..k-1
    s[k] = np.dot(c[:k], hp) / k
    c[k] = -np.dot(s[:k], hp) / k


def magnitude_extend(g: np.ndarray, h: np.ndarray, f: np.ndarray, k: int) -> None:
    """Fill f[k] for f = sqrt(g^2 + h^2), orders < k already present.

    f[0] must be seeded by the caller (and must exceed the magnitude floor).
    """
    s_k = np.dot(g[: k + 1], g[k::-1]) + np.dot(h[: k + 1], h[k::-1])
    f[k] = (s_k - np.dot(f[1:k], f[k - 1:0:-1])) / (2.0 * f[0])


def eval_series(coeffs: np.ndarray, dt: float):
    """Horner evaluation of sum_k coeffs[..., k] dt^k along the last axis."""
    acc = np.array(coeffs[..., -1], copy=True)
    for k in range(coeffs.shape[-1] - 2, -1, -1):
        acc *= dt
        acc += coeffs[..., k]
    return acc


def eval_series_many(coeffs: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Horner evaluation at several offsets at once.

    ``coeffs`` has shape (..., N+1); the result has shape (..., len(taus)).
    """
    taus = np.asarray(taus, dtype=np.float64)
    acc = np.broadcast_to(coeffs[..., -1:], coeffs.shape[:-1] + taus.shape).copy()
    for k in range(coeffs.shape[-1] - 2, -1, -1):
        acc *= taus
        acc += coeffs[..., k:k + 1]
    return acc


def eval_series_derivative(coeffs: np.ndarray, dt: float):
    """Horner evaluation of the series time-derivative sum_k k coeffs[..., k] dt^(k-1)."""
    n = coeffs.shape[-1]
    if n == 1:
        return np.zeros_like(coeffs[..., 0])
    acc = np.array(coeffs[..., -1], copy=True) * (n - 1)
    for k in range(n - 2, 0, -1):
        acc *= dt
        acc += k * coeffs[..., k]
    return acc


# ---------------------------------------------------------------------------
# PowerSeries operations
# ---------------------------------------------------------------------------

def series_linear(terms: Sequence[tuple[float, PowerSeries]],
                  constant: float = 0.0) -> PowerSeries:
    """Linear combination sum_i c_i g_i plus a constant on the order-0 slot.

    Exact coefficient-wise; no truncation loss.
    """
    if not terms:
        c = np.zeros(1)
        t0 = 0.0
    else:
        first = terms[0][1]
        for _, g in terms[1:]:
            _check_pair(first, g)
        c = np.zeros(first.order + 1)
        t0 = first.t0
        for scale, g in terms:
            c += scale * g.coeffs
    c[0] += constant
    return PowerSeries(c, t0)


def series_mul(g: PowerSeries, h: PowerSeries) -> PowerSeries:
    """Truncated Cauchy product: out[k] = sum_{m=0..k} g[m] h[k-m]."""
    _check_pair(g, h)
    return PowerSeries(cauchy_product(g.coeffs, h.coeffs, g.order), g.t0)


def series_sincos_step(h: PowerSeries, f: PowerSeries, g: PowerSeries,
                       k: int) -> tuple[float, float]:
    """k-th coefficients of sin(h(t)) and cos(h(t)) from orders below k.

    ``f`` and ``g`` carry the sine/cosine coefficients already computed
    through order k-1 (their higher entries are ignored).  k = 0 is the
    seeding order and is the caller's job: f[0] = sin(h[0]), g[0] = cos(h[0]).
    """
    if k < 1:
        raise SeriesError("order 0 is seed-only: use sin(h[0]), cos(h[0])")
    _check_pair(h, f)
    _check_pair(h, g)
    if k > h.order:
        raise OrderMismatchError(f"order {k} beyond series order {h.order}")
    s = f.coeffs.copy()
    c = g.coeffs.copy()
    sincos_extend(h.coeffs, s, c, k)
    return float(s[k]), float(c[k])


def sincos_series(h: PowerSeries) -> tuple[PowerSeries, PowerSeries]:
    """Full sine and cosine series of a composed angle series."""
    n = h.order
    s = np.empty(n + 1)
    c = np.empty(n + 1)
    s[0] = np.sin(h.coeffs[0])
    c[0] = np.cos(h.coeffs[0])
    for k in range(1, n + 1):
        sincos_extend(h.coeffs, s, c, k)
    return PowerSeries(s, h.t0), PowerSeries(c, h.t0)


def series_magnitude(g: PowerSeries, h: PowerSeries) -> PowerSeries:
    """Series of sqrt(g^2 + h^2).

    Raises MagnitudeFloorError when g[0]^2 + h[0]^2 falls below the floor;
    the recursion divides by 2 f[0] and degenerates there, so the caller has
    to substitute a frozen magnitude instead.
    """
    _check_pair(g, h)
    s0 = g.coeffs[0] ** 2 + h.coeffs[0] ** 2
    if s0 < MAGNITUDE_FLOOR:
        raise MagnitudeFloorError(f"order-0 magnitude^2 {s0:.3e} below floor")
    f = np.empty(g.order + 1)
    f[0] = np.sqrt(s0)
    for k in range(1, g.order + 1):
        magnitude_extend(g.coeffs, h.coeffs, f, k)
    return PowerSeries(f, g.t0)


def series_eval(x: PowerSeries, dt: float) -> float:
    """Horner-form evaluation of the truncated series at offset dt >= 0."""
    if dt < 0:
        raise SeriesError(f"evaluation offset must be >= 0, got {dt}")
    v = float(eval_series(x.coeffs, dt))
    if not np.isfinite(v):
        raise NonFiniteError("series evaluation is non-finite")
    return v


# ---------------------------------------------------------------------------
# Order-indexed matrices of series
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeriesMatrix:
    """Matrix whose entries are power series sharing one order and t0.

    Stored as a dense (rows, cols, N+1) coefficient tensor.
    """

    coeffs: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        c = _readonly(self.coeffs)
        if c.ndim != 3:
            raise SeriesError("SeriesMatrix expects a (rows, cols, N+1) tensor")
        if not np.all(np.isfinite(c)):
            raise NonFiniteError("non-finite matrix-series coefficient")
        object.__setattr__(self, "coeffs", c)

    @property
    def rows(self) -> int:
        return self.coeffs.shape[0]

    @property
    def cols(self) -> int:
        return self.coeffs.shape[1]

    @property
    def order(self) -> int:
        return self.coeffs.shape[2] - 1

    def entry(self, i: int, j: int) -> PowerSeries:
        return PowerSeries(self.coeffs[i, j], self.t0)

    @staticmethod
    def from_entries(entries: Sequence[Sequence[PowerSeries]]) -> "SeriesMatrix":
        rows = len(entries)
        cols = len(entries[0])
        ref = entries[0][0]
        c = np.empty((rows, cols, ref.order + 1))
        for i in range(rows):
            for j in range(cols):
                e = entries[i][j]
                _check_pair(ref, e)
                c[i, j] = e.coeffs
        return SeriesMatrix(c, ref.t0)

    @staticmethod
    def constant(matrix: np.ndarray, order: int, t0: float = 0.0) -> "SeriesMatrix":
        m = np.asarray(matrix, dtype=float)
        c = np.zeros((m.shape[0], m.shape[1], order + 1))
        c[:, :, 0] = m
        return SeriesMatrix(c, t0)

    @staticmethod
    def identity(n: int, order: int, t0: float = 0.0) -> "SeriesMatrix":
        return SeriesMatrix.constant(np.eye(n), order, t0)

    def eval(self, dt: float) -> np.ndarray:
        return eval_series(self.coeffs, dt)


def matrix_series_mul(G: SeriesMatrix, H: SeriesMatrix) -> SeriesMatrix:
    """Order-wise matrix product: F[k] = sum_{m=0..k} G[m] @ H[k-m]."""
    if G.cols != H.rows:
        raise OrderMismatchError(f"dimension mismatch: {G.cols} vs {H.rows}")
    if G.order != H.order or G.t0 != H.t0:
        raise OrderMismatchError("matrix series must share order and t0")
    n = G.order
    out = np.zeros((G.rows, H.cols, n + 1))
    for k in range(n + 1):
        acc = out[:, :, k]
        for m in range(k + 1):
            acc += G.coeffs[:, :, m] @ H.coeffs[:, :, k - m]
    return SeriesMatrix(out, G.t0)
