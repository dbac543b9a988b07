"""Named drift fields used by the configs, examples and tests.

The disk fields share one construction: a radial outward push ``K x`` that
makes the whole circle a sliding boundary, plus a tangential component
``r f(theta) e_theta`` whose boundary trace ``f = -U'`` comes from a
potential ``U`` on the circle. ``U`` is interpolated between prescribed
extremum values with half-cosine arcs, so the barrier crossed along the
circle from a minimum ``U_i`` over a maximum ``U_s`` costs exactly
``2 (U_s - U_i)``.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import DriftField
from .geometry import MetricField, unit_disk

TWO_PI = 2.0 * math.pi

# Extremum values of the circle potential reproducing the example table
# V(1,3)=1, V(3,1)=2, V(3,5)=4, V(5,3)=3, V(5,1)=7, V(1,5)=6 for direct
# (avoiding) crossings. Minima at odd positions. The closing value 0.5
# differs from U_1 = 0: the tangential field has nonzero circulation.
SIX_EQ_VALUES = (0.0, 0.5, -0.5, 1.5, 0.0, 3.5)
SIX_EQ_CLOSING = 0.5
SIX_EQ_OFFSET = 0.3

TWO_WELL_VALUES = (0.0, 0.15, -0.35, 0.3)
TWO_WELL_CLOSING = 0.0


class CirclePotential:
    """Piecewise half-cosine potential on the circle through given extrema."""

    def __init__(self, angles: Sequence[float], values: Sequence[float],
                 closing_value: Optional[float] = None):
        th = np.asarray(angles, dtype=float)
        if np.any(np.diff(th) <= 0) or th[-1] - th[0] >= TWO_PI:
            raise ValueError("extremum angles must be increasing within one turn")
        vals = np.asarray(values, dtype=float)
        if len(vals) != len(th) or len(th) < 2 or len(th) % 2:
            raise ValueError("need an even number (>=2) of alternating extrema")
        closing = vals[0] if closing_value is None else float(closing_value)
        self.angles = th
        self.values = vals
        self.closing_value = closing
        self._knots = np.append(th, th[0] + TWO_PI)
        self._vals = np.append(vals, closing)
        d = np.diff(self._vals)
        if np.any(d[:-1] * d[1:] >= 0) or d[-1] * d[0] >= 0:
            raise ValueError("extrema must alternate between minima and maxima")

    def _locate(self, theta):
        t = (np.asarray(theta, dtype=float) - self.angles[0]) % TWO_PI + self.angles[0]
        k = np.clip(np.searchsorted(self._knots, t, side="right") - 1, 0, len(self.angles) - 1)
        h = self._knots[k + 1] - self._knots[k]
        s = (t - self._knots[k]) / h
        return k, s, h

    def __call__(self, theta):
        k, s, _ = self._locate(theta)
        du = self._vals[k + 1] - self._vals[k]
        return self._vals[k] + du * 0.5 * (1 - np.cos(np.pi * s))

    def derivative(self, theta):
        k, s, h = self._locate(theta)
        du = self._vals[k + 1] - self._vals[k]
        return du * 0.5 * np.pi * np.sin(np.pi * s) / h

    def unwrapped(self, k: int) -> float:
        """Value at extremum ``k`` continued across turns (``k`` any integer)."""
        n = len(self.values)
        turns, r = divmod(k, n)
        return float(self.values[r] + turns * (self.closing_value - self.values[0]))

    def barrier(self, i: int, j: int) -> float:
        """Action ``2 (U_max - U_i)`` of the direct crossing from extremum ``i`` to ``j`` (0-based, two apart)."""
        n = len(self.values)
        if (j - i) % n == 2:
            return 2.0 * (self.unwrapped(i + 1) - self.unwrapped(i))
        if (i - j) % n == 2:
            return 2.0 * (self.unwrapped(i - 1) - self.unwrapped(i))
        raise ValueError("barrier is defined for neighbouring minima only")


def disk_radial_tangential(tangential: Callable[[np.ndarray], np.ndarray], radial_rate: float = 15.0,
                           name: str = "disk_radial_tangential", params: Optional[dict] = None,
                           metric: Optional[MetricField] = None) -> DriftField:
    """``b(x) = K x + r f(theta) e_theta`` on the unit disk.

    Crossing a tangential barrier ``B`` at radius ``r`` costs ``r^2 B`` while
    reaching that radius costs ``K (1 - r^2)``, so boundary routes are optimal
    whenever ``K`` exceeds every barrier.
    """
    K = float(radial_rate)

    def b(x):
        x = np.asarray(x, dtype=float)
        th = np.arctan2(x[..., 1], x[..., 0])
        ft = tangential(th)
        out = K * x
        out[..., 0] -= ft * x[..., 1]
        out[..., 1] += ft * x[..., 0]
        return out

    return DriftField(b, unit_disk(), metric or MetricField.identity(2), name, dict(params or {}))


def disk_boundary_potential(values: Sequence[float], closing_value: Optional[float] = None,
                            angles: Optional[Sequence[float]] = None, offset: float = 0.0,
                            radial_rate: float = 15.0, name: str = "disk_boundary_potential") -> DriftField:
    n = len(values)
    if angles is None:
        angles = [offset + TWO_PI * k / n for k in range(n)]
    pot = CirclePotential(angles, values, closing_value)
    params = {"values": [float(v) for v in values],
              "closing_value": float(pot.closing_value),
              "angles": [float(a) for a in angles],
              "radial_rate": float(radial_rate)}
    f = disk_radial_tangential(lambda th: -pot.derivative(th), radial_rate, name, params)
    object.__setattr__(f, "potential", pot)
    return f


def disk_six_equilibria(values: Sequence[float] = SIX_EQ_VALUES, closing_value: float = SIX_EQ_CLOSING,
                        offset: float = SIX_EQ_OFFSET, radial_rate: float = 15.0) -> DriftField:
    """Three stable (odd labels) and three unstable boundary points on the disk."""
    if len(values) != 6:
        raise ValueError("disk_six_equilibria takes six extremum values")
    return disk_boundary_potential(values, closing_value, offset=offset,
                                   radial_rate=radial_rate, name="disk_six_equilibria")


def disk_two_wells(values: Sequence[float] = TWO_WELL_VALUES, closing_value: float = TWO_WELL_CLOSING,
                   offset: float = SIX_EQ_OFFSET, radial_rate: float = 5.0) -> DriftField:
    """Two stable and two unstable boundary points; barriers 0.3 and 1.0 by default."""
    return disk_boundary_potential(values, closing_value, offset=offset,
                                   radial_rate=radial_rate, name="disk_two_wells")


def disk_double_sink(radial_rate: float = 5.0) -> DriftField:
    """Tangential trace ``-sin(2 theta)``: sinks at 0 and pi, sources at +-pi/2."""
    return disk_radial_tangential(lambda th: -np.sin(2 * th), radial_rate, "disk_double_sink",
                                  {"radial_rate": float(radial_rate)})


def point_attractor(center=(2.0, 0.0), domain=None, metric=None) -> DriftField:
    """``b(x) = c - x``; with ``c`` outside the disk the only limit point is the boundary point nearest ``c``."""
    c = np.asarray(center, dtype=float)

    def b(x):
        return c - np.asarray(x, dtype=float)

    dom = domain or unit_disk()
    return DriftField(b, dom, metric or MetricField.identity(dom.dimension), "point_attractor",
                      {"center": [float(v) for v in c]})


def constant_field(vector, domain=None, metric=None) -> DriftField:
    v = np.asarray(vector, dtype=float)

    def b(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(v, x.shape).copy()

    dom = domain or unit_disk()
    return DriftField(b, dom, metric or MetricField.identity(dom.dimension), "constant",
                      {"vector": [float(t) for t in v]})


def zero_field(domain=None, metric=None) -> DriftField:
    dom = domain or unit_disk()
    return constant_field(np.zeros(dom.dimension), dom, metric)


def gradient_field(grad_u: Callable[[np.ndarray], np.ndarray], domain=None, metric=None,
                   name: str = "gradient", params: Optional[dict] = None) -> DriftField:
    """``b = -grad U``."""
    dom = domain or unit_disk()

    def b(x):
        return -np.asarray(grad_u(np.asarray(x, dtype=float)), dtype=float)

    return DriftField(b, dom, metric or MetricField.identity(dom.dimension), name, dict(params or {}))


def quadratic_gradient(weights=(1.0, 2.0), domain=None) -> DriftField:
    """``U(x) = 0.5 * sum w_k x_k^2``."""
    w = np.asarray(weights, dtype=float)
    return gradient_field(lambda x: w * x, domain, None, "quadratic_gradient",
                          {"weights": [float(v) for v in w]})


NAMED_FIELDS = {
    "disk_six_equilibria": disk_six_equilibria,
    "disk_two_wells": disk_two_wells,
    "disk_boundary_potential": disk_boundary_potential,
    "disk_double_sink": disk_double_sink,
    "point_attractor": point_attractor,
    "quadratic_gradient": quadratic_gradient,
    "zero": zero_field,
    "constant": constant_field,
}


def field_from_name(name: str, **params) -> DriftField:
    try:
        factory = NAMED_FIELDS[name]
    except KeyError:
        raise ValueError(f"unknown drift {name!r}; choose from {sorted(NAMED_FIELDS)}") from None
    return factory(**params)
