"""Action functional of the reflected diffusion on discretized paths.

All quadratures use the midpoint rule. A segment whose two end nodes lie on
the boundary is treated as sliding: its midpoint is put back on the
boundary before the drift is evaluated, so the sliding drift applies along
the whole segment instead of only at its nodes.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import geometry as geo
from .dynamics import DiscretePath, DriftField, _bbar
from .errors import DegenerateSegment, OutsideDomain, TooFar

Array = np.ndarray

MAX_SEGMENT_TIME = 1e6


def segment_midpoints(f: DriftField, points: Array):
    """Midpoints (inside the closed domain) and their boundary flags."""
    dom = f.domain
    tol = dom.boundary_tolerance
    p = np.asarray(points, dtype=float)
    on_nodes = np.abs(dom.sd(p)) <= tol
    sliding = on_nodes[:-1] & on_nodes[1:]
    mid = 0.5 * (p[:-1] + p[1:])
    if np.any(sliding):
        mid[sliding] = geo.closest_boundary_point(dom, mid[sliding])
    mid = geo.project_to_closure(dom, mid)
    on_mid = sliding | (np.abs(dom.sd(mid)) <= tol)
    return mid, on_mid


def _check_path(path: DiscretePath, f: DriftField):
    dt = np.diff(path.times)
    if np.any(dt <= 0):
        raise DegenerateSegment("time steps must be positive")
    s = f.domain.sd(path.points)
    if np.any(s > 10 * f.domain.boundary_tolerance):
        raise OutsideDomain("path leaves the closed domain")
    return dt


def action_bbar(path: DiscretePath, f: DriftField, per_segment: bool = False):
    """``0.5 * int |phi' - bbar(phi)|^2_{a^{-1}} dt`` by the midpoint rule."""
    if len(path) < 2:
        return (0.0, np.zeros(0)) if per_segment else 0.0
    dt = _check_path(path, f)
    p = path.points
    mid, on_mid = segment_midpoints(f, p)
    v = np.diff(p, axis=0) / dt[:, None]
    r = v - _bbar(f, mid, on_mid)
    contrib = 0.5 * f.metric.norm2(mid, r) * dt
    total = float(np.sum(contrib))
    return (total, contrib) if per_segment else total


def action_omega(path: DiscretePath, f: DriftField, per_segment: bool = False):
    """Same quadrature with the reflection term ``1_{boundary} omega gamma`` written out.

    ``omega = max((phi' - b, gamma)_{a^{-1}} / |gamma|^2_{a^{-1}}, 0)`` and the
    co-normal is only evaluated at boundary midpoints.
    """
    if len(path) < 2:
        return (0.0, np.zeros(0)) if per_segment else 0.0
    dt = _check_path(path, f)
    p = path.points
    mid, on_mid = segment_midpoints(f, p)
    v = np.diff(p, axis=0) / dt[:, None]
    r = v - f(mid)
    if np.any(on_mid):
        xb = mid[on_mid]
        gam = geo.co_normal_unchecked(f.domain, f.metric, xb)
        rb = r[on_mid]
        omega = np.maximum(f.metric.inner(xb, rb, gam) / f.metric.norm2(xb, gam), 0.0)
        r[on_mid] = rb - omega[:, None] * gam
    contrib = 0.5 * f.metric.norm2(mid, r) * dt
    total = float(np.sum(contrib))
    return (total, contrib) if per_segment else total


def geometric_terms(f: DriftField, points: Array):
    """Per-segment time-free action ``|e| |bbar| - (bbar, e)`` in the ``a^{-1}`` metric.

    This is the infimum over segment durations of the quadratic action of a
    straight segment with drift frozen at its midpoint; the minimizing
    duration ``|e| / |bbar|`` is returned alongside.
    """
    p = np.asarray(points, dtype=float)
    mid, on_mid = segment_midpoints(f, p)
    e = np.diff(p, axis=0)
    bb = _bbar(f, mid, on_mid)
    ne = np.sqrt(np.maximum(f.metric.norm2(mid, e), 0.0))
    nb = np.sqrt(np.maximum(f.metric.norm2(mid, bb), 0.0))
    terms = np.maximum(ne * nb - f.metric.inner(mid, bb, e), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dur = np.where(nb > 0, ne / nb, MAX_SEGMENT_TIME)
    dur = np.minimum(dur, MAX_SEGMENT_TIME)
    # zero-length segments still need a positive duration
    dur = np.where(ne > 0, dur, 1e-12)
    return terms, dur


def geometric_action(f: DriftField, points: Array) -> float:
    return float(np.sum(geometric_terms(f, points)[0]))


def time_parameterize(f: DriftField, points: Array) -> DiscretePath:
    """Attach the action-minimizing segment durations to a curve."""
    _, dur = geometric_terms(f, points)
    times = np.concatenate([[0.0], np.cumsum(dur)])
    return DiscretePath(times, np.asarray(points, dtype=float))


def connector(x, y, f: DriftField, locality_radius: Optional[float] = None,
              n_nodes: int = 21) -> DiscretePath:
    """Straight chord from ``x`` to ``y`` run at unit speed (``T = |x - y|``), pushed into the closed domain."""
    dom = f.domain
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if locality_radius is None:
        locality_radius = 0.1 * dom.diameter
    dist = float(np.linalg.norm(y - x))
    if dist > locality_radius:
        raise TooFar(f"|x - y| = {dist:.3g} exceeds locality radius {locality_radius:.3g}")
    if np.any(dom.sd(np.stack([x, y])) > dom.boundary_tolerance):
        raise OutsideDomain("connector endpoints must lie in the closed domain")
    if dist == 0.0:
        return DiscretePath(np.zeros(1), x[None, :])
    s = np.linspace(0.0, 1.0, n_nodes)
    pts = x[None, :] + s[:, None] * (y - x)[None, :]
    pts = geo.project_to_closure(dom, pts)
    pts[0], pts[-1] = x, y
    return DiscretePath(s * dist, pts)


def connector_bound(x, y, f: DriftField, path: DiscretePath, M: float = 1.0) -> float:
    """``theta^2 M (|y-x| + |y-x| max|bbar|^2)`` with the max taken over the path nodes.

    Comparison value for short connectors; ``M`` bounds the chart distortion
    (1 for the identity chart).
    """
    d = float(np.linalg.norm(np.asarray(y) - np.asarray(x)))
    mid, on_mid = segment_midpoints(f, path.points) if len(path) > 1 else (path.points, np.zeros(1, bool))
    bmax = float(np.max(np.sum(_bbar(f, mid, on_mid) ** 2, axis=-1)))
    th = f.metric.theta
    # theta enters as 1/theta^2 for the a^{-1} norm bound
    return M * (d + d * bmax) / th ** 2
