"""Domains given by signed distance, Riemannian metric fields and co-normals.

Every callable in this module follows the same batching convention: a
position array of shape ``(..., d)`` maps to scalars ``(...)``, vectors
``(..., d)`` or matrices ``(..., d, d)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NotOnBoundary, ProjectionDiverged

Array = np.ndarray

DEFAULT_BOUNDARY_TOL = 1e-9
_FD_STEP = 1e-6


@dataclass(frozen=True)
class DomainSpec:
    """A bounded smooth domain described by its signed distance.

    ``signed_distance`` is negative inside, zero on the boundary and positive
    outside. ``gradient`` and ``closest_boundary_point`` are optional
    analytic shortcuts; without them central differences and Newton steps
    are used.
    """

    signed_distance: Callable[[Array], Array]
    dimension: int
    bounding_box: tuple
    boundary_tolerance: float = DEFAULT_BOUNDARY_TOL
    name: str = "custom"
    gradient: Optional[Callable[[Array], Array]] = None
    closest_boundary_point: Optional[Callable[[Array], Array]] = None
    max_projection_iter: int = 200

    def sd(self, x) -> Array:
        return np.asarray(self.signed_distance(np.asarray(x, dtype=float)), dtype=float)

    def grad_sd(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float)
        g = np.empty_like(x)
        for k in range(self.dimension):
            e = np.zeros(self.dimension)
            e[k] = _FD_STEP
            g[..., k] = (self.sd(x + e) - self.sd(x - e)) / (2 * _FD_STEP)
        return g

    def contains(self, x) -> Array:
        """Membership in the closure, with the tolerance band."""
        return self.sd(x) <= self.boundary_tolerance

    def on_boundary(self, x) -> Array:
        return np.abs(self.sd(x)) <= self.boundary_tolerance

    @property
    def diameter(self) -> float:
        lo, hi = (np.asarray(v, dtype=float) for v in self.bounding_box)
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class MetricField:
    """Diffusion matrix ``a(x)`` with inverse and square root ``sigma``.

    ``theta`` is the ellipticity constant: ``theta^2 |v|^2 <= v.a v <= |v|^2 / theta^2``.
    """

    a: Callable[[Array], Array]
    a_inv: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    theta: float
    dimension: int
    is_identity: bool = False
    label: str = "custom"

    @classmethod
    def identity(cls, d: int) -> "MetricField":
        eye = np.eye(d)

        def const(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()

        return cls(a=const, a_inv=const, sigma=const, theta=1.0, dimension=d,
                   is_identity=True, label="identity")

    @classmethod
    def constant(cls, matrix) -> "MetricField":
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("metric matrix must be square")
        if not np.allclose(m, m.T):
            raise ValueError("metric matrix must be symmetric")
        w, v = np.linalg.eigh(m)
        if w.min() <= 0:
            raise ValueError("metric matrix must be positive definite")
        d = m.shape[0]
        m_inv = (v / w) @ v.T
        s = (v * np.sqrt(w)) @ v.T
        theta = float(min(np.sqrt(w.min()), 1.0 / np.sqrt(w.max())))

        def wrap(mat):
            def f(x):
                x = np.asarray(x, dtype=float)
                return np.broadcast_to(mat, x.shape[:-1] + (d, d)).copy()
            return f

        return cls(a=wrap(m), a_inv=wrap(m_inv), sigma=wrap(s), theta=theta,
                   dimension=d, is_identity=bool(np.allclose(m, np.eye(d))),
                   label="constant")

    @classmethod
    def diagonal(cls, entries) -> "MetricField":
        return cls.constant(np.diag(np.asarray(entries, dtype=float)))

    @classmethod
    def from_callable(cls, a: Callable[[Array], Array], d: int, theta: float) -> "MetricField":
        """Variable metric; inverse and square root by eigendecomposition per call."""

        def a_inv(x):
            w, v = np.linalg.eigh(a(x))
            return (v / w[..., None, :]) @ np.swapaxes(v, -1, -2)

        def sigma(x):
            w, v = np.linalg.eigh(a(x))
            return (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)

        return cls(a=a, a_inv=a_inv, sigma=sigma, theta=theta, dimension=d)

    def inner(self, x, u, v) -> Array:
        """``(u, v)_{a^{-1}(x)}`` batched over leading axes."""
        if self.is_identity:
            return np.sum(np.asarray(u) * np.asarray(v), axis=-1)
        ai = self.a_inv(x)
        return np.einsum("...i,...ij,...j->...", u, ai, v)

    def norm2(self, x, u) -> Array:
        return self.inner(x, u, u)


# ---------------------------------------------------------------------------
# Named domains
# ---------------------------------------------------------------------------

def unit_ball(d: int = 2, radius: float = 1.0, tol: float = DEFAULT_BOUNDARY_TOL) -> DomainSpec:
    r = float(radius)

    def sd(x):
        return np.linalg.norm(x, axis=-1) - r

    def grad(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        safe = np.where(n > 0, n, 1.0)
        g = x / safe
        # origin: any unit vector is a valid subgradient
        e0 = np.zeros(d)
        e0[0] = 1.0
        return np.where(n > 0, g, e0)

    def closest(x):
        return r * grad(x)

    name = "unit_disk" if (d == 2 and r == 1.0) else f"unit_ball({d})"
    return DomainSpec(sd, d, (tuple([-r] * d), tuple([r] * d)), tol, name, grad, closest)


def unit_disk(tol: float = DEFAULT_BOUNDARY_TOL) -> DomainSpec:
    return unit_ball(2, 1.0, tol)


def _ellipse_closest_first_quadrant(a, b, y0, y1):
    """Closest point on x^2/a^2 + y^2/b^2 = 1 to (y0, y1) >= 0, with a >= b.

    Bisection on the Lagrange parameter; vectorized.
    """
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    x0 = np.empty_like(y0)
    x1 = np.empty_like(y1)

    pos1 = y1 > 0
    pos0 = y0 > 0
    both = pos0 & pos1
    if np.any(both):
        z0 = y0[both] / a
        z1 = y1[both] / b
        g = z0 ** 2 + z1 ** 2 - 1.0
        r0 = (a / b) ** 2
        n0 = r0 * z0
        s0 = z1 - 1.0
        s1 = np.where(g < 0, 0.0, np.hypot(n0, z1) - 1.0)
        s = 0.5 * (s0 + s1)
        with np.errstate(divide="ignore", invalid="ignore"):
            for _ in range(120):
                s = 0.5 * (s0 + s1)
                ratio0 = n0 / (s + r0)
                ratio1 = z1 / (s + 1.0)
                gs = ratio0 ** 2 + ratio1 ** 2 - 1.0
                s0 = np.where(gs < 0, s0, s)
                s1 = np.where(gs < 0, s, s1)
            x0[both] = r0 * y0[both] / (s + r0)
            x1[both] = y1[both] / (s + 1.0)
        # y1 so small that the multiplier sits at -1: read x1 off the ellipse
        flat = ~np.isfinite(x1[both]) | (s + 1.0 < 1e-8)
        if np.any(flat):
            xb0 = x0[both]
            xb1 = x1[both]
            xb1[flat] = b * np.sqrt(np.clip(1.0 - (xb0[flat] / a) ** 2, 0.0, None))
            x1[both] = xb1

    only1 = ~pos0 & pos1
    x0[only1] = 0.0
    x1[only1] = b

    rest = ~pos1
    if np.any(rest):
        yy0 = y0[rest]
        numer = a * yy0
        denom = a * a - b * b
        inner = numer < denom
        xa = np.where(inner, a * np.where(inner, numer / denom, 0.0), a)
        xb = np.where(inner, b * np.sqrt(np.clip(1 - (np.where(inner, numer / denom, 0.0)) ** 2, 0, None)), 0.0)
        x0[rest] = xa
        x1[rest] = xb
    return x0, x1


def ellipse(a: float, b: float, tol: float = DEFAULT_BOUNDARY_TOL) -> DomainSpec:
    """Exact signed distance to the ellipse x^2/a^2 + y^2/b^2 = 1."""
    a = float(a)
    b = float(b)
    swap = b > a
    big, small = (b, a) if swap else (a, b)

    def closest(x):
        x = np.asarray(x, dtype=float)
        u = x[..., 1] if swap else x[..., 0]
        v = x[..., 0] if swap else x[..., 1]
        cu, cv = _ellipse_closest_first_quadrant(big, small, np.abs(u), np.abs(v))
        cu = np.copysign(cu, u)
        cv = np.copysign(cv, v)
        out = np.empty_like(x)
        if swap:
            out[..., 0], out[..., 1] = cv, cu
        else:
            out[..., 0], out[..., 1] = cu, cv
        return out

    def sd(x):
        x = np.asarray(x, dtype=float)
        dist = np.linalg.norm(x - closest(x), axis=-1)
        inside = (x[..., 0] / a) ** 2 + (x[..., 1] / b) ** 2 < 1.0
        return np.where(inside, -dist, dist)

    return DomainSpec(sd, 2, ((-a, -b), (a, b)), tol, f"ellipse({a:g},{b:g})",
                      None, closest)


_ELLIPSE_RE = re.compile(r"^ellipse\(\s*([^,]+)\s*,\s*([^)]+)\)$")
_BALL_RE = re.compile(r"^unit_ball\(\s*(\d+)\s*\)$")


def domain_from_name(name: str, tol: float = DEFAULT_BOUNDARY_TOL) -> DomainSpec:
    """Parse ``"unit_disk"``, ``"ellipse(a,b)"`` or ``"unit_ball(d)"``."""
    name = name.strip()
    if name == "unit_disk":
        return unit_disk(tol)
    m = _ELLIPSE_RE.match(name)
    if m:
        return ellipse(float(m.group(1)), float(m.group(2)), tol)
    m = _BALL_RE.match(name)
    if m:
        return unit_ball(int(m.group(1)), 1.0, tol)
    raise ValueError(f"unknown domain {name!r}")


# ---------------------------------------------------------------------------
# Boundary operations
# ---------------------------------------------------------------------------

def _require_boundary(dom: DomainSpec, x):
    s = dom.sd(x)
    if np.any(np.abs(s) > dom.boundary_tolerance):
        raise NotOnBoundary(f"|signed_distance| = {np.max(np.abs(s)):.3e} exceeds "
                            f"boundary tolerance {dom.boundary_tolerance:.1e}")


def _unit_inward(dom: DomainSpec, x) -> Array:
    g = dom.grad_sd(x)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return -g / n


def inward_normal(dom: DomainSpec, x) -> Array:
    """Unit inward normal ``-grad(sd)/|grad(sd)|`` at boundary points."""
    x = np.asarray(x, dtype=float)
    _require_boundary(dom, x)
    return _unit_inward(dom, x)


def co_normal_unchecked(dom: DomainSpec, metric: MetricField, x) -> Array:
    """Co-normal direction ``a n / |a n|`` without the on-boundary check.

    Used by integrators at points that are only near the boundary.
    """
    n = _unit_inward(dom, x)
    if metric.is_identity:
        return n
    an = np.einsum("...ij,...j->...i", metric.a(x), n)
    return an / np.linalg.norm(an, axis=-1, keepdims=True)


def co_normal(dom: DomainSpec, metric: MetricField, x) -> Array:
    """Inward co-normal: orthogonal to the tangent space in the ``a^{-1}`` product.

    For tangent ``v`` (``n.v = 0``): ``(a n)^T a^{-1} v = n.v = 0``.
    """
    x = np.asarray(x, dtype=float)
    _require_boundary(dom, x)
    return co_normal_unchecked(dom, metric, x)


def tangent_basis(dom: DomainSpec, x) -> Array:
    """Orthonormal basis of the tangent space, shape ``(..., d-1, d)``."""
    x = np.asarray(x, dtype=float)
    n = _unit_inward(dom, x)
    d = dom.dimension
    if d == 2:
        t = np.stack([-n[..., 1], n[..., 0]], axis=-1)
        return t[..., None, :]
    # Householder-free construction via QR of [n, I]
    flat = n.reshape(-1, d)
    out = np.empty((flat.shape[0], d - 1, d))
    for k, nk in enumerate(flat):
        q, _ = np.linalg.qr(np.column_stack([nk, np.eye(d)]))
        out[k] = q[:, 1:d].T
    return out.reshape(n.shape[:-1] + (d - 1, d))


def closest_boundary_point(dom: DomainSpec, x) -> Array:
    """Nearest point of the boundary, from inside or outside."""
    x = np.asarray(x, dtype=float)
    if dom.closest_boundary_point is not None:
        return np.asarray(dom.closest_boundary_point(x), dtype=float)
    y = x.copy()
    for _ in range(dom.max_projection_iter):
        s = dom.sd(y)
        if np.all(np.abs(s) <= dom.boundary_tolerance * 0.5):
            return y
        g = dom.grad_sd(y)
        y = y - (s / np.maximum(np.sum(g * g, axis=-1), 1e-300))[..., None] * g
    raise ProjectionDiverged("closest-point iteration did not converge")


def project_to_closure(dom: DomainSpec, x) -> Array:
    """Identity on the closed domain; nearest boundary point outside of it."""
    x = np.asarray(x, dtype=float)
    s = dom.sd(x)
    outside = s > 0
    if not np.any(outside):
        return x.copy()
    out = x.copy()
    if x.ndim == 1:
        return _to_boundary(dom, x)
    out[outside] = _to_boundary(dom, x[outside])
    return out


def _to_boundary(dom: DomainSpec, x):
    y = closest_boundary_point(dom, x)
    # the analytic maps can land a rounding error outside; nudge inward
    s = dom.sd(y)
    bad = s > dom.boundary_tolerance
    if np.any(bad):
        y = np.where(bad[..., None], closest_boundary_point(dom, y), y)
        if np.any(dom.sd(y) > dom.boundary_tolerance):
            raise ProjectionDiverged("projection failed to reach the boundary band")
    return y
