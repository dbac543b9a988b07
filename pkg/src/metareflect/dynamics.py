"""Drift fields, the boundary-sliding drift, deterministic flow and equilibria."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import geometry as geo
from .errors import NoConvergence, NotOnBoundary, OutsideDomain, StepRejected, ProjectionDiverged
from .geometry import DomainSpec, MetricField

Array = np.ndarray

DEFAULT_DT = 1e-3
EQUILIBRIUM_TOL = 1e-6
STABILITY_FD_STEP = 1e-5


class BoundaryKind(enum.Enum):
    OUTWARD = "outward"   # b points out of D: the sliding part of the boundary
    INWARD = "inward"


@dataclass(frozen=True)
class DriftField:
    """Vector field ``b`` on the closed domain together with its geometry."""

    b: Callable[[Array], Array]
    domain: DomainSpec
    metric: MetricField
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, x) -> Array:
        return np.asarray(self.b(np.asarray(x, dtype=float)), dtype=float)


@dataclass(frozen=True)
class Equilibrium:
    index: int
    location: np.ndarray
    stable: bool

    def as_dict(self) -> dict:
        return {"index": self.index, "location": [float(v) for v in self.location],
                "stable": self.stable}


@dataclass
class DiscretePath:
    """Time-discretized curve; ``points`` has shape ``(N+1, d)``."""

    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or len(self.times) != len(self.points):
            raise ValueError("times and points must have matching lengths")

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def __len__(self):
        return len(self.times)

    def to_csv(self) -> str:
        d = self.points.shape[1]
        lines = [",".join(["t"] + [f"x_{k + 1}" for k in range(d)])]
        for t, p in zip(self.times, self.points):
            lines.append(",".join(repr(float(v)) for v in (t, *p)))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# b-bar
# ---------------------------------------------------------------------------

def _bbar(f: DriftField, x: Array, on_bdry: Array) -> Array:
    bx = f(x)
    if not np.any(on_bdry):
        return bx
    out = bx.copy()
    xb = x[on_bdry]
    gam = geo.co_normal_unchecked(f.domain, f.metric, xb)
    ip = f.metric.inner(xb, bx[on_bdry], gam)
    g2 = f.metric.norm2(xb, gam)
    coef = np.minimum(ip, 0.0) / g2
    out[on_bdry] = bx[on_bdry] - coef[..., None] * gam
    return out


def modified_drift(f: DriftField, x, check: bool = True) -> Array:
    """``b`` in the interior; on the boundary the outward co-normal part is removed."""
    x = np.asarray(x, dtype=float)
    s = f.domain.sd(x)
    tol = f.domain.boundary_tolerance
    if check and np.any(s > tol):
        raise OutsideDomain(f"point outside the closed domain (sd={np.max(s):.3e})")
    squeeze = x.ndim == 1
    xx = np.atleast_2d(x)
    on = np.atleast_1d(np.abs(s) <= tol)
    out = _bbar(f, xx, on)
    return out[0] if squeeze else out


def classify_boundary(f: DriftField, x) -> BoundaryKind:
    x = np.asarray(x, dtype=float)
    gam = geo.co_normal(f.domain, f.metric, x)
    ip = float(f.metric.inner(x, f(x), gam))
    return BoundaryKind.OUTWARD if ip < 0 else BoundaryKind.INWARD


# ---------------------------------------------------------------------------
# deterministic flow
# ---------------------------------------------------------------------------

def _rk2_step(f: DriftField, x: Array, dt: float) -> Array:
    # Heun rather than the midpoint rule: a midpoint projected onto the
    # boundary carries only the sliding drift and would stall points sitting
    # just inside the boundary.
    dom = f.domain
    k1 = modified_drift(f, x, check=False)
    x1 = geo.project_to_closure(dom, x + dt * k1)
    k2 = modified_drift(f, x1, check=False)
    return geo.project_to_closure(dom, x + 0.5 * dt * (k1 + k2))


def _free_heun(f: DriftField, x: Array, h: float) -> Array:
    k1 = f(x)
    return x + 0.5 * h * (k1 + f(x + h * k1))


def _hit_fraction(f: DriftField, x: Array, h: float, iters: int = 60) -> float:
    """Step length at which the unconstrained Heun step from interior ``x`` meets the boundary."""
    dom = f.domain
    lo, hi = 0.0, h
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if dom.sd(_free_heun(f, x, mid)) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * h:
            break
    return hi


def flow(f: DriftField, x0, t_max: float, dt: float = DEFAULT_DT,
         with_local_time: bool = False):
    """Integrate ``x' = bbar(x)`` by explicit RK2 (Heun) steps.

    Interior steps use ``b`` itself; a step that would leave the domain is
    shortened so that it ends on the boundary, which inserts one off-grid
    time. Steps from boundary points use ``bbar`` and are projected back into
    the closed domain. With ``with_local_time`` the cumulative length of the
    projection corrections is returned as well.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dom = f.domain
    tol = dom.boundary_tolerance
    x = np.asarray(x0, dtype=float)
    if dom.sd(x) > tol:
        raise OutsideDomain("initial point outside the closed domain")
    times = [0.0]
    pts = [x]
    lt = [0.0]
    t = 0.0
    xi = 0.0
    try:
        while t < t_max * (1 - 1e-13):
            h = min(dt, t_max - t)
            if dom.sd(x) < -tol:
                y = _free_heun(f, x, h)
                if dom.sd(y) > tol:
                    h = _hit_fraction(f, x, h)
                    y = _free_heun(f, x, h)
                    yb = geo.closest_boundary_point(dom, y)
                    xi += float(np.linalg.norm(yb - y))
                    y = yb
            else:
                raw = x + h * 0.5 * (modified_drift(f, x, check=False)
                                     + modified_drift(f, geo.project_to_closure(dom, x + h * modified_drift(f, x, check=False)), check=False))
                y = geo.project_to_closure(dom, raw)
                xi += float(np.linalg.norm(y - raw))
            t += h
            x = y
            times.append(t)
            pts.append(x)
            lt.append(xi)
    except ProjectionDiverged as exc:
        raise StepRejected(str(exc)) from exc
    path = DiscretePath(np.array(times), np.array(pts))
    if with_local_time:
        return path, np.array(lt)
    return path


def flow_batch(f: DriftField, x0: Array, n_steps: int, dt: float) -> Array:
    """Endpoints after ``n_steps`` projected RK2 steps for a batch of starts."""
    x = np.array(x0, dtype=float)
    for _ in range(n_steps):
        x = _rk2_step(f, x, dt)
    return x


# ---------------------------------------------------------------------------
# equilibria
# ---------------------------------------------------------------------------

def boundary_seeds(dom: DomainSpec, n: int = 64) -> Array:
    """Roughly uniform boundary points (angular grid for planar domains)."""
    lo, hi = (np.asarray(v, dtype=float) for v in dom.bounding_box)
    c = 0.5 * (lo + hi)
    R = 2.0 * dom.diameter
    if dom.dimension == 2:
        th = 2 * np.pi * np.arange(n) / n
        far = c + R * np.stack([np.cos(th), np.sin(th)], axis=-1)
    else:
        # Fibonacci-like directions from a fixed generator; deterministic
        rng = np.random.default_rng(12345)
        v = rng.standard_normal((n, dom.dimension))
        far = c + R * v / np.linalg.norm(v, axis=1, keepdims=True)
    return geo.closest_boundary_point(dom, far)


def _tangential_speed(f: DriftField, x: Array) -> Array:
    """Norm of the tangential part of ``bbar`` at boundary points (batched)."""
    bb = _bbar(f, x, np.ones(x.shape[0], dtype=bool))
    n = geo._unit_inward(f.domain, x)
    tang = bb - np.sum(bb * n, axis=-1, keepdims=True) * n
    return tang


def _boundary_step(f: DriftField, x: Array, dt: float) -> Array:
    dom = f.domain
    k1 = _tangential_speed(f, x)
    xm = geo.closest_boundary_point(dom, x + 0.5 * dt * k1)
    k2 = _tangential_speed(f, xm)
    return geo.closest_boundary_point(dom, x + dt * k2)


def _tangential_jacobian(f: DriftField, x: Array, h: float = STABILITY_FD_STEP) -> Array:
    dom = f.domain
    basis = geo.tangent_basis(dom, x)
    m = basis.shape[0]
    jac = np.empty((m, m))
    for j in range(m):
        xp = geo.closest_boundary_point(dom, x + h * basis[j])
        xm = geo.closest_boundary_point(dom, x - h * basis[j])
        vp = _tangential_speed(f, xp[None])[0]
        vm = _tangential_speed(f, xm[None])[0]
        jac[:, j] = basis @ (vp - vm) / (2 * h)
    return jac


def _refine(f: DriftField, x: Array, iters: int = 30) -> Array:
    """Newton iterations on the tangential field along the boundary."""
    dom = f.domain
    for _ in range(iters):
        basis = geo.tangent_basis(dom, x)
        v = basis @ _tangential_speed(f, x[None])[0]
        if np.linalg.norm(v) < 1e-13:
            break
        jac = _tangential_jacobian(f, x)
        try:
            step = np.linalg.solve(jac, -v)
        except np.linalg.LinAlgError:
            break
        if np.linalg.norm(step) > 1e-2:
            step *= 1e-2 / np.linalg.norm(step)
        x = geo.closest_boundary_point(dom, x + step @ basis)
    return x


def _order_key(dom: DomainSpec, x: Array):
    lo, hi = (np.asarray(v, dtype=float) for v in dom.bounding_box)
    c = 0.5 * (lo + hi)
    if dom.dimension == 2:
        return math.atan2(x[1] - c[1], x[0] - c[0]) % (2 * math.pi)
    return tuple(np.round(x, 8))


def find_equilibria(f: DriftField, seeds: Optional[Array] = None, t_max: float = 200.0,
                    dt: float = 1e-2, tol: float = EQUILIBRIUM_TOL,
                    merge_radius: Optional[float] = None,
                    include_unstable: bool = True) -> List[Equilibrium]:
    """Limit points of the boundary-restricted sliding flow.

    Stable points are reached by forward integration from the seeds. In the
    plane the backward flow locates the unstable ones as well. Each candidate
    is polished by Newton steps and classified by the tangential Jacobian.
    Candidates where ``bbar`` does not vanish (zeros of the tangential part
    on the inward boundary) are dropped.
    """
    dom = f.domain
    if seeds is None:
        seeds = boundary_seeds(dom, 64)
    seeds = geo.closest_boundary_point(dom, np.asarray(seeds, dtype=float))
    if merge_radius is None:
        merge_radius = 1e-4 * dom.diameter

    directions = [1.0, -1.0] if (include_unstable and dom.dimension == 2) else [1.0]
    candidates = []
    for sign in directions:
        x = seeds.copy()
        done = np.zeros(len(x), dtype=bool)
        n_steps = int(math.ceil(t_max / dt))
        for _ in range(n_steps):
            live = ~done
            if not np.any(live):
                break
            x[live] = _boundary_step(f, x[live], sign * dt)
            speed = np.linalg.norm(_tangential_speed(f, x[live]), axis=-1)
            idx = np.flatnonzero(live)
            done[idx[speed < tol]] = True
        if sign > 0 and not np.all(done):
            raise NoConvergence(f"{int(np.sum(~done))} seeds did not settle within t_max={t_max}")
        candidates.extend(x[done])

    polished = []
    for c in candidates:
        p = _refine(f, c)
        bb = _bbar(f, p[None], np.array([True]))[0]
        if np.linalg.norm(bb) > max(tol, 1e-8) * 10:
            continue
        if any(np.linalg.norm(p - q) <= merge_radius for q in polished):
            continue
        polished.append(p)

    polished.sort(key=lambda p: _order_key(dom, p))
    out = []
    for k, p in enumerate(polished):
        eig = np.linalg.eigvals(_tangential_jacobian(f, p))
        out.append(Equilibrium(index=k + 1, location=p, stable=bool(np.all(eig.real < 0))))
    return out


def stable_equilibria(equilibria: Sequence[Equilibrium]) -> List[Equilibrium]:
    return [e for e in equilibria if e.stable]


def _nearest_within(x: Array, equilibria: Sequence[Equilibrium], radius: float):
    for e in equilibria:
        if np.linalg.norm(x - e.location) <= radius:
            return e
    return None


def first_attractor(f: DriftField, x, equilibria: Optional[Sequence[Equilibrium]] = None,
                    capture_radius: float = 1e-3, t_max: float = 500.0,
                    dt: float = DEFAULT_DT) -> int:
    """Index of the first stable equilibrium approached by the sliding flow from ``x``."""
    if equilibria is None:
        equilibria = find_equilibria(f)
    stable = stable_equilibria(equilibria)
    x = np.asarray(x, dtype=float)
    if f.domain.sd(x) > f.domain.boundary_tolerance:
        raise OutsideDomain("start outside the closed domain")
    n = int(math.ceil(t_max / dt))
    for _ in range(n + 1):
        e = _nearest_within(x, stable, capture_radius)
        if e is not None:
            return e.index
        x = _rk2_step(f, x, dt)
    raise NoConvergence("flow did not reach any stable equilibrium")


def time_to_neighborhoods(f: DriftField, x, alpha: float,
                          equilibria: Optional[Sequence[Equilibrium]] = None,
                          t_max: float = 500.0, dt: float = DEFAULT_DT) -> float:
    """Deterministic time for the sliding flow to enter a closed ``alpha/2`` ball of some equilibrium.

    The crossing time is linearly interpolated between grid steps.
    """
    if equilibria is None:
        equilibria = find_equilibria(f)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    locs = np.array([e.location for e in equilibria])
    x = np.asarray(x, dtype=float)
    r = 0.5 * alpha

    def gap(p):
        return float(np.min(np.linalg.norm(locs - p, axis=-1)) - r)

    g0 = gap(x)
    if g0 <= 0:
        return 0.0
    n = int(math.ceil(t_max / dt))
    for k in range(n):
        xn = _rk2_step(f, x, dt)
        g1 = gap(xn)
        if g1 <= 0:
            return (k + g0 / (g0 - g1)) * dt
        x, g0 = xn, g1
    raise NoConvergence("flow did not reach an equilibrium neighbourhood")


def time_to_neighborhoods_batch(f: DriftField, x0: Array, alpha: float,
                                equilibria: Sequence[Equilibrium],
                                t_max: float = 500.0, dt: float = DEFAULT_DT) -> Array:
    """Vectorized :func:`time_to_neighborhoods`; ``inf`` where ``t_max`` is exceeded."""
    locs = np.array([e.location for e in equilibria])
    x = np.array(x0, dtype=float)
    r = 0.5 * alpha

    def gap(p):
        return np.min(np.linalg.norm(p[:, None, :] - locs[None], axis=-1), axis=1) - r

    g0 = gap(x)
    out = np.full(len(x), np.inf)
    out[g0 <= 0] = 0.0
    live = g0 > 0
    n = int(math.ceil(t_max / dt))
    for k in range(n):
        if not np.any(live):
            break
        idx = np.flatnonzero(live)
        xn = _rk2_step(f, x[idx], dt)
        g1 = gap(xn)
        hit = g1 <= 0
        out[idx[hit]] = (k + g0[idx[hit]] / (g0[idx[hit]] - g1[hit])) * dt
        x[idx] = xn
        g0[idx] = g1
        live[idx[hit]] = False
    return out
