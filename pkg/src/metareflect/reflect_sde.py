"""Euler-Maruyama simulation of the diffusion with co-normal reflection.

The ensemble engine steps many trajectories at once; each trajectory owns a
counter-based (Philox) stream keyed by ``(seed, trajectory index)``, so a
trajectory's path does not depend on how many others run beside it.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry as geo
from .dynamics import DiscretePath, DriftField, Equilibrium
from .errors import ChainEmpty, ProjectionDiverged, StepRejected

Array = np.ndarray

NOISE_CHUNK = 512
MAX_HALVINGS = 10
TRUST_FACTOR = 10.0


class Scheme(str, enum.Enum):
    PROJECTION = "projection"
    HALF_SPACE = "half_space"


@dataclass(frozen=True)
class SimConfig:
    epsilon: float
    dt: float = 1e-3
    t_max: float = 1.0
    seed: int = 0
    scheme: Scheme = Scheme.PROJECTION
    record_every: int = 1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_max < self.dt:
            raise ValueError("t_max must be at least dt")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))


@dataclass
class ReflectedTrajectory:
    times: np.ndarray
    states: np.ndarray
    local_time: np.ndarray
    boundary_flags: np.ndarray

    def to_csv(self) -> str:
        d = self.states.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{k + 1}" for k in range(d)] + ["xi", "on_boundary"])
        for t, x, xi, fl in zip(self.times, self.states, self.local_time, self.boundary_flags):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(xi)), int(fl)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ReflectedTrajectory":
        rows = list(csv.reader(io.StringIO(text)))
        body = np.array([[float(v) for v in r] for r in rows[1:]])
        d = body.shape[1] - 3
        return cls(body[:, 0], body[:, 1:1 + d], body[:, 1 + d], body[:, 2 + d].astype(bool))


# ---------------------------------------------------------------------------
# Skorokhod map on the half space
# ---------------------------------------------------------------------------

def skorokhod_half_space(psi) -> Tuple[np.ndarray, np.ndarray]:
    """Reflect a discrete path at ``{x_1 >= 0}``.

    Returns ``(psi_1 - min(0, running_min psi_1), psi_2, ...)`` and the local
    time ``-min(0, running_min psi_1)``.
    """
    psi = np.asarray(psi, dtype=float)
    one_d = psi.ndim == 1
    p = psi[:, None] if one_d else psi
    if p[0, 0] < 0:
        raise ValueError("path must start in the half space")
    lt = -np.minimum(np.minimum.accumulate(p[:, 0]), 0.0)
    out = p.copy()
    out[:, 0] = p[:, 0] + lt
    return (out[:, 0] if one_d else out), lt


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def stream(seed: int, index: int, purpose: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


class _NoiseSource:
    """Chunked per-trajectory Gaussian draws."""

    def __init__(self, seed: int, indices: Sequence[int], d: int):
        self.gens = [stream(seed, i) for i in indices]
        self.d = d
        self.buf = None
        self.pos = NOISE_CHUNK

    def next(self) -> Array:
        if self.pos >= NOISE_CHUNK:
            self.buf = np.stack([g.standard_normal((NOISE_CHUNK, self.d)) for g in self.gens], axis=1)
            self.pos = 0
        z = self.buf[self.pos]
        self.pos += 1
        return z


# ---------------------------------------------------------------------------
# reflection
# ---------------------------------------------------------------------------

def _pull_back(f: DriftField, xp: Array, trust: Array):
    """Solve ``sd(xp + c gamma(x_b)) = 0`` with ``c >= 0`` along the co-normal at the nearest boundary point.

    Returns corrected points, ``c`` and a success mask.
    """
    dom = f.domain
    xb = geo.closest_boundary_point(dom, xp)
    gam = geo.co_normal_unchecked(dom, f.metric, xb)
    n_in = geo._unit_inward(dom, xb)
    gn = np.sum(gam * n_in, axis=-1)
    c = dom.sd(xp) / gn
    ok = np.isfinite(c) & (gn > 0)
    for _ in range(50):
        y = xp + c[:, None] * gam
        s = dom.sd(y)
        if np.all(np.abs(s[ok]) <= 0.25 * dom.boundary_tolerance):
            break
        slope = np.sum(dom.grad_sd(y) * gam, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = c - s / slope
        ok &= np.isfinite(c)
        c = np.where(ok, c, 0.0)
    y = xp + c[:, None] * gam
    s = dom.sd(y)
    ok &= (c >= 0) & (c <= trust) & (s <= dom.boundary_tolerance)
    return y, c, ok


def _half_space_correct(f: DriftField, x: Array, xp: Array, trust: Array):
    """Exact half-space reflection in the chart at the nearest boundary point.

    Local coordinates: ``u_1 = n.(y - x_b)`` measured along ``gamma / (gamma.n)``;
    the Skorokhod map is applied to the two-point path ``(u(x), u(xp))``. The
    curvature residual is removed by a co-normal pull-back.
    """
    dom = f.domain
    xb = geo.closest_boundary_point(dom, xp)
    gam = geo.co_normal_unchecked(dom, f.metric, xb)
    n_in = geo._unit_inward(dom, xb)
    gn = np.sum(gam * n_in, axis=-1)
    u_old = np.maximum(np.sum((x - xb) * n_in, axis=-1), 0.0)
    u_new = np.sum((xp - xb) * n_in, axis=-1)
    pair = np.stack([u_old, u_new], axis=-1)
    push = np.empty(len(x))
    for k in range(len(x)):
        _, lt = skorokhod_half_space(pair[k])
        push[k] = lt[-1]
    shift = (push / gn)[:, None] * gam
    y = xp + shift
    c = np.linalg.norm(shift, axis=-1)
    out = dom.sd(y) > dom.boundary_tolerance
    ok = np.ones(len(x), dtype=bool)
    if np.any(out):
        y2, c2, ok2 = _pull_back(f, y[out], trust[out])
        y[out] = y2
        c[out] += c2
        ok[out] = ok2
    ok &= c <= trust
    return y, c, ok


def _reflect(f: DriftField, scheme: Scheme, x: Array, xp: Array):
    dom = f.domain
    s = dom.sd(xp)
    outside = s > dom.boundary_tolerance
    y = xp.copy()
    c = np.zeros(len(xp))
    ok = np.ones(len(xp), dtype=bool)
    if np.any(outside):
        trust = TRUST_FACTOR * (np.linalg.norm(xp[outside] - x[outside], axis=-1) + dom.boundary_tolerance)
        try:
            if scheme is Scheme.HALF_SPACE:
                yo, co, oko = _half_space_correct(f, x[outside], xp[outside], trust)
            else:
                yo, co, oko = _pull_back(f, xp[outside], trust)
        except ProjectionDiverged:
            yo, co, oko = xp[outside], np.zeros(int(outside.sum())), np.zeros(int(outside.sum()), bool)
        y[outside] = yo
        c[outside] = co
        ok[outside] = oko
    return y, c, ok


def _euler(f: DriftField, x: Array, dt: float, dw: Array, eps: float) -> Array:
    xp = x + f(x) * dt
    if eps > 0:
        if f.metric.is_identity:
            xp = xp + eps * dw
        else:
            xp = xp + eps * np.einsum("...ij,...j->...i", f.metric.sigma(x), dw)
    return xp


def _refined_step(f: DriftField, scheme: Scheme, x: Array, dt: float, dw: Array, eps: float,
                  gen: np.random.Generator, depth: int):
    """Retry a rejected step as two halves, splitting ``dw`` by a Brownian bridge."""
    if depth > MAX_HALVINGS:
        raise StepRejected("co-normal pull-back failed after repeated step halving")
    h = 0.5 * dt
    mid = 0.5 * dw + math.sqrt(dt / 4.0) * gen.standard_normal(dw.shape)
    dws = (mid, dw - mid)
    c_tot = 0.0
    for part in dws:
        xp = _euler(f, x[None], h, part[None], eps)
        y, c, ok = _reflect(f, scheme, x[None], xp)
        if ok[0]:
            x = y[0]
            c_tot += float(c[0])
        else:
            x, cc = _refined_step(f, scheme, x, h, part, eps, gen, depth + 1)
            c_tot += cc
    return x, c_tot


class Ensemble:
    """Lock-step simulation of independent reflected trajectories.

    Iterating yields ``(k, t, x, xi, on_boundary)`` after each step ``k >= 1``;
    the arrays are live views and must be copied if kept.
    """

    def __init__(self, f: DriftField, cfg: SimConfig, x0, n: Optional[int] = None,
                 first_index: int = 0, mark_failures: bool = False):
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 1:
            if n is None:
                n = 1
            x0 = np.broadcast_to(x0, (n, x0.shape[0]))
        self.f = f
        self.cfg = cfg
        self.x = np.array(x0, dtype=float)
        if np.any(f.domain.sd(self.x) > f.domain.boundary_tolerance):
            raise ValueError("initial points must lie in the closed domain")
        self.n = len(self.x)
        self.indices = list(range(first_index, first_index + self.n))
        self.xi = np.zeros(self.n)
        self.flags = np.abs(f.domain.sd(self.x)) <= f.domain.boundary_tolerance
        self.k = 0
        d = self.x.shape[1]
        self.noise = _NoiseSource(cfg.seed, self.indices, d) if cfg.epsilon > 0 else None
        self._refine_gens = {}
        self.rejections = 0
        # with mark_failures a rejected step freezes that trajectory instead of raising
        self.mark_failures = mark_failures
        self.failed = np.zeros(self.n, dtype=bool)

    def step(self):
        cfg, f = self.cfg, self.f
        dt = cfg.dt
        if self.noise is not None:
            dw = self.noise.next() * math.sqrt(dt)
        else:
            dw = np.zeros_like(self.x)
        xp = _euler(f, self.x, dt, dw, cfg.epsilon)
        y, c, ok = _reflect(f, cfg.scheme, self.x, xp)
        if not np.all(ok):
            for i in np.flatnonzero(~ok):
                gen = self._refine_gens.setdefault(i, stream(cfg.seed, self.indices[i], 1))
                self.rejections += 1
                if self.failed[i]:
                    y[i], c[i] = self.x[i], 0.0
                    continue
                try:
                    y[i], c[i] = _refined_step(f, cfg.scheme, self.x[i], dt, dw[i], cfg.epsilon, gen, 1)
                except StepRejected:
                    if not self.mark_failures:
                        raise
                    self.failed[i] = True
                    y[i], c[i] = self.x[i], 0.0
        if self.mark_failures and np.any(self.failed):
            y[self.failed], c[self.failed] = self.x[self.failed], 0.0
        self.x = y
        self.xi = self.xi + c
        self.flags = (c > 0) | (np.abs(f.domain.sd(y)) <= f.domain.boundary_tolerance)
        self.k += 1

    def __iter__(self) -> Iterator:
        for _ in range(self.cfg.n_steps):
            self.step()
            yield self.k, self.k * self.cfg.dt, self.x, self.xi, self.flags

    def run(self):
        for _ in self:
            pass
        return self.x, self.xi


def simulate(f: DriftField, cfg: SimConfig, x0, traj_index: int = 0) -> ReflectedTrajectory:
    """One trajectory on the grid ``0, dt, ..., t_max`` (every ``record_every``-th step kept)."""
    ens = Ensemble(f, cfg, np.asarray(x0, dtype=float)[None, :], first_index=traj_index)
    stride = max(1, int(cfg.record_every))
    n = cfg.n_steps
    m = n // stride + 1
    d = ens.x.shape[1]
    times = np.empty(m)
    states = np.empty((m, d))
    lt = np.empty(m)
    flags = np.empty(m, dtype=bool)
    times[0], states[0], lt[0], flags[0] = 0.0, ens.x[0], 0.0, ens.flags[0]
    j = 1
    bflag = False
    for k, t, x, xi, fl in ens:
        bflag = bflag or bool(fl[0])
        if k % stride == 0:
            times[j], states[j], lt[j], flags[j] = t, x[0], xi[0], bflag
            j += 1
            bflag = False
    return ReflectedTrajectory(times[:j], states[:j], lt[:j], flags[:j])


def endpoints(f: DriftField, cfg: SimConfig, x0, n: int, first_index: int = 0) -> Array:
    """Positions at ``t_max`` of ``n`` independent trajectories."""
    ens = Ensemble(f, cfg, x0, n=n, first_index=first_index)
    x, _ = ens.run()
    return x.copy()


# ---------------------------------------------------------------------------
# hitting times and the boundary-neighbourhood chain
# ---------------------------------------------------------------------------

def hitting_time_neighborhoods(traj: ReflectedTrajectory, equilibria: Sequence[Equilibrium],
                               alpha: float) -> float:
    """First grid time the state is within the closed ``alpha`` ball of an equilibrium; ``inf`` if never."""
    locs = np.array([e.location for e in equilibria])
    dist = np.min(np.linalg.norm(traj.states[:, None, :] - locs[None], axis=-1), axis=1)
    hit = np.flatnonzero(dist <= alpha)
    return float(traj.times[hit[0]]) if len(hit) else math.inf


def hitting_times_ensemble(f: DriftField, cfg: SimConfig, x0, n: int,
                           equilibria: Sequence[Equilibrium], alpha: float,
                           first_index: int = 0) -> Array:
    """First entrance times into the ``alpha`` neighbourhoods for ``n`` trajectories."""
    locs = np.array([e.location for e in equilibria])
    ens = Ensemble(f, cfg, x0, n=n, first_index=first_index)
    out = np.full(ens.n, math.inf)

    def near(x):
        return np.min(np.linalg.norm(x[:, None, :] - locs[None], axis=-1), axis=1) <= alpha

    out[near(ens.x)] = 0.0
    for k, t, x, xi, fl in ens:
        new = near(x) & np.isinf(out)
        out[new] = t
        if not np.any(np.isinf(out)):
            break
    return out


@dataclass(frozen=True)
class ChainConfig:
    rho0: float
    rho1: float
    rho2: float
    equilibria: Tuple[Equilibrium, ...]

    def __post_init__(self):
        if not (0 < self.rho1 < self.rho2 < self.rho0):
            raise ValueError("need 0 < rho1 < rho2 < rho0")
        locs = [e.location for e in self.equilibria]
        for i in range(len(locs)):
            for j in range(i + 1, len(locs)):
                if np.linalg.norm(locs[i] - locs[j]) <= 2 * self.rho0:
                    raise ValueError("rho0-neighbourhoods of the equilibria must be disjoint")


class ChainTracker:
    """Online extraction of the chain observed at entrances into the small balls.

    ``sigma_n`` is the first time after ``tau_n`` outside every ``rho0`` ball;
    ``tau_{n+1}`` the first time after ``sigma_n`` inside some ``rho1`` ball,
    whose equilibrium index labels the transition. Vectorized over
    trajectories.
    """

    def __init__(self, cfg: ChainConfig, n: int):
        self.cfg = cfg
        self.locs = np.array([e.location for e in cfg.equilibria])
        self.labels = np.array([e.index for e in cfg.equilibria])
        self.seeking_c = np.ones(n, dtype=bool)
        self.last = np.full(n, -1)
        self.events: List[List[Tuple[float, int]]] = [[] for _ in range(n)]
        self.counts = {}

    def update(self, t: float, x: Array):
        d = np.linalg.norm(x[:, None, :] - self.locs[None], axis=-1)
        in_c = np.all(d >= self.cfg.rho0, axis=1)
        near = np.argmin(d, axis=1)
        in_g = d[np.arange(len(x)), near] <= self.cfg.rho1
        left = self.seeking_c & in_c
        self.seeking_c[left] = False
        arrived = (~self.seeking_c) & in_g
        for i in np.flatnonzero(arrived):
            lab = int(self.labels[near[i]])
            if self.last[i] >= 0:
                key = (int(self.last[i]), lab)
                self.counts[key] = self.counts.get(key, 0) + 1
            self.events[i].append((float(t), lab))
            self.last[i] = lab
        self.seeking_c[arrived] = True

    def seed_start(self, x: Array):
        """Label trajectories that start inside a small ball."""
        d = np.linalg.norm(x[:, None, :] - self.locs[None], axis=-1)
        near = np.argmin(d, axis=1)
        inside = d[np.arange(len(x)), near] <= self.cfg.rho1
        self.last[inside] = self.labels[near[inside]]


def extract_chain(traj: ReflectedTrajectory, cfg: ChainConfig) -> List[Tuple[float, Optional[int]]]:
    """``[(tau_n, Z_n)]`` with ``Z_0`` labelled ``None`` (the starting point)
    unless it already lies in one of the small balls."""
    tr = ChainTracker(cfg, 1)
    tr.seed_start(traj.states[:1])
    start_label = int(tr.last[0]) if tr.last[0] >= 0 else None
    for t, x in zip(traj.times, traj.states):
        tr.update(float(t), x[None])
    if not tr.events[0] and start_label is None:
        raise ChainEmpty("trajectory never entered a small ball around an equilibrium")
    return [(float(traj.times[0]), start_label)] + tr.events[0]


def transition_counts(chain: Sequence[Tuple[float, Optional[int]]]) -> dict:
    counts = {}
    labels = [z for _, z in chain]
    for a, b in zip(labels[:-1], labels[1:]):
        if a is None:
            continue
        counts[(a, b)] = counts.get((a, b), 0) + 1
    return counts
