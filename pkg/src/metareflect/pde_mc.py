"""Monte Carlo solution of the parabolic problem with co-normal Neumann data, plus grid oracles.

``u(x, t) = E_x g(X_t)`` where ``X`` is the reflected diffusion with generator
``(eps^2 / 2) sum a_ij d_ij + b . grad``. Two independent references are
provided for the unit disk: a finite-volume solver on a polar grid and, for
zero drift and radial data, a Fourier-Bessel series.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.integrate import quad
from scipy.sparse.linalg import splu
from scipy.special import j0, jn_zeros

from . import geometry as geo
from .dynamics import DriftField, Equilibrium, first_attractor
from .errors import CFLViolation, HorizonInfeasible, SimulationFailed
from .hierarchy import CycleNode, metastable_state
from .reflect_sde import Ensemble, SimConfig

Array = np.ndarray

MAX_FAILURE_FRACTION = 0.01
DEFAULT_STEP_BUDGET = 2e9
DEFAULT_BATCH = 10000


@dataclass(frozen=True)
class PdeProblem:
    drift: DriftField
    g: Callable[[Array], Array]
    epsilon: float

    @property
    def metric(self) -> geo.MetricField:
        return self.drift.metric

    def payoff(self, x: Array) -> Array:
        """``g`` on points clamped into the closed domain."""
        x = geo.project_to_closure(self.drift.domain, np.asarray(x, dtype=float))
        return np.asarray(self.g(x), dtype=float) * np.ones(x.shape[:-1])


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n: int
    epsilon: float
    t: float
    x: tuple
    failures: int = 0

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "epsilon": self.epsilon,
                "t": self.t, "x": list(self.x), "failures": self.failures}


def _summarize(values: Array, p: PdeProblem, x: Array, t: float, failures: int) -> MCEstimate:
    n = len(values)
    if np.all(values == values[0]):
        # summation would round a constant sample
        return MCEstimate(float(values[0]), 0.0, n, p.epsilon, float(t), tuple(float(v) for v in x), failures)
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MCEstimate(mean, se, n, p.epsilon, float(t), tuple(float(v) for v in x), failures)


def _batch_endpoints(p: PdeProblem, x: Array, cfg: SimConfig, n: int, first_index: int):
    ens = Ensemble(p.drift, cfg, x, n=n, first_index=first_index, mark_failures=True)
    ens.run()
    return ens.x, ens.failed


def estimate_u(p: PdeProblem, x, t: float, n: int, sim: SimConfig, first_index: int = 0,
               batch: int = DEFAULT_BATCH, workers: int = 1) -> MCEstimate:
    """Average of ``g`` over ``n`` reflected trajectories run to time ``t`` from ``x``.

    Trajectories carry their own random streams, so the result does not
    depend on ``batch`` or ``workers``.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    if t < 0 or t > sim.t_max + 1e-12:
        raise ValueError("t must lie in [0, sim.t_max]")
    x = np.asarray(x, dtype=float)
    if t == 0:
        vals = np.full(n, float(p.payoff(x[None])[0]))
        return _summarize(vals, p, x, 0.0, 0)
    cfg = replace(sim, epsilon=p.epsilon, t_max=t)
    starts = list(range(0, n, batch))
    jobs = [(first_index + s, min(batch, n - s)) for s in starts]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _batch_endpoints(p, x, cfg, j[1], j[0]), jobs))
    else:
        parts = [_batch_endpoints(p, x, cfg, m, i0) for i0, m in jobs]
    xs = np.concatenate([q[0] for q in parts])
    failed = np.concatenate([q[1] for q in parts])
    bad = int(failed.sum())
    if bad > MAX_FAILURE_FRACTION * n:
        raise SimulationFailed(f"{bad} of {n} trajectories failed")
    vals = p.payoff(xs[~failed])
    return _summarize(vals, p, x, t, bad)


# ---------------------------------------------------------------------------
# polar finite-volume oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolarGrid:
    n_r: int = 101
    n_theta: int = 100

    def __post_init__(self):
        if self.n_theta % 2:
            raise ValueError("n_theta must be even (the centre stencil pairs opposite angles)")

    @property
    def h(self) -> float:
        return 1.0 / self.n_r

    @property
    def radii(self) -> Array:
        return (np.arange(self.n_r) + 0.5) * self.h

    @property
    def angles(self) -> Array:
        return 2 * np.pi * np.arange(self.n_theta) / self.n_theta

    def points(self) -> Array:
        R, T = np.meshgrid(self.radii, self.angles, indexing="ij")
        return np.stack([R * np.cos(T), R * np.sin(T)], axis=-1)


@dataclass
class GridField:
    grid: PolarGrid
    values: Array
    t: float

    def __call__(self, x) -> Array:
        """Bilinear interpolation in (r, theta)."""
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        th = np.arctan2(x[..., 1], x[..., 0]) % (2 * np.pi)
        g = self.grid
        fr = np.clip(r / g.h - 0.5, 0.0, g.n_r - 1.0)
        i0 = np.minimum(np.floor(fr).astype(int), g.n_r - 2) if g.n_r > 1 else np.zeros_like(fr, int)
        wr = fr - i0
        ft = th / (2 * np.pi / g.n_theta)
        j0_ = np.floor(ft).astype(int) % g.n_theta
        wt = ft - np.floor(ft)
        j1 = (j0_ + 1) % g.n_theta
        v = self.values
        i1 = np.minimum(i0 + 1, g.n_r - 1)
        return ((1 - wr) * ((1 - wt) * v[i0, j0_] + wt * v[i0, j1])
                + wr * ((1 - wt) * v[i1, j0_] + wt * v[i1, j1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "theta", "u"])
        for i, r in enumerate(self.grid.radii):
            for j, th in enumerate(self.grid.angles):
                w.writerow([repr(float(r)), repr(float(th)), repr(float(self.values[i, j]))])
        return buf.getvalue()


def _scalar_diffusion(metric: geo.MetricField) -> float:
    if metric.is_identity:
        return 1.0
    a = np.asarray(metric.a(np.zeros((1, 2))))[0]
    if not np.allclose(a, a[0, 0] * np.eye(2), rtol=1e-12, atol=1e-14):
        raise ValueError("the polar oracle supports a = c I only")
    return float(a[0, 0])


def _operator(p: PdeProblem, grid: PolarGrid) -> sparse.csr_matrix:
    """Sparse matrix of the generator on cell centres.

    Diffusion is in flux form with zero flux through the outer face (the
    Neumann condition) and the vanishing face at the origin. Advection uses
    central differences; the radial derivative in the outermost ring mirrors
    the value across the wall, and the innermost ring reaches across the
    centre to the opposite angle.
    """
    nr, nt, h = grid.n_r, grid.n_theta, grid.h
    dth = 2 * np.pi / nt
    D = 0.5 * p.epsilon ** 2 * _scalar_diffusion(p.metric)
    r = grid.radii
    pts = grid.points()
    b = p.drift(pts.reshape(-1, 2)).reshape(nr, nt, 2)
    th = grid.angles
    br = b[..., 0] * np.cos(th)[None] + b[..., 1] * np.sin(th)[None]
    bt = -b[..., 0] * np.sin(th)[None] + b[..., 1] * np.cos(th)[None]

    def idx(i, j):
        return i * nt + (j % nt)

    rows, cols, vals = [], [], []
    I, J = np.meshgrid(np.arange(nr), np.arange(nt), indexing="ij")
    I, J = I.ravel(), J.ravel()
    ri = r[I]
    rp = ri + 0.5 * h
    rm = ri - 0.5 * h
    cp = np.where(I < nr - 1, D * rp / (ri * h * h), 0.0)
    cm = np.where(I > 0, D * rm / (ri * h * h), 0.0)
    ct = D / (ri * ri * dth * dth)
    diag = -(cp + cm + 2 * ct)
    me = idx(I, J)
    rows += [me, me, me, me, me]
    cols += [me, idx(np.minimum(I + 1, nr - 1), J), idx(np.maximum(I - 1, 0), J), idx(I, J + 1), idx(I, J - 1)]
    vals += [diag, cp, cm, ct, ct]
    # advection
    brv = br[I, J]
    btv = bt[I, J] / ri
    up = np.where(I < nr - 1, idx(np.minimum(I + 1, nr - 1), J), me)
    down = np.where(I > 0, idx(np.maximum(I - 1, 0), J), idx(0, J + nt // 2))
    rows += [me, me, me, me]
    cols += [up, down, idx(I, J + 1), idx(I, J - 1)]
    vals += [brv / (2 * h), -brv / (2 * h), btv / (2 * dth), -btv / (2 * dth)]
    A = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nr * nt, nr * nt)).tocsr()
    return A


def fd_oracle(p: PdeProblem, grid: Optional[PolarGrid] = None, t: float = 1.0, dt: float = 1e-3,
              method: str = "crank-nicolson") -> GridField:
    """Time-step the Neumann problem on the unit disk to time ``t``.

    ``method`` is ``"crank-nicolson"``, ``"implicit"`` or ``"explicit"``; the
    explicit scheme checks its stability limit and raises CFLViolation.
    """
    dom = p.drift.domain
    if dom.dimension != 2 or not dom.name.startswith("unit_"):
        raise ValueError("the polar oracle covers the unit disk only")
    grid = grid or PolarGrid()
    u = p.payoff(grid.points().reshape(-1, 2)).astype(float)
    if t == 0:
        return GridField(grid, u.reshape(grid.n_r, grid.n_theta), 0.0)
    n_steps = max(1, int(math.ceil(t / dt - 1e-9)))
    k = t / n_steps
    A = _operator(p, grid)
    eye = sparse.identity(A.shape[0], format="csc")
    if method == "explicit":
        limit = 2.0 / float(np.max(np.abs(A.diagonal())))
        if k > limit:
            raise CFLViolation(f"explicit step {k:g} exceeds the stability limit {limit:g}")
        for _ in range(n_steps):
            u = u + k * (A @ u)
    elif method in ("implicit", "crank-nicolson"):
        theta = 1.0 if method == "implicit" else 0.5
        lhs = splu((eye - theta * k * A).tocsc())
        rhs = (eye + (1 - theta) * k * A).tocsr()
        for _ in range(n_steps):
            u = lhs.solve(rhs @ u)
    else:
        raise ValueError(f"unknown method {method!r}")
    return GridField(grid, u.reshape(grid.n_r, grid.n_theta), t)


def radial_series(g_radial: Callable[[float], float], epsilon: float, t: float, r,
                  n_terms: int = 60) -> Array:
    """Heat flow ``u_t = (eps^2/2) Lap u`` on the unit disk with zero Neumann data and radial initial value.

    Expansion in ``J0(k r)`` over the zeros ``k`` of ``J1`` (where ``J0' = 0``).
    """
    r = np.asarray(r, dtype=float)
    D = 0.5 * epsilon ** 2
    ks = np.concatenate([[0.0], jn_zeros(1, n_terms)])
    out = np.zeros_like(r)
    for k in ks:
        num = quad(lambda s: g_radial(s) * j0(k * s) * s, 0.0, 1.0, limit=200)[0]
        den = 0.5 if k == 0 else 0.5 * j0(k) ** 2
        out += num / den * math.exp(-D * k * k * t) * j0(k * r)
    return out


# ---------------------------------------------------------------------------
# long-time behaviour
# ---------------------------------------------------------------------------

@dataclass
class LongTimeRow:
    epsilon: float
    lam: float
    t: float
    estimate: float
    stderr: float
    state: int
    target: float

    @property
    def gap(self) -> float:
        return abs(self.estimate - self.target)

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon, "lambda": self.lam, "t": self.t, "estimate": self.estimate,
                "stderr": self.stderr, "state": self.state, "target": self.target, "gap": self.gap}


def check_long_time_limit(p: PdeProblem, x, lambda_values: Sequence[float], tree: CycleNode,
                          equilibria: Sequence[Equilibrium], sim: SimConfig, n: int,
                          epsilons: Optional[Sequence[float]] = None, start: Optional[int] = None,
                          step_budget: float = DEFAULT_STEP_BUDGET, workers: int = 1) -> List[LongTimeRow]:
    """Estimate ``u(x, exp(lam / eps^2))`` and compare with ``g`` at the predicted metastable state."""
    x = np.asarray(x, dtype=float)
    epsilons = [p.epsilon] if epsilons is None else list(epsilons)
    if start is None:
        start = first_attractor(p.drift, x, list(equilibria))
    loc = {e.index: e.location for e in equilibria}
    rows = []
    for eps in epsilons:
        for lam in lambda_values:
            T = math.exp(lam / eps ** 2)
            steps = T / sim.dt
            if steps * n > step_budget:
                raise HorizonInfeasible(
                    f"T = exp({lam:g}/{eps:g}^2) = {T:.3g} needs {steps * n:.3g} trajectory steps")
            k = metastable_state(tree, None, start, lam)
            target = float(p.payoff(loc[k][None])[0])
            q = PdeProblem(p.drift, p.g, eps)
            est = estimate_u(q, x, T, n, replace(sim, epsilon=eps, t_max=T), workers=workers)
            rows.append(LongTimeRow(eps, lam, T, est.mean, est.stderr, k, target))
    return rows


REPORT_COLUMNS = ["epsilon", "lambda", "t", "estimate", "stderr", "target", "gap"]


def report_csv(rows: Sequence[LongTimeRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        d = row.as_dict()
        w.writerow([repr(float(d[c])) for c in REPORT_COLUMNS])
    return buf.getvalue()


def basin_indicator(center, width: float = 0.25) -> Callable[[Array], Array]:
    """Smooth bump ``exp(-|x - c|^2 / (2 w^2))``: close to 1 at ``c`` and small far away."""
    c = np.asarray(center, dtype=float)

    def g(x):
        d2 = np.sum((np.asarray(x) - c) ** 2, axis=-1)
        return np.exp(-0.5 * d2 / width ** 2)

    return g
