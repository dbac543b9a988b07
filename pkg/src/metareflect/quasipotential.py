"""Quasipotentials by minimum-action paths, with a grid shortest-path oracle.

The optimizer works on the time-free (geometric) form of the action: for a
fixed curve the infimum of the quadratic action over all time
parameterizations is ``int |phi'| |bbar| - (bbar, phi')`` in the ``a^{-1}``
metric, so the free horizon of the quasipotential is handled exactly and the
returned path carries the optimal timing. Nodes are kept in the closed
domain by projection; nodes on the boundary move in the tangent cone.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from . import geometry as geo
from .action import geometric_terms, segment_midpoints, time_parameterize, action_bbar
from .dynamics import DiscretePath, DriftField, Equilibrium, _bbar, flow
from .errors import InconsistentMatrix, NoDescent, NoFeasiblePath, UnreachableTarget

Array = np.ndarray

PLAIN = "plain"
AVOIDING = "avoiding"


@dataclass
class OptimizerOptions:
    n_nodes: int = 200
    max_iter: int = 2000
    reparam_every: int = 20
    rel_tol: float = 1e-6
    stall_window: int = 50
    fd_step: float = 1e-7
    initial_step: float = 1e-3
    flow_time: float = 20.0
    flow_dt: float = 1e-3
    arc_turns: Tuple[int, ...] = (1, -1)
    extra_starts: int = 1
    seed: int = 0
    avoid_weight: float = 10.0
    avoid_weight_growth: float = 10.0
    avoid_rounds: int = 4
    precondition: bool = True


@dataclass
class QuasipotentialMatrix:
    values: np.ndarray
    variant: str
    labels: List[int]
    provenance: str = "optimized"
    equilibria: Optional[List[Equilibrium]] = None
    paths: Dict[Tuple[int, int], DiscretePath] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.labels), len(self.labels)):
            raise ValueError("values must be an l x l matrix matching the labels")

    @property
    def size(self) -> int:
        return len(self.labels)

    def pos(self, label: int) -> int:
        return self.labels.index(label)

    def get(self, i: int, j: int) -> float:
        """Entry by labels."""
        return float(self.values[self.pos(i), self.pos(j)])

    def check(self, tol: float = 1e-9, triangle: Optional[bool] = None) -> None:
        v = self.values
        if np.any(np.abs(np.diag(v)) > tol):
            raise InconsistentMatrix("diagonal must vanish")
        if np.any(v < -tol):
            raise InconsistentMatrix("entries must be nonnegative")
        n = self.size
        for i in range(n):
            for j in range(i + 1, n):
                if v[i, j] <= tol and v[j, i] <= tol:
                    raise InconsistentMatrix(
                        f"both V({self.labels[i]},{self.labels[j]}) and the reverse vanish")
        if triangle is None:
            triangle = self.variant == PLAIN and self.provenance != "user_supplied"
        if triangle:
            via = np.min(v[:, :, None] + v[None, :, :], axis=1)
            if np.any(v > via + max(tol, 1e-6 * float(np.max(v, initial=0.0)))):
                raise InconsistentMatrix("triangle inequality violated")

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "variant": self.variant,
                "provenance": self.provenance,
                "values": [[float(x) for x in row] for row in self.values]}

    @classmethod
    def from_json(cls, data) -> "QuasipotentialMatrix":
        if isinstance(data, str):
            data = json.loads(data)
        labels = [int(v) for v in data["labels"]]
        return cls(np.asarray(data["values"], dtype=float), data.get("variant", PLAIN), labels,
                   data.get("provenance", "user_supplied"))

    @classmethod
    def from_pairs(cls, labels: Sequence[int], pairs: Dict[Tuple[int, int], float],
                   variant: str = AVOIDING, provenance: str = "user_supplied") -> "QuasipotentialMatrix":
        labels = list(labels)
        v = np.zeros((len(labels), len(labels)))
        for (i, j), val in pairs.items():
            v[labels.index(i), labels.index(j)] = val
        return cls(v, variant, labels, provenance)


# The example table for the three stable points of the six-equilibrium disk.
EXAMPLE_PAIRS = {(1, 3): 1.0, (3, 1): 2.0, (1, 5): 6.0, (5, 1): 7.0, (5, 3): 3.0, (3, 5): 4.0}


def example_matrix() -> QuasipotentialMatrix:
    return QuasipotentialMatrix.from_pairs([1, 3, 5], EXAMPLE_PAIRS)


# ---------------------------------------------------------------------------
# path utilities
# ---------------------------------------------------------------------------

def _snap(f: DriftField, pts: Array, on_bdry: Array) -> Array:
    """Project into the closed domain; flagged points go onto the boundary."""
    out = geo.project_to_closure(f.domain, pts)
    if np.any(on_bdry):
        out[on_bdry] = geo.closest_boundary_point(f.domain, pts[on_bdry])
    return out


def _reparametrize(f: DriftField, pts: Array, n: int) -> Array:
    """Equal arc-length redistribution; interpolants between two boundary nodes stay on the boundary."""
    tol = f.domain.boundary_tolerance
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(pts[:1], n, axis=0)
    target = np.linspace(0.0, s[-1], n)
    k = np.clip(np.searchsorted(s, target, side="right") - 1, 0, len(pts) - 2)
    w = np.where(seg[k] > 0, (target - s[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
    new = pts[k] * (1 - w)[:, None] + pts[k + 1] * w[:, None]
    on = np.abs(f.domain.sd(pts)) <= tol
    flag = on[k] & on[k + 1]
    new = _snap(f, new, flag)
    new[0], new[-1] = pts[0], pts[-1]
    return new


def _objective(f: DriftField, pts: Array, penalty=None) -> Tuple[float, Array]:
    terms, _ = geometric_terms(f, pts)
    total = float(np.sum(terms))
    if penalty is not None:
        total += penalty(pts)
    return total, terms


def _gradient(f: DriftField, pts: Array, h: float, penalty=None) -> Array:
    """Central differences exploiting that each segment touches only two nodes.

    Nodes are perturbed in two interleaved colour classes, so every segment
    sees at most one perturbed node per evaluation.
    """
    n, d = pts.shape
    grad = np.zeros_like(pts)
    for colour in (0, 1):
        idx = np.arange(1 + colour, n - 1, 2)
        if len(idx) == 0:
            continue
        for c in range(d):
            vals = []
            for sgn in (1.0, -1.0):
                q = pts.copy()
                q[idx, c] += sgn * h
                q[idx] = geo.project_to_closure(f.domain, q[idx])
                terms, _ = geometric_terms(f, q)
                if penalty is not None:
                    terms = terms + penalty.segment_terms(q)
                vals.append(terms)
            diff = vals[0] - vals[1]
            # node i touches segments i-1 and i
            grad[idx, c] = (diff[idx - 1] + diff[idx]) / (2 * h)
    return grad


def _sobolev(g: Array) -> Array:
    """Apply the inverse discrete Laplacian (pinned ends) to the node gradient.

    The curvature of the time-free action grows like 1/h along the path, so
    the plain gradient is badly scaled; the H1 gradient removes that stiffness.
    """
    m = len(g) - 2
    if m < 1:
        return g
    ab = np.zeros((3, m))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0
    ab[2, :-1] = -1.0
    out = np.zeros_like(g)
    out[1:-1] = solve_banded((1, 1), ab, g[1:-1])
    return out


def _tangent_cone(f: DriftField, pts: Array, direction: Array) -> Array:
    """Drop the outward normal part of the step at boundary nodes."""
    dom = f.domain
    on = np.abs(dom.sd(pts)) <= dom.boundary_tolerance
    on[0] = on[-1] = False
    if not np.any(on):
        return direction
    n_in = geo._unit_inward(dom, pts[on])
    dn = np.sum(direction[on] * n_in, axis=-1)
    out = direction.copy()
    out[on] = direction[on] - np.minimum(dn, 0.0)[:, None] * n_in
    return out


def _descend(f: DriftField, pts: Array, opts: OptimizerOptions, penalty=None):
    """Projected gradient descent with adaptive step; returns path and accepted objective history."""
    n = len(pts)
    pts = _reparametrize(f, pts, n)
    val, _ = _objective(f, pts, penalty)
    history = [val]
    step = opts.initial_step
    scale = max(float(np.max(np.linalg.norm(np.diff(pts, axis=0), axis=1))), 1e-12)
    it = 0
    while it < opts.max_iter:
        it += 1
        g = _gradient(f, pts, opts.fd_step, penalty)
        g[0] = g[-1] = 0.0
        direction = _tangent_cone(f, pts, -_sobolev(g) if opts.precondition else -g)
        gmax = float(np.max(np.linalg.norm(direction, axis=1)))
        if gmax == 0:
            break
        accepted = False
        for _ in range(30):
            # step measured relative to the node spacing
            trial = pts + (step * scale / gmax) * direction
            on = np.abs(f.domain.sd(pts)) <= f.domain.boundary_tolerance
            trial = geo.project_to_closure(f.domain, trial)
            trial[0], trial[-1] = pts[0], pts[-1]
            tv, _ = _objective(f, trial, penalty)
            if tv < val:
                pts, val = trial, tv
                step = min(step * 1.5, 0.5)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if it % opts.reparam_every == 0:
            rp = _reparametrize(f, pts, n)
            rv, _ = _objective(f, rp, penalty)
            # keep the redistribution only if it does not undo progress
            if rv <= val * (1 + 1e-9) + 1e-15:
                pts, val = rp, rv
                scale = max(float(np.max(np.linalg.norm(np.diff(pts, axis=0), axis=1))), 1e-12)
        history.append(val)
        w = opts.stall_window
        if len(history) > w:
            old = history[-w - 1]
            if old - val <= opts.rel_tol * max(abs(old), 1e-12):
                break
    return pts, history


# ---------------------------------------------------------------------------
# initial paths
# ---------------------------------------------------------------------------

def _chord(f: DriftField, x: Array, y: Array, n: int) -> Array:
    s = np.linspace(0.0, 1.0, n)[:, None]
    return geo.project_to_closure(f.domain, x + s * (y - x))


def _boundary_arc(f: DriftField, x: Array, y: Array, n: int, turn: int) -> Optional[Array]:
    """Arc along a planar boundary between the boundary projections of x and y."""
    dom = f.domain
    if dom.dimension != 2:
        return None
    lo, hi = (np.asarray(v, dtype=float) for v in dom.bounding_box)
    c = 0.5 * (lo + hi)
    a0 = math.atan2(x[1] - c[1], x[0] - c[0])
    a1 = math.atan2(y[1] - c[1], y[0] - c[0])
    da = (a1 - a0) % (2 * math.pi)
    if turn < 0:
        da -= 2 * math.pi
    m = n - 2
    ang = a0 + da * np.linspace(0.0, 1.0, m + 2)[1:-1]
    R = 2 * dom.diameter
    far = c + R * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    mid = geo.closest_boundary_point(dom, far)
    return np.vstack([x, mid, y])


def _flow_concat(f: DriftField, x: Array, y: Array, n: int, opts: OptimizerOptions) -> Array:
    """Forward flow from x followed by the chord to y."""
    path = flow(f, x, opts.flow_time, opts.flow_dt)
    p = path.points
    d = np.linalg.norm(p - y, axis=1)
    k = int(np.argmin(d))
    head = p[: k + 1]
    tail = _chord(f, head[-1], y, max(3, n // 4))
    return _reparametrize(f, np.vstack([head, tail[1:]]), n)


def _initial_paths(f: DriftField, x: Array, y: Array, opts: OptimizerOptions) -> List[Array]:
    n = opts.n_nodes
    starts = [_chord(f, x, y, n)]
    dom = f.domain
    tol = dom.boundary_tolerance
    if dom.dimension == 2 and abs(dom.sd(x)) <= tol and abs(dom.sd(y)) <= tol:
        for turn in opts.arc_turns:
            arc = _boundary_arc(f, x, y, n, turn)
            if arc is not None:
                starts.append(arc)
    starts.append(_flow_concat(f, x, y, n, opts))
    rng = np.random.default_rng(opts.seed)
    for _ in range(opts.extra_starts):
        # bent chord through a random interior waypoint
        lo, hi = (np.asarray(v, dtype=float) for v in dom.bounding_box)
        for _try in range(100):
            w = lo + rng.random(dom.dimension) * (hi - lo)
            if dom.sd(w) < 0:
                break
        half = n // 2 + 1
        bent = np.vstack([_chord(f, x, w, half), _chord(f, w, y, n - half + 1)[1:]])
        starts.append(bent)
    return starts


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

@dataclass
class ActionResult:
    value: float
    path: DiscretePath
    history: List[float]
    start_kind: str


def _minimize(f: DriftField, x, y, opts: OptimizerOptions, penalty=None,
              starts: Optional[List[Array]] = None) -> ActionResult:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dom = f.domain
    if np.any(dom.sd(np.stack([x, y])) > dom.boundary_tolerance):
        raise ValueError("endpoints must lie in the closed domain")
    if np.allclose(x, y):
        return ActionResult(0.0, DiscretePath(np.zeros(1), x[None]), [0.0], "trivial")
    if starts is None:
        starts = _initial_paths(f, x, y, opts)
    kinds = ["chord", "arc+", "arc-", "flow", "bent", "bent"]
    best = None
    for k, p0 in enumerate(starts):
        p0 = p0.copy()
        p0[0], p0[-1] = x, y
        pts, hist = _descend(f, p0, opts, penalty)
        if not np.isfinite(hist[-1]):
            continue
        if best is None or hist[-1] < best[1][-1]:
            best = (pts, hist, kinds[k] if k < len(kinds) else "start")
    if best is None:
        raise NoDescent("no initial path produced a finite action")
    pts, hist, kind = best
    value = float(np.sum(geometric_terms(f, pts)[0]))
    return ActionResult(value, time_parameterize(f, pts), hist, kind)


def minimize_action(x, y, f: DriftField, opts: Optional[OptimizerOptions] = None) -> Tuple[float, DiscretePath]:
    """Approximate ``V(x, y)``: the least action over paths in the closed domain from x to y."""
    res = _minimize(f, x, y, opts or OptimizerOptions())
    return res.value, res.path


def minimize_action_full(x, y, f: DriftField, opts: Optional[OptimizerOptions] = None) -> ActionResult:
    return _minimize(f, x, y, opts or OptimizerOptions())


class _Barrier:
    """Smooth penalty ``w * sum_s max(0, 1 - dist/r)^2 * |segment|`` around avoided points."""

    def __init__(self, centers: Array, radius: float, weight: float):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, centers.shape[-1] if len(centers) else 2)
        self.radius = radius
        self.weight = weight

    def segment_terms(self, pts: Array) -> Array:
        if len(self.centers) == 0:
            return np.zeros(len(pts) - 1)
        mid = 0.5 * (pts[:-1] + pts[1:])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        dist = np.linalg.norm(mid[:, None, :] - self.centers[None], axis=-1)
        viol = np.maximum(0.0, 1.0 - dist / self.radius)
        return self.weight * np.sum(viol ** 2, axis=1) * (seg + 1e-3 * self.radius)

    def __call__(self, pts: Array) -> float:
        return float(np.sum(self.segment_terms(pts)))


def clearance(path_points: Array, centers: Array) -> float:
    if len(centers) == 0:
        return math.inf
    p = np.asarray(path_points)
    return float(np.min(np.linalg.norm(p[:, None, :] - np.asarray(centers)[None], axis=-1)))


def minimize_action_avoiding(i: int, j: int, f: DriftField, equilibria: Sequence[Equilibrium],
                             avoid_radius: float, opts: Optional[OptimizerOptions] = None,
                             return_path: bool = False):
    """Least action from ``O_i`` to ``O_j`` over paths kept at least ``avoid_radius / 2`` from every other equilibrium.

    The clearance is enforced by a penalty whose weight grows until the path
    is feasible; the reported value is the plain action of that path.
    """
    if i == j:
        raise ValueError("i and j must differ")
    opts = opts or OptimizerOptions()
    by_index = {e.index: e for e in equilibria}
    x = by_index[i].location
    y = by_index[j].location
    others = np.array([e.location for e in equilibria if e.index not in (i, j)])
    if len(others) == 0:
        res = _minimize(f, x, y, opts)
        return (res.value, res.path) if return_path else res.value
    starts = [s for s in _initial_paths(f, x, y, opts)
              if clearance(s[1:-1], others) >= 0.5 * avoid_radius]
    if not starts:
        starts = _initial_paths(f, x, y, opts)
    weight = opts.avoid_weight
    res = None
    for _ in range(opts.avoid_rounds):
        barrier = _Barrier(others, avoid_radius, weight)
        res = _minimize(f, x, y, opts, barrier, starts=starts)
        if clearance(res.path.points, others) >= 0.5 * avoid_radius:
            break
        weight *= opts.avoid_weight_growth
        starts = [res.path.points] + starts
    else:
        raise NoFeasiblePath(f"could not keep clearance {avoid_radius / 2:g} from the avoided points")
    return (res.value, res.path) if return_path else res.value


# ---------------------------------------------------------------------------
# grid oracle
# ---------------------------------------------------------------------------

# 16-neighbour stencil (8-neighbour plus knight moves): the largest angular
# gap between edge directions drops from 45 to about 27 degrees.
_STENCIL = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1),
            (2, 1), (1, 2), (-1, 2), (-2, 1), (-2, -1), (-1, -2), (1, -2), (2, -1)]


@dataclass
class GridGraph:
    nodes: np.ndarray
    matrix: object
    boundary_ids: np.ndarray


def _edge_weights(f: DriftField, a: Array, b: Array, sliding: Array) -> Array:
    e = b - a
    mid = 0.5 * (a + b)
    if np.any(sliding):
        mid[sliding] = geo.closest_boundary_point(f.domain, mid[sliding])
    mid = geo.project_to_closure(f.domain, mid)
    on = sliding | (np.abs(f.domain.sd(mid)) <= f.domain.boundary_tolerance)
    bb = _bbar(f, mid, on)
    ne = np.sqrt(f.metric.norm2(mid, e))
    nb = np.sqrt(f.metric.norm2(mid, bb))
    w = ne * nb - f.metric.inner(mid, bb, e)
    # explicit zeros would be dropped by the sparse graph
    return np.maximum(w, 1e-14 * ne + 1e-300)


def build_grid_graph(f: DriftField, resolution: int = 400, boundary_nodes: Optional[int] = None,
                     extra_points: Sequence = ()) -> GridGraph:
    """Directed graph on a uniform grid over the closed planar domain plus a ring of boundary nodes."""
    dom = f.domain
    if dom.dimension != 2:
        raise ValueError("grid oracle is planar only")
    if not (f.metric.is_identity or f.metric.label in ("constant", "identity")):
        raise ValueError("grid oracle needs a constant metric")
    lo, hi = (np.asarray(v, dtype=float) for v in dom.bounding_box)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    h = max(xs[1] - xs[0], ys[1] - ys[0])
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    grid = np.stack([X.ravel(), Y.ravel()], axis=-1)
    inside = dom.sd(grid) < -1e-12
    gid = -np.ones(resolution * resolution, dtype=np.int64)
    gid[inside] = np.arange(int(inside.sum()))
    interior = grid[inside]
    n_int = len(interior)

    # boundary ring
    if boundary_nodes is None:
        perim = math.pi * dom.diameter / math.sqrt(2)
        boundary_nodes = int(math.ceil(4 * perim / h))
    c = 0.5 * (lo + hi)
    th = 2 * np.pi * np.arange(boundary_nodes) / boundary_nodes
    ring = geo.closest_boundary_point(dom, c + 2 * dom.diameter * np.stack([np.cos(th), np.sin(th)], -1))
    extra = np.asarray(list(extra_points), dtype=float).reshape(-1, 2)
    extra_on = np.abs(dom.sd(extra)) <= dom.boundary_tolerance if len(extra) else np.zeros(0, bool)
    if np.any(extra_on):
        ring_all = np.vstack([ring, extra[extra_on]])
        ang = np.arctan2(ring_all[:, 1] - c[1], ring_all[:, 0] - c[0]) % (2 * np.pi)
        ring = ring_all[np.argsort(ang, kind="stable")]
    nb = len(ring)
    nodes = np.vstack([interior, ring, extra[~extra_on]]) if len(extra) else np.vstack([interior, ring])
    bids = np.arange(n_int, n_int + nb)

    src, dst, slide = [], [], []
    I, J = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    I, J = I.ravel(), J.ravel()
    for di, dj in _STENCIL:
        i2, j2 = I + di, J + dj
        ok = (i2 >= 0) & (i2 < resolution) & (j2 >= 0) & (j2 < resolution)
        a = I[ok] * resolution + J[ok]
        b = i2[ok] * resolution + j2[ok]
        keep = inside[a] & inside[b]
        src.append(gid[a[keep]])
        dst.append(gid[b[keep]])
        slide.append(np.zeros(int(keep.sum()), bool))
    # arcs between consecutive ring nodes, both directions
    k = np.arange(nb)
    src += [bids[k], bids[(k + 1) % nb]]
    dst += [bids[(k + 1) % nb], bids[k]]
    slide += [np.ones(nb, bool), np.ones(nb, bool)]
    # ring <-> nearby interior nodes
    from scipy.spatial import cKDTree
    tree = cKDTree(interior)
    pairs = tree.query_ball_point(ring, r=2.3 * h)
    bi = np.concatenate([np.full(len(p), bids[q]) for q, p in enumerate(pairs)]).astype(np.int64)
    ii = np.concatenate([np.asarray(p, dtype=np.int64) for p in pairs])
    src += [bi, ii]
    dst += [ii, bi]
    slide += [np.zeros(len(bi), bool), np.zeros(len(bi), bool)]
    # off-ring extra points connect to nearby interior nodes
    if len(extra) and np.any(~extra_on):
        base = n_int + nb
        for q, p in enumerate(extra[~extra_on]):
            near = np.asarray(tree.query_ball_point(p, r=2.3 * h), dtype=np.int64)
            src += [np.full(len(near), base + q), near]
            dst += [near, np.full(len(near), base + q)]
            slide += [np.zeros(len(near), bool)] * 2

    src = np.concatenate(src)
    dst = np.concatenate(dst)
    slide = np.concatenate(slide)
    w = _edge_weights(f, nodes[src], nodes[dst], slide)
    mat = coo_matrix((w, (src, dst)), shape=(len(nodes), len(nodes))).tocsr()
    return GridGraph(nodes, mat, bids)


def _node_of(graph: GridGraph, p: Array) -> int:
    return int(np.argmin(np.linalg.norm(graph.nodes - p, axis=1)))


def oracle_dijkstra(x, y, f: DriftField, grid_resolution: int = 400,
                    graph: Optional[GridGraph] = None) -> float:
    """Shortest path on the grid graph with time-free action edge weights."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if graph is None:
        graph = build_grid_graph(f, grid_resolution, extra_points=[x, y])
    s = _node_of(graph, x)
    t = _node_of(graph, y)
    dist = dijkstra(graph.matrix, directed=True, indices=s)
    val = float(dist[t])
    if not np.isfinite(val):
        raise UnreachableTarget("target not reachable on the grid")
    return val


def oracle_dijkstra_all(points: Sequence, f: DriftField, grid_resolution: int = 400) -> Array:
    """Pairwise oracle values between the given points, sharing one graph."""
    pts = np.asarray(points, dtype=float)
    graph = build_grid_graph(f, grid_resolution, extra_points=pts)
    ids = [_node_of(graph, p) for p in pts]
    dist = dijkstra(graph.matrix, directed=True, indices=ids)
    out = dist[:, ids]
    np.fill_diagonal(out, 0.0)
    return out


# ---------------------------------------------------------------------------
# matrix assembly
# ---------------------------------------------------------------------------

def build_matrix(f: DriftField, equilibria: Sequence[Equilibrium], variant: str = PLAIN,
                 opts: Optional[OptimizerOptions] = None, all_pairs: bool = False,
                 avoid_radius: Optional[float] = None, keep_paths: bool = False,
                 workers: int = 1) -> QuasipotentialMatrix:
    """Matrix of quasipotentials between stable equilibria (or all of them with ``all_pairs``).

    In the avoiding variant each path keeps clear of the other equilibria in
    the matrix. The default clearance radius is a quarter of the smallest
    distance between equilibria.
    """
    if variant not in (PLAIN, AVOIDING):
        raise ValueError(f"variant must be {PLAIN!r} or {AVOIDING!r}")
    opts = opts or OptimizerOptions()
    eqs = list(equilibria) if all_pairs else [e for e in equilibria if e.stable]
    labels = [e.index for e in eqs]
    n = len(eqs)
    if avoid_radius is None:
        locs = np.array([e.location for e in equilibria])
        dmin = min((np.linalg.norm(locs[a] - locs[b]) for a in range(len(locs))
                    for b in range(a + 1, len(locs))), default=1.0)
        avoid_radius = 0.25 * dmin

    def entry(pair):
        a, b = pair
        if variant == AVOIDING:
            return minimize_action_avoiding(eqs[a].index, eqs[b].index, f, eqs,
                                            avoid_radius, opts, return_path=True)
        return minimize_action(eqs[a].location, eqs[b].location, f, opts)

    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(entry, pairs))
    else:
        results = [entry(pr) for pr in pairs]
    v = np.zeros((n, n))
    paths = {}
    for (a, b), (val, path) in zip(pairs, results):
        v[a, b] = val
        paths[(a, b)] = path
    if variant == PLAIN:
        v, paths = _concatenation_closure(f, v, paths)
    paths = {(eqs[a].index, eqs[b].index): p for (a, b), p in paths.items()} if keep_paths else {}
    m = QuasipotentialMatrix(v, variant, labels, "optimized", eqs, paths)
    m.check(tol=1e-6 * max(1.0, float(np.max(v, initial=0.0))))
    return m


def _concatenation_closure(f: DriftField, v: Array, paths: dict):
    """Min-plus closure: a route through an intermediate equilibrium is itself admissible."""
    v = v.copy()
    n = len(v)
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if len({i, j, k}) < 3:
                    continue
                alt = v[i, k] + v[k, j]
                if alt < v[i, j]:
                    v[i, j] = alt
                    first, second = paths[(i, k)], paths[(k, j)]
                    pts = np.vstack([first.points, second.points[1:]])
                    paths[(i, j)] = time_parameterize(f, pts)
    return v, paths


def oracle_matrix(f: DriftField, equilibria: Sequence[Equilibrium], grid_resolution: int = 400,
                  all_pairs: bool = False) -> QuasipotentialMatrix:
    """Plain matrix from the grid oracle."""
    eqs = list(equilibria) if all_pairs else [e for e in equilibria if e.stable]
    vals = oracle_dijkstra_all([e.location for e in eqs], f, grid_resolution)
    return QuasipotentialMatrix(vals, PLAIN, [e.index for e in eqs], "oracle", eqs)
