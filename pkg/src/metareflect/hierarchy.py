"""W-graphs, the cycle hierarchy and the metastable-state map.

States are referred to by their labels (the equilibrium indices carried by
the matrix); internally everything runs on positions ``0..l-1``.

Minimum graph sums are computed with the Chu-Liu/Edmonds arborescence
algorithm; :func:`enumerate_wgraphs` is the exhaustive reference. Ties are
never broken silently: a near-tie that changes an exit state, a bottom or a
metastable state raises :class:`NonGenericTie` unless ``break_ties`` is set
to ``"lowest-index"``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import AtBreakpoint, InconsistentMatrix, NonGenericTie, TooLarge
from .quasipotential import QuasipotentialMatrix

MAX_ENUMERATION = 12
TIE_TOL = 1e-9
ERROR = "error"
LOWEST = "lowest-index"


# ---------------------------------------------------------------------------
# W-graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WGraph:
    labels: Tuple[int, ...]
    sinks: FrozenSet[int]
    arrows: Tuple[Tuple[int, int], ...]

    def as_dict(self) -> Dict[int, int]:
        return dict(self.arrows)

    def weight(self, V: QuasipotentialMatrix) -> float:
        return math.fsum(V.get(m, n) for m, n in self.arrows)

    def chain(self, start: int) -> List[int]:
        """States visited following arrows from ``start`` until a sink."""
        arr = self.as_dict()
        out = [start]
        while out[-1] in arr:
            out.append(arr[out[-1]])
        return out


def _acyclic(targets: Sequence[int], free: Sequence[int]) -> bool:
    """``targets[m]`` for each m in ``free``; sinks have no arrow."""
    n = len(targets)
    state = [0] * n  # 0 unseen, 1 on stack, 2 done
    freeset = set(free)
    for s in free:
        path = []
        v = s
        while v in freeset and state[v] == 0:
            state[v] = 1
            path.append(v)
            v = targets[v]
        if v in freeset and state[v] == 1:
            return False
        for p in path:
            state[p] = 2
    return True


def iter_wgraphs(l: int, sinks: Iterable[int], labels: Optional[Sequence[int]] = None) -> Iterator[WGraph]:
    """All W-graphs on ``l`` states with the given sink set (labels, default ``1..l``)."""
    labels = tuple(labels) if labels is not None else tuple(range(1, l + 1))
    if len(labels) != l:
        raise ValueError("labels must have length l")
    if l > MAX_ENUMERATION:
        raise TooLarge(f"exhaustive enumeration is limited to l <= {MAX_ENUMERATION}")
    sinks = frozenset(sinks)
    if not sinks:
        raise ValueError("sink set must be nonempty")
    pos = {lab: k for k, lab in enumerate(labels)}
    sink_pos = {pos[s] for s in sinks}
    free = [k for k in range(l) if k not in sink_pos]
    choices = [[t for t in range(l) if t != m] for m in free]
    targets = [-1] * l
    for combo in itertools.product(*choices):
        for m, t in zip(free, combo):
            targets[m] = t
        if _acyclic(targets, free):
            yield WGraph(labels, sinks, tuple((labels[m], labels[t]) for m, t in zip(free, combo)))


def enumerate_wgraphs(l: int, sinks: Iterable[int], labels: Optional[Sequence[int]] = None) -> List[WGraph]:
    return list(iter_wgraphs(l, sinks, labels))


@lru_cache(maxsize=None)
def _arborescence_table(l: int) -> np.ndarray:
    """Target arrays of every {0}-graph on ``l`` states (row per graph, entry per source 1..l-1)."""
    if l == 1:
        return np.zeros((1, 0), dtype=np.int64)
    # digit k of a mixed index picks the target of state k+1 among the other l-1 states
    digits = np.indices((l - 1,) * (l - 1), dtype=np.int64).reshape(l - 1, -1).T
    combos = digits + (digits >= np.arange(1, l)[None, :])
    full = np.concatenate([np.zeros((len(combos), 1), dtype=np.int64), combos], axis=1)
    # follow arrows l times; acyclic iff every chain ends at the sink 0
    cur = np.tile(np.arange(l), (len(full), 1))
    rows = np.arange(len(full))[:, None]
    for _ in range(l):
        cur = full[rows, cur]
    ok = np.all(cur == 0, axis=1)
    return combos[ok]


def w_value_bruteforce(V: QuasipotentialMatrix, i: int) -> float:
    """Exhaustive minimum over {i}-graphs (vectorized over all graphs)."""
    l = V.size
    if l == 1:
        return 0.0
    table = _arborescence_table(l)
    k = V.pos(i)
    perm = [k] + [p for p in range(l) if p != k]  # table position -> matrix position
    perm = np.asarray(perm)
    src = perm[1:]
    tgt = perm[table]
    sums = V.values[src[None, :], tgt].sum(axis=1)
    best = float(np.min(sums))
    near = np.flatnonzero(sums <= best + 1e-9 * max(1.0, abs(best)))
    return min(math.fsum(V.values[src, tgt[r]]) for r in near)


# ---------------------------------------------------------------------------
# minimum arborescence (Chu-Liu / Edmonds)
# ---------------------------------------------------------------------------

def _min_out_arborescence(n: int, root: int, w: Dict[Tuple[int, int], float]) -> Dict[int, int]:
    """Parent map of a minimum out-arborescence rooted at ``root``; ``w[(u, v)]`` is the cost of edge u -> v."""
    best_in: Dict[int, Tuple[float, int]] = {}
    for (u, v), c in w.items():
        if v == root or u == v:
            continue
        if v not in best_in or c < best_in[v][0] or (c == best_in[v][0] and u < best_in[v][1]):
            best_in[v] = (c, u)
    for v in range(n):
        if v != root and v not in best_in:
            raise InconsistentMatrix("some state has no admissible arrow")
    parent = {v: u for v, (_, u) in best_in.items()}
    # look for a cycle among the chosen edges
    cycle = None
    colour = {}
    for s in range(n):
        if s == root or s in colour:
            continue
        path = []
        v = s
        while v != root and v not in colour:
            colour[v] = s
            path.append(v)
            v = parent[v]
        if v != root and colour.get(v) == s:
            k = path.index(v)
            cycle = path[k:]
            break
    if cycle is None:
        return parent
    cyc = set(cycle)
    # contract the cycle into a new node
    new_id = {}
    nxt = 0
    for v in range(n):
        if v not in cyc:
            new_id[v] = nxt
            nxt += 1
    c_id = nxt
    for v in cyc:
        new_id[v] = c_id
    w2: Dict[Tuple[int, int], float] = {}
    origin: Dict[Tuple[int, int], Tuple[int, int]] = {}
    for (u, v), c in w.items():
        if u == v or v == root:
            continue
        nu, nv = new_id[u], new_id[v]
        if nu == nv:
            continue
        cost = c - best_in[v][0] if v in cyc else c
        key = (nu, nv)
        if key not in w2 or cost < w2[key] or (cost == w2[key] and (u, v) < origin[key]):
            w2[key] = cost
            origin[key] = (u, v)
    sub = _min_out_arborescence(n - len(cyc) + 1, new_id[root], w2)
    result = {}
    for nv, nu in sub.items():
        u, v = origin[(nu, nv)]
        result[v] = u
    for v in cyc:
        if v not in result:
            result[v] = parent[v]
    return result


def min_forest(V: QuasipotentialMatrix, members: Sequence[int], sinks: Sequence[int]) -> Dict[int, int]:
    """Arrows (label -> label) of a minimum W-graph on ``members`` with the given sinks.

    Members that are not sinks send one arrow each to another member or a
    sink. All sinks are merged into a virtual root and arrows are reversed so
    the problem becomes an out-arborescence.
    """
    members = [m for m in members if m not in set(sinks)]
    if not members:
        return {}
    idx = {m: k + 1 for k, m in enumerate(members)}
    w: Dict[Tuple[int, int], float] = {}
    to_sink: Dict[int, int] = {}
    for m in members:
        best = None
        for s in sinks:
            c = V.get(m, s)
            if best is None or c < best[0] or (c == best[0] and s < best[1]):
                best = (c, s)
        if best is not None:
            w[(0, idx[m])] = best[0]
            to_sink[m] = best[1]
        for n in members:
            if n != m:
                w[(idx[n], idx[m])] = V.get(m, n)
    parent = _min_out_arborescence(len(members) + 1, 0, w)
    inv = {k: m for m, k in idx.items()}
    return {inv[v]: (to_sink[inv[v]] if u == 0 else inv[u]) for v, u in parent.items()}


def _forest_weight(V: QuasipotentialMatrix, arrows: Dict[int, int]) -> float:
    return math.fsum(V.get(m, n) for m, n in sorted(arrows.items()))


def w_value(V: QuasipotentialMatrix, i: int) -> float:
    """``W(O_i)``: least total cost of an {i}-graph over all states."""
    return _forest_weight(V, min_forest(V, V.labels, [i]))


def w_values(V: QuasipotentialMatrix) -> Dict[int, float]:
    return {i: w_value(V, i) for i in V.labels}


def w_of_x(V: QuasipotentialMatrix, v_from: Dict[int, float], stable: Optional[Iterable[int]] = None) -> float:
    """``min_i W(O_i) + V(O_i, x)`` over the states supplied in ``v_from``."""
    keys = list(stable) if stable is not None else list(v_from)
    return min(w_value(V, i) + float(v_from[i]) for i in keys)


def zero_tolerance(V: QuasipotentialMatrix) -> float:
    return 1e-6 * float(np.max(V.values, initial=0.0))


def stability_partition(V: QuasipotentialMatrix, zero_tol: Optional[float] = None):
    """Split states into stable ones and a map from each unstable state to a stable one it drains into at zero cost."""
    tol = zero_tolerance(V) if zero_tol is None else zero_tol
    stable = set()
    for i in V.labels:
        if all(V.get(i, j) > tol for j in V.labels if j != i):
            stable.add(i)
    umap = {}
    for j in V.labels:
        if j in stable:
            continue
        # follow zero-cost arrows until a stable state is reached
        seen = {j}
        frontier = [j]
        target = None
        while frontier and target is None:
            nxt = []
            for u in frontier:
                for s in sorted(V.labels):
                    if s not in seen and V.get(u, s) <= tol:
                        if s in stable:
                            target = s
                            break
                        seen.add(s)
                        nxt.append(s)
                if target is not None:
                    break
            frontier = nxt
        if target is None:
            raise InconsistentMatrix(f"unstable state {j} has no zero-cost route to a stable state")
        umap[j] = target
    return stable, umap


def restrict(V: QuasipotentialMatrix, keep: Iterable[int]) -> QuasipotentialMatrix:
    keep = [i for i in V.labels if i in set(keep)]
    p = [V.pos(i) for i in keep]
    return QuasipotentialMatrix(V.values[np.ix_(p, p)], V.variant, keep, V.provenance)


# ---------------------------------------------------------------------------
# near-optimal forests (tie detection)
# ---------------------------------------------------------------------------

def _near_optimal_forests(V: QuasipotentialMatrix, members: Sequence[int], sinks: Sequence[int],
                          best: float, tol: float, limit: int = 20000) -> List[Dict[int, int]]:
    """All forests with weight within ``tol`` of ``best`` (branch and bound)."""
    sinkset = set(sinks)
    free = [m for m in members if m not in sinkset]
    universe = list(members) + [s for s in sinks if s not in set(members)]
    opts = {m: sorted(((V.get(m, n), n) for n in universe if n != m)) for m in free}
    lower = [0.0] * (len(free) + 1)
    for k in range(len(free) - 1, -1, -1):
        lower[k] = lower[k + 1] + opts[free[k]][0][0]
    found: List[Dict[int, int]] = []
    arrows: Dict[int, int] = {}

    def closes_cycle(m, n):
        v = n
        while v in arrows:
            v = arrows[v]
            if v == m:
                return True
        return v == m

    def rec(k, acc):
        if len(found) >= limit:
            return
        if k == len(free):
            found.append(dict(arrows))
            return
        m = free[k]
        for c, n in opts[m]:
            if acc + c + lower[k + 1] > best + tol:
                break
            if closes_cycle(m, n):
                continue
            arrows[m] = n
            rec(k + 1, acc + c)
            del arrows[m]

    rec(0, 0.0)
    return found


def _tol(scale: float) -> float:
    return TIE_TOL * max(1.0, abs(scale))


# ---------------------------------------------------------------------------
# cycles
# ---------------------------------------------------------------------------

def _exit_state(forest: Dict[int, int], start: int, members: set) -> int:
    v = start
    while v in members:
        v = forest[v]
    return v


def restricted_w(V: QuasipotentialMatrix, members: Sequence[int]) -> Dict[int, float]:
    """``W_pi(i)`` for each member: least {i}-graph cost using arrows inside the set only."""
    members = list(members)
    return {i: _forest_weight(V, min_forest(restrict(V, members), members, [i])) for i in members}


def _argmin_unique(values: Dict[int, float], what: str, break_ties: str) -> int:
    best = min(values.values())
    ties = sorted(k for k, v in values.items() if v <= best + _tol(best))
    if len(ties) > 1 and break_ties != LOWEST:
        raise NonGenericTie(f"{what}: states {ties} tie at {best:g}")
    return ties[0]


def cycle_bottom(V: QuasipotentialMatrix, members: Sequence[int], break_ties: str = ERROR) -> Tuple[int, float]:
    rw = restricted_w(V, members)
    b = _argmin_unique(rw, "bottom", break_ties)
    return b, rw[b]


def next_cycle_target(V: QuasipotentialMatrix, pi: Iterable[int], break_ties: str = ERROR,
                      bottom: Optional[int] = None) -> Tuple[float, int]:
    """``A(pi)`` and the first state outside ``pi`` reached from its bottom along the minimizing graph."""
    pi = [i for i in V.labels if i in set(pi)]
    rest = [i for i in V.labels if i not in set(pi)]
    if not pi or not rest:
        raise ValueError("pi must be a proper nonempty subset of the states")
    forest = min_forest(V, V.labels, rest)
    A = _forest_weight(V, forest)
    if bottom is None:
        bottom = cycle_bottom(V, pi, break_ties)[0] if len(pi) > 1 else pi[0]
    piset = set(pi)
    candidates = _near_optimal_forests(V, V.labels, rest, A, _tol(A))
    exits = sorted({_exit_state(g, bottom, piset) for g in candidates} | {_exit_state(forest, bottom, piset)})
    if len(exits) > 1:
        if break_ties != LOWEST:
            raise NonGenericTie(f"exit from {sorted(pi)}: minimizing graphs lead to {exits}")
        return A, exits[0]
    return A, exits[0]


def cycle_exit_constant(V: QuasipotentialMatrix, pi: Iterable[int], A: float) -> float:
    """``C(pi) = A(pi) - min_i W_pi(i)``."""
    rw = restricted_w(V, list(pi))
    return A - min(rw.values())


@dataclass
class CycleNode:
    members: FrozenSet[int]
    rank: int
    children: List["CycleNode"] = field(default_factory=list)
    A: float = math.inf
    C: float = math.inf
    exit_target: Optional[int] = None
    bottom: Optional[int] = None

    @property
    def is_root(self) -> bool:
        return self.exit_target is None

    def walk(self) -> Iterator["CycleNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def child_of(self, state: int) -> "CycleNode":
        for c in self.children:
            if state in c.members:
                return c
        raise KeyError(state)

    def to_json(self) -> dict:
        def num(v):
            return None if v is None or not math.isfinite(v) else float(v)
        return {"members": sorted(self.members), "rank": self.rank, "A": num(self.A), "C": num(self.C),
                "exit_target": self.exit_target, "bottom": self.bottom,
                "children": [c.to_json() for c in self.children]}


def _make_node(V: QuasipotentialMatrix, members, rank, children, break_ties) -> CycleNode:
    members = frozenset(members)
    if len(members) == 1:
        bottom, wmin = next(iter(members)), 0.0
    else:
        bottom, wmin = cycle_bottom(V, sorted(members), break_ties)
    node = CycleNode(members, rank, children, bottom=bottom)
    if len(members) < V.size:
        node.A, node.exit_target = next_cycle_target(V, members, break_ties, bottom)
        node.C = node.A - wmin
    return node


def build_cycle_tree(V: QuasipotentialMatrix, break_ties: str = ERROR) -> CycleNode:
    """Rank-0 singletons, then repeatedly merge the cycles of the "next cycle" map until one node is left."""
    current = [_make_node(V, [i], 0, [], break_ties) for i in V.labels]
    rank = 0
    while len(current) > 1:
        rank += 1
        where = {}
        for k, node in enumerate(current):
            for s in node.members:
                where[s] = k
        nxt = [where[node.exit_target] for node in current]
        # cycles of the functional graph k -> nxt[k]
        on_cycle = {}
        for s in range(len(current)):
            seen = []
            v = s
            while v not in seen and v not in on_cycle:
                seen.append(v)
                v = nxt[v]
            if v in seen and v not in on_cycle:
                cyc = seen[seen.index(v):]
                cid = min(cyc)
                for c in cyc:
                    on_cycle[c] = cid
        groups: Dict[int, List[int]] = {}
        for k, cid in on_cycle.items():
            groups.setdefault(cid, [])
        merged = []
        done = set()
        for k in range(len(current)):
            if k in done:
                continue
            if k in on_cycle:
                # children in traversal order starting from the lowest label
                cyc = [k]
                v = nxt[k]
                while v != k:
                    cyc.append(v)
                    v = nxt[v]
                start = min(range(len(cyc)), key=lambda q: min(current[cyc[q]].members))
                cyc = cyc[start:] + cyc[:start]
                done.update(cyc)
                members = frozenset().union(*(current[c].members for c in cyc))
                merged.append(_make_node(V, members, rank, [current[c] for c in cyc], break_ties))
            else:
                done.add(k)
                merged.append(current[k])
        merged.sort(key=lambda n: min(n.members))
        current = merged
    root = current[0]
    if root.rank == 0 and root.bottom is None:
        root.bottom = next(iter(root.members))
    return root


# ---------------------------------------------------------------------------
# metastable states
# ---------------------------------------------------------------------------

def _check_breakpoint(C: float, lam: float, strict: bool):
    if strict and math.isfinite(C) and abs(C - lam) <= _tol(C):
        raise AtBreakpoint(f"lambda = {lam:g} is a breakpoint")


def _descend(node: CycleNode, entry: int, lam: float, strict: bool, break_ties: str) -> int:
    if not node.children:
        return next(iter(node.members))
    for c in node.children:
        _check_breakpoint(c.C, lam, strict)
    if all(c.C <= lam for c in node.children):
        # the process has traversed all sub-cycles many times and sits in the slowest one
        top = max(c.C for c in node.children)
        slow = [c for c in node.children if c.C >= top - _tol(top)]
        if len(slow) > 1 and break_ties != LOWEST:
            raise NonGenericTie("several sub-cycles share the largest exit constant")
        slow.sort(key=lambda c: min(c.members))
        return _descend(slow[0], slow[0].bottom, lam, strict, break_ties)
    child = node.child_of(entry)
    while child.C <= lam:
        entry = child.exit_target
        child = node.child_of(entry)
    return _descend(child, entry, lam, strict, break_ties)


def metastable_state(tree: CycleNode, V: Optional[QuasipotentialMatrix], start: int, lam: float,
                     strict: bool = False, break_ties: str = ERROR) -> int:
    """State occupied at times of order ``exp(lam / eps^2)`` when started at ``start``.

    The map is right-continuous in ``lam``: at a threshold it already returns
    the state of the following interval. With ``strict`` a ``lam`` at a
    threshold raises :class:`AtBreakpoint` instead.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if start not in tree.members:
        raise KeyError(start)
    return _descend(tree, start, float(lam), strict, break_ties)


@dataclass
class MetastableProfile:
    start: int
    thresholds: List[float]
    states: List[int]

    def state_at(self, lam: float) -> int:
        k = int(np.searchsorted(np.asarray(self.thresholds), lam, side="right"))
        return self.states[k]

    def to_json(self) -> dict:
        return {"start": self.start, "thresholds": [float(t) for t in self.thresholds],
                "states": list(self.states)}


def metastable_profile(tree: CycleNode, V: Optional[QuasipotentialMatrix], start: int,
                       break_ties: str = ERROR) -> MetastableProfile:
    cands = sorted({n.C for n in tree.walk() if math.isfinite(n.C)})
    probes = []
    prev = 0.0
    for c in cands:
        probes.append(0.5 * (prev + c) if c > prev else c)
        prev = c
    probes.append(prev + 1.0)
    states = [metastable_state(tree, V, start, p if p > 0 else 1e-12, break_ties=break_ties) for p in probes]
    thresholds, out = [], [states[0]]
    for c, s in zip(cands, states[1:]):
        if s != out[-1]:
            thresholds.append(c)
            out.append(s)
    return MetastableProfile(start, thresholds, out)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:g}"


def narrative(tree: CycleNode, V: QuasipotentialMatrix, start: Optional[int] = None) -> str:
    """Plain-text walk through the hierarchy, smallest cycles first."""
    lines = []
    nodes = sorted((n for n in tree.walk()), key=lambda n: (n.rank, min(n.members)))
    seen = set()
    for n in nodes:
        key = n.members
        if key in seen:
            continue
        seen.add(key)
        name = "{" + ",".join(str(m) for m in sorted(n.members)) + "}"
        if n.is_root:
            lines.append(f"rank {n.rank}: root cycle {name}, bottom O_{n.bottom}")
            continue
        lines.append(f"rank {n.rank}: cycle {name} exits to O_{n.exit_target} with A={_fmt(n.A)}, "
                     f"C={_fmt(n.C)}, bottom O_{n.bottom}")
    wv = w_values(V)
    lines.append("W: " + ", ".join(f"W(O_{i})={_fmt(w)}" for i, w in wv.items()))
    if start is not None:
        prof = metastable_profile(tree, V, start)
        parts = []
        lo = 0.0
        for k, s in enumerate(prof.states):
            hi = prof.thresholds[k] if k < len(prof.thresholds) else math.inf
            parts.append(f"O_{s} for {_fmt(lo)}<=lambda<{_fmt(hi)}" if k else f"O_{s} for 0<lambda<{_fmt(hi)}")
            lo = hi
        lines.append(f"start O_{start}: " + "; ".join(parts))
    return "\n".join(lines)


def hierarchy_report(V: QuasipotentialMatrix, starts: Optional[Sequence[int]] = None,
                     break_ties: str = ERROR) -> dict:
    tree = build_cycle_tree(V, break_ties)
    starts = list(V.labels) if starts is None else list(starts)
    wv = w_values(V)
    return {"matrix": V.to_json(),
            "W": {str(i): w for i, w in wv.items()},
            "argmin_W": _argmin_unique(wv, "argmin W", break_ties),
            "tree": tree.to_json(),
            "profiles": [metastable_profile(tree, V, s, break_ties).to_json() for s in starts]}
