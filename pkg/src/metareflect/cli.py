"""Command-line driver: ``metareflect <mode> [--config PATH] [options]``.

Every artifact is written atomically into ``--out`` and embeds the resolved
configuration. Failures exit nonzero and print one JSON object describing
the error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import inspect
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from . import fields as fld
from . import geometry as geo
from . import hierarchy as hier
from . import pde_mc as pm
from . import quasipotential as qp
from . import reflect_sde as rs
from .dynamics import find_equilibria, flow
from .errors import ConfigInvalid, MetaReflectError

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as _toml

SCHEMA_VERSION = 1
MODES = ("simulate", "quasipotential", "hierarchy", "pde", "example-disk")

DEFAULTS: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "threads": 1,
    "break_ties": hier.ERROR,
    "domain": {"name": "unit_disk"},
    "drift": {"name": "disk_six_equilibria", "params": {}},
    "metric": {"kind": "identity"},
    "simulate": {"dt": 1e-3, "t_max": 1.0, "x0": [0.0, 0.0], "scheme": "projection",
                 "record_every": 1, "n_trajectories": 1},
    "quasipotential": {"variant": "plain", "all_pairs": False, "n_nodes": 200, "avoid_radius": None,
                       "oracle": False, "grid_resolution": 400},
    "hierarchy": {"matrix": None, "matrix_file": None, "starts": None, "lambdas": []},
    "pde": {"epsilon": 0.5, "t": 1.0, "dt": 1e-3, "n": 10000, "points": [[0.0, 0.0]],
            "g": {"kind": "radial_cos"}, "fd_oracle": True, "grid": [101, 100],
            "long_time": None},
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("matrix", "params"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config: {exc}", key="config") from None
    try:
        if p.suffix.lower() == ".toml":
            return _toml.loads(raw.decode())
        if p.suffix.lower() == ".json":
            return json.loads(raw.decode())
    except (ValueError, _toml.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"cannot parse {p.name}: {exc}", key="config") from None
    raise ConfigInvalid("config must be .toml or .json", key="config")


def _need(section: dict, key: str, prefix: str):
    if key not in section or section[key] is None:
        raise ConfigInvalid(f"missing required key '{prefix}{key}'", key=key)
    return section[key]


def _number(section: dict, key: str, prefix: str, lo: Optional[float] = None, strict: bool = False):
    v = _need(section, key, prefix)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(f"{prefix}{key} must be a number", key=key)
    if lo is not None and (v < lo or (strict and v == lo)):
        raise ConfigInvalid(f"{prefix}{key} = {v} out of range", key=key)
    return float(v)


def resolve_config(user: dict, mode: str, args: argparse.Namespace) -> dict:
    if "schema_version" in user and user["schema_version"] != SCHEMA_VERSION:
        raise ConfigInvalid(f"unsupported schema_version {user['schema_version']}", key="schema_version")
    cfg = _merge(DEFAULTS, user)
    cfg["mode"] = mode
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    if args.threads is not None:
        cfg["threads"] = int(args.threads)
    if args.break_ties is not None:
        cfg["break_ties"] = args.break_ties
    if cfg["break_ties"] not in (hier.ERROR, hier.LOWEST):
        raise ConfigInvalid("break_ties must be 'error' or 'lowest-index'", key="break_ties")
    if mode == "simulate":
        sec = user.get("simulate", {})
        _number(sec, "epsilon", "simulate.", 0.0)
        s = cfg["simulate"]
        _number(s, "dt", "simulate.", 0.0, strict=True)
        _number(s, "t_max", "simulate.", s["dt"])
    elif mode == "hierarchy":
        h = cfg["hierarchy"]
        if h["matrix"] is None and h["matrix_file"] is None:
            raise ConfigInvalid("hierarchy mode needs 'matrix' or 'matrix_file'", key="matrix")
    elif mode == "pde":
        _number(cfg["pde"], "epsilon", "pde.", 0.0)
        _number(cfg["pde"], "t", "pde.", 0.0)
        n = cfg["pde"]["n"]
        if not isinstance(n, int) or n < 2:
            raise ConfigInvalid("pde.n must be an integer >= 2", key="n")
    return cfg


def build_domain(cfg: dict) -> geo.DomainSpec:
    try:
        return geo.domain_from_name(cfg["domain"]["name"])
    except (ValueError, KeyError) as exc:
        raise ConfigInvalid(str(exc), key="domain") from None


def build_metric(cfg: dict, d: int) -> geo.MetricField:
    m = cfg["metric"]
    kind = m.get("kind", "identity")
    if kind == "identity":
        return geo.MetricField.identity(d)
    if kind == "constant":
        return geo.MetricField.constant(np.asarray(_need(m, "matrix", "metric."), dtype=float))
    if kind == "diagonal":
        return geo.MetricField.diagonal(np.asarray(_need(m, "entries", "metric."), dtype=float))
    raise ConfigInvalid(f"unknown metric kind {kind!r}", key="kind")


def build_drift(cfg: dict):
    d = cfg["drift"]
    name = _need(d, "name", "drift.")
    params = dict(d.get("params") or {})
    if name not in fld.NAMED_FIELDS:
        raise ConfigInvalid(f"unknown drift {name!r}", key="name")
    dom = build_domain(cfg)
    metric = build_metric(cfg, dom.dimension)
    sig = inspect.signature(fld.NAMED_FIELDS[name]).parameters
    if "domain" in sig:
        params.setdefault("domain", dom)
    if "metric" in sig:
        params.setdefault("metric", metric)
    try:
        f = fld.field_from_name(name, **params)
    except TypeError as exc:
        raise ConfigInvalid(f"bad drift params: {exc}", key="params") from None
    if f.domain.name != dom.name and cfg["domain"]["name"] != DEFAULTS["domain"]["name"]:
        raise ConfigInvalid(f"drift {name!r} lives on {f.domain.name}", key="domain")
    return f


def build_g(spec: dict):
    kind = spec.get("kind", "radial_cos")
    if kind == "constant":
        c = float(spec.get("value", 1.0))
        return lambda x: np.full(np.asarray(x).shape[:-1], c)
    if kind == "radial_cos":
        return lambda x: np.cos(np.pi * np.linalg.norm(np.asarray(x), axis=-1))
    if kind == "linear":
        w = np.asarray(spec.get("weights", [1.0, 0.0]), dtype=float)
        return lambda x: np.asarray(x) @ w
    if kind == "bump":
        return pm.basin_indicator(_need(spec, "center", "pde.g."), float(spec.get("width", 0.25)))
    raise ConfigInvalid(f"unknown g kind {kind!r}", key="kind")


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

class Writer:
    """Atomic writes (temp file in the target directory, then rename)."""

    def __init__(self, out: str):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []

    def text(self, name: str, content: str) -> Path:
        target = self.dir / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(content)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(name)
        return target

    def json(self, name: str, payload: dict) -> Path:
        return self.text(name, json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, geo.DomainSpec):
        return obj.name
    if isinstance(obj, geo.MetricField):
        return obj.label
    return obj


def _envelope(cfg: dict, body: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "version": __version__, "config": cfg, **body}


def _table(rows: List[List[str]]) -> str:
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _path_csv(times, points, local_time, flags) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = points.shape[1]
    w.writerow(["t"] + [f"x_{k + 1}" for k in range(d)] + ["xi", "on_boundary"])
    for t, p, xi, b in zip(times, points, local_time, flags):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in p] + [repr(float(xi)), int(bool(b))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def run_simulate(cfg: dict, w: Writer) -> str:
    f = build_drift(cfg)
    s = cfg["simulate"]
    x0 = np.asarray(s["x0"], dtype=float)
    eps = float(s["epsilon"])
    rows = [["trajectory", "t_end", "x_end", "xi_end"]]
    summary = []
    n = int(s.get("n_trajectories", 1))
    for k in range(n):
        if eps == 0:
            path, lt = flow(f, x0, float(s["t_max"]), float(s["dt"]), with_local_time=True)
            tol = f.domain.boundary_tolerance
            flags = np.abs(f.domain.sd(path.points)) <= tol
            text = _path_csv(path.times, path.points, lt, flags)
            t_end, x_end, xi_end = path.times[-1], path.points[-1], lt[-1]
        else:
            sc = rs.SimConfig(eps, float(s["dt"]), float(s["t_max"]), int(cfg["seed"]), s["scheme"],
                              int(s["record_every"]))
            tr = rs.simulate(f, sc, x0, traj_index=k)
            text = tr.to_csv()
            t_end, x_end, xi_end = tr.times[-1], tr.states[-1], tr.local_time[-1]
        name = "trajectory.csv" if n == 1 else f"trajectory_{k:04d}.csv"
        w.text(name, text)
        summary.append({"file": name, "t_end": t_end, "x_end": x_end, "xi_end": xi_end})
        rows.append([str(k), f"{t_end:.4g}", np.array2string(np.asarray(x_end), precision=4), f"{xi_end:.4g}"])
    w.json("simulate.json", _envelope(cfg, {"trajectories": summary}))
    return _table(rows)


def _matrix_rows(m: qp.QuasipotentialMatrix) -> List[List[str]]:
    rows = [["V"] + [f"O_{j}" for j in m.labels]]
    for i, lab in enumerate(m.labels):
        rows.append([f"O_{lab}"] + [f"{v:.4f}" for v in m.values[i]])
    return rows


def run_quasipotential(cfg: dict, w: Writer, variant: Optional[str] = None,
                       name: str = "matrix.json") -> str:
    f = build_drift(cfg)
    q = cfg["quasipotential"]
    variant = variant or q["variant"]
    eqs = find_equilibria(f)
    opts = qp.OptimizerOptions(n_nodes=int(q["n_nodes"]), seed=int(cfg["seed"]))
    m = qp.build_matrix(f, eqs, variant, opts, all_pairs=bool(q["all_pairs"]),
                        avoid_radius=q["avoid_radius"], workers=int(cfg["threads"]))
    body = {"equilibria": [e.as_dict() for e in eqs], "matrix": m.to_json()}
    out = _table(_matrix_rows(m))
    if q.get("oracle"):
        om = qp.oracle_matrix(f, eqs, int(q["grid_resolution"]), bool(q["all_pairs"]))
        body["oracle"] = om.to_json()
        off = ~np.eye(m.size, dtype=bool)
        rel = np.abs(m.values - om.values)[off] / np.maximum(np.abs(om.values[off]), 1e-12)
        body["max_relative_gap"] = float(np.max(rel, initial=0.0))
        out += f"\noracle max relative gap: {body['max_relative_gap']:.3%}"
    w.json(name, _envelope(cfg, body))
    return out


def _load_matrix(cfg: dict) -> qp.QuasipotentialMatrix:
    h = cfg["hierarchy"]
    if h.get("matrix") is not None:
        data = h["matrix"]
    else:
        try:
            data = json.loads(Path(h["matrix_file"]).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"cannot read matrix_file: {exc}", key="matrix_file") from None
    if "matrix" in data and "values" not in data:
        data = data["matrix"]
    try:
        m = qp.QuasipotentialMatrix.from_json(data)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigInvalid(f"bad matrix: {exc}", key="matrix") from None
    m.check()
    return m


def hierarchy_body(m: qp.QuasipotentialMatrix, starts, lambdas, break_ties: str) -> dict:
    stable, umap = hier.stability_partition(m)
    core = hier.restrict(m, stable) if umap else m
    report = hier.hierarchy_report(core, starts, break_ties)
    tree = hier.build_cycle_tree(core, break_ties)
    queries = [{"start": s, "lambda": lam, "state": hier.metastable_state(tree, core, s, lam, break_ties=break_ties)}
               for s in (starts or core.labels) for lam in lambdas]
    report["unstable_map"] = {str(k): v for k, v in umap.items()}
    report["queries"] = queries
    report["narrative"] = hier.narrative(tree, core).split("\n")
    return report


def run_hierarchy(cfg: dict, w: Writer) -> str:
    m = _load_matrix(cfg)
    h = cfg["hierarchy"]
    body = hierarchy_body(m, h["starts"], [float(v) for v in h["lambdas"]], cfg["break_ties"])
    w.json("hierarchy.json", _envelope(cfg, body))
    w.text("narrative.txt", "\n".join(body["narrative"]) + "\n")
    return "\n".join(body["narrative"])


def run_pde(cfg: dict, w: Writer) -> str:
    f = build_drift(cfg)
    s = cfg["pde"]
    prob = pm.PdeProblem(f, build_g(s.get("g", {})), float(s["epsilon"]))
    t = float(s["t"])
    sim = rs.SimConfig(prob.epsilon, float(s["dt"]), max(t, float(s["dt"])), int(cfg["seed"]))
    field_ = None
    if s.get("fd_oracle") and f.domain.name == "unit_disk":
        nr, nt = s.get("grid", [101, 100])
        field_ = pm.fd_oracle(prob, pm.PolarGrid(int(nr), int(nt)), t, float(s["dt"]))
        w.text("fd_oracle.csv", field_.to_csv())
    rows = [["x", "estimate", "stderr", "fd_oracle"]]
    ests = []
    for k, x in enumerate(s["points"]):
        est = pm.estimate_u(prob, x, t, int(s["n"]), sim, first_index=k * int(s["n"]),
                            workers=int(cfg["threads"]))
        d = est.as_dict()
        if field_ is not None:
            d["fd_oracle"] = float(field_(np.asarray(x, dtype=float)))
        ests.append(d)
        rows.append([str(list(x)), f"{est.mean:.5f}", f"{est.stderr:.5f}",
                     f"{d['fd_oracle']:.5f}" if "fd_oracle" in d else "-"])
    body = {"estimates": ests}
    lt = s.get("long_time")
    if lt:
        m = _load_matrix({"hierarchy": {"matrix": lt.get("matrix"), "matrix_file": lt.get("matrix_file")}}) \
            if (lt.get("matrix") or lt.get("matrix_file")) else None
        eqs = find_equilibria(f)
        if m is None:
            m = qp.build_matrix(f, eqs, lt.get("variant", qp.AVOIDING))
        tree = hier.build_cycle_tree(m, cfg["break_ties"])
        lsim = rs.SimConfig(prob.epsilon, float(lt.get("dt", s["dt"])), 1.0, int(cfg["seed"]))
        table = pm.check_long_time_limit(prob, lt.get("x", s["points"][0]), lt["lambdas"], tree, eqs, lsim,
                                         int(lt.get("n", 200)), lt.get("epsilons"), lt.get("start"),
                                         workers=int(cfg["threads"]))
        w.text("long_time.csv", pm.report_csv(table))
        body["long_time"] = [r.as_dict() for r in table]
    w.json("pde.json", _envelope(cfg, body))
    return _table(rows)


EXAMPLE_ANSWER_BELOW = "\u03bb<1 \u2192 g(O_1)"
EXAMPLE_ANSWER_ABOVE = "\u03bb\u22651 \u2192 g(O_3)"


def run_example_disk(cfg: dict, w: Writer, compute_v: bool, monte_carlo: bool) -> str:
    m = qp.example_matrix()
    body = hierarchy_body(m, [1], [0.5, 1.0, 2.0], cfg["break_ties"])
    prof = body["profiles"][0]
    answer = []
    lo = 0.0
    for k, state in enumerate(prof["states"]):
        hi = prof["thresholds"][k] if k < len(prof["thresholds"]) else None
        if hi is None:
            answer.append(f"\u03bb\u2265{lo:g} \u2192 g(O_{state})")
        elif k == 0:
            answer.append(f"\u03bb<{hi:g} \u2192 g(O_{state})")
        else:
            answer.append(f"{lo:g}\u2264\u03bb<{hi:g} \u2192 g(O_{state})")
        lo = hi if hi is not None else lo
    body["answer"] = answer
    w.json("example_hierarchy.json", _envelope(cfg, body))
    lines = list(body["narrative"]) + answer
    if compute_v:
        ccfg = _merge(cfg, {"drift": {"name": "disk_six_equilibria", "params": {}},
                            "quasipotential": {"oracle": True}})
        lines.append("computed avoiding matrix (disk_six_equilibria):")
        lines.append(run_quasipotential(ccfg, w, qp.AVOIDING, "example_matrix_computed.json"))
    if monte_carlo:
        lines.append(_example_monte_carlo(cfg, w))
    w.text("example_summary.txt", "\n".join(lines) + "\n")
    return "\n".join(lines)


def _example_monte_carlo(cfg: dict, w: Writer) -> str:
    """Feasible-horizon trend table on the shipped six-equilibrium drift."""
    f = fld.disk_six_equilibria()
    eqs = find_equilibria(f)
    locs = {e.index: e.location for e in eqs}
    tree = hier.build_cycle_tree(qp.example_matrix())
    g = pm.basin_indicator(locs[3], 0.5)
    prob = pm.PdeProblem(f, g, 0.5)
    sim = rs.SimConfig(0.5, 2e-3, 1.0, int(cfg["seed"]))
    rows = pm.check_long_time_limit(prob, locs[1], [0.5, 1.5], tree, eqs, sim, 200,
                                    epsilons=[0.6, 0.5], start=1, workers=int(cfg["threads"]))
    w.text("example_long_time.csv", pm.report_csv(rows))
    tab = [["epsilon", "lambda", "T", "estimate", "stderr", "target"]]
    for r in rows:
        tab.append([f"{r.epsilon:g}", f"{r.lam:g}", f"{r.t:.3g}", f"{r.estimate:.3f}", f"{r.stderr:.3f}",
                    f"{r.target:.3f}"])
    return _table(tab)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metareflect", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        sp = sub.add_parser(mode)
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="out")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--break-ties", dest="break_ties", choices=[hier.ERROR, hier.LOWEST], default=None)
        if mode == "example-disk":
            sp.add_argument("--compute-v", action="store_true")
            sp.add_argument("--monte-carlo", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = resolve_config(load_config(args.config), args.mode, args)
        w = Writer(args.out)
        if args.mode == "simulate":
            out = run_simulate(cfg, w)
        elif args.mode == "quasipotential":
            out = run_quasipotential(cfg, w)
        elif args.mode == "hierarchy":
            out = run_hierarchy(cfg, w)
        elif args.mode == "pde":
            out = run_pde(cfg, w)
        else:
            out = run_example_disk(cfg, w, args.compute_v, args.monte_carlo)
    except ConfigInvalid as exc:
        print(json.dumps({"error": "ConfigInvalid", "key": exc.key, "message": str(exc)}))
        return 2
    except MetaReflectError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 1
    print(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
