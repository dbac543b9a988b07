import json

import numpy as np
import pytest

from metareflect import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    return code, out


def write(path, text):
    path.write_text(text)
    return str(path)


def snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_example_disk_answer_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out = run(capsys, "example-disk", "--out", str(a))
    assert code == 0
    assert cli.EXAMPLE_ANSWER_BELOW in out and cli.EXAMPLE_ANSWER_ABOVE in out
    assert run(capsys, "example-disk", "--out", str(b))[0] == 0
    assert snapshot(a) == snapshot(b)
    data = json.loads((a / "example_hierarchy.json").read_text())
    assert data["schema_version"] == cli.SCHEMA_VERSION
    assert data["argmin_W"] == 3
    assert data["answer"] == [cli.EXAMPLE_ANSWER_BELOW, cli.EXAMPLE_ANSWER_ABOVE]
    assert data["profiles"] == [{"start": 1, "thresholds": [1.0], "states": [1, 3]}]
    assert [q["state"] for q in data["queries"]] == [1, 3, 3]
    assert not [p for p in a.iterdir() if p.name.startswith(".")]


def test_simulate_requires_epsilon(tmp_path, capsys):
    code, out = run(capsys, "simulate", "--out", str(tmp_path))
    assert code == 2
    err = json.loads(out)
    assert err["error"] == "ConfigInvalid" and err["key"] == "epsilon"


def test_simulate_is_seed_deterministic(tmp_path, capsys):
    cfg = write(tmp_path / "s.toml", '[simulate]\nepsilon = 0.3\nt_max = 0.2\nx0 = [0.5, 0.5]\n')
    outs = []
    for name, seed in (("a", "4"), ("b", "4"), ("c", "5")):
        assert run(capsys, "simulate", "--config", cfg, "--seed", seed, "--out", str(tmp_path / name))[0] == 0
        outs.append(snapshot(tmp_path / name))
    assert outs[0] == outs[1]
    assert outs[0]["trajectory.csv"] != outs[2]["trajectory.csv"]
    rows = outs[0]["trajectory.csv"].decode().splitlines()
    assert rows[0] == "t,x_1,x_2,xi,on_boundary" and len(rows) == 202
    meta = json.loads(outs[0]["simulate.json"])
    assert meta["config"]["seed"] == 4 and meta["config"]["simulate"]["epsilon"] == 0.3


def test_simulate_zero_noise_uses_flow(tmp_path, capsys):
    cfg = write(tmp_path / "s.json", json.dumps({"simulate": {"epsilon": 0, "t_max": 1.0, "x0": [0.1, 0.0]}}))
    assert run(capsys, "simulate", "--config", cfg, "--out", str(tmp_path / "o"))[0] == 0
    body = (tmp_path / "o" / "trajectory.csv").read_text().splitlines()
    last = [float(v) for v in body[-1].split(",")]
    assert last[0] == pytest.approx(1.0)
    assert np.hypot(last[1], last[2]) == pytest.approx(1.0, abs=1e-9)


def test_hierarchy_from_inline_matrix_and_file(tmp_path, capsys):
    cfg = write(tmp_path / "h.toml", """
[hierarchy]
lambdas = [0.5, 1.0]
starts = [1]
[hierarchy.matrix]
labels = [1, 3, 5]
variant = "avoiding"
values = [[0, 1, 6], [2, 0, 4], [7, 3, 0]]
""")
    code, out = run(capsys, "hierarchy", "--config", cfg, "--out", str(tmp_path / "h"))
    assert code == 0 and "cycle {1,3} exits to O_5" in out
    data = json.loads((tmp_path / "h" / "hierarchy.json").read_text())
    assert [q["state"] for q in data["queries"]] == [1, 3]
    mfile = tmp_path / "m.json"
    mfile.write_text(json.dumps({"matrix": data["matrix"]}))
    cfg2 = write(tmp_path / "h2.toml", f'[hierarchy]\nmatrix_file = "{mfile}"\n')
    assert run(capsys, "hierarchy", "--config", cfg2, "--out", str(tmp_path / "h2"))[0] == 0
    assert (tmp_path / "h2" / "narrative.txt").read_text() == (tmp_path / "h" / "narrative.txt").read_text()


def test_hierarchy_tie_handling(tmp_path, capsys):
    cfg = write(tmp_path / "t.json", json.dumps(
        {"hierarchy": {"matrix": {"labels": [1, 2], "values": [[0, 1], [1, 0]]}}}))
    code, out = run(capsys, "hierarchy", "--config", cfg, "--out", str(tmp_path / "t"))
    assert code == 1 and json.loads(out)["error"] == "NonGenericTie"
    code, _ = run(capsys, "hierarchy", "--config", cfg, "--break-ties", "lowest-index", "--out", str(tmp_path / "t"))
    assert code == 0


def test_hierarchy_collapses_unstable_states(tmp_path, capsys):
    cfg = write(tmp_path / "u.json", json.dumps({"hierarchy": {"matrix": {
        "labels": [1, 2, 3], "values": [[0, 2, 3], [1, 0, 0], [4, 1.5, 0]]}}}))
    assert run(capsys, "hierarchy", "--config", cfg, "--out", str(tmp_path / "u"))[0] == 0
    data = json.loads((tmp_path / "u" / "hierarchy.json").read_text())
    assert data["unstable_map"] == {"2": 3}
    assert data["tree"]["members"] == [1, 3]


@pytest.mark.parametrize("text,key", [
    ('[hierarchy]\nlambdas = [1.0]\n', "matrix"),
    ('schema_version = 7\n', "schema_version"),
    ('[drift]\nname = "nope"\n[simulate]\nepsilon = 0.1\n', "name"),
    ('[simulate]\nepsilon = -1\n', "epsilon"),
    ('[simulate]\nepsilon = 0.1\ndt = 0\n', "dt"),
    ('this is = = not toml', "config"),
])
def test_config_errors(tmp_path, capsys, text, key):
    mode = "hierarchy" if "hierarchy" in text else "simulate"
    cfg = write(tmp_path / "bad.toml", text)
    code, out = run(capsys, mode, "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 2
    assert json.loads(out)["key"] == key


def test_missing_config_file(tmp_path, capsys):
    code, out = run(capsys, "simulate", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path))
    assert code == 2 and json.loads(out)["key"] == "config"


def test_pde_mode(tmp_path, capsys):
    cfg = write(tmp_path / "p.toml", """
[drift]
name = "zero"
[pde]
epsilon = 0.5
t = 0.2
dt = 2e-3
n = 2000
points = [[0.5, 0.0]]
grid = [30, 16]
""")
    code, out = run(capsys, "pde", "--config", cfg, "--out", str(tmp_path / "p"))
    assert code == 0
    data = json.loads((tmp_path / "p" / "pde.json").read_text())
    (est,) = data["estimates"]
    assert abs(est["mean"] - est["fd_oracle"]) < 3 * est["stderr"] + 0.05
    assert (tmp_path / "p" / "fd_oracle.csv").read_text().startswith("r,theta,u\n")


def test_quasipotential_mode_with_oracle(tmp_path, capsys):
    cfg = write(tmp_path / "q.toml", """
[drift]
name = "disk_two_wells"
[quasipotential]
n_nodes = 40
oracle = true
grid_resolution = 100
""")
    code, out = run(capsys, "quasipotential", "--config", cfg, "--out", str(tmp_path / "q"))
    assert code == 0
    data = json.loads((tmp_path / "q" / "matrix.json").read_text())
    np.testing.assert_allclose(data["matrix"]["values"], [[0, 0.3], [1.0, 0]], rtol=5e-3)
    assert data["max_relative_gap"] < 0.05
    assert [e["stable"] for e in data["equilibria"]] == [True, False, True, False]
