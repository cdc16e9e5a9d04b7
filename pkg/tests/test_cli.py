import csv
from pathlib import Path

import numpy as np
import pytest

from artifact import cli
from artifact.errors import CheckFailed, ConfigError, MeshError, SolverError
from artifact.mesh import read_gmsh, read_vtk, unit_cube, write_vtk


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(tmp_path, command, text="", *extra):
    out = tmp_path / "out"
    argv = [command, "--out", str(out), *extra]
    if text:
        argv += ["--config", write(tmp_path, text)]
    return cli.main(argv), out


# -- configuration parsing ------------------------------------------------------------
def test_parse_sections_and_tractions():
    cfg = cli.parse_config("[mesh]\ngenerator = cube\nn = 3\n[loads]\ng.2 = 0, 0, -1\nf = gravity:2700\n")
    assert cfg.get("mesh", "n") == 3 and cfg.tractions == {2: "0, 0, -1"}
    loads = cli.build_loads(cfg, "cube")
    np.testing.assert_allclose(loads.g[2].value(np.zeros((1, 3))), [[0, 0, -1]])
    assert loads.f.value(np.zeros((1, 3)))[0, 1] == pytest.approx(-2700 * 9.81e-9)


@pytest.mark.parametrize("text", [
    "[mesh]\ncolour = red\n",
    "[physics]\nE = 1\n",
    "[mesh]\nlevel = two\n",
    "[loads]\ng.top = 0, 0, 1\n",
    "[mesh\n",
])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        cli.parse_config(text)


@pytest.mark.parametrize("text", ["1, 2", "a, b, c", ""])
def test_parse_vector_rejects(text):
    with pytest.raises(ConfigError):
        cli.parse_vector(text)


def test_material_overrides():
    mat = cli.build_material(cli.parse_config("[material]\nE = 200000\nnu = 0.25\n"))
    assert mat.E == 200000 and mat.nu == 0.25
    with pytest.raises(ConfigError):
        cli.build_material(cli.parse_config("[material]\nnu = 0.7\n"))


# -- exit codes ---------------------------------------------------------------------------------
def test_missing_config_file(tmp_path):
    assert cli.main(["solve", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("text, code", [
    ("[mesh]\ngenerator = torus\n", 2),
    ("[mesh]\npath = missing.msh\n", 2),
    ("[functional]\nname = stiffness\n", 2),
    ("[solver]\nmethod = gauss\n", 2),
])
def test_config_exit_codes(tmp_path, text, code):
    assert run(tmp_path, "solve", text)[0] == code


def test_mesh_error_exit_code(tmp_path):
    (tmp_path / "bad.msh").write_text("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n2\n1 0 0\n$EndNodes\n")
    assert run(tmp_path, "solve", "[mesh]\npath = bad.msh\n")[0] == 3


@pytest.mark.parametrize("exc, code", [(ConfigError("x"), 2), (MeshError("x"), 3), (SolverError("x"), 4),
                                       (CheckFailed("x"), 5)])
def test_error_classes_map_to_exit_codes(tmp_path, monkeypatch, exc, code):
    def boom(cfg, args):
        raise exc

    monkeypatch.setitem(cli.HANDLERS, "solve", boom)
    assert run(tmp_path, "solve")[0] == code


def test_negative_refine(tmp_path):
    assert run(tmp_path, "solve", "", "--refine", "-1")[0] == 2


# -- commands ---------------------------------------------------------------------------------
def test_solve_zero_loads(tmp_path):
    code, out = run(tmp_path, "solve", "[mesh]\ngenerator = cube\ndegree = 1\n[loads]\ng.2 = 0, 0, 0\n")
    assert code == 0
    data = read_vtk(out / "solution.vtk")
    assert not data["point_data"]["displacement"].any()
    assert not data["point_data"]["von_mises"].any()


def test_eval_injected_weibull(tmp_path, capsys):
    code, out = run(tmp_path, "eval", "[reliability]\nj = 1.2138e-11\nm = 2\n")
    assert code == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    eta = float(rows[0]["eta"])
    assert f"{eta:.4g}" == f"{287024:.4g}"
    assert float(rows[0]["q05"]) == pytest.approx(65005, rel=1e-3)
    assert f"eta report {round(eta)}" in capsys.readouterr().out


def test_eval_rejects_bad_j(tmp_path):
    assert run(tmp_path, "eval", "[reliability]\nj = -1\n")[0] == 2


def test_check_icosphere_volume(tmp_path):
    text = "[mesh]\ngenerator = icosphere\nlevel = 1\ndegree = 1\n[functional]\nname = volume\n"
    code, out = run(tmp_path, "check", text)
    assert code == 0
    (row,) = list(csv.DictReader(open(out / "check.csv")))
    assert row["status"] == "PASS" and float(row["rel_error"]) < 0.01
    assert float(row["fd"]) == pytest.approx(4 * np.pi, rel=0.02)


def test_check_failure_exit_code(tmp_path):
    text = "[mesh]\ngenerator = icosphere\nlevel = 0\ndegree = 1\n[functional]\nname = volume\n[check]\ntolerance = 1e-12\n"
    code, out = run(tmp_path, "check", text)
    assert code == 5
    assert list(csv.DictReader(open(out / "check.csv")))[0]["status"] == "FAIL"


def test_grad_is_deterministic(tmp_path):
    text = "[mesh]\ngenerator = cantilever\ndegree = 1\n[loads]\ng.2 = 0, 0, -20\n[functional]\nname = cer\n"
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert cli.main(["grad", "--config", write(tmp_path, text), "--out", str(out), "--seed", "3",
                         "--deterministic"]) == 0
        outs.append(out)
    for name in ("dj.csv", "gradient.vtk"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = list(csv.DictReader(open(outs[0] / "dj.csv")))
    assert [r["field"] for r in rows] == ["random:0", "random:1", "random:2"]


def test_random_velocity_vanishes_on_clamp():
    mesh = unit_cube(3)
    V = cli.random_velocity(mesh, 4)
    assert not V.nodal[mesh.dirichlet_vertices].any() and V.nodal.any()
    with pytest.raises(ConfigError):
        cli.velocity_fields("spiral", mesh, 0)


def test_ppp_report(tmp_path):
    text = "[reliability]\nj = 1.2138e-11\nm = 2\nsamples = 20000\ncount_samples = 20000\n"
    code, out = run(tmp_path, "ppp", text)
    assert code == 0
    vals = {r["quantity"]: float(r["value"]) for r in csv.DictReader(open(out / "ppp.csv"))}
    assert vals["ks"] < 0.02
    assert vals["mean_T"] == pytest.approx(vals["mean_T_exact"], rel=0.03)
    assert run(tmp_path, "ppp", "[reliability]\nm = 2\n")[0] == 2


def test_rodgen_family(tmp_path):
    code, out = run(tmp_path, "rodgen")
    assert code == 0
    names = sorted(p.name for p in out.glob("*.msh"))
    assert names == ["omega0.msh", "omega1.msh", "omega2.msh"]
    m = read_gmsh(out / "omega1.msh")
    assert m.degree == 2 and len(m.dirichlet_vertices) > 0


def test_optimize_writes_trace(tmp_path):
    text = ("[mesh]\ngenerator = cantilever\ndegree = 1\n[loads]\ng.2 = 0, 0, -30\n[functional]\nname = cer\n"
            "[descent]\nmethod = L2\nmax_iters = 2\n")
    code, out = run(tmp_path, "optimize", text)
    assert code == 0
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert len(rows) == 2 and float(rows[1]["j"]) < float(rows[0]["j"])
    assert (out / "iter_002.vtk").exists()


# -- VTK format ----------------------------------------------------------------------------------
def test_vtk_mixed_point_data(tmp_path):
    mesh = unit_cube(1)
    p = tmp_path / "f.vtk"
    write_vtk(p, mesh, {"s": np.arange(len(mesh.points), dtype=float), "v": mesh.points})
    text = p.read_text()
    assert text.count("POINT_DATA") == 1 and "SCALARS s" in text and "VECTORS v" in text
    back = read_vtk(p)
    np.testing.assert_allclose(back["points"], mesh.points, atol=1e-9)
    np.testing.assert_allclose(back["point_data"]["v"], mesh.points, atol=1e-9)
    write_vtk(tmp_path / "g.vtk", mesh, {"s": np.arange(len(mesh.points), dtype=float), "v": mesh.points})
    assert (tmp_path / "g.vtk").read_bytes() == p.read_bytes()


def test_configs_parse():
    for path in sorted(Path(__file__).parents[1].joinpath("configs").glob("*.ini")):
        cli.load_config(str(path))
