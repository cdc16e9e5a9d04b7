"""Command-line front end.

    artifact COMMAND [--config PATH] [--out DIR] [--seed N] [--deterministic] [--refine K]

Commands: solve, eval, grad, check, ppp, optimize, rodgen. Configuration is
a flat INI file; units are mm, N and MPa. Exit codes: 0 ok, 2 config,
3 mesh, 4 solver, 5 check failed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError, CheckFailed, ConfigError, DomainError

log = logging.getLogger("artifact")

COMMANDS = ("solve", "eval", "grad", "check", "ppp", "optimize", "rodgen")

# section -> {key: parser}; keys starting with "g." are traction entries
_FLOAT, _INT, _STR = float, int, str
SCHEMA = {
    "mesh": {"path": _STR, "generator": _STR, "family": _STR, "length": _FLOAT, "height": _FLOAT,
             "diameter": _FLOAT, "level": _INT, "degree": _INT, "dirichlet_tags": _STR, "n": _INT},
    "material": {"E": _FLOAT, "nu": _FLOAT, "K": _FLOAT, "n_hat": _FLOAT, "sigma_f_prime": _FLOAT,
                 "eps_f_prime": _FLOAT, "b": _FLOAT, "c": _FLOAT, "m": _FLOAT, "sigma_0": _FLOAT,
                 "m_cer": _FLOAT, "amplitude_factor": _FLOAT, "lam": _FLOAT, "mu": _FLOAT},
    "loads": {"f": _STR},
    "functional": {"name": _STR},
    "solver": {"tol": _FLOAT, "method": _STR},
    "descent": {"method": _STR, "c": _FLOAT, "alpha0": _FLOAT, "shrink": _FLOAT, "c1": _FLOAT,
                "max_backtracks": _INT, "max_iters": _INT, "quality_floor": _FLOAT, "step_cap": _FLOAT,
                "cutoff_layers": _FLOAT, "grad_tol": _FLOAT},
    "reliability": {"j": _FLOAT, "m": _FLOAT, "probe_times": _STR, "s_star": _FLOAT, "samples": _INT,
                    "count_samples": _INT, "rho": _FLOAT},
    "check": {"t": _FLOAT, "tolerance": _FLOAT, "fields": _STR},
    "output": {"dir": _STR},
}


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)
    tractions: dict = field(default_factory=dict)  # tag -> spec string
    base_dir: str = "."

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)


def parse_vector(text: str) -> np.ndarray:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected a comma triple, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ConfigError(f"bad vector {text!r}") from exc


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    """Parse INI text; unknown sections or keys raise ConfigError."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    cfg = RunConfig(base_dir=base_dir)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        vals = {}
        for key, raw in cp.items(sec):
            if sec == "loads" and key.startswith("g."):
                try:
                    cfg.tractions[int(key[2:])] = raw.strip()
                except ValueError as exc:
                    raise ConfigError(f"traction key {key!r} needs an integer tag") from exc
                continue
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                vals[key] = SCHEMA[sec][key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r}") from exc
        cfg.sections[sec] = vals
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path!r} not found")
    with open(path) as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))


# -- building blocks from the config -----------------------------------------------------------
def build_material(cfg: RunConfig):
    from .fem import MaterialParams

    try:
        return MaterialParams(**cfg.sections.get("material", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"material: {exc}") from exc


def _field_spec(text: str):
    """Constant triple, ``rod`` (bent-rod end traction) or ``gravity:<density kg/m^3>``."""
    from .mesh import ROD_TRACTION

    t = text.strip().lower()
    if t == "rod":
        return np.array(ROD_TRACTION)
    if t.startswith("gravity:"):
        rho = float(t.split(":", 1)[1])
        return np.array([0.0, -rho * 9.81e-9, 0.0])  # N/mm^3
    return parse_vector(text)


def build_loads(cfg: RunConfig, generator: str | None):
    from .fem import Loads

    f = cfg.get("loads", "f")
    g = {tag: _field_spec(spec) for tag, spec in cfg.tractions.items()}
    if generator == "rod" and "loads" not in cfg.sections and not cfg.tractions:
        from .mesh import ROD_LOAD

        g = {ROD_LOAD: _field_spec("rod")}
    return Loads.make(_field_spec(f) if f else None, g)


def build_mesh(cfg: RunConfig, refine: int = 0):
    from . import mesh as M

    degree = cfg.get("mesh", "degree", 2)
    if degree not in (1, 2):
        raise ConfigError("mesh.degree must be 1 or 2")
    path = cfg.get("mesh", "path")
    if path:
        path = path if os.path.isabs(path) else os.path.join(cfg.base_dir, path)
        if not os.path.isfile(path):
            raise ConfigError(f"mesh file {path!r} not found")
        roles = None
        dt = cfg.get("mesh", "dirichlet_tags")
        if dt:
            try:
                roles = {int(t): M.DIRICHLET for t in dt.split(",")}
            except ValueError as exc:
                raise ConfigError(f"bad dirichlet_tags {dt!r}") from exc
        m = M.read_gmsh(path, roles)
        for _ in range(refine):
            m = m.refine_uniform()
        return m.to_degree(degree), None
    gen = cfg.get("mesh", "generator", "rod").lower()
    level = cfg.get("mesh", "level", 0) + refine
    if gen == "rod":
        fam = cfg.get("mesh", "family", "omega1")
        if fam not in M.ROD_FAMILY:
            raise ConfigError(f"unknown rod family member {fam!r}")
        L, H = M.ROD_FAMILY[fam]
        rings, stations = M.rod_resolution(level)
        m = M.bent_rod(cfg.get("mesh", "length", L), cfg.get("mesh", "height", H),
                       cfg.get("mesh", "diameter", 1.0), rings, stations, degree)
    elif gen == "icosphere":
        m = M.icosphere_ball(2 + level, degree=degree)
    elif gen == "cantilever":
        n = 2 ** level
        m = M.cantilever(n=(8 * n, 2 * n, 2 * n), degree=degree)
    elif gen == "cube":
        m = M.unit_cube(cfg.get("mesh", "n", 2) * 2 ** level, degree=degree)
    else:
        raise ConfigError(f"unknown mesh generator {gen!r}")
    return m, gen


def _solver(cfg: RunConfig, deterministic: bool) -> tuple[float, str]:
    tol = cfg.get("solver", "tol", 1e-10)
    method = cfg.get("solver", "method", "auto")
    if method not in ("auto", "direct", "cg", "amg"):
        raise ConfigError(f"unknown solver method {method!r}")
    if deterministic:
        method = "direct"
    return tol, method


@dataclass
class Setup:
    mesh: object
    generator: str | None
    mat: object
    loads: object
    functional: object
    tol: float
    method: str

    def problem(self, mesh=None):
        from .shape_calculus import Problem

        return Problem(mesh or self.mesh, self.mat, self.loads, self.functional, self.mesh.degree, self.tol,
                       self.method)


def build_setup(cfg: RunConfig, args) -> Setup:
    from .functionals import make_functional

    mesh, gen = build_mesh(cfg, args.refine)
    mat = build_material(cfg)
    loads = build_loads(cfg, gen)
    try:
        J = make_functional(cfg.get("functional", "name", "lcf"), mat, loads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tol, method = _solver(cfg, args.deterministic)
    return Setup(mesh, gen, mat, loads, J, tol, method)


def _fmt(x) -> str:
    return "%.9e" % float(x)


def _write_rows(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


# -- velocity fields ---------------------------------------------------------------------------
def velocity_fields(spec: str, mesh, seed: int):
    """Named test fields: ``dilation``, ``random:<k>`` (smooth, vanishing near Gamma_D)."""
    from .shape_calculus import VelocityField

    out = []
    for name in [s.strip() for s in spec.split(",") if s.strip()]:
        if name == "dilation":
            out.append((name, VelocityField.linear(np.eye(3))))
        elif name.startswith("random:"):
            k = int(name.split(":", 1)[1])
            out.append((name, random_velocity(mesh, seed + k)))
        else:
            raise ConfigError(f"unknown velocity field {name!r}")
    return out


def random_velocity(mesh, seed: int, amplitude: float = 0.05):
    """Smooth random nodal field A sin(K x + phi), damped to zero near Gamma_D."""
    from .failure_prob import make_rng
    from .mesh import mean_edge_length
    from .shape_calculus import VelocityField

    rng = make_rng(seed)
    A = rng.standard_normal((3, 3)) * amplitude
    K = rng.uniform(0.3, 0.8, (3, 3))
    phi = rng.uniform(0.0, 2 * np.pi, 3)
    X = mesh.points
    V = np.sin(X @ K.T + phi) @ A.T
    dv = mesh.dirichlet_vertices
    if len(dv):
        from scipy.spatial import cKDTree

        width = 4.0 * mean_edge_length(mesh)
        d, _ = cKDTree(mesh.points[dv]).query(X)
        s = np.clip(d / width, 0.0, 1.0)
        V *= (s ** 3 * (10 - 15 * s + 6 * s * s))[:, None]
    return VelocityField.from_nodal(mesh.snap_midpoints(V), dirichlet_safe=True)


# -- commands ----------------------------------------------------------------------------------
def cmd_solve(cfg: RunConfig, args) -> int:
    from .fem import stress, vertex_averages, von_mises
    from .mesh import write_vtk

    s = build_setup(cfg, args)
    u, _ = s.problem().state()
    space = u.space
    sig = stress(u, s.mat, bary=np.eye(4)).sigma
    sv = np.zeros((len(space.mesh.points), 3, 3))
    sv[space.mesh.vertex_ids] = vertex_averages(space, sig, space.mesh.vertex_ids)
    vm = np.zeros(len(space.mesh.points))
    vm[space.mesh.vertex_ids] = von_mises(sv[space.mesh.vertex_ids])
    write_vtk(os.path.join(args.out, "solution.vtk"), space.mesh,
              {"displacement": u.coefficients, "von_mises": vm})
    print(f"max |u| = {np.max(np.linalg.norm(u.coefficients, axis=1)):.6e}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .failure_prob import hazard_report, write_report_csv

    m = cfg.get("reliability", "m")
    j = cfg.get("reliability", "j")
    if j is None:
        s = build_setup(cfg, args)
        j = s.problem().value()
        m = m if m is not None else s.mat.m
    m = 2.0 if m is None else m
    probe = _probe_times(cfg)
    try:
        rows = hazard_report([j], m, probe, ["design"])
    except DomainError as exc:
        raise ConfigError(f"cannot build Weibull report: {exc}") from exc
    s_star = cfg.get("reliability", "s_star")
    write_report_csv(os.path.join(args.out, "report.csv"), rows, s_star)
    r = rows[0]
    print(f"J = {r.j:.6e}  eta = {r.eta:.6f}  q05 = {r.q05:.6f}  q632 = {r.q632:.6f}  m = {m:g}")
    print(f"eta report {round(r.eta)}")
    return 0


def _probe_times(cfg: RunConfig) -> list[float]:
    txt = cfg.get("reliability", "probe_times")
    if not txt:
        return [1e4, 1e5, 1e6]
    try:
        return [float(t) for t in txt.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad probe_times {txt!r}") from exc


def _linearization(s: Setup):
    from .adjoint_gradient import AdjointSpec, hadamard_density, solve_adjoint
    from .fem import DisplacementField, FunctionSpace
    from .mesh import surface_geometry

    if s.functional.state_dependent:
        u, system = s.problem().state()
        geo = surface_geometry(u.space.mesh)
        p = solve_adjoint(system, u, s.mat, AdjointSpec(s.functional, "weak"), geo, tol=s.tol, method=s.method)
    else:
        space = FunctionSpace(s.mesh, s.mesh.degree)
        u = p = DisplacementField(space, np.zeros((space.n_nodes, 3)))
        geo = surface_geometry(s.mesh)
    return u, p, hadamard_density(u, p, s.mat, s.loads, s.functional, geo)


def cmd_grad(cfg: RunConfig, args) -> int:
    from .adjoint_gradient import dj_from_gradient
    from .mesh import write_vtk

    s = build_setup(cfg, args)
    u, p, G = _linearization(s)
    mesh = u.space.mesh
    write_vtk(os.path.join(args.out, "gradient.vtk"), mesh, {"G": G.vertex_field(len(mesh.points))})
    rows = []
    for name, V in velocity_fields(cfg.get("check", "fields", "random:0,random:1,random:2"), mesh, args.seed):
        rows.append([name, dj_from_gradient(G, V, mesh)])
    _write_rows(os.path.join(args.out, "dj.csv"), ["field", "dJ"], rows)
    for name, v in rows:
        print(f"{name}: dJ = {v:.9e}")
    return 0


def cmd_check(cfg: RunConfig, args) -> int:
    """Hadamard form vs central finite differences on flowed meshes."""
    from .adjoint_gradient import dj_from_gradient
    from .shape_calculus import fd_shape_derivative

    s = build_setup(cfg, args)
    u, p, G = _linearization(s)
    mesh = u.space.mesh
    t = cfg.get("check", "t", 1e-3)
    tol = cfg.get("check", "tolerance", 0.05 if s.functional.name == "lcf" else 0.02)
    default = "dilation" if s.generator == "icosphere" else "random:0,random:1,random:2"
    rows = []
    ok = True
    problem = s.problem(mesh)
    for name, V in velocity_fields(cfg.get("check", "fields", default), mesh, args.seed):
        fd = fd_shape_derivative(problem, V, t, levels=1).value
        had = dj_from_gradient(G, V, mesh)
        err = abs(had - fd) / abs(fd) if fd != 0 else abs(had)
        passed = err <= tol
        ok &= passed
        rows.append([s.functional.name, name, fd, had, err, "PASS" if passed else "FAIL"])
        print(f"{s.functional.name} {name}: FD {fd:.9e} Hadamard {had:.9e} rel {err:.3e} "
              f"{'PASS' if passed else 'FAIL'}")
    _write_rows(os.path.join(args.out, "check.csv"), ["functional", "field", "fd", "hadamard", "rel_error",
                                                      "status"], rows)
    if not ok:
        raise CheckFailed("Hadamard vs FD check failed")
    return 0


def cmd_ppp(cfg: RunConfig, args) -> int:
    from .failure_prob import (
        CrackProcess,
        ks_statistic,
        sample_crack_counts,
        sample_first_failure,
        weibull_cdf,
    )

    j = cfg.get("reliability", "j")
    m = cfg.get("reliability", "m", 2.0)
    if j is None:
        raise ConfigError("ppp needs reliability.j")
    n = cfg.get("reliability", "samples", 200000)
    rho = cfg.get("reliability", "rho", 3.0)
    try:
        proc = CrackProcess(j, m, args.seed)
        T = sample_first_failure(proc, n)
    except (DomainError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    w = proc.weibull
    ks = ks_statistic(T, lambda x: weibull_cdf(w, x))
    s_rho = (rho / j) ** (1.0 / m)
    # P(N = 0) has relative standard error sqrt((1 - p) / (n p)); ~0.3% at rho = 3 needs ~2e6 draws
    counts = sample_crack_counts(proc, s_rho, cfg.get("reliability", "count_samples", 2_000_000))
    p0 = float(np.mean(counts == 0))
    rows = [["eta", w.eta], ["mean_T", float(T.mean())], ["mean_T_exact", w.eta * math.gamma(1 + 1 / m)],
            ["ks", ks], ["p_zero", p0], ["p_zero_exact", math.exp(-rho)]]
    _write_rows(os.path.join(args.out, "ppp.csv"), ["quantity", "value"], rows)
    for k, v in rows:
        print(f"{k} = {v:.9e}")
    return 0


def cmd_optimize(cfg: RunConfig, args) -> int:
    from .descent_optimizer import ArmijoParams, DescentConfig, optimize

    s = build_setup(cfg, args)
    d = dict(cfg.sections.get("descent", {}))
    arm = {k: d.pop(k) for k in ("alpha0", "shrink", "c1", "max_backtracks") if k in d}
    conf = DescentConfig(armijo=ArmijoParams(**arm), out_dir=args.out, weibull_m=s.mat.m, **d)
    trace = optimize(s.problem(), conf)
    print(f"stop: {trace.stop_reason}; J trace: " + " ".join(f"{v:.6e}" for v in trace.j_values))
    return 0


def cmd_rodgen(cfg: RunConfig, args) -> int:
    from .mesh import ROD_CLAMP, ROD_FAMILY, ROD_LOAD, ROD_SURFACE, bent_rod, rod_resolution, write_gmsh

    level = cfg.get("mesh", "level", 0) + args.refine
    degree = cfg.get("mesh", "degree", 2)
    rings, stations = rod_resolution(level)
    fam = cfg.get("mesh", "family")
    names = {ROD_CLAMP: "dirichlet_clamp", ROD_LOAD: "neumann_load", ROD_SURFACE: "neumann_surface"}
    for name, (L, H) in ROD_FAMILY.items():
        if fam and name != fam:
            continue
        m = bent_rod(L, H, cfg.get("mesh", "diameter", 1.0), rings, stations, degree)
        path = os.path.join(args.out, f"{name}.msh")
        write_gmsh(path, m, names)
        print(f"{path}: {len(m.vertex_ids)} vertices, {m.n_cells} cells")
    return 0


HANDLERS = {"solve": cmd_solve, "eval": cmd_eval, "grad": cmd_grad, "check": cmd_check, "ppp": cmd_ppp,
            "optimize": cmd_optimize, "rodgen": cmd_rodgen}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="artifact", description="Shape reliability toolkit")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None, help="INI configuration file")
    ap.add_argument("--out", default=None, help="output directory (default: [output] dir or .)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--deterministic", action="store_true", help="direct solves only")
    ap.add_argument("--refine", type=int, default=0, help="uniform refinement levels")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command: str, cfg: RunConfig, args) -> int:
    if args.refine < 0:
        raise ConfigError("--refine must be >= 0")
    args.out = args.out or cfg.get("output", "dir", ".")
    os.makedirs(args.out, exist_ok=True)
    return HANDLERS[command](cfg, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return run(args.command, cfg, args)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
