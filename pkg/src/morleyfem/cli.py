"""Command-line driver: adaptive/uniform runs and verification suites.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 suite
assertion failure.  All outputs of one run land in a timestamped directory
under the chosen output root, with the configuration echoed verbatim.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import adapt, bench, verify
from . import estimator as est
from . import system as syst
from .element import as_piecewise
from .mesh import MeshError, load_mesh
from .system import SolverError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_SUITE = 4


@dataclass
class RunConfig:
    mode: str = "adaptive"            # adaptive | uniform | verify:<suite>
    problem: str = "square_smooth"
    mesh_file: str = ""
    theta: float = 0.3
    eps: float = 0.0
    max_dofs: int = 20000
    max_iters: int = 30
    e_modulus: float = 12.0 * (1.0 - 0.3 ** 2)
    poisson: float = 0.3
    boundary_jumps: str = "trace"
    out_dir: str = "runs"
    seed: int = 0
    vtk: bool = True

    def validate(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta {self.theta} outside the legal range (0, 1)")
        if self.eps < 0:
            raise ValueError(f"eps {self.eps} must be >= 0")
        if self.max_dofs <= 0 or self.max_iters < 0:
            raise ValueError("stop bounds must be positive")
        if self.e_modulus <= 0:
            raise ValueError(f"E {self.e_modulus} outside the legal range (0, inf)")
        if not 0.0 <= self.poisson < 0.5:
            raise ValueError(
                f"nu {self.poisson} outside the legal range [0, 0.5)")
        if self.boundary_jumps not in ("trace", "zero"):
            raise ValueError("boundary_jumps must be 'trace' or 'zero'")
        mode = self.mode
        if mode not in ("adaptive", "uniform") and not mode.startswith("verify:"):
            raise ValueError(f"unknown mode '{mode}'")
        if mode.startswith("verify:") and mode[7:] not in verify.SUITES:
            raise ValueError(f"unknown suite '{mode[7:]}'; available: "
                             f"{', '.join(sorted(verify.SUITES))}")
        if not self.mesh_file and self.problem not in bench.PROBLEMS:
            raise ValueError(f"unknown problem '{self.problem}'; available: "
                             f"{', '.join(sorted(bench.PROBLEMS))}")


_SECTIONS = {
    "run": ["mode", "problem", "mesh_file", "out_dir", "seed", "vtk"],
    "marking": ["theta", "eps", "max_dofs", "max_iters"],
    "material": ["e_modulus", "poisson"],
    "estimator": ["boundary_jumps"],
}


def parse_config(text):
    """Parse the sectioned key=value format into a RunConfig."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"config parse error: {exc}") from exc
    cfg = RunConfig()
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for section, keys in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key in parser.options(section):
            if key not in keys:
                raise ValueError(f"unknown key '{key}' in section [{section}]")
            raw = parser.get(section, key)
            kind = types[key]
            try:
                value = parser.getboolean(section, key) if kind is bool \
                    else kind(raw)
            except ValueError as exc:
                raise ValueError(f"bad value for {key}: {raw!r}") from exc
            setattr(cfg, key, value)
    return cfg


def render_config(cfg):
    out = io.StringIO()
    for section, keys in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {getattr(cfg, key)}\n")
        out.write("\n")
    return out.getvalue()


def build_parser():
    p = argparse.ArgumentParser(
        prog="morleyfem",
        description="Adaptive Morley finite elements for the clamped "
                    "Kirchhoff plate.")
    p.add_argument("mode", nargs="?", default=None,
                   help="adaptive, uniform, or verify:<suite>")
    p.add_argument("--config", help="config file (flags override its values)")
    p.add_argument("--problem", help="benchmark name: "
                   + ", ".join(sorted(bench.PROBLEMS)))
    p.add_argument("--mesh", dest="mesh_file", help="initial mesh file")
    p.add_argument("--theta", type=float, help="bulk parameter in (0, 1)")
    p.add_argument("--eps", type=float, help="estimator tolerance")
    p.add_argument("--max-dofs", type=int, dest="max_dofs")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--material", help="E,nu pair, e.g. 10.92,0.3")
    p.add_argument("--boundary-jumps", dest="boundary_jumps",
                   choices=["trace", "zero"])
    p.add_argument("--out", dest="out_dir", help="output root directory")
    p.add_argument("--seed", type=int, help="seed for randomized suites")
    p.add_argument("--uniform", action="store_true",
                   help="disable marking and refine every element")
    p.add_argument("--no-vtk", action="store_true", help="skip VTK output")
    return p


def config_from_args(args):
    if args.config:
        text = Path(args.config).read_text()
        cfg = parse_config(text)
        cfg._source_text = text
    else:
        cfg = RunConfig()
        cfg._source_text = None
    for key in ("problem", "mesh_file", "theta", "eps", "max_dofs",
                "max_iters", "boundary_jumps", "out_dir", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if args.material:
        try:
            e, nu = (float(v) for v in args.material.split(","))
        except ValueError as exc:
            raise ValueError("--material expects 'E,nu'") from exc
        cfg.e_modulus, cfg.poisson = e, nu
    if args.mode:
        cfg.mode = args.mode
    if args.uniform:
        cfg.mode = "uniform"
    if args.no_vtk:
        cfg.vtk = False
    return cfg


def _limit_threads():
    cap = os.environ.get("AFEM_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(cap))
    except Exception:
        pass


def _run_dir(cfg):
    root = Path(cfg.out_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    slug = cfg.mode.replace(":", "-")
    path = root / f"{slug}-{stamp}"
    n = 1
    while path.exists():
        path = root / f"{slug}-{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def export_vtk(u_h, path, indicator_field=None):
    """Legacy ASCII VTK: vertex deflections as point data, Hessian norm and
    the estimator as cell data."""
    mesh = u_h.mesh
    H = as_piecewise(u_h).hessians()
    hnorm = np.sqrt(np.einsum("tab,tab->t", H, H))
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("morleyfem solution\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.num_vertices} double\n")
        for x, y in mesh.points:
            fh.write(f"{x} {y} 0.0\n")
        nt = mesh.num_triangles
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for tri in mesh.triangles:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("\n".join(["5"] * nt) + "\n")
        fh.write(f"POINT_DATA {mesh.num_vertices}\n")
        fh.write("SCALARS deflection double 1\nLOOKUP_TABLE default\n")
        fh.write("\n".join(str(v) for v in u_h.vertex_dofs) + "\n")
        fh.write(f"CELL_DATA {nt}\n")
        fh.write("SCALARS hessian_frobenius double 1\nLOOKUP_TABLE default\n")
        fh.write("\n".join(str(v) for v in hnorm) + "\n")
        if indicator_field is not None:
            fh.write("SCALARS eta double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(str(v) for v in indicator_field.eta) + "\n")


def _problem_from_config(cfg):
    material = syst.PlateMaterial(cfg.e_modulus, cfg.poisson)
    if cfg.mesh_file:
        mesh0 = load_mesh(cfg.mesh_file)

        def f(x, y):
            return np.ones_like(np.asarray(x, dtype=float))

        return bench.ProblemSpec(Path(cfg.mesh_file).stem, mesh0, f,
                                 material, None)
    return bench.PROBLEMS[cfg.problem](material)


def run(cfg):
    """Execute one configuration; returns a process exit code."""
    try:
        cfg.validate()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _limit_threads()
    out = _run_dir(cfg)
    echo = getattr(cfg, "_source_text", None)
    (out / "config.txt").write_text(echo if echo else render_config(cfg))

    try:
        if cfg.mode.startswith("verify:"):
            report = verify.run_suite(cfg.mode[7:], seed=cfg.seed)
            (out / "report.json").write_text(json.dumps(report, indent=2))
            (out / "report.md").write_text(report_markdown(report))
            print(report_markdown(report))
            print(f"outputs in {out}")
            return EXIT_OK if report["passed"] else EXIT_SUITE

        problem = _problem_from_config(cfg)
        mesh, u, history = adapt.anfem(
            problem.mesh0, problem.f, problem.material, eps=cfg.eps,
            theta=cfg.theta, max_iters=cfg.max_iters, max_dofs=cfg.max_dofs,
            boundary_jumps=cfg.boundary_jumps, exact=problem.exact,
            uniform=cfg.mode == "uniform")
        history.save_csv(out / "history.csv")
        u.save(out / "solution.json")
        field = est.indicators(u, problem.f, cfg.boundary_jumps)
        field.to_csv(out / "indicators.csv")
        mesh.save_text(out / "mesh.txt")
        if cfg.vtk:
            export_vtk(u, out / "solution.vtk", field)
        last = history.records[-1]
        print(f"finished after {last.k + 1} levels: {last.elements} elements, "
              f"{last.dofs} dofs, eta={last.eta:.3e}")
        print(f"outputs in {out}")
        return EXIT_OK
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (MeshError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def report_markdown(report):
    lines = [f"# suite {report['suite']}",
             f"overall: {'PASS' if report['passed'] else 'FAIL'}", ""]
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        lines.append(f"- {status} {c['name']}: value={c['value']:.3e} "
                     f"threshold={c['threshold']:.3e}")
    return "\n".join(lines) + "\n"


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
