"""Benchmark problems, reference solutions and convergence-rate fitting."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import adapt, estimator as est, system as syst
from .element import MorleyFunction, PiecewiseQuadratic, as_piecewise, dof_map
from .mesh import Triangulation, build_initial, unit_square_mesh
from .quadrature import triangle_points, triangle_rule


class PolynomialSolution:
    """Bivariate polynomial with derivatives, as plate deflection data.

    ``coeffs[i, j]`` multiplies x^i y^j.
    """

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=float)
        self._cx = npoly.polyder(self.coeffs, axis=0)
        self._cy = npoly.polyder(self.coeffs, axis=1)
        self._cxx = npoly.polyder(self._cx, axis=0)
        self._cxy = npoly.polyder(self._cx, axis=1)
        self._cyy = npoly.polyder(self._cy, axis=1)

    @property
    def degree(self):
        return self.coeffs.shape[0] + self.coeffs.shape[1] - 2

    def value(self, x, y):
        return npoly.polyval2d(x, y, self.coeffs)

    def gradient(self, x, y):
        return np.stack([npoly.polyval2d(x, y, self._cx),
                         npoly.polyval2d(x, y, self._cy)], axis=-1)

    def hessian(self, x, y):
        hxx = npoly.polyval2d(x, y, self._cxx)
        hxy = npoly.polyval2d(x, y, self._cxy)
        hyy = npoly.polyval2d(x, y, self._cyy)
        out = np.empty(np.shape(hxx) + (2, 2))
        out[..., 0, 0] = hxx
        out[..., 0, 1] = out[..., 1, 0] = hxy
        out[..., 1, 1] = hyy
        return out

    def biharmonic(self):
        """Coefficients of u_xxxx + 2 u_xxyy + u_yyyy."""
        cxxxx = npoly.polyder(self._cxx, m=2, axis=0)
        cxxyy = npoly.polyder(self._cxx, m=2, axis=1)
        cyyyy = npoly.polyder(self._cyy, m=2, axis=1)
        n = max(c.shape[0] for c in (cxxxx, cxxyy, cyyyy))
        m = max(c.shape[1] for c in (cxxxx, cxxyy, cyyyy))
        out = np.zeros((n, m))
        for c, w in ((cxxxx, 1.0), (cxxyy, 2.0), (cyyyy, 1.0)):
            out[:c.shape[0], :c.shape[1]] += w * c
        return PolynomialSolution(out)


@dataclass(frozen=True)
class ProblemSpec:
    """A benchmark: initial mesh, load, material and optional exact solution."""

    name: str
    mesh0: Triangulation
    f: object
    material: syst.PlateMaterial
    exact: object = None


# x^2 (1-x)^2 as 1D coefficients.
_BUBBLE4 = np.array([0.0, 0.0, 1.0, -2.0, 1.0])
# x^2 (1-x^2)^2, vanishing with its derivative at -1, 0 and 1.
_BUBBLE6 = np.array([0.0, 0.0, 1.0, 0.0, -2.0, 0.0, 1.0])


def problem_square_smooth(material=None):
    """Clamped unit square with u = x^2 (1-x)^2 y^2 (1-y)^2.

    The load is the plate operator applied to u, which for this material
    family reduces to ``factor * biharmonic(u)``.
    """
    material = material or syst.default_material()
    u = PolynomialSolution(np.outer(_BUBBLE4, _BUBBLE4))
    lap2 = u.biharmonic()
    factor = material.factor

    def f(x, y):
        return factor * lap2.value(x, y)

    return ProblemSpec("square_smooth", unit_square_mesh(), f, material, u)


def lshape_mesh():
    """Six-triangle mesh of (-1,1)^2 minus the fourth quadrant, with the
    diagonals meeting at the re-entrant corner."""
    pts = [(-1.0, -1.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 0.0),
           (1.0, 0.0), (-1.0, 1.0), (0.0, 1.0), (1.0, 1.0)]
    cells = [(0, 1, 3), (0, 3, 2), (3, 6, 5), (3, 5, 2),
             (3, 4, 7), (3, 7, 6)]
    return build_initial(pts, cells)


def problem_lshape(material=None):
    """L-shaped domain with unit load; the re-entrant corner at the origin
    limits the regularity, so uniform refinement converges suboptimally."""
    material = material or syst.default_material()

    def f(x, y):
        return np.ones_like(np.asarray(x, dtype=float))

    return ProblemSpec("lshape", lshape_mesh(), f, material, None)


PROBLEMS = {
    "square_smooth": problem_square_smooth,
    "lshape": problem_lshape,
}


def clamped_polynomial(problem_name, extra=None):
    """H^2_0-conforming polynomial on the benchmark domain, optionally
    multiplied by a quadratic; used to generate randomized smooth inputs."""
    from scipy.signal import convolve2d

    base = _BUBBLE4 if problem_name == "square_smooth" else _BUBBLE6
    C = np.outer(base, base)
    if extra is not None:
        C = convolve2d(C, np.asarray(extra, dtype=float))
    return PolynomialSolution(C)


def random_clamped_polynomial(problem_name, rng):
    return clamped_polynomial(problem_name, extra=rng.standard_normal((3, 3)))


# -- reference solutions -------------------------------------------------


def cache_dir():
    return Path(os.environ.get("MORLEYFEM_CACHE", ".morleyfem_cache"))


def reference_solution(problem, min_dofs, theta=0.3, boundary_jumps="trace",
                       volume_degree=4, directory=None):
    """Adaptive solution with at least ``min_dofs`` unknowns.

    Results are cached on disk, keyed by the full configuration.  The cache
    stores the marked elements of every step as forest-independent paths and
    the dof values keyed by coordinates, so a cached reference can be
    replayed into any process (and any pre-populated forest) built from the
    same initial mesh, without re-solving.
    """
    directory = Path(directory) if directory is not None else cache_dir()
    key = hashlib.sha256(json.dumps({
        "problem": problem.name, "mesh": problem.mesh0.content_hash(),
        "E": problem.material.e_modulus, "nu": problem.material.poisson,
        "min_dofs": min_dofs, "theta": theta, "bj": boundary_jumps,
        "deg": volume_degree}, sort_keys=True).encode()).hexdigest()[:24]
    path = directory / f"reference-{problem.name}-{key}.npz"

    if path.exists():
        try:
            return _load_reference(path, problem.mesh0)
        except Exception:
            path.unlink()  # stale or incompatible cache, rebuild

    marked_paths = []
    mesh = problem.mesh0
    while True:
        u = syst.solve(syst.assemble(mesh, problem.material, problem.f,
                                     volume_degree))
        if len(dof_map(mesh).free) >= min_dofs:
            break
        field = est.indicators(u, problem.f, boundary_jumps, volume_degree)
        marked = adapt.doerfler_mark(field.eta_sq, theta)
        if marked.size == 0:
            break
        marked_paths.append(mesh.element_paths(marked))
        mesh = mesh.bisect(marked)

    directory.mkdir(parents=True, exist_ok=True)
    _save_reference(path, marked_paths, u)
    return u


def _save_reference(path, marked_paths, u):
    mesh = u.mesh
    sizes = np.array([len(p) for p in marked_paths], dtype=np.int64)
    stacked = np.vstack(marked_paths) if marked_paths else \
        np.empty((0, 3), dtype=np.uint64)
    np.savez_compressed(
        path, level_sizes=sizes, paths=stacked,
        vertex_xy=mesh.points, vertex_vals=u.vertex_dofs,
        edge_mid=mesh.edge_midpoint, edge_normal=mesh.edge_normal,
        edge_vals=u.edge_dofs)


def _load_reference(path, mesh0):
    data = np.load(path)
    mesh = mesh0
    offset = 0
    for size in data["level_sizes"]:
        rows = data["paths"][offset:offset + size]
        mesh = mesh.bisect(mesh.resolve_paths(rows))
        offset += size
    vperm = _exact_row_match(data["vertex_xy"], mesh.points)
    eperm = _exact_row_match(data["edge_mid"], mesh.edge_midpoint)
    # Median-edge normals depend on vertex creation order, so realign signs.
    sign = np.sign(np.einsum("ed,ed->e", data["edge_normal"],
                             mesh.edge_normal[eperm]))
    coeffs = np.empty(mesh.num_vertices + mesh.num_edges)
    coeffs[vperm] = data["vertex_vals"]
    coeffs[mesh.num_vertices + eperm] = data["edge_vals"] * sign
    return MorleyFunction(mesh, coeffs)


def _exact_row_match(stored, current):
    """Permutation mapping each stored coordinate row to its (bitwise equal)
    row in ``current``."""
    if stored.shape != current.shape:
        raise ValueError("row sets differ in size")
    si = np.lexsort((stored[:, 1], stored[:, 0]))
    ci = np.lexsort((current[:, 1], current[:, 0]))
    if not np.array_equal(stored[si], current[ci]):
        raise ValueError("coordinate sets differ")
    out = np.empty(len(stored), dtype=np.int64)
    out[si] = ci
    return out


def reference_energy_error(u_ref, u_h, material):
    """Energy distance between discrete solutions on possibly unrelated
    refinements of one initial mesh (computed on the overlay)."""
    common = u_ref.mesh.overlay(u_h.mesh)
    a = as_piecewise(u_ref).transfer_to(common)
    b = as_piecewise(u_h).transfer_to(common)
    diff = PiecewiseQuadratic(common, a.coeffs - b.coeffs)
    return syst.energy_norm(diff, material)


def hessian_error_sq_by_element(exact, u_h, degree=12):
    """Per-element squared L2 norm of the broken Hessian error.

    ``exact`` is either a smooth solution (hessian callable) or a finer
    discrete solution; in the latter case integration happens on the finer
    mesh and is aggregated back to the elements of ``u_h``.
    """
    field = as_piecewise(u_h)
    mesh = field.mesh
    if not isinstance(exact, (MorleyFunction, PiecewiseQuadratic)):
        bary, w = triangle_rule(degree)
        pts = triangle_points(bary, mesh.points[mesh.triangles])
        He = np.asarray(exact.hessian(pts[..., 0].ravel(), pts[..., 1].ravel()))
        He = He.reshape(pts.shape[0], pts.shape[1], 2, 2)
        diff = He - field.hessians()[:, None]
        return mesh.area * np.einsum("q,tqab,tqab->t", w, diff, diff)
    ref = as_piecewise(exact)
    if not ref.mesh.is_refinement_of(mesh):
        raise ValueError("reference must live on a refinement")
    up = field.transfer_to(ref.mesh)
    d = ref.hessians() - up.hessians()
    per_fine = ref.mesh.area * np.einsum("tab,tab->t", d, d)
    out = np.zeros(mesh.num_triangles)
    np.add.at(out, ref.mesh.ancestors_in(mesh), per_fine)
    return out


# -- rates ----------------------------------------------------------------


@dataclass
class RateReport:
    x: np.ndarray
    error: np.ndarray
    eta: np.ndarray
    osc: np.ndarray
    slope_error: float
    slope_eta: float
    slope_total: float
    prefactor: float
    effectivity: np.ndarray
    n_fit: int

    @property
    def effectivity_band(self):
        vals = self.effectivity[np.isfinite(self.effectivity)]
        return float(vals.max() / vals.min()) if vals.size else float("nan")


def loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x), negated so that a
    decay y ~ x^(-s) reports s > 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    coef = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return -float(coef[0]), float(np.exp(coef[1]))


def rate_fit(history, x_axis="dofs", n_fit=None, errors=None):
    """Fit error ~ x^(-s) over the asymptotic tail of a refinement history.

    ``x_axis`` is "dofs" (free dof counts) or "elements" (element count
    above the initial mesh).  ``errors`` overrides the recorded energy
    errors, e.g. with reference-based values.  At least four data points are
    required; the fit uses the last ``n_fit`` (default: the last half).
    """
    eta = history.column("eta")
    osc = history.column("osc")
    error = np.asarray(errors, dtype=float) if errors is not None \
        else history.column("energy_error")
    if x_axis == "dofs":
        x = history.column("dofs")
    elif x_axis == "elements":
        x = history.column("elements") - history.records[0].elements
    else:
        raise ValueError("x_axis must be 'dofs' or 'elements'")

    keep = x > 0
    x, error, eta, osc = x[keep], error[keep], eta[keep], osc[keep]
    if len(x) < 4:
        raise ValueError("rate fitting needs at least 4 data points")
    if n_fit is None:
        n_fit = int(np.ceil(len(x) / 2))
    n_fit = min(n_fit, len(x))
    sl = slice(len(x) - n_fit, None)

    slope_err, prefactor = loglog_slope(x[sl], error[sl])
    slope_eta, _ = loglog_slope(x[sl], eta[sl])
    total = np.sqrt(error ** 2 + osc ** 2)
    slope_total, _ = loglog_slope(x[sl], total[sl])
    with np.errstate(divide="ignore", invalid="ignore"):
        effectivity = eta / error
    return RateReport(x=x, error=error, eta=eta, osc=osc,
                      slope_error=slope_err, slope_eta=slope_eta,
                      slope_total=slope_total, prefactor=prefactor,
                      effectivity=effectivity[sl], n_fit=n_fit)


# -- contraction -----------------------------------------------------------


def contraction_search(errors, eta_tildes, grid=None, start=1):
    """Search a log grid of weights for a strictly decreasing total error.

    Returns the weight minimizing the average per-step factor among those
    with strictly decreasing totals from index ``start`` on, together with
    the factors; ``None`` if no grid point works.
    """
    errors = np.asarray(errors, dtype=float)
    eta_tildes = np.asarray(eta_tildes, dtype=float)
    if grid is None:
        grid = np.logspace(-3, 3, 13)
    best = None
    for gamma in grid:
        total = errors ** 2 + gamma * eta_tildes ** 2
        factors = total[start + 1:] / total[start:-1]
        if factors.size == 0 or np.any(factors >= 1.0):
            continue
        avg = float(np.exp(np.mean(np.log(factors))))
        if best is None or avg < best["average_factor"]:
            best = {"gamma": float(gamma), "average_factor": avg,
                    "factors": factors.tolist()}
    return best
