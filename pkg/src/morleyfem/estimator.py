"""A posteriori error indicators for the discrete plate problem.

Per element the indicator is

    eta_K = h_K^2 ||f||_L2(K) + (sum_e h_K ||[H(u_h) tau_e]||^2_L2(e))^(1/2)

with the tangential-Hessian jump across interior edges.  Hessians are
constant per element, so every edge integral is exact.  Boundary edges
contribute the full one-sided trace by default (``boundary_jumps="trace"``),
or nothing (``"zero"``); the clamped condition annihilates the tangential
Hessian of the exact solution on the boundary, which makes the trace reading
consistent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .element import as_piecewise, MorleyFunction, PiecewiseQuadratic
from .mesh import MeshError
from .quadrature import triangle_points, triangle_rule
from .system import bilinear

ETA_REDUCTION = 1.0 - 2.0 ** -0.5   # per-element halving gain
FTERM_REDUCTION = 0.75              # h_K^4 quarters under one bisection


@dataclass
class IndicatorField:
    """Per-element estimator data for one discrete solution."""

    mesh: object
    volume_term: np.ndarray   # h_K^2 ||f||_L2(K)
    jump_term: np.ndarray     # square root of the edge-jump sum
    eta: np.ndarray
    eta_sq: np.ndarray
    osc_sq: np.ndarray        # h_K^4 ||f - f_K||^2
    fterm_sq: np.ndarray      # h_K^4 ||f||^2

    def eta_total(self, subset=None):
        return eta_total(self, subset)

    def osc_total(self, subset=None):
        vals = self.osc_sq if subset is None else self.osc_sq[_as_index(subset)]
        return float(np.sqrt(vals.sum()))

    def fterm_total_sq(self, subset=None):
        vals = self.fterm_sq if subset is None else self.fterm_sq[_as_index(subset)]
        return float(vals.sum())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["element_id", "eta_sq", "osc_sq", "fterm_sq",
                             "volume_term", "jump_term"])
            for k in range(len(self.eta)):
                writer.writerow([k, self.eta_sq[k], self.osc_sq[k],
                                 self.fterm_sq[k], self.volume_term[k],
                                 self.jump_term[k]])


def _as_index(subset):
    return np.asarray(sorted(subset) if isinstance(subset, set) else subset,
                      dtype=np.int64)


def jump_terms(u, boundary_jumps="trace"):
    """Per-element edge-jump sums h_K * sum_e ||[H tau_e]||^2_L2(e), (nt,)."""
    if boundary_jumps not in ("trace", "zero"):
        raise ValueError("boundary_jumps must be 'trace' or 'zero'")
    field = as_piecewise(u)
    mesh = field.mesh
    H = field.hessians()

    jump = np.zeros((mesh.num_edges, 2, 2))
    plus, minus = mesh.edge_tris[:, 0], mesh.edge_tris[:, 1]
    interior = ~mesh.edge_is_boundary
    jump[interior] = H[plus[interior]] - H[minus[interior]]
    if boundary_jumps == "trace":
        jump[~interior] = H[minus[~interior]]
    jtau = np.einsum("eab,eb->ea", jump, mesh.edge_tangent)
    edge_sq = mesh.edge_length * np.einsum("ea,ea->e", jtau, jtau)
    return mesh.h * edge_sq[mesh.tri_edge_local].sum(axis=1)


def indicators(u, f, boundary_jumps="trace", volume_degree=4):
    """Compute the indicator field of an elementwise quadratic field."""
    field = as_piecewise(u)
    mesh = field.mesh
    jump_sq = jump_terms(field, boundary_jumps)
    fsq, fmean = f_moments(mesh, f, volume_degree)
    volume = mesh.h ** 2 * np.sqrt(fsq)
    eta = volume + np.sqrt(jump_sq)

    bary, w = triangle_rule(volume_degree)
    pts = triangle_points(bary, mesh.points[mesh.triangles])
    fvals = _eval_f(f, pts)
    osc = mesh.area * np.einsum("q,tq->t", w, (fvals - fmean[:, None]) ** 2)
    return IndicatorField(mesh=mesh, volume_term=volume,
                          jump_term=np.sqrt(jump_sq), eta=eta,
                          eta_sq=eta ** 2, osc_sq=mesh.h ** 4 * osc,
                          fterm_sq=mesh.h ** 4 * fsq)


def _eval_f(f, pts):
    vals = np.asarray(f(pts[..., 0].ravel(), pts[..., 1].ravel()), dtype=float)
    if vals.ndim == 0:
        vals = np.full(pts.shape[0] * pts.shape[1], float(vals))
    return vals.reshape(pts.shape[:2])


def f_moments(mesh, f, degree=4):
    """(||f||^2_L2(K), mean of f over K) per element."""
    bary, w = triangle_rule(degree)
    pts = triangle_points(bary, mesh.points[mesh.triangles])
    fvals = _eval_f(f, pts)
    fsq = mesh.area * np.einsum("q,tq->t", w, fvals ** 2)
    fmean = np.einsum("q,tq->t", w, fvals)
    return fsq, fmean


def eta_total(field, subset=None):
    """Square root of the summed squared indicators over ``subset``."""
    vals = field.eta_sq if subset is None else field.eta_sq[_as_index(subset)]
    return float(np.sqrt(vals.sum()))


def oscillation(f, mesh, subset=None, volume_degree=4):
    field = indicators(PiecewiseQuadratic(mesh, np.zeros((mesh.num_triangles, 6))),
                       f, volume_degree=volume_degree)
    vals = field.osc_sq if subset is None else field.osc_sq[_as_index(subset)]
    return float(np.sqrt(vals.sum()))


def eta_tilde(field, beta1=1.0):
    """Parameter-dependent estimator: adds beta1 * h^4 ||f||^2 per element."""
    if beta1 <= 0:
        raise ValueError("beta1 must be positive")
    return float(np.sqrt((beta1 * field.fterm_sq + field.eta_sq).sum()))


def residual(u_H, f, v, material, volume_degree=4):
    """Residual functional (f, v) - a_h(u_H, v).

    ``v`` may be a Morley function (or elementwise field) on any refinement
    of the mesh of ``u_H``, or a smooth function with ``value``/``hessian``.
    The bilinear form is evaluated on the finest common mesh.
    """
    uf = as_piecewise(u_H)
    if isinstance(v, (MorleyFunction, PiecewiseQuadratic)):
        vf = as_piecewise(v)
        if vf.mesh is not uf.mesh:
            if not vf.mesh.is_refinement_of(uf.mesh):
                raise MeshError("test function must live on a refinement")
            uf = uf.transfer_to(vf.mesh)
        load = l2_product(vf.mesh, f, vf, volume_degree)
        return load - bilinear(uf, vf, material)
    mesh = uf.mesh
    bary, w = triangle_rule(volume_degree)
    pts = triangle_points(bary, mesh.points[mesh.triangles])
    fv = _eval_f(f, pts) * np.asarray(
        v.value(pts[..., 0].ravel(), pts[..., 1].ravel())).reshape(pts.shape[:2])
    load = float(np.einsum("t,q,tq->", mesh.area, w, fv))
    Hv = np.asarray(v.hessian(pts[..., 0].ravel(), pts[..., 1].ravel()))
    Hv = Hv.reshape(pts.shape[0], pts.shape[1], 2, 2)
    CHu = material.apply(uf.hessians())
    form = float(np.einsum("t,q,tab,tqab->", mesh.area, w, CHu, Hv))
    return load - form


def l2_product(mesh, f, field, degree=4):
    bary, w = triangle_rule(degree)
    pts = triangle_points(bary, mesh.points[mesh.triangles])
    fvals = _eval_f(f, pts)
    return float(np.einsum("t,q,tq,tq->", mesh.area, w, fvals,
                           field.values_at_bary(bary)))


def estimator_reduction_check(u_H, f, coarse, fine, boundary_jumps="trace",
                              volume_degree=4, rtol=1e-9):
    """Halving property of the transferred coarse solution.

    Checks per refined coarse element that the children's squared indicators
    sum to at most 2^(-1/2) of the parent's, and globally that
    eta^2(fine) <= eta^2(coarse) - (1 - 2^(-1/2)) eta^2(refined part).
    """
    cf = as_piecewise(u_H)
    transferred = cf.transfer_to(fine)
    field_c = indicators(cf, f, boundary_jumps, volume_degree)
    field_f = indicators(transferred, f, boundary_jumps, volume_degree)
    anc = fine.ancestors_in(coarse)
    refined = np.flatnonzero(~np.isin(coarse.tri_ids, fine.tri_ids))

    child_sums = np.zeros(coarse.num_triangles)
    np.add.at(child_sums, anc, field_f.eta_sq)
    slack = rtol * max(field_c.eta_sq.max(initial=0.0), 1e-300)
    per_element = bool(np.all(
        child_sums[refined] <= 2 ** -0.5 * field_c.eta_sq[refined] + slack))

    total_f = field_f.eta_sq.sum()
    total_c = field_c.eta_sq.sum()
    lost = field_c.eta_sq[refined].sum()
    global_ok = total_f <= total_c - ETA_REDUCTION * lost + slack
    return {"per_element": per_element, "global": bool(global_ok),
            "eta_sq_fine": float(total_f), "eta_sq_coarse": float(total_c),
            "eta_sq_refined": float(lost)}


def meshsize_reduction_check(f, coarse, fine, volume_degree=4, rtol=1e-12):
    """h^4-weighted data reduction with factor 3/4 on refined elements.

    The reduction comes purely from the quartering of h_K^4 under bisection,
    so both sides are built from the same fine-level integrals of f^2; the
    inequality is then exact up to roundoff (one bisection gives equality).
    """
    fsq_fine, _ = f_moments(fine, f, volume_degree)
    fsq_coarse = np.zeros(coarse.num_triangles)
    np.add.at(fsq_coarse, fine.ancestors_in(coarse), fsq_fine)
    fc = coarse.h ** 4 * fsq_coarse
    lhs = float((fine.h ** 4 * fsq_fine).sum())
    refined = np.flatnonzero(~np.isin(coarse.tri_ids, fine.tri_ids))
    rhs = float(fc.sum() - FTERM_REDUCTION * fc[refined].sum())
    ok = lhs <= rhs + rtol * max(fc.sum(), 1e-300)
    return {"ok": bool(ok), "lhs": lhs, "rhs": rhs}


def estimator_continuity_constant(u_h, u_H_on_fine, f, boundary_jumps="trace",
                                  volume_degree=4):
    """Largest ratio |eta_K(u_h) - eta_K(u_H)| / ||H(u_h - u_H)||_L2(omega_K).

    Both arguments live on the same (fine) mesh.
    """
    fh = as_piecewise(u_h)
    fH = as_piecewise(u_H_on_fine)
    mesh = fh.mesh
    a = indicators(fh, f, boundary_jumps, volume_degree)
    b = indicators(fH, f, boundary_jumps, volume_degree)
    diff_h = fh.hessians() - fH.hessians()
    energy = mesh.area * np.einsum("tab,tab->t", diff_h, diff_h)

    worst = 0.0
    for k in range(mesh.num_triangles):
        lhs = abs(a.eta[k] - b.eta[k])
        rhs = np.sqrt(sum(energy[t] for t in mesh.element_patch(k)))
        if rhs > 1e-14 * max(1.0, a.eta[k]):
            worst = max(worst, lhs / rhs)
    return worst
