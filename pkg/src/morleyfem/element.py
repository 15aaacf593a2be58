"""The Morley element: degrees of freedom, shape functions and transfers.

Degrees of freedom are values at vertices plus the mean normal derivative
over each edge (the integral divided by the edge length, which keeps the
coefficients scale-stable under refinement).  Edge coefficients are stored
with respect to the fixed edge normal; assembly translates to the local
outward normal through per-element signs.
"""

from __future__ import annotations

import hashlib
import json
import weakref

import numpy as np

from .mesh import MeshError, Triangulation
from .quadrature import edge_rule

_dofmap_cache = weakref.WeakKeyDictionary()


def dof_map(mesh):
    dm = _dofmap_cache.get(mesh)
    if dm is None:
        dm = MorleyDofMap(mesh)
        _dofmap_cache[mesh] = dm
    return dm


class MorleyDofMap:
    """Global dof layout: vertex dofs [0, nv) then edge dofs [nv, nv + ne)."""

    def __init__(self, mesh):
        self.mesh = mesh
        nv, ne, nt = mesh.num_vertices, mesh.num_edges, mesh.num_triangles
        self.num_dofs = nv + ne
        self.cell_dofs = np.hstack([mesh.triangles, nv + mesh.tri_edge_local])
        self.cell_signs = np.hstack([np.ones((nt, 3)), mesh.edge_sign])
        self.constrained = np.concatenate(
            [mesh.boundary_vertices, mesh.edge_is_boundary])
        self.free = np.flatnonzero(~self.constrained)
        self._basis = None

    @property
    def basis(self):
        if self._basis is None:
            self._basis = _build_basis(self.mesh)
        return self._basis

    def local_coefficients(self, global_coeffs):
        """Per-element monomial coefficients, (nt, 6)."""
        d = global_coeffs[self.cell_dofs] * self.cell_signs
        return np.einsum("tmi,ti->tm", self.basis, d)


def _build_basis(mesh):
    """Inverse dof matrices per element.

    ``basis[t][:, i]`` holds the coefficients of shape function ``phi_i`` in
    the monomials 1, xi, eta, xi^2, xi*eta, eta^2 with xi = (x - c) / h_K
    centered at the centroid.
    """
    corners = mesh.points[mesh.triangles]
    c = mesh.centroid[:, None, :]
    s = mesh.h[:, None, None]
    xv = (corners - c) / s
    mids = (mesh.edge_midpoint[mesh.tri_edge_local] - c) / s
    n_out = mesh.edge_sign[:, :, None] * mesh.edge_normal[mesh.tri_edge_local]

    V = np.empty((mesh.num_triangles, 6, 6))
    V[:, :3, :] = _monomials(xv[..., 0], xv[..., 1])
    grad = _monomial_gradients(mids[..., 0], mids[..., 1])
    V[:, 3:, :] = np.einsum("timd,tid->tim", grad, n_out) / mesh.h[:, None, None]
    return np.linalg.inv(V)


def _monomials(xi, eta):
    one = np.ones_like(xi)
    return np.stack([one, xi, eta, xi * xi, xi * eta, eta * eta], axis=-1)


def _monomial_gradients(xi, eta):
    """Gradients w.r.t. (xi, eta); divide by the scale for physical ones."""
    z = np.zeros_like(xi)
    o = np.ones_like(xi)
    gx = np.stack([z, o, z, 2 * xi, eta, z], axis=-1)
    gy = np.stack([z, z, o, z, xi, 2 * eta], axis=-1)
    return np.stack([gx, gy], axis=-1)


class PiecewiseQuadratic:
    """Elementwise P2 field in centered, h-scaled monomials."""

    def __init__(self, mesh, coeffs):
        self.mesh = mesh
        self.coeffs = np.asarray(coeffs, dtype=float)
        self._hessians = None

    def hessians(self):
        """Constant per-element Hessians, (nt, 2, 2)."""
        if self._hessians is None:
            c = self.coeffs
            s2 = self.mesh.h ** 2
            H = np.empty((len(c), 2, 2))
            H[:, 0, 0] = 2 * c[:, 3] / s2
            H[:, 0, 1] = H[:, 1, 0] = c[:, 4] / s2
            H[:, 1, 1] = 2 * c[:, 5] / s2
            self._hessians = H
        return self._hessians

    def _local(self, k, points):
        points = np.atleast_2d(points)
        return (points - self.mesh.centroid[k]) / self.mesh.h[k]

    def evaluate_element(self, k, points):
        loc = self._local(k, points)
        return _monomials(loc[:, 0], loc[:, 1]) @ self.coeffs[k]

    def gradient_element(self, k, points):
        loc = self._local(k, points)
        grad = _monomial_gradients(loc[:, 0], loc[:, 1])
        return np.einsum("qmd,m->qd", grad, self.coeffs[k]) / self.mesh.h[k]

    def values_at_bary(self, bary):
        """Values at quadrature points of every element, (nt, nq)."""
        pts = np.einsum("qi,tid->tqd", bary, self.mesh.points[self.mesh.triangles])
        loc = (pts - self.mesh.centroid[:, None]) / self.mesh.h[:, None, None]
        return np.einsum("tqm,tm->tq", _monomials(loc[..., 0], loc[..., 1]),
                         self.coeffs)

    def edge_mean_gradients(self):
        """Mean gradient over each edge from both sides, (ne, 2 sides, 2).

        Gradients of a P2 polynomial are linear, so the midpoint value is the
        exact mean.  The missing side of a boundary edge is NaN.
        """
        mesh = self.mesh
        out = np.full((mesh.num_edges, 2, 2), np.nan)
        for side in (0, 1):
            tris = mesh.edge_tris[:, side]
            ok = np.flatnonzero(tris >= 0)
            loc = (mesh.edge_midpoint[ok] - mesh.centroid[tris[ok]]) \
                / mesh.h[tris[ok], None]
            grad = _monomial_gradients(loc[:, 0], loc[:, 1])
            out[ok, side] = np.einsum(
                "emd,em->ed", grad, self.coeffs[tris[ok]]) / mesh.h[tris[ok], None]
        return out

    def transfer_to(self, fine):
        """Represent the same elementwise polynomials on a refinement."""
        anc = fine.ancestors_in(self.mesh)
        T = _reframe_matrix(self.mesh, anc, fine)
        return PiecewiseQuadratic(fine,
                                  np.einsum("tmn,tn->tm", T, self.coeffs[anc]))


def _reframe_matrix(coarse, anc, fine):
    """Change of frame (c_H, s_H) -> (c_h, s_h) for quadratic monomials."""
    a = fine.h / coarse.h[anc]
    b = (fine.centroid - coarse.centroid[anc]) / coarse.h[anc, None]
    b1, b2 = b[:, 0], b[:, 1]
    z = np.zeros_like(a)
    o = np.ones_like(a)
    T = np.array([
        [o, b1, b2, b1 * b1, b1 * b2, b2 * b2],
        [z, a, z, 2 * a * b1, a * b2, z],
        [z, z, a, z, a * b1, 2 * a * b2],
        [z, z, z, a * a, z, z],
        [z, z, z, z, a * a, z],
        [z, z, z, z, z, a * a],
    ])
    return np.moveaxis(T, 2, 0)


class MorleyFunction:
    """Member of the Morley space: one coefficient per vertex and edge."""

    def __init__(self, mesh, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (mesh.num_vertices + mesh.num_edges,):
            raise ValueError("coefficient vector does not match the mesh")
        self.mesh = mesh
        self.coeffs = coeffs
        self._piecewise = None

    @property
    def vertex_dofs(self):
        return self.coeffs[:self.mesh.num_vertices]

    @property
    def edge_dofs(self):
        return self.coeffs[self.mesh.num_vertices:]

    def as_piecewise(self):
        if self._piecewise is None:
            dm = dof_map(self.mesh)
            self._piecewise = PiecewiseQuadratic(
                self.mesh, dm.local_coefficients(self.coeffs))
        return self._piecewise

    def _check_inside(self, k, points):
        corners = self.mesh.points[self.mesh.triangles[k]]
        M = np.column_stack([corners[1] - corners[0], corners[2] - corners[0]])
        lam = np.linalg.solve(M, (np.atleast_2d(points) - corners[0]).T).T
        tol = 1e-12 + 1e-12 * self.mesh.h[k]
        if np.any(lam < -tol) or np.any(lam.sum(axis=1) > 1 + tol):
            raise ValueError(f"point outside element {k}")

    def evaluate(self, k, points):
        self._check_inside(k, points)
        return self.as_piecewise().evaluate_element(k, points)

    def gradient(self, k, points):
        self._check_inside(k, points)
        return self.as_piecewise().gradient_element(k, points)

    def hessian(self, k):
        return self.as_piecewise().hessians()[k]

    def clamp(self):
        """Zero the dofs fixed by the clamped boundary condition."""
        out = self.coeffs.copy()
        out[dof_map(self.mesh).constrained] = 0.0
        return MorleyFunction(self.mesh, out)

    def to_json(self):
        nv = self.mesh.num_vertices
        return {"mesh_hash": self.mesh.content_hash(),
                "vertex_dofs": self.coeffs[:nv].tolist(),
                "edge_dofs": self.coeffs[nv:].tolist()}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def load_function(path, mesh):
    with open(path) as fh:
        data = json.load(fh)
    if data["mesh_hash"] != mesh.content_hash():
        raise ValueError("stored function belongs to a different mesh")
    return MorleyFunction(
        mesh, np.concatenate([data["vertex_dofs"], data["edge_dofs"]]))


def as_piecewise(u):
    return u if isinstance(u, PiecewiseQuadratic) else u.as_piecewise()


def random_member(mesh, rng, clamp=True):
    """Random Morley function with unit-scale coefficients."""
    u = MorleyFunction(mesh, rng.standard_normal(
        mesh.num_vertices + mesh.num_edges))
    return u.clamp() if clamp else u


class ShapeFunctions:
    """The six local Morley shape functions of one element."""

    def __init__(self, center, scale, coefficients):
        self.center = np.asarray(center)
        self.scale = float(scale)
        self.coefficients = coefficients  # (6 monomials, 6 functions)

    def evaluate(self, i, points):
        loc = (np.atleast_2d(points) - self.center) / self.scale
        return _monomials(loc[:, 0], loc[:, 1]) @ self.coefficients[:, i]

    def gradient(self, i, points):
        loc = (np.atleast_2d(points) - self.center) / self.scale
        grad = _monomial_gradients(loc[:, 0], loc[:, 1])
        return np.einsum("qmd,m->qd", grad, self.coefficients[:, i]) / self.scale


def local_shape_functions(mesh, k):
    """Shape functions of element ``k`` (vertex values first, then mean
    outward normal derivatives, both in local vertex/edge order)."""
    if mesh.area[k] <= 0:
        raise MeshError(f"degenerate element {k}")
    return ShapeFunctions(mesh.centroid[k], mesh.h[k], dof_map(mesh).basis[k])


def interpolate_canonical(v, mesh, edge_points=3):
    """Canonical interpolation onto the Morley space of ``mesh``.

    ``v`` is either a smooth function (object with ``value`` and ``gradient``
    callables on coordinate arrays) or an elementwise quadratic field on the
    same mesh; in the latter case vertex values and edge means are averaged
    over the incident elements, which reproduces the one-sided values for
    members of the Morley space.

    Vertex dofs interpolate ``v``; edge dofs match the mean of the normal
    derivative, computed with an ``edge_points`` Gauss rule (exact up to
    degree ``2 * edge_points - 1``) on the smooth path and exactly on the
    elementwise path.
    """
    if hasattr(v, "value") and hasattr(v, "gradient"):
        return _interpolate_smooth(v, mesh, edge_points)
    field = as_piecewise(v)
    if field.mesh is not mesh:
        raise MeshError("elementwise interpolation requires the same mesh")
    return _interpolate_field(field)


def _interpolate_smooth(v, mesh, edge_points):
    vertex = np.asarray(v.value(mesh.points[:, 0], mesh.points[:, 1]),
                        dtype=float)
    t, w = edge_rule(edge_points)
    p0 = mesh.points[mesh.edge_nodes[:, 0]]
    p1 = mesh.points[mesh.edge_nodes[:, 1]]
    pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    grads = np.asarray(v.gradient(pts[..., 0].ravel(), pts[..., 1].ravel()))
    grads = grads.reshape(mesh.num_edges, len(t), 2)
    edge = np.einsum("q,eqd,ed->e", w, grads, mesh.edge_normal)
    return MorleyFunction(mesh, np.concatenate([vertex, edge]))


def _interpolate_field(field):
    mesh = field.mesh
    vertex = np.zeros(mesh.num_vertices)
    for p, tris in enumerate(mesh.vertex_to_tris()):
        point = mesh.points[p]
        vertex[p] = np.mean([
            field.evaluate_element(t, point)[0] for t in tris])
    means = field.edge_mean_gradients()
    sides = (mesh.edge_tris >= 0).sum(axis=1)
    normal = np.einsum("esd,ed->es", np.nan_to_num(means), mesh.edge_normal)
    edge = normal.sum(axis=1) / sides
    return MorleyFunction(mesh, np.concatenate([vertex, edge]))


def restrict_to_coarse(u_h, coarse):
    """Restriction onto a coarser nested mesh.

    Coarse vertex dofs are copied; the coarse edge dof is the length-weighted
    sum of the fine mean normal derivatives over the sub-edges (sub-edges
    inherit the parent normal, so no sign bookkeeping is needed).
    """
    fine = u_h.mesh
    if not fine.is_refinement_of(coarse):
        raise MeshError("function does not live on a refinement of the mesh")
    forest = fine._forest
    vpos = np.searchsorted(fine.vertex_ids, coarse.vertex_ids)
    if not np.array_equal(fine.vertex_ids[vpos], coarse.vertex_ids):
        raise MeshError("coarse vertices missing from the fine mesh")
    vertex = u_h.vertex_dofs[vpos]

    fine_edge_set = set(fine.edge_ids.tolist())
    fine_edge_pos = {int(e): i for i, e in enumerate(fine.edge_ids)}
    edge = np.empty(coarse.num_edges)
    for j, E in enumerate(coarse.edge_ids.tolist()):
        total = 0.0
        for leaf in forest.leaf_edges_under(E, fine_edge_set):
            i = fine_edge_pos[leaf]
            total += fine.edge_length[i] * u_h.edge_dofs[i]
        edge[j] = total / coarse.edge_length[j]
    return MorleyFunction(coarse, np.concatenate([vertex, edge]))


def prolong_by_averaging(v_H, fine):
    """Prolongation onto a refinement by patchwise averaging.

    Fine vertex dofs average the coarse elementwise values over the coarse
    elements whose closure contains the vertex; fine edge dofs average the
    mean normal derivative over the coarse elements whose closure contains
    the edge.
    """
    coarse = v_H.mesh
    if not fine.is_refinement_of(coarse):
        raise MeshError("target is not a refinement of the function's mesh")
    field = as_piecewise(v_H)
    anc = fine.ancestors_in(coarse)

    vertex = np.empty(fine.num_vertices)
    for p, tris in enumerate(fine.vertex_to_tris()):
        patch = {int(anc[t]) for t in tris}
        point = fine.points[p]
        vertex[p] = np.mean([
            field.evaluate_element(K, point)[0] for K in patch])

    edge = np.empty(fine.num_edges)
    for e in range(fine.num_edges):
        patch = {int(anc[t]) for t in fine.edge_tris[e] if t >= 0}
        mid = fine.edge_midpoint[e]
        nu = fine.edge_normal[e]
        edge[e] = np.mean([
            field.gradient_element(K, mid)[0] @ nu for K in patch])
    return MorleyFunction(fine, np.concatenate([vertex, edge]))


def kernel_check(v, k1, k2, tol=1e-12):
    """True iff ``v`` restricted to two adjacent elements is one global
    linear polynomial.

    Raises ValueError when the pair does not belong to the Morley space of
    the patch (mismatched vertex values or a jump in the mean normal
    derivative over the shared edge).
    """
    field = as_piecewise(v)
    mesh = field.mesh
    shared = set(mesh.tri_edge_local[k1]) & set(mesh.tri_edge_local[k2])
    if len(shared) != 1:
        raise ValueError("elements do not share exactly one edge")
    e = shared.pop()

    scale = max(1.0, np.abs(field.coeffs[[k1, k2]]).max())
    ends = mesh.points[mesh.edge_nodes[e]]
    vals1 = field.evaluate_element(k1, ends)
    vals2 = field.evaluate_element(k2, ends)
    mid = mesh.edge_midpoint[e]
    nu = mesh.edge_normal[e]
    jump = (field.gradient_element(k1, mid)[0]
            - field.gradient_element(k2, mid)[0]) @ nu
    if np.abs(vals1 - vals2).max() > tol * scale or abs(jump) > tol * scale / mesh.h[k1]:
        raise ValueError("input is not in the Morley space of the patch")

    T = _reframe_for_pair(mesh, k1, k2)
    c2_in_1 = T @ field.coeffs[k2]
    diff = np.abs(c2_in_1 - field.coeffs[k1]).max()
    curvature = np.abs(field.coeffs[[k1, k2]][:, 3:]).max()
    return bool(curvature <= tol * scale and diff <= tol * scale)


def _reframe_for_pair(mesh, k1, k2):
    # Express the k2-frame polynomial in the k1 frame.
    a = mesh.h[k1] / mesh.h[k2]
    b = (mesh.centroid[k1] - mesh.centroid[k2]) / mesh.h[k2]
    b1, b2 = b
    return np.array([
        [1, b1, b2, b1 * b1, b1 * b2, b2 * b2],
        [0, a, 0, 2 * a * b1, a * b2, 0],
        [0, 0, a, 0, a * b1, 2 * a * b2],
        [0, 0, 0, a * a, 0, 0],
        [0, 0, 0, 0, a * a, 0],
        [0, 0, 0, 0, 0, a * a],
    ])
