"""Conforming triangulations with newest-vertex bisection.

All meshes refined from one initial triangulation share an append-only
refinement forest.  A :class:`Triangulation` is an immutable view (a set of
leaf triangles) into that forest, so overlay and refined-region queries are
exact set operations on triangle ids rather than geometric searches.

Entity conventions:
  * local edge ``i`` of a triangle is the edge opposite local vertex ``i``;
  * every edge carries one fixed unit normal ``nu`` and the tangent
    ``tau = (-nu_y, nu_x)``, assigned at creation (low vertex id to high,
    rotated; boundary edges flipped outward) and inherited by sub-edges;
  * for interior edges the two incident triangles are ordered so that ``nu``
    points from ``K_minus`` into ``K_plus``.
"""

from __future__ import annotations

import hashlib
import itertools
import json

import numpy as np

_domain_counter = itertools.count()


class MeshError(Exception):
    """Invalid mesh input or topology."""


class _Forest:
    """Append-only store of every vertex, edge and triangle created by
    refining one initial mesh."""

    def __init__(self):
        self.domain_id = f"domain-{next(_domain_counter)}"
        self.coords = []          # vertex id -> (x, y)
        self.edge_nodes = []      # edge id -> (a, b) vertex ids
        self.edge_normal = []     # edge id -> (nx, ny), fixed at creation
        self.edge_boundary = []   # edge id -> bool
        self.edge_children = []   # edge id -> (e0, e1) or None
        self.edge_midpoint = []   # edge id -> vertex id or -1
        self.edge_parent = []     # edge id -> edge id or -1
        self.tri_nodes = []       # tri id -> (v0, v1, v2)
        self.tri_edges = []       # tri id -> (e0, e1, e2), e_i opposite v_i
        self.tri_refedge = []     # tri id -> local index of refinement edge
        self.tri_parent = []      # tri id -> tri id or -1
        self.tri_children = []    # tri id -> (t0, t1) or None
        self.tri_generation = []  # tri id -> int
        self.roots = []           # generation-0 triangle ids

    def add_vertex(self, xy):
        self.coords.append((float(xy[0]), float(xy[1])))
        return len(self.coords) - 1

    def add_edge(self, a, b, normal, boundary, parent=-1):
        self.edge_nodes.append((a, b))
        self.edge_normal.append((float(normal[0]), float(normal[1])))
        self.edge_boundary.append(bool(boundary))
        self.edge_children.append(None)
        self.edge_midpoint.append(-1)
        self.edge_parent.append(parent)
        return len(self.edge_nodes) - 1

    def add_tri(self, nodes, edges, refedge, parent, generation):
        self.tri_nodes.append(tuple(nodes))
        self.tri_edges.append(tuple(edges))
        self.tri_refedge.append(int(refedge))
        self.tri_parent.append(parent)
        self.tri_children.append(None)
        self.tri_generation.append(generation)
        return len(self.tri_nodes) - 1

    def split_edge(self, e):
        """Split edge ``e`` at its midpoint (idempotent)."""
        if self.edge_children[e] is not None:
            return self.edge_midpoint[e], self.edge_children[e]
        a, b = self.edge_nodes[e]
        pa, pb = self.coords[a], self.coords[b]
        m = self.add_vertex((0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])))
        nu = self.edge_normal[e]
        bnd = self.edge_boundary[e]
        ea = self.add_edge(a, m, nu, bnd, parent=e)
        eb = self.add_edge(m, b, nu, bnd, parent=e)
        self.edge_midpoint[e] = m
        self.edge_children[e] = (ea, eb)
        return m, (ea, eb)

    def split_triangle(self, t):
        """Bisect triangle ``t`` across its refinement edge (idempotent)."""
        if self.tri_children[t] is not None:
            return self.tri_children[t]
        r = self.tri_refedge[t]
        nodes = self.tri_nodes[t]
        edges = self.tri_edges[t]
        p = nodes[r]
        a = nodes[(r + 1) % 3]
        b = nodes[(r + 2) % 3]
        e_ref = edges[r]
        e_bp = edges[(r + 1) % 3]
        e_pa = edges[(r + 2) % 3]
        m, (h0, h1) = self.split_edge(e_ref)
        half_a = h0 if a in self.edge_nodes[h0] else h1
        half_b = h1 if half_a is h0 else h0
        median = self.add_edge(p, m, _new_edge_normal(self.coords, p, m),
                               boundary=False)
        gen = self.tri_generation[t] + 1
        c0 = self.add_tri((m, p, a), (e_pa, half_a, median), 0, t, gen)
        c1 = self.add_tri((m, b, p), (e_bp, median, half_b), 0, t, gen)
        self.tri_children[t] = (c0, c1)
        return c0, c1

    def leaf_edges_under(self, e, active_edge_ids):
        """Leaf sub-edges of ``e`` that are active in some view."""
        if e in active_edge_ids:
            return [e]
        children = self.edge_children[e]
        if children is None:
            raise MeshError(f"edge {e} is not resolved by the fine mesh")
        out = []
        for c in children:
            out.extend(self.leaf_edges_under(c, active_edge_ids))
        return out


def _new_edge_normal(coords, a, b):
    # Tangent from low vertex id to high, normal = (t_y, -t_x) so that
    # tau = (-nu_y, nu_x) recovers the tangent direction.
    lo, hi = (a, b) if a < b else (b, a)
    dx = coords[hi][0] - coords[lo][0]
    dy = coords[hi][1] - coords[lo][1]
    length = np.hypot(dx, dy)
    return (dy / length, -dx / length)


class Triangulation:
    """Immutable view of a set of leaf triangles in a refinement forest.

    Numeric work uses contiguous local arrays; ``vertex_ids`` / ``edge_ids``
    / ``tri_ids`` map local indices back to forest ids shared across all
    refinements of the same initial mesh.
    """

    def __init__(self, forest, tri_ids, validate=True):
        self._forest = forest
        self.tri_ids = np.sort(np.asarray(tri_ids, dtype=np.int64))
        self._build_local_arrays()
        if validate:
            self.check_conforming()

    # -- construction of local arrays -----------------------------------

    def _build_local_arrays(self):
        f = self._forest
        tids = self.tri_ids
        tri_nodes = np.array([f.tri_nodes[t] for t in tids], dtype=np.int64)
        tri_edges = np.array([f.tri_edges[t] for t in tids], dtype=np.int64)

        self.vertex_ids = np.unique(tri_nodes)
        self.edge_ids = np.unique(tri_edges)
        self.points = np.array([f.coords[v] for v in self.vertex_ids])
        self.triangles = np.searchsorted(self.vertex_ids, tri_nodes)
        self.tri_edge_local = np.searchsorted(self.edge_ids, tri_edges)
        self.refinement_edge = np.array([f.tri_refedge[t] for t in tids])
        self.generation = np.array([f.tri_generation[t] for t in tids])

        self.edge_nodes = np.searchsorted(
            self.vertex_ids,
            np.array([f.edge_nodes[e] for e in self.edge_ids], dtype=np.int64))
        self.edge_normal = np.array([f.edge_normal[e] for e in self.edge_ids])
        self.edge_tangent = np.column_stack(
            [-self.edge_normal[:, 1], self.edge_normal[:, 0]])
        self.edge_is_boundary = np.array(
            [f.edge_boundary[e] for e in self.edge_ids], dtype=bool)

        pe = self.points[self.edge_nodes]
        self.edge_length = np.hypot(pe[:, 1, 0] - pe[:, 0, 0],
                                    pe[:, 1, 1] - pe[:, 0, 1])
        self.edge_midpoint = 0.5 * (pe[:, 0] + pe[:, 1])

        corners = self.points[self.triangles]
        d1 = corners[:, 1] - corners[:, 0]
        d2 = corners[:, 2] - corners[:, 0]
        self.area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        self.h = np.sqrt(np.abs(self.area))
        self.centroid = corners.mean(axis=1)

        # Incident triangles per edge, ordered (K_plus, K_minus) w.r.t. the
        # fixed normal; -1 marks the missing side of a boundary edge.
        ne = len(self.edge_ids)
        self.edge_tris = np.full((ne, 2), -1, dtype=np.int64)
        flat_edges = self.tri_edge_local.ravel()
        flat_tris = np.repeat(np.arange(len(tids)), 3)
        side = np.einsum(
            "kd,kd->k",
            self.centroid[flat_tris] - self.edge_midpoint[flat_edges],
            self.edge_normal[flat_edges])
        plus = side > 0.0
        self.edge_tris[flat_edges[plus], 0] = flat_tris[plus]
        self.edge_tris[flat_edges[~plus], 1] = flat_tris[~plus]

        # Sign relating each element's outward edge normal to the fixed one.
        opp = self.points[self.triangles]        # (nt, 3, 2), vertex i opposite edge i
        mids = self.edge_midpoint[self.tri_edge_local]
        nus = self.edge_normal[self.tri_edge_local]
        self.edge_sign = np.where(
            np.einsum("tid,tid->ti", mids - opp, nus) > 0.0, 1.0, -1.0)

    # -- basic queries ---------------------------------------------------

    @property
    def domain_id(self):
        return self._forest.domain_id

    @property
    def num_triangles(self):
        return len(self.tri_ids)

    @property
    def num_vertices(self):
        return len(self.vertex_ids)

    @property
    def num_edges(self):
        return len(self.edge_ids)

    @property
    def boundary_vertices(self):
        mask = np.zeros(self.num_vertices, dtype=bool)
        mask[self.edge_nodes[self.edge_is_boundary].ravel()] = True
        return mask

    def content_hash(self):
        h = hashlib.sha256()
        h.update(self.points.tobytes())
        h.update(self.triangles.astype(np.int64).tobytes())
        return h.hexdigest()

    def check_conforming(self):
        """Raise MeshError on hanging vertices, bad incidence or orientation."""
        if np.any(self.area <= 0.0):
            k = int(np.argmin(self.area))
            raise MeshError(f"triangle {k} has non-positive area {self.area[k]}")
        counts = np.bincount(self.tri_edge_local.ravel(),
                             minlength=self.num_edges)
        bad = np.flatnonzero(counts != np.where(self.edge_is_boundary, 1, 2))
        if bad.size:
            raise MeshError(f"non-conforming: edge {bad[0]} has "
                            f"{counts[bad[0]]} incident triangles")
        f = self._forest
        mids = np.array([f.edge_midpoint[e] for e in self.edge_ids])
        split = mids >= 0
        if split.any():
            hanging = np.isin(mids[split], self.vertex_ids)
            if hanging.any():
                e = self.edge_ids[split][hanging][0]
                raise MeshError(f"non-conforming: hanging vertex on edge {e}")
        nrm = np.hypot(self.edge_normal[:, 0], self.edge_normal[:, 1])
        if not np.allclose(nrm, 1.0, rtol=0, atol=1e-15):
            raise MeshError("edge normal not unit length")

    # -- refinement ------------------------------------------------------

    def bisect(self, marked):
        """Refine by newest-vertex bisection of ``marked`` local element ids,
        recursively completing to a conforming mesh."""
        marked = np.asarray(list(marked), dtype=np.int64)
        if marked.size == 0:
            return self
        if marked.min() < 0 or marked.max() >= self.num_triangles:
            raise MeshError("marked set contains invalid element ids")
        nt, ne = self.num_triangles, self.num_edges
        ref_local_edge = self.tri_edge_local[np.arange(nt), self.refinement_edge]

        edge_marked = np.zeros(ne, dtype=bool)
        edge_marked[ref_local_edge[marked]] = True
        while True:
            touched = edge_marked[self.tri_edge_local].any(axis=1)
            need = touched & ~edge_marked[ref_local_edge]
            if not need.any():
                break
            edge_marked[ref_local_edge[need]] = True

        f = self._forest
        touched = edge_marked[self.tri_edge_local].any(axis=1)
        new_ids = list(self.tri_ids[~touched])
        for k in np.flatnonzero(touched):
            for child in f.split_triangle(self.tri_ids[k]):
                # The child's refinement edge is an outer edge of the parent;
                # split again if it was marked too (two or three marked edges).
                child_ref = f.tri_edges[child][f.tri_refedge[child]]
                local = np.searchsorted(self.edge_ids, child_ref)
                if (local < ne and self.edge_ids[local] == child_ref
                        and edge_marked[local]):
                    new_ids.extend(f.split_triangle(child))
                else:
                    new_ids.append(child)
        return Triangulation(f, new_ids)

    def uniform_refine(self):
        """Two bisection sweeps of every element."""
        fine = self.bisect(np.arange(self.num_triangles))
        return fine.bisect(np.arange(fine.num_triangles))

    # -- patches ---------------------------------------------------------

    def element_patch(self, k):
        """Element ``k`` and its edge neighbors."""
        out = {int(k)}
        for e in self.tri_edge_local[k]:
            out.update(int(t) for t in self.edge_tris[e] if t >= 0)
        return out

    def edge_patch(self, e):
        """Elements incident to edge ``e`` and their count xi_e."""
        tris = {int(t) for t in self.edge_tris[e] if t >= 0}
        return tris, len(tris)

    def vertex_patch(self, p):
        """Elements whose closure contains vertex ``p`` and their count xi_P."""
        tris = {int(t) for t in np.flatnonzero((self.triangles == p).any(axis=1))}
        return tris, len(tris)

    def vertex_to_tris(self):
        """List of incident local triangle ids per vertex."""
        out = [[] for _ in range(self.num_vertices)]
        for t, nodes in enumerate(self.triangles):
            for v in nodes:
                out[v].append(t)
        return out

    # -- relations between meshes ----------------------------------------

    def _require_same_forest(self, other):
        if self._forest is not other._forest:
            raise MeshError(
                f"meshes come from different initial meshes "
                f"({self.domain_id} vs {other.domain_id})")

    def is_refinement_of(self, coarse):
        self._require_same_forest(coarse)
        coarse_set = set(coarse.tri_ids.tolist())
        f = self._forest
        for t in self.tri_ids.tolist():
            while t != -1 and t not in coarse_set:
                t = f.tri_parent[t]
            if t == -1:
                return False
        return True

    def ancestors_in(self, coarse):
        """Map each local element to its ancestor's local id in ``coarse``."""
        self._require_same_forest(coarse)
        coarse_pos = {int(t): i for i, t in enumerate(coarse.tri_ids)}
        f = self._forest
        out = np.empty(self.num_triangles, dtype=np.int64)
        for k, t in enumerate(self.tri_ids.tolist()):
            while t != -1 and t not in coarse_pos:
                t = f.tri_parent[t]
            if t == -1:
                raise MeshError("mesh is not a refinement of the given mesh")
            out[k] = coarse_pos[t]
        return out

    def overlay(self, other):
        """Smallest common refinement of two views of one forest."""
        self._require_same_forest(other)
        f = self._forest
        active = set(self.tri_ids.tolist()) | set(other.tri_ids.tolist())
        needs_split = set()
        for t in active:
            t = f.tri_parent[t]
            while t != -1 and t not in needs_split:
                needs_split.add(t)
                t = f.tri_parent[t]
        leaves = []
        stack = list(f.roots)
        while stack:
            t = stack.pop()
            if t in needs_split:
                stack.extend(f.tri_children[t])
            else:
                leaves.append(t)
        return Triangulation(f, leaves)

    def refined_region(self, fine):
        """Coarse elements touching the closure of the refined part.

        Returns the local ids of every element of ``self`` that was refined
        in ``fine`` plus all elements sharing at least a vertex with one.
        """
        if not fine.is_refinement_of(self):
            raise MeshError("argument is not a refinement of this mesh")
        gone = ~np.isin(self.tri_ids, fine.tri_ids)
        verts = np.zeros(self.num_vertices, dtype=bool)
        verts[self.triangles[gone].ravel()] = True
        touching = verts[self.triangles].any(axis=1)
        return set(np.flatnonzero(gone | touching).tolist())

    # -- stable element addressing ----------------------------------------

    def element_paths(self, local_ids):
        """Forest-independent addresses of elements: (root position, depth,
        child-side bits from the root, least significant bit first)."""
        f = self._forest
        root_pos = {t: i for i, t in enumerate(f.roots)}
        out = np.empty((len(local_ids), 3), dtype=np.uint64)
        for row, k in enumerate(local_ids):
            t = int(self.tri_ids[k])
            sides = []
            while f.tri_parent[t] != -1:
                p = f.tri_parent[t]
                sides.append(0 if f.tri_children[p][0] == t else 1)
                t = p
            sides.reverse()
            if len(sides) > 64:
                raise MeshError("refinement depth exceeds path encoding")
            bits = 0
            for i, s in enumerate(sides):
                bits |= s << i
            out[row] = (root_pos[t], len(sides), bits)
        return out

    def resolve_paths(self, paths):
        """Local element ids for addresses produced by ``element_paths``."""
        f = self._forest
        ids = np.empty(len(paths), dtype=np.int64)
        for row, (r, depth, bits) in enumerate(np.asarray(paths, dtype=np.uint64)):
            t = f.roots[int(r)]
            for i in range(int(depth)):
                children = f.tri_children[t]
                if children is None:
                    raise MeshError("path descends below the forest")
                t = children[(int(bits) >> i) & 1]
            ids[row] = t
        pos = np.searchsorted(self.tri_ids, ids)
        if np.any(pos >= len(self.tri_ids)) \
                or not np.array_equal(self.tri_ids[pos], ids):
            raise MeshError("path does not resolve to an element of this mesh")
        return pos

    # -- metrics ----------------------------------------------------------

    def min_angle(self):
        return float(np.min(_triangle_angles(self.points[self.triangles])))

    def shape_metrics(self):
        """(minimum angle in degrees, max h_K, min h_K)."""
        return self.min_angle(), float(self.h.max()), float(self.h.min())

    # -- IO ----------------------------------------------------------------

    def save_text(self, path):
        with open(path, "w") as fh:
            fh.write(f"vertices {self.num_vertices} / "
                     f"triangles {self.num_triangles}\n")
            for x, y in self.points:
                fh.write(f"{float(x)!r} {float(y)!r}\n")
            for tri in self.triangles:
                fh.write(f"{tri[0]} {tri[1]} {tri[2]}\n")

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump({"vertices": self.points.tolist(),
                       "triangles": self.triangles.tolist()}, fh)


def _triangle_angles(corners):
    """Interior angles in degrees; corners is (nt, 3, 2)."""
    angles = np.empty(corners.shape[:-1])
    for i in range(3):
        u = corners[:, (i + 1) % 3] - corners[:, i]
        v = corners[:, (i + 2) % 3] - corners[:, i]
        cosv = np.einsum("td,td->t", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles[:, i] = np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))
    return angles


def build_initial(points, cells):
    """Build a generation-0 triangulation from raw vertex/cell lists.

    Refinement edges are assigned to the longest edge of each triangle with
    ties broken by the lowest global edge index.  Rejects duplicate vertices,
    degenerate cells and non-conforming connectivity (hanging vertices).
    """
    points = np.asarray(points, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise MeshError("points must be an (n, 2) array")
    if cells.ndim != 2 or cells.shape[1] != 3:
        raise MeshError("cells must be an (m, 3) array")
    if cells.min(initial=0) < 0 or cells.max(initial=-1) >= len(points):
        raise MeshError("cell references vertex out of range")

    bbox = points.max(axis=0) - points.min(axis=0)
    scale = float(np.hypot(*bbox)) or 1.0
    tol = 1e-12 * scale
    _reject_duplicates(points, tol)

    # Positive orientation, rejecting degenerate cells.
    d1 = points[cells[:, 1]] - points[cells[:, 0]]
    d2 = points[cells[:, 2]] - points[cells[:, 0]]
    doubled = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(np.abs(doubled) <= tol * scale):
        raise MeshError(f"degenerate triangle {int(np.argmin(np.abs(doubled)))}")
    flip = doubled < 0
    cells = cells.copy()
    cells[flip] = cells[flip][:, [0, 2, 1]]

    # Edge table keyed by sorted endpoints, enumerated in lexicographic order.
    pair_set = set()
    for tri in cells:
        for i in range(3):
            a, b = int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])
            pair_set.add((a, b) if a < b else (b, a))
    pairs = sorted(pair_set)
    edge_index = {p: i for i, p in enumerate(pairs)}
    counts = np.zeros(len(pairs), dtype=np.int64)
    for tri in cells:
        for i in range(3):
            a, b = int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])
            counts[edge_index[(a, b) if a < b else (b, a)]] += 1
    over = np.flatnonzero(counts > 2)
    if over.size:
        raise MeshError(f"non-conforming: edge {pairs[over[0]]} has "
                        f"{counts[over[0]]} incident triangles")
    _reject_tjunctions(points, pairs, tol)

    forest = _Forest()
    for xy in points:
        forest.add_vertex(xy)
    edge_lengths = np.empty(len(pairs))
    for (a, b), n in zip(pairs, counts):
        normal = _new_edge_normal(forest.coords, a, b)
        boundary = n == 1
        e = forest.add_edge(a, b, normal, boundary)
        edge_lengths[e] = np.hypot(points[b][0] - points[a][0],
                                   points[b][1] - points[a][1])
    # Boundary normals must point out of the (single) incident triangle.
    if np.any(counts == 1):
        owner = {}
        for k, tri in enumerate(cells):
            for i in range(3):
                a, b = int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])
                owner.setdefault(edge_index[(a, b) if a < b else (b, a)], k)
        for e in np.flatnonzero(counts == 1):
            a, b = pairs[e]
            mid = 0.5 * (points[a] + points[b])
            centroid = points[cells[owner[e]]].mean(axis=0)
            nu = np.array(forest.edge_normal[e])
            if np.dot(nu, centroid - mid) > 0:
                forest.edge_normal[e] = (-nu[0], -nu[1])

    for tri in cells:
        eids = []
        for i in range(3):
            a, b = int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])
            eids.append(edge_index[(a, b) if a < b else (b, a)])
        lengths = edge_lengths[eids]
        longest = lengths.max()
        candidates = [i for i in range(3)
                      if lengths[i] >= longest - tol]
        refedge = min(candidates, key=lambda i: eids[i])
        t = forest.add_tri(tuple(int(v) for v in tri), tuple(eids),
                           refedge, -1, 0)
        forest.roots.append(t)
    return Triangulation(forest, forest.roots)


def _reject_duplicates(points, tol):
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    dup = tree.query_pairs(tol)
    if dup:
        a, b = sorted(dup)[0]
        raise MeshError(f"duplicate vertices {a} and {b}")


def _reject_tjunctions(points, pairs, tol):
    for a, b in pairs:
        pa, pb = points[a], points[b]
        d = pb - pa
        length2 = float(d @ d)
        rel = points - pa
        t = (rel @ d) / length2
        off = np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0]) / np.sqrt(length2)
        inside = (off <= tol) & (t > tol) & (t < 1 - tol)
        inside[[a, b]] = False
        if inside.any():
            v = int(np.flatnonzero(inside)[0])
            raise MeshError(
                f"non-conforming: vertex {v} lies inside edge ({a}, {b})")


def load_text(path):
    """Read the plain-text mesh format written by ``save_text``."""
    with open(path) as fh:
        tokens = fh.readline().replace("/", " ").split()
        if len(tokens) != 4 or tokens[0] != "vertices" or tokens[2] != "triangles":
            raise MeshError("bad header; expected 'vertices N / triangles M'")
        nv, nt = int(tokens[1]), int(tokens[3])
        points = [tuple(map(float, fh.readline().split())) for _ in range(nv)]
        cells = [tuple(map(int, fh.readline().split())) for _ in range(nt)]
    return build_initial(points, cells)


def load_json(path):
    with open(path) as fh:
        data = json.load(fh)
    return build_initial(data["vertices"], data["triangles"])


def load_mesh(path):
    path = str(path)
    if path.endswith(".json"):
        return load_json(path)
    return load_text(path)


def nvb_min_angle_bound(mesh):
    """Lower bound for the minimum angle of any refinement of ``mesh``.

    Bisection descendants of a triangle fall into at most four similarity
    classes, all reached within two generations, so enumerating two levels
    per initial element is exact.
    """
    f = mesh._forest
    worst = np.inf
    for root in f.roots:
        corners = np.array([f.coords[v] for v in f.tri_nodes[root]])
        refedge = f.tri_refedge[root]
        worst = min(worst, _descend_angles(corners, refedge, 2))
    return float(worst)


def _descend_angles(corners, refedge, levels):
    worst = float(_triangle_angles(corners[None]).min())
    if levels == 0:
        return worst
    p, a, b = corners[refedge], corners[(refedge + 1) % 3], corners[(refedge + 2) % 3]
    m = 0.5 * (a + b)
    for child in (np.array([m, p, a]), np.array([m, b, p])):
        worst = min(worst, _descend_angles(child, 0, levels - 1))
    return worst


def unit_square_mesh():
    """The unit square split along the main diagonal into two triangles."""
    return build_initial(
        [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
        [(0, 1, 2), (0, 2, 3)])
