import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morleyfem.mesh import (MeshError, build_initial, load_json, load_text,
                            nvb_min_angle_bound, unit_square_mesh)


def test_unit_square_counts(square):
    assert square.num_vertices == 4
    assert square.num_triangles == 2
    assert square.num_edges == 5


def test_single_triangle_refinement_edge_is_hypotenuse():
    m = build_initial([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    r = m.refinement_edge[0]
    nodes = set(m.edge_nodes[m.tri_edge_local[0, r]])
    assert nodes == {1, 2}


def test_tjunction_rejected():
    pts = [(0, 0), (2, 0), (1, 0), (0, 1), (1, -1)]
    cells = [(0, 2, 3), (2, 1, 3), (0, 1, 4)]
    with pytest.raises(MeshError, match="non-conforming"):
        build_initial(pts, cells)


def test_duplicate_vertices_rejected():
    with pytest.raises(MeshError, match="duplicate"):
        build_initial([(0, 0), (1, 0), (0, 1), (1e-15, 0)],
                      [(0, 1, 2), (3, 1, 2)])


def test_degenerate_triangle_rejected():
    with pytest.raises(MeshError, match="degenerate"):
        build_initial([(0, 0), (1, 0), (2, 0)], [(0, 1, 2)])


def test_overused_edge_rejected():
    pts = [(0, 0), (1, 0), (0, 1), (0, -1), (-1, 0.5)]
    cells = [(0, 1, 2), (0, 1, 3), (0, 1, 4)]
    with pytest.raises(MeshError, match="non-conforming"):
        build_initial(pts, cells)


def test_negative_orientation_fixed():
    m = build_initial([(0, 0), (1, 0), (0, 1)], [(0, 2, 1)])
    assert m.area[0] > 0


def test_bisect_single_triangle():
    m = build_initial([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    f = m.bisect([0])
    assert f.num_triangles == 2
    mid = np.array([0.5, 0.5])
    assert any(np.allclose(p, mid) for p in f.points)
    assert np.isclose(f.area.sum(), m.area.sum())
    assert f.generation.tolist() == [1, 1]


def test_bisect_empty_marked_is_identity(square):
    assert square.bisect([]) is square


def test_bisect_invalid_ids(square):
    with pytest.raises(MeshError):
        square.bisect([5])


# Closure oracle: exhaustive fixpoint bisection on plain coordinate tuples,
# independent of the forest implementation.  A triangle with a split edge
# (hanging vertex) is bisected through its refinement edge until none remain.

def _needs_split(tri, split_edges):
    pts, _ = tri
    return any(tuple(sorted((pts[(i + 1) % 3], pts[(i + 2) % 3])))
               in split_edges for i in range(3))


def _oracle_refine(tris, marked):
    """tris: list of ((p0, p1, p2), refedge); returns the conforming
    refinement with every marked triangle bisected."""
    split_edges = set()

    def bisect(tri):
        pts, r = tri
        p, a, b = pts[r], pts[(r + 1) % 3], pts[(r + 2) % 3]
        m = tuple(0.5 * (np.array(a) + np.array(b)))
        split_edges.add(tuple(sorted((a, b))))
        return [((m, p, a), 0), ((m, b, p), 0)]

    marked = set(marked)
    out = []
    for i, t in enumerate(tris):
        out.extend(bisect(t)) if i in marked else out.append(t)
    tris = out
    while True:
        hanging = [t for t in tris if _needs_split(t, split_edges)]
        if not hanging:
            return tris
        tris = [t for t in tris if not _needs_split(t, split_edges)]
        for t in hanging:
            tris.extend(bisect(t))


def _as_oracle(mesh):
    out = []
    for k in range(mesh.num_triangles):
        pts = tuple(tuple(p) for p in mesh.points[mesh.triangles[k]])
        out.append((pts, int(mesh.refinement_edge[k])))
    return out


def test_closure_matches_fixpoint_oracle(square):
    fine = square.bisect([0])
    oracle = _oracle_refine(_as_oracle(square), [0])
    assert fine.num_triangles == len(oracle)
    assert np.isclose(fine.area.sum(), 1.0)


def test_closure_oracle_on_random_markings(square_fine, rng):
    mesh = square_fine
    for _ in range(3):
        marked = rng.choice(mesh.num_triangles,
                            size=max(1, mesh.num_triangles // 4),
                            replace=False)
        fine = mesh.bisect(marked)
        oracle = _oracle_refine(_as_oracle(mesh), marked.tolist())
        assert fine.num_triangles == len(oracle)
        mesh = fine


def test_uniform_refine_counts(square):
    f = square.uniform_refine()
    assert f.num_triangles == 8
    assert np.isclose(f.area.sum(), square.area.sum(), rtol=1e-14)
    # Compatibly labeled squares quadruple per uniform step.
    g = f.uniform_refine()
    assert g.num_triangles == 32


def test_children_area_sums(square_fine, rng):
    marked = rng.choice(square_fine.num_triangles, size=6, replace=False)
    fine = square_fine.bisect(marked)
    anc = fine.ancestors_in(square_fine)
    sums = np.zeros(square_fine.num_triangles)
    np.add.at(sums, anc, fine.area)
    assert np.allclose(sums, square_fine.area, rtol=1e-14)


def test_patches(square):
    interior = np.flatnonzero(~square.edge_is_boundary)
    tris, xi = square.edge_patch(interior[0])
    assert xi == 2 and tris == {0, 1}
    boundary = np.flatnonzero(square.edge_is_boundary)
    tris, xi = square.edge_patch(boundary[0])
    assert xi == 1
    sizes = sorted(square.vertex_patch(p)[1] for p in range(4))
    assert sizes == [1, 1, 2, 2]
    assert square.element_patch(0) == {0, 1}


def test_overlay_identities(square):
    a = square.bisect([0])
    assert set(a.overlay(a).tri_ids) == set(a.tri_ids)
    assert set(a.overlay(square).tri_ids) == set(a.tri_ids)
    assert set(square.overlay(a).tri_ids) == set(a.tri_ids)


def _overlay_oracle(a, b):
    """Forest-union oracle: leaves reachable from the roots whose strict
    ancestor set is exactly the union of both views' ancestor sets."""
    f = a._forest
    active = set(a.tri_ids.tolist()) | set(b.tri_ids.tolist())
    subdivided = set()
    for t in active:
        t = f.tri_parent[t]
        while t != -1:
            subdivided.add(t)
            t = f.tri_parent[t]
    leaves = set()
    stack = list(f.roots)
    while stack:
        t = stack.pop()
        if t in subdivided:
            stack.extend(f.tri_children[t])
        else:
            leaves.add(t)
    return leaves


def test_overlay_random_pair(square, rng):
    a = square
    for _ in range(3):
        a = a.bisect(rng.choice(a.num_triangles,
                                size=max(1, a.num_triangles // 3),
                                replace=False))
    b = square
    for _ in range(2):
        b = b.bisect(rng.choice(b.num_triangles,
                                size=max(1, b.num_triangles // 2),
                                replace=False))
    o = a.overlay(b)
    assert set(o.tri_ids.tolist()) == _overlay_oracle(a, b)
    assert o.is_refinement_of(a) and o.is_refinement_of(b)
    assert o.num_triangles <= a.num_triangles + b.num_triangles \
        - square.num_triangles
    o.check_conforming()


def test_overlay_requires_same_forest(square):
    other = unit_square_mesh()
    with pytest.raises(MeshError, match="different initial meshes"):
        square.overlay(other)


def test_refined_region_trivial(square):
    assert square.refined_region(square) == set()


def test_refined_region_includes_touching_neighbors(square_fine):
    fine = square_fine.bisect([0])
    region = square_fine.refined_region(fine)
    touching, _ = _region_oracle(square_fine, [0])
    assert region == touching


def _region_oracle(coarse, refined_ids):
    """Geometric oracle: closed-triangle intersection via shapely."""
    from shapely.geometry import Polygon

    polys = [Polygon(coarse.points[coarse.triangles[k]])
             for k in range(coarse.num_triangles)]
    refined_polys = [polys[k] for k in refined_ids]
    touching = {k for k, p in enumerate(polys)
                if any(p.intersects(q) for q in refined_polys)}
    return touching, polys


def test_refined_region_random_vs_shapely(square_fine, rng):
    marked = rng.choice(square_fine.num_triangles, size=5, replace=False)
    fine = square_fine.bisect(marked)
    refined_ids = np.flatnonzero(
        ~np.isin(square_fine.tri_ids, fine.tri_ids))
    region = square_fine.refined_region(fine)
    oracle, _ = _region_oracle(square_fine, refined_ids)
    assert region == oracle


def test_refined_region_requires_refinement(square):
    other = square.bisect([0])
    with pytest.raises(MeshError):
        other.refined_region(square)


def test_shape_metrics_right_isoceles(square):
    angle, hmax, hmin = square.shape_metrics()
    assert np.isclose(angle, 45.0)
    assert np.isclose(hmax, np.sqrt(0.5))
    f = square.uniform_refine()
    assert np.isclose(f.h.max(), hmax / 2)


def test_nvb_similarity_classes_stabilize(rng):
    # The minimum angle over deep descendants equals the two-level minimum.
    for _ in range(5):
        pts = rng.random((3, 2)) * 2
        d1, d2 = pts[1] - pts[0], pts[2] - pts[0]
        area2 = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(area2) < 0.1:
            continue
        m = build_initial(pts, [(0, 1, 2)])
        from morleyfem.mesh import _descend_angles

        two = _descend_angles(m.points[m.triangles[0]],
                              int(m.refinement_edge[0]), 2)
        six = _descend_angles(m.points[m.triangles[0]],
                              int(m.refinement_edge[0]), 6)
        assert np.isclose(two, six, rtol=1e-12)


def test_min_angle_bound_holds_under_random_refinement(lshape, rng):
    bound = nvb_min_angle_bound(lshape)
    mesh = lshape
    for _ in range(4):
        marked = rng.choice(mesh.num_triangles,
                            size=max(1, mesh.num_triangles // 3),
                            replace=False)
        mesh = mesh.bisect(marked)
        assert mesh.min_angle() >= bound - 1e-9


def test_generation_increments(square):
    f = square.bisect([0])
    new = ~np.isin(f.tri_ids, square.tri_ids)
    assert set(f.generation[new]) <= {1, 2}
    assert f.generation[~new].max(initial=0) == 0


def test_edge_conventions(square_fine):
    m = square_fine
    assert np.allclose(np.hypot(m.edge_normal[:, 0], m.edge_normal[:, 1]), 1,
                       atol=1e-15)
    assert np.allclose(np.einsum("ed,ed->e", m.edge_normal, m.edge_tangent),
                       0, atol=1e-15)
    # tau = (-nu_y, nu_x) exactly
    assert np.array_equal(m.edge_tangent,
                          np.column_stack([-m.edge_normal[:, 1],
                                           m.edge_normal[:, 0]]))
    # interior edges: normal points from K_minus into K_plus
    for e in np.flatnonzero(~m.edge_is_boundary):
        kp, km = m.edge_tris[e]
        d = m.centroid[kp] - m.centroid[km]
        assert d @ m.edge_normal[e] > 0
    # boundary: outward
    for e in np.flatnonzero(m.edge_is_boundary):
        km = m.edge_tris[e, 1]
        d = m.edge_midpoint[e] - m.centroid[km]
        assert d @ m.edge_normal[e] > 0


def test_text_roundtrip(tmp_path, square_fine):
    path = tmp_path / "mesh.txt"
    square_fine.save_text(path)
    first = path.read_text().splitlines()[0]
    assert first == (f"vertices {square_fine.num_vertices} / "
                     f"triangles {square_fine.num_triangles}")
    again = load_text(path)
    assert again.num_triangles == square_fine.num_triangles
    assert np.isclose(again.area.sum(), square_fine.area.sum())


def test_json_roundtrip(tmp_path, square):
    path = tmp_path / "mesh.json"
    square.save_json(path)
    data = json.loads(path.read_text())
    assert set(data) == {"vertices", "triangles"}
    again = load_json(path)
    assert again.num_triangles == 2


def test_element_paths_roundtrip(square, rng):
    mesh = square
    for _ in range(3):
        mesh = mesh.bisect(rng.choice(mesh.num_triangles,
                                      size=max(1, mesh.num_triangles // 2),
                                      replace=False))
    ids = np.arange(mesh.num_triangles)
    paths = mesh.element_paths(ids)
    assert np.array_equal(mesh.resolve_paths(paths), ids)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=10 ** 6),
                min_size=1, max_size=8),
       st.integers(min_value=0, max_value=3))
def test_bisect_preserves_conformity_and_area(seeds, rounds):
    mesh = unit_square_mesh()
    total = mesh.area.sum()
    for r in range(rounds + 1):
        marked = sorted({s % mesh.num_triangles for s in seeds})
        mesh = mesh.bisect(marked)
        mesh.check_conforming()
        assert abs(mesh.area.sum() - total) <= 1e-12 * total
        # forest monotonicity: parents of new leaves were leaves before
        assert mesh.min_angle() >= 45 - 1e-9
