import numpy as np
import pytest

from morleyfem.element import as_piecewise, dof_map, random_member
from morleyfem.estimator import l2_product
from morleyfem.mesh import build_initial
from morleyfem.system import (PlateMaterial, SolverError, assemble,
                              assemble_matrix, bilinear, biharmonic_material,
                              default_material, elementwise_energy,
                              energy_error, energy_norm,
                              element_stiffness_matrices, local_stiffness,
                              solve)


def test_material_validation():
    with pytest.raises(ValueError):
        PlateMaterial(-1.0, 0.3)
    with pytest.raises(ValueError):
        PlateMaterial(1.0, 0.5)
    with pytest.raises(ValueError):
        PlateMaterial(1.0, -0.1)


@pytest.mark.parametrize("nu", [0.0, 0.15, 0.3, 0.45, 0.499])
def test_material_tensor_positive_definite(nu):
    mat = PlateMaterial(12 * (1 - nu ** 2), nu)
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = rng.standard_normal((2, 2))
        tau = 0.5 * (g + g.T)
        energy = np.einsum("ab,ab->", mat.apply(tau), tau)
        assert energy >= 0
        if np.abs(tau).max() > 1e-12:
            assert energy > 0


def test_default_material_prefactor_one():
    assert np.isclose(default_material().factor, 1.0)
    assert np.isclose(biharmonic_material().factor, 1.0)
    assert biharmonic_material().poisson == 0.0


def test_local_stiffness_kernel_is_linears(square_fine, rng):
    mat = default_material()
    S = element_stiffness_matrices(square_fine, mat)
    a, b, c = rng.standard_normal(3)
    mesh = square_fine
    for k in range(0, mesh.num_triangles, 5):
        corners = mesh.points[mesh.triangles[k]]
        d = np.empty(6)
        d[:3] = a + corners @ (b, c)
        for i in range(3):
            e = mesh.tri_edge_local[k, i]
            n_out = mesh.edge_sign[k, i] * mesh.edge_normal[e]
            d[3 + i] = np.array([b, c]) @ n_out
        assert np.abs(S[k] @ d).max() < 1e-12 * np.abs(S[k]).max()


def test_local_stiffness_scales_with_modulus(square):
    s1 = local_stiffness(square, 0, PlateMaterial(1.0, 0.3))
    s3 = local_stiffness(square, 0, PlateMaterial(3.0, 0.3))
    assert np.allclose(3 * s1, s3, rtol=1e-15)


def test_local_stiffness_reference_triangle_oracle():
    """Rational-arithmetic oracle on the unit right triangle.

    With E = 12 (1 - nu^2) and nu = 0 the tensor is the identity, so the
    entries are |K| * (Hess phi_i : Hess phi_j) with exact rational Hessians
    obtained from a Fraction linear solve of the dof system.
    """
    from fractions import Fraction as Fr

    import sympy as sp

    mesh = build_initial([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    mat = PlateMaterial(12.0, 0.0)
    S = local_stiffness(mesh, 0, mat)

    x, y = sp.symbols("x y")
    monos = [sp.Integer(1), x, y, x ** 2, x * y, y ** 2]
    corners = [(0, 0), (1, 0), (0, 1)]
    # local edge i is opposite vertex i; outward unit normals:
    edges = [((1, 0), (0, 1), sp.Matrix([1, 1]) / sp.sqrt(2)),
             ((0, 1), (0, 0), sp.Matrix([-1, 0])),
             ((0, 0), (1, 0), sp.Matrix([0, -1]))]
    V = sp.zeros(6, 6)
    for j, m in enumerate(monos):
        for i, (px, py) in enumerate(corners):
            V[i, j] = m.subs({x: px, y: py})
        grad = sp.Matrix([sp.diff(m, x), sp.diff(m, y)])
        for i, (a, b, nu) in enumerate(edges):
            t = sp.symbols("t")
            sub = {x: a[0] + t * (b[0] - a[0]), y: a[1] + t * (b[1] - a[1])}
            V[3 + i, j] = sp.integrate((grad.T * nu)[0].subs(sub), (t, 0, 1))
    C = V.inv()
    oracle = sp.zeros(6, 6)
    area = sp.Rational(1, 2)
    for i in range(6):
        for j in range(6):
            Hi = sp.Matrix([[2 * C[3, i], C[4, i]], [C[4, i], 2 * C[5, i]]])
            Hj = sp.Matrix([[2 * C[3, j], C[4, j]], [C[4, j], 2 * C[5, j]]])
            oracle[i, j] = area * sum(Hi[a, b] * Hj[a, b]
                                      for a in range(2) for b in range(2))
    oracle = np.array(oracle.evalf(30), dtype=float)
    assert np.abs(S - oracle).max() < 1e-10 * np.abs(oracle).max()


def test_assemble_zero_load(square_fine):
    sysm = assemble(square_fine, default_material(), lambda x, y: 0 * x)
    assert np.all(sysm.load == 0)


def test_assembled_matrix_symmetric_positive_definite(square_fine):
    A = assemble(square_fine, default_material(), lambda x, y: 0 * x).matrix
    dense = A.toarray()
    assert np.abs(dense - dense.T).max() < 1e-12 * np.abs(dense).max()
    np.linalg.cholesky(dense)


def test_global_kernel_before_constraints(square_fine, rng):
    A = assemble_matrix(square_fine, default_material(), constrain=False)
    a, b, c = rng.standard_normal(3)
    mesh = square_fine
    d = np.empty(mesh.num_vertices + mesh.num_edges)
    d[:mesh.num_vertices] = a + mesh.points @ (b, c)
    d[mesh.num_vertices:] = np.einsum(
        "ed,d->e", mesh.edge_normal, np.array([b, c]))
    assert np.abs(A @ d).max() < 1e-12 * np.abs(A.toarray()).max()


def test_global_energy_matches_elementwise_oracle(square_fine, rng):
    mat = default_material()
    u = random_member(square_fine, rng)
    A = assemble(square_fine, mat, lambda x, y: 0 * x).matrix
    free = dof_map(square_fine).free
    quad = u.coeffs[free] @ (A @ u.coeffs[free])
    # independent elementwise route
    H = as_piecewise(u).hessians()
    CH = mat.apply(H)
    direct = float(np.einsum("t,tab,tab->", square_fine.area, CH, H))
    assert np.isclose(quad, direct, rtol=1e-12)
    assert np.isclose(elementwise_energy(u, mat).sum(), direct, rtol=1e-12)


def test_solve_zero_load_gives_zero(square_fine):
    u = solve(assemble(square_fine, default_material(), lambda x, y: 0 * x))
    assert np.all(u.coeffs == 0)


def test_galerkin_identity(smooth_problem, rng):
    mesh = smooth_problem.mesh0.uniform_refine().uniform_refine()
    mat = smooth_problem.material
    u = solve(assemble(mesh, mat, smooth_problem.f))
    for _ in range(20):
        w = random_member(mesh, rng)
        lhs = bilinear(u, w, mat)
        rhs = l2_product(mesh, smooth_problem.f, as_piecewise(w))
        scale = energy_norm(u, mat) * energy_norm(w, mat) + abs(rhs) + 1e-300
        assert abs(lhs - rhs) <= 1e-9 * scale


def test_solver_reports_breakdown(square_fine):
    sysm = assemble(square_fine, default_material(), lambda x, y: x * 0 + 1)
    A = sysm.matrix.tolil()
    A[0, :] = 0.0
    A[:, 0] = 0.0
    sysm.matrix = A.tocsr()
    with pytest.raises(SolverError):
        solve(sysm)


def test_energy_norm_and_error(smooth_problem):
    from morleyfem.element import interpolate_canonical

    mat = smooth_problem.material
    mesh = smooth_problem.mesh0.uniform_refine()

    zero = random_member(mesh, np.random.default_rng(0))
    zero = type(zero)(mesh, zero.coeffs * 0)
    assert energy_norm(zero, mat) == 0.0

    class Q:
        def value(self, x, y):
            return np.asarray(x) ** 2 - 0.5 * np.asarray(y) ** 2

        def gradient(self, x, y):
            return np.stack([2 * np.asarray(x), -np.asarray(y)], axis=-1)

        def hessian(self, x, y):
            H = np.zeros(np.shape(np.asarray(x)) + (2, 2))
            H[..., 0, 0] = 2.0
            H[..., 1, 1] = -1.0
            return H

    q = Q()
    uq = interpolate_canonical(q, mesh)
    assert energy_error(q, uq, mat) < 1e-12


def test_energy_error_triangle_inequality(smooth_problem):
    from morleyfem.element import interpolate_canonical, PiecewiseQuadratic

    p = smooth_problem
    mesh = p.mesh0.uniform_refine().uniform_refine()
    u_h = solve(assemble(mesh, p.material, p.f))
    Pu = interpolate_canonical(p.exact, mesh, edge_points=5)
    total = energy_error(p.exact, u_h, p.material, degree=12)
    first = energy_error(p.exact, Pu, p.material, degree=12)
    second = energy_norm(PiecewiseQuadratic(
        mesh, as_piecewise(Pu).coeffs - as_piecewise(u_h).coeffs), p.material)
    assert total <= first + second + 1e-12


def test_nested_representation_energy_invariance(square_fine, rng):
    # Unrefined elements keep their elementwise energy bit-for-bit nearly.
    mat = default_material()
    u = random_member(square_fine, rng)
    fine = square_fine.bisect([0])
    transferred = as_piecewise(u).transfer_to(fine)
    e_coarse = elementwise_energy(u, mat)
    e_fine = elementwise_energy(transferred, mat)
    anc = fine.ancestors_in(square_fine)
    agg = np.zeros(square_fine.num_triangles)
    np.add.at(agg, anc, e_fine)
    common = np.isin(square_fine.tri_ids, fine.tri_ids)
    assert np.abs(agg[common] - e_coarse[common]).max() \
        <= 1e-13 * max(1.0, e_coarse.max())


def test_matrix_market_dump(tmp_path, square_fine):
    sysm = assemble(square_fine, default_material(), lambda x, y: 0 * x + 1)
    path = tmp_path / "matrix.mtx"
    sysm.dump_matrix_market(path)
    from scipy.io import mmread

    A = mmread(path)
    assert np.abs((A - sysm.matrix).toarray()).max() < 1e-15
