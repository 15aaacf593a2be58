"""Numerical verification suites for the structural identities and bounds.

Each suite returns a JSON-serializable report::

    {"suite": ..., "passed": bool, "checks": [{"name", "value", "threshold",
     "passed", ...}, ...]}

Exact identities are checked as relative residuals, estimates as measured
constants whose spread across levels must stay within a fixed factor
(2 for interpolation constants, 3 for lemma ratios).
"""

from __future__ import annotations

import numpy as np

from . import adapt, bench, estimator as est, system as syst
from .element import (MorleyFunction, PiecewiseQuadratic, as_piecewise,
                      interpolate_canonical, kernel_check, prolong_by_averaging,
                      random_member, restrict_to_coarse)
from .quadrature import edge_rule, triangle_points, triangle_rule

IDENTITY_TOL = 1e-9
RATIO_FACTOR = 3.0
CONSTANT_FACTOR = 2.0
_TINY = 1e-300


def _check(name, value, threshold, **extra):
    entry = {"name": name, "value": float(value),
             "threshold": float(threshold),
             "passed": bool(value <= threshold)}
    entry.update(extra)
    return entry


def _finish(suite, checks, **details):
    report = {"suite": suite, "passed": all(c["passed"] for c in checks),
              "checks": checks}
    report.update(details)
    return report


def _spread(values):
    values = np.asarray([v for v in values if np.isfinite(v)])
    if values.size == 0:
        return float("nan")
    med = np.median(values)
    return float(values.max() / med) if med > 0 else float("inf")


# -- randomized nested mesh/solution sequences ----------------------------


def nested_sequence(problem, levels, seed=0, mark_fraction=0.25,
                    prerefine=2, volume_degree=4):
    """Meshes nested by random marking, with their discrete solutions."""
    rng = np.random.default_rng(seed)
    mesh = problem.mesh0
    for _ in range(prerefine):
        mesh = mesh.uniform_refine()
    meshes = [mesh]
    for _ in range(levels):
        n = mesh.num_triangles
        size = max(1, int(mark_fraction * n))
        marked = rng.choice(n, size=size, replace=False)
        mesh = mesh.bisect(marked)
        meshes.append(mesh)
    solutions = [syst.solve(syst.assemble(m, problem.material, problem.f,
                                          volume_degree))
                 for m in meshes]
    return meshes, solutions


# -- polynomial integration helpers ---------------------------------------


def _poly_hessian_integrals(poly, mesh, degree):
    """Elementwise integral of the Hessian of a polynomial, (nt, 2, 2)."""
    bary, w = triangle_rule(degree)
    pts = triangle_points(bary, mesh.points[mesh.triangles])
    H = poly.hessian(pts[..., 0], pts[..., 1])
    return mesh.area[:, None, None] * np.einsum("q,tqab->tab", w, H)


def _poly_energy_sq(poly, mesh, material, degree):
    bary, w = triangle_rule(degree)
    pts = triangle_points(bary, mesh.points[mesh.triangles])
    H = poly.hessian(pts[..., 0], pts[..., 1])
    CH = material.apply(H)
    return float(np.einsum("t,q,tqab,tqab->", mesh.area, w, CH, H))


def _energy_vs_poly(poly, field, material, degree):
    """a_h(poly - field, w) pairing helper: integral of C Hess(poly) : H_w."""
    mesh = field.mesh
    CHint = material.apply(_poly_hessian_integrals(poly, mesh, degree))
    return float(np.einsum("tab,tab->", CHint, field.hessians()))


# -- identity suite ---------------------------------------------------------


def identity_suite(problem, levels=5, samples=12, seed=0, tol=IDENTITY_TOL,
                   volume_degree=4):
    """Exact-identity checks on randomized nested meshes.

    Covers the Galerkin identity, the construction identities of the
    canonical interpolation and the coarse restriction, the locality of the
    restriction on unrefined elements, and the two-level residual identity.
    """
    rng = np.random.default_rng(seed + 1)
    meshes, solutions = nested_sequence(problem, levels, seed=seed,
                                        volume_degree=volume_degree)
    mat = problem.material
    out = {name: 0.0 for name in
           ["galerkin", "interp_edge_means", "interp_orthogonality",
            "restrict_edge_means", "restrict_orthogonality",
            "restrict_locality", "two_level_identity", "residual_vanishes"]}

    for lvl in range(levels):
        coarse, fine = meshes[lvl], meshes[lvl + 1]
        u_H, u_h = solutions[lvl], solutions[lvl + 1]

        # Galerkin identity on the coarse level.
        for _ in range(samples):
            w = random_member(coarse, rng)
            r = abs(syst.bilinear(u_H, w, mat)
                    - est.l2_product(coarse, problem.f, as_piecewise(w),
                                      volume_degree))
            scale = (syst.energy_norm(u_H, mat) * syst.energy_norm(w, mat)
                     + abs(est.l2_product(coarse, problem.f,
                                           as_piecewise(w), volume_degree))
                     + _TINY)
            out["galerkin"] = max(out["galerkin"], r / scale)
            out["residual_vanishes"] = max(
                out["residual_vanishes"],
                abs(est.residual(u_H, problem.f, w, mat, volume_degree)) / scale)

        # Canonical interpolation of a random clamped polynomial.
        v = bench.random_clamped_polynomial(problem.name, rng)
        npts = (v.degree + 3) // 2
        Pv = interpolate_canonical(v, fine, edge_points=npts)
        out["interp_edge_means"] = max(
            out["interp_edge_means"], _edge_mean_residual(v, Pv, npts))
        hdeg = max(0, v.degree - 2)
        scale_v = np.sqrt(_poly_energy_sq(v, fine, mat, hdeg))
        for _ in range(samples):
            w = random_member(fine, rng)
            r = abs(_energy_vs_poly(v, as_piecewise(w), mat, hdeg)
                    - syst.bilinear(Pv, w, mat))
            out["interp_orthogonality"] = max(
                out["interp_orthogonality"],
                r / (scale_v * syst.energy_norm(w, mat) + _TINY))

        # Restriction of a random fine Morley function.
        v_h = random_member(fine, rng)
        IHv = restrict_to_coarse(v_h, coarse)
        out["restrict_edge_means"] = max(
            out["restrict_edge_means"], _restriction_mean_residual(v_h, IHv))
        out["restrict_locality"] = max(
            out["restrict_locality"], _restriction_locality(v_h, IHv))
        diff = PiecewiseQuadratic(
            fine, as_piecewise(v_h).coeffs
            - as_piecewise(IHv).transfer_to(fine).coeffs)
        for _ in range(samples):
            v_H = random_member(coarse, rng)
            r = abs(syst.bilinear(as_piecewise(v_H).transfer_to(fine), diff, mat))
            out["restrict_orthogonality"] = max(
                out["restrict_orthogonality"],
                r / (syst.energy_norm(v_H, mat)
                     * (syst.energy_norm(v_h, mat)
                        + syst.energy_norm(IHv, mat)) + _TINY))

        # Two-level residual identity for the discrete solutions.
        w_field = PiecewiseQuadratic(
            fine, as_piecewise(u_h).coeffs
            - as_piecewise(u_H).transfer_to(fine).coeffs)
        wnorm = syst.energy_norm(w_field, mat)
        for _ in range(samples):
            v_h = random_member(fine, rng)
            IHv = restrict_to_coarse(v_h, coarse)
            lhs = syst.bilinear(w_field, v_h, mat)
            rhs = (est.l2_product(fine, problem.f, as_piecewise(v_h),
                                   volume_degree)
                   - est.l2_product(coarse, problem.f, as_piecewise(IHv),
                                     volume_degree))
            scale = wnorm * syst.energy_norm(v_h, mat) + _TINY
            out["two_level_identity"] = max(
                out["two_level_identity"], abs(lhs - rhs) / scale)

    checks = [_check(name, val, tol) for name, val in out.items()]
    return _finish(f"identities[{problem.name}]", checks, levels=levels)


def _edge_mean_residual(v, Pv, npts):
    """Residual of the per-edge mean-gradient matching, both components,
    both sides, relative to the largest edge mean."""
    mesh = Pv.mesh
    t, w = edge_rule(npts)
    p0 = mesh.points[mesh.edge_nodes[:, 0]]
    p1 = mesh.points[mesh.edge_nodes[:, 1]]
    pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    g = v.gradient(pts[..., 0], pts[..., 1])
    mean_exact = np.einsum("q,eqd->ed", w, g)
    # The tangential mean of a gradient telescopes to endpoint values.
    vals = v.value(mesh.points[:, 0], mesh.points[:, 1])
    dtan = (vals[mesh.edge_nodes[:, 1]] - vals[mesh.edge_nodes[:, 0]]) \
        / mesh.edge_length
    tau, nu = mesh.edge_tangent, mesh.edge_normal
    mean_exact = (dtan[:, None] * tau
                  + np.einsum("ed,ed->e", mean_exact, nu)[:, None] * nu)

    sides = as_piecewise(Pv).edge_mean_gradients()
    scale = np.abs(mean_exact).max() + _TINY
    worst = 0.0
    for s in (0, 1):
        ok = mesh.edge_tris[:, s] >= 0
        worst = max(worst, np.abs(sides[ok, s] - mean_exact[ok]).max() / scale)
    return worst


def _restriction_mean_residual(v_h, IHv):
    """Coarse-edge mean gradients of the restriction against the summed fine
    means, both components, each coarse side."""
    fine, coarse = v_h.mesh, IHv.mesh
    forest = fine._forest
    fine_set = set(fine.edge_ids.tolist())
    fine_pos = {int(e): i for i, e in enumerate(fine.edge_ids)}
    fm = as_piecewise(v_h).edge_mean_gradients()
    fine_vals = v_h.vertex_dofs

    cm = as_piecewise(IHv).edge_mean_gradients()
    worst = 0.0
    scale = np.nanmax(np.abs(cm)) + _TINY
    for j in range(coarse.num_edges):
        leaves = forest.leaf_edges_under(int(coarse.edge_ids[j]), fine_set)
        idx = [fine_pos[l] for l in leaves]
        nu = coarse.edge_normal[j]
        # Normal part: length-weighted mean of the (single-valued) fine means.
        per_leaf = []
        for i in idx:
            s = 0 if fine.edge_tris[i, 0] >= 0 else 1
            per_leaf.append(fine.edge_length[i] * (fm[i, s] @ nu))
        mean_n = sum(per_leaf) / coarse.edge_length[j]
        # Tangential part telescopes through the shared fine vertices.
        a, b = coarse.edge_nodes[j]
        pa = np.searchsorted(fine.vertex_ids, coarse.vertex_ids[a])
        pb = np.searchsorted(fine.vertex_ids, coarse.vertex_ids[b])
        mean_t = (fine_vals[pb] - fine_vals[pa]) / coarse.edge_length[j]
        target = mean_t * coarse.edge_tangent[j] + mean_n * nu
        for s in (0, 1):
            if coarse.edge_tris[j, s] >= 0:
                worst = max(worst, np.abs(cm[j, s] - target).max() / scale)
    return worst


def _restriction_locality(v_h, IHv):
    """Coefficient mismatch of the restriction on common elements."""
    fine, coarse = v_h.mesh, IHv.mesh
    common = np.intersect1d(fine.tri_ids, coarse.tri_ids)
    if common.size == 0:
        return 0.0
    fi = np.searchsorted(fine.tri_ids, common)
    ci = np.searchsorted(coarse.tri_ids, common)
    a = as_piecewise(v_h).coeffs[fi]
    b = as_piecewise(IHv).coeffs[ci]
    return float(np.abs(a - b).max() / (np.abs(a).max() + _TINY))


# -- interpolation property suite -------------------------------------------


def interpolation_property_suite(problem, levels=5, samples=8, seed=0,
                                 tol=IDENTITY_TOL, volume_degree=4):
    """Identity checks plus measured interpolation constants and the kernel
    property of the patchwise averaging."""
    base = identity_suite(problem, levels=levels, samples=samples, seed=seed,
                          tol=tol, volume_degree=volume_degree)
    rng = np.random.default_rng(seed + 77)
    meshes, _ = nested_sequence(problem, levels, seed=seed,
                                volume_degree=volume_degree)
    mat = problem.material

    approx_consts, restrict_consts, prolong_consts = [], [], []
    kernel_ok = True
    for lvl in range(levels):
        coarse, fine = meshes[lvl], meshes[lvl + 1]

        v = bench.random_clamped_polynomial(problem.name, rng)
        Pv = interpolate_canonical(v, fine, edge_points=(v.degree + 3) // 2)
        approx_consts.append(_interp_l2_constant(v, Pv))

        v_h = random_member(fine, rng)
        IHv = restrict_to_coarse(v_h, coarse)
        restrict_consts.append(_restriction_l2_constant(v_h, IHv))

        v_H = random_member(coarse, rng)
        Iv = prolong_by_averaging(v_H, fine)
        prolong_consts.append(_prolongation_constant(v_H, Iv))

        kernel_ok = kernel_ok and _kernel_cases(fine, rng)

    checks = list(base["checks"])
    checks.append(_check("interp_l2_constant_spread", _spread(approx_consts),
                         CONSTANT_FACTOR, constants=approx_consts))
    checks.append(_check("restrict_l2_constant_spread",
                         _spread(restrict_consts), CONSTANT_FACTOR,
                         constants=restrict_consts))
    checks.append(_check("prolong_energy_constant_spread",
                         _spread(prolong_consts), CONSTANT_FACTOR,
                         constants=prolong_consts))
    checks.append({"name": "kernel_lemma", "passed": bool(kernel_ok),
                   "value": 0.0 if kernel_ok else 1.0, "threshold": 0.5})
    return _finish(f"interpolation[{problem.name}]", checks, levels=levels)


def _interp_l2_constant(v, Pv):
    """max_K ||v - Pv||_L2(K) / (h_K^2 |v|_H2(K))."""
    mesh = Pv.mesh
    degree = 2 * v.degree
    bary, w = triangle_rule(degree)
    pts = triangle_points(bary, mesh.points[mesh.triangles])
    vv = v.value(pts[..., 0], pts[..., 1])
    pv = as_piecewise(Pv).values_at_bary(bary)
    err = np.sqrt(mesh.area * np.einsum("q,tq->t", w, (vv - pv) ** 2))
    H = v.hessian(pts[..., 0], pts[..., 1])
    semi = np.sqrt(mesh.area * np.einsum("q,tqab,tqab->t", w, H, H))
    ok = semi > 1e-14 * semi.max()
    return float((err[ok] / (mesh.h[ok] ** 2 * semi[ok])).max())


def _restriction_l2_constant(v_h, IHv):
    """max over refined coarse K of ||IHv - v||_L2(K)/(h^2 ||H v||_L2(K))."""
    fine, coarse = v_h.mesh, IHv.mesh
    anc = fine.ancestors_in(coarse)
    refined = ~np.isin(coarse.tri_ids, fine.tri_ids)

    diff = PiecewiseQuadratic(
        fine, as_piecewise(IHv).transfer_to(fine).coeffs
        - as_piecewise(v_h).coeffs)
    bary, w = triangle_rule(4)
    vals = diff.values_at_bary(bary)
    l2_fine = fine.area * np.einsum("q,tq->t", w, vals ** 2)
    H = as_piecewise(v_h).hessians()
    h2_fine = fine.area * np.einsum("tab,tab->t", H, H)

    l2 = np.zeros(coarse.num_triangles)
    h2 = np.zeros(coarse.num_triangles)
    np.add.at(l2, anc, l2_fine)
    np.add.at(h2, anc, h2_fine)
    ok = refined & (h2 > 1e-28 * max(h2.max(), _TINY))
    if not ok.any():
        return float("nan")
    return float(np.sqrt(l2[ok] / (coarse.h[ok] ** 4 * h2[ok])).max())


def _prolongation_constant(v_H, Iv):
    """||H(Iv - v)||^2_L2 over the jump terms of the refined elements."""
    coarse, fine = v_H.mesh, Iv.mesh
    diff = PiecewiseQuadratic(
        fine, as_piecewise(Iv).coeffs
        - as_piecewise(v_H).transfer_to(fine).coeffs)
    H = diff.hessians()
    lhs = float(np.einsum("t,tab,tab->", fine.area, H, H))
    jump_sq = est.jump_terms(as_piecewise(v_H))
    refined = ~np.isin(coarse.tri_ids, fine.tri_ids)
    rhs = float(jump_sq[refined].sum())
    return lhs / rhs if rhs > _TINY else float("nan")


def _kernel_cases(mesh, rng):
    interior = np.flatnonzero(~mesh.edge_is_boundary)
    e = int(rng.choice(interior))
    k1, k2 = (int(t) for t in mesh.edge_tris[e])

    a, b, c = rng.standard_normal(3)
    coeffs = np.zeros((mesh.num_triangles, 6))
    for k in (k1, k2):
        coeffs[k, 0] = a + b * mesh.centroid[k, 0] + c * mesh.centroid[k, 1]
        coeffs[k, 1] = b * mesh.h[k]
        coeffs[k, 2] = c * mesh.h[k]
    linear = PiecewiseQuadratic(mesh, coeffs)
    if not kernel_check(linear, k1, k2):
        return False

    broken = PiecewiseQuadratic(mesh, coeffs.copy())
    broken.coeffs[k2, 0] += 1.0
    try:
        kernel_check(broken, k1, k2)
        return False
    except ValueError:
        pass

    v = random_member(mesh, rng)
    if np.abs(v.hessian(k1)).max() > 1e-8:
        if kernel_check(v, k1, k2):
            return False
    return True


# -- lemma ratio suites -----------------------------------------------------


def _adaptive_sequence(problem, theta, max_dofs, boundary_jumps="trace",
                       volume_degree=4):
    _, _, history = adapt.anfem(
        problem.mesh0, problem.f, problem.material, eps=0.0, theta=theta,
        max_iters=200, max_dofs=max_dofs, boundary_jumps=boundary_jumps,
        volume_degree=volume_degree, exact=problem.exact, keep_meshes=True,
        verify_reductions=False)
    return history


def quasi_orthogonality_suite(problem, pairs=5, theta=0.3, max_dofs=3000,
                              ref_factor=16, samples=8, seed=0,
                              volume_degree=4, directory=None):
    """Measured quasi-orthogonality ratios over consecutive adaptive pairs.

    The error function is the exact solution when available, otherwise the
    solution on an adaptively refined mesh with ``ref_factor`` times the
    unknowns of the finest pair.
    """
    rng = np.random.default_rng(seed + 5)
    history = _adaptive_sequence(problem, theta, max_dofs,
                                 volume_degree=volume_degree)
    meshes, sols = history.meshes, history.solutions
    if len(meshes) < pairs + 1:
        raise ValueError("adaptive run produced too few levels")
    meshes, sols = meshes[-(pairs + 1):], sols[-(pairs + 1):]
    mat = problem.material

    exact = problem.exact
    if exact is None:
        exact = bench.reference_solution(
            problem, min_dofs=ref_factor * len(sols[-1].coeffs), theta=theta,
            volume_degree=volume_degree, directory=directory)
        for m in meshes:
            if not exact.mesh.is_refinement_of(m):
                raise RuntimeError("reference does not refine the sequence")

    ratios, identity_res = [], 0.0
    for lvl in range(pairs):
        coarse, fine = meshes[lvl], meshes[lvl + 1]
        u_H, u_h = sols[lvl], sols[lvl + 1]
        w = PiecewiseQuadratic(
            fine, as_piecewise(u_h).coeffs
            - as_piecewise(u_H).transfer_to(fine).coeffs)

        if not isinstance(exact, (MorleyFunction, PiecewiseQuadratic)):
            hdeg = max(volume_degree, getattr(exact, "degree", 8) - 2)
            num = abs(_energy_vs_poly(exact, w, mat, hdeg)
                      - syst.bilinear(w, u_h, mat))
        else:
            wf = w.transfer_to(exact.mesh)
            ef = PiecewiseQuadratic(
                exact.mesh, as_piecewise(exact).coeffs
                - as_piecewise(u_h).transfer_to(exact.mesh).coeffs)
            num = abs(syst.bilinear(wf, ef, mat))

        herr = bench.hessian_error_sq_by_element(exact, u_h)
        herr_coarse = np.zeros(coarse.num_triangles)
        np.add.at(herr_coarse, fine.ancestors_in(coarse), herr)
        fnorm = np.sqrt(est.f_moments(coarse, problem.f, volume_degree)[0])
        refined = ~np.isin(coarse.tri_ids, fine.tri_ids)
        den = float((coarse.h[refined] ** 2 * fnorm[refined]
                     * np.sqrt(herr_coarse[refined])).sum())
        if den > _TINY:
            ratios.append(num / den)

        wnorm = syst.energy_norm(w, mat)
        for _ in range(samples):
            v_h = random_member(fine, rng)
            IHv = restrict_to_coarse(v_h, coarse)
            lhs = syst.bilinear(w, v_h, mat)
            rhs = (est.l2_product(fine, problem.f, as_piecewise(v_h),
                                   volume_degree)
                   - est.l2_product(coarse, problem.f, as_piecewise(IHv),
                                     volume_degree))
            cross = abs(syst.bilinear(
                as_piecewise(u_H).transfer_to(fine),
                PiecewiseQuadratic(fine, as_piecewise(v_h).coeffs
                                   - as_piecewise(IHv).transfer_to(fine).coeffs),
                mat))
            scale = wnorm * syst.energy_norm(v_h, mat) + _TINY
            identity_res = max(identity_res, abs(lhs - rhs) / scale,
                               cross / scale)

    checks = [
        _check("ratio_spread", _spread(ratios), RATIO_FACTOR, ratios=ratios),
        _check("two_level_identity", identity_res, IDENTITY_TOL),
    ]
    return _finish(f"quasi_orthogonality[{problem.name}]", checks,
                   ratios=ratios)


def discrete_reliability_suite(problem, pairs=5, theta=0.3, max_dofs=3000,
                               mark_fraction=0.2, seed=0, volume_degree=4,
                               boundary_jumps="trace"):
    """Two-level energy distance against the estimator on the refined
    region."""
    rng = np.random.default_rng(seed + 9)
    history = _adaptive_sequence(problem, theta, max_dofs,
                                 boundary_jumps=boundary_jumps,
                                 volume_degree=volume_degree)
    meshes = history.meshes[-(pairs + 1):]
    sols = history.solutions[-(pairs + 1):]
    fields = history.indicator_fields[-(pairs + 1):]
    mat = problem.material

    violations = []

    def pair_ratio(coarse, fine, u_H, field_H, u_h):
        num = syst.energy_norm(PiecewiseQuadratic(
            fine, as_piecewise(u_h).coeffs
            - as_piecewise(u_H).transfer_to(fine).coeffs), mat) ** 2
        region = coarse.refined_region(fine)
        den = float(field_H.eta_sq[sorted(region)].sum())
        if den > _TINY:
            return num / den
        if num > 1e-18:
            violations.append(num)
        return None

    consecutive = [pair_ratio(meshes[lvl], meshes[lvl + 1], sols[lvl],
                              fields[lvl], sols[lvl + 1])
                   for lvl in range(len(meshes) - 1)]
    consecutive = [r for r in consecutive if r is not None]

    # Random marked sets and one uniform pair exercise other refinement
    # patterns; each family is pooled separately.
    random_pairs = []
    for lvl in range(len(meshes) - 1):
        coarse, u_H, field_H = meshes[lvl], sols[lvl], fields[lvl]
        n = coarse.num_triangles
        marked = rng.choice(n, size=max(1, int(mark_fraction * n)),
                            replace=False)
        fine = coarse.bisect(marked)
        u_h = syst.solve(syst.assemble(fine, mat, problem.f, volume_degree))
        r = pair_ratio(coarse, fine, u_H, field_H, u_h)
        if r is not None:
            random_pairs.append(r)
    coarse = meshes[0]
    fine = coarse.uniform_refine()
    u_h = syst.solve(syst.assemble(fine, mat, problem.f, volume_degree))
    uniform_ratio = pair_ratio(coarse, fine, sols[0], fields[0], u_h)

    checks = [
        _check("ratio_spread", _spread(consecutive), RATIO_FACTOR,
               ratios=consecutive),
        _check("random_marking_spread", _spread(random_pairs), RATIO_FACTOR,
               ratios=random_pairs),
        {"name": "no_zero_estimator_violations", "value": float(len(violations)),
         "threshold": 0.5, "passed": not violations},
    ]
    return _finish(f"discrete_reliability[{problem.name}]", checks,
                   ratios=consecutive, random_ratios=random_pairs,
                   uniform_ratio=uniform_ratio)


def marking_suite(cases=200, max_elements=12, seed=0):
    """Greedy bulk marking equals the brute-force minimum cardinality."""
    rng = np.random.default_rng(seed + 13)
    failures = 0
    for _ in range(cases):
        n = int(rng.integers(1, max_elements + 1))
        eta_sq = rng.random(n) ** 2
        if rng.random() < 0.1:
            eta_sq[rng.integers(0, n)] = 0.0
        theta = float(rng.uniform(0.05, 0.95))
        greedy = adapt.doerfler_mark(eta_sq, theta)
        brute = adapt.doerfler_mark_bruteforce(eta_sq, theta)
        if len(greedy) != len(brute):
            failures += 1
    checks = [{"name": "greedy_matches_bruteforce", "value": float(failures),
               "threshold": 0.5, "passed": failures == 0, "cases": cases}]
    return _finish("marking", checks)


def estimator_reduction_suite(problem=None, theta=0.4, max_dofs=1500,
                              volume_degree=4):
    """Inline halving checks of a short adaptive run."""
    problem = problem or bench.problem_square_smooth()
    _, _, history = adapt.anfem(
        problem.mesh0, problem.f, problem.material, eps=0.0, theta=theta,
        max_iters=40, max_dofs=max_dofs, volume_degree=volume_degree,
        verify_reductions=True)
    est_ok = all(c["estimator"]["per_element"] and c["estimator"]["global"]
                 for c in history.reduction_checks)
    mesh_ok = all(c["meshsize"]["ok"] for c in history.reduction_checks)
    integ_ok = all(c["angle_ok"] and c["area_ok"] and c["conforming"]
                   for c in history.integrity_checks)
    checks = [
        {"name": "estimator_halving", "value": 0.0 if est_ok else 1.0,
         "threshold": 0.5, "passed": est_ok},
        {"name": "meshsize_reduction", "value": 0.0 if mesh_ok else 1.0,
         "threshold": 0.5, "passed": mesh_ok},
        {"name": "mesh_integrity", "value": 0.0 if integ_ok else 1.0,
         "threshold": 0.5, "passed": integ_ok},
    ]
    return _finish(f"estimator_reduction[{problem.name}]", checks,
                   steps=len(history.reduction_checks))


def contraction_suite(theta=0.3, max_dofs=20000, beta1=1.0, factor=0.95):
    """Total-error contraction on the smooth benchmark."""
    problem = bench.problem_square_smooth()
    _, _, history = adapt.anfem(
        problem.mesh0, problem.f, problem.material, eps=0.0, theta=theta,
        max_iters=60, max_dofs=max_dofs, exact=problem.exact,
        verify_reductions=False, beta1=beta1)
    best = bench.contraction_search(history.column("energy_error"),
                                    history.column("eta_tilde"))
    checks = [{
        "name": "contraction_factor",
        "value": best["average_factor"] if best else float("inf"),
        "threshold": factor,
        "passed": bool(best and best["average_factor"] <= factor),
        "gamma": best["gamma"] if best else None,
    }]
    return _finish("contraction[square_smooth]", checks,
                   best=best, levels=len(history.records))


def smooth_rate_suite(levels=7, n_fit=4, band=(0.40, 0.60),
                      effectivity_cap=3.0):
    """Uniform-refinement rate and effectivity band on the smooth benchmark."""
    problem = bench.problem_square_smooth()
    _, _, history = adapt.uniform_run(problem.mesh0, problem.f,
                                      problem.material, levels,
                                      exact=problem.exact,
                                      verify_reductions=False)
    report = bench.rate_fit(history, x_axis="dofs", n_fit=n_fit)
    checks = [
        {"name": "uniform_rate_dofs", "value": report.slope_error,
         "threshold": band[1], "passed": bool(band[0] <= report.slope_error
                                              <= band[1]),
         "band": list(band)},
        _check("effectivity_band", report.effectivity_band, effectivity_cap,
               effectivity=report.effectivity.tolist()),
    ]
    return _finish("rates[square_smooth]", checks,
                   slope=report.slope_error, dofs=history.column("dofs").tolist())


def lshape_rate_suite(run_dofs=25000, ref_dofs=500_000, theta=0.3,
                      band=(0.35, 0.60), min_gap=0.10, directory=None,
                      uniform_levels=None):
    """Adaptive versus uniform convergence on the L-shape, with errors
    measured against a cached high-resolution reference."""
    problem = bench.problem_lshape()
    ref = bench.reference_solution(problem, min_dofs=ref_dofs, theta=0.6,
                                   directory=directory)
    mat = problem.material

    _, _, adaptive = adapt.anfem(
        problem.mesh0, problem.f, problem.material, eps=0.0, theta=theta,
        max_iters=200, max_dofs=run_dofs, keep_meshes=True,
        verify_reductions=False)
    if uniform_levels is None:
        uniform_levels = 1
        while 6 * 4 ** uniform_levels * 2 < run_dofs:
            uniform_levels += 1
    _, _, uniform = adapt.uniform_run(problem.mesh0, problem.f,
                                      problem.material, uniform_levels,
                                      keep_meshes=True,
                                      verify_reductions=False)

    def ref_errors(history):
        return np.array([bench.reference_energy_error(ref, u, mat)
                         for u in history.solutions])

    err_a = ref_errors(adaptive)
    err_u = ref_errors(uniform)
    rep_a = bench.rate_fit(adaptive, x_axis="dofs", errors=err_a)
    rep_u = bench.rate_fit(uniform, x_axis="dofs", errors=err_u)
    gap = rep_a.slope_error - rep_u.slope_error
    checks = [
        {"name": "adaptive_rate_dofs", "value": rep_a.slope_error,
         "threshold": band[1],
         "passed": bool(band[0] <= rep_a.slope_error <= band[1]),
         "band": list(band)},
        {"name": "adaptive_beats_uniform", "value": gap,
         "threshold": min_gap, "passed": bool(gap >= min_gap),
         "uniform_rate": rep_u.slope_error},
    ]
    return _finish("rates[lshape]", checks, adaptive_rate=rep_a.slope_error,
                   uniform_rate=rep_u.slope_error,
                   adaptive_dofs=adaptive.column("dofs").tolist(),
                   uniform_dofs=uniform.column("dofs").tolist())


def run_suite(name, seed=0, directory=None):
    """Run a named suite; see SUITES for the registry."""
    if name not in SUITES:
        raise KeyError(f"unknown suite '{name}'; choose from "
                       f"{sorted(SUITES)}")
    return SUITES[name](seed=seed, directory=directory)


def _both_problems(fn, seed, **kwargs):
    reports = [fn(bench.problem_square_smooth(), seed=seed, **kwargs),
               fn(bench.problem_lshape(), seed=seed, **kwargs)]
    return {"suite": reports[0]["suite"].split("[")[0],
            "passed": all(r["passed"] for r in reports),
            "checks": [c for r in reports for c in r["checks"]],
            "reports": reports}


SUITES = {
    "identities": lambda seed=0, directory=None: _both_problems(
        identity_suite, seed),
    "interpolation": lambda seed=0, directory=None: _both_problems(
        interpolation_property_suite, seed),
    "quasi_orthogonality": lambda seed=0, directory=None: _both_problems(
        quasi_orthogonality_suite, seed, directory=directory),
    "discrete_reliability": lambda seed=0, directory=None: _both_problems(
        discrete_reliability_suite, seed),
    "marking": lambda seed=0, directory=None: marking_suite(seed=seed),
    "reduction": lambda seed=0, directory=None: estimator_reduction_suite(),
    "contraction": lambda seed=0, directory=None: contraction_suite(),
    "rates_smooth": lambda seed=0, directory=None: smooth_rate_suite(),
    "rates_lshape": lambda seed=0, directory=None: lshape_rate_suite(
        directory=directory),
}
