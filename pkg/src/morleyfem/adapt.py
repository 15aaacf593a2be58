"""Bulk marking and the adaptive refinement driver.

The loop follows the classical pattern: solve, estimate, mark a minimal bulk
set, refine by newest-vertex bisection with conformity closure.  The driver
performs at least one solve and stops when the estimator drops below the
tolerance or a stop bound (iterations or free dofs) is reached; with a zero
tolerance the stop bounds are what terminates the loop.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import estimator as est
from . import system as syst
from .element import dof_map
from .mesh import nvb_min_angle_bound


@dataclass(frozen=True)
class MarkingConfig:
    """Bulk parameter and refinement depth per marked element."""

    theta: float = 0.3
    bisections_per_mark: int = 1

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if self.bisections_per_mark not in (1, 2):
            raise ValueError("bisections_per_mark must be 1 or 2")


def doerfler_mark(eta_sq, theta):
    """Minimal element set capturing a theta fraction of the squared total.

    Sorts by descending indicator (ties by ascending element id) and takes
    the shortest prefix; the greedy prefix is a minimum-cardinality bulk set.
    Returns an empty array when every indicator vanishes.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    eta_sq = np.asarray(getattr(eta_sq, "eta_sq", eta_sq), dtype=float)
    total = eta_sq.sum()
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(eta_sq)), -eta_sq))
    cum = np.cumsum(eta_sq[order])
    m = int(np.searchsorted(cum, theta * total)) + 1
    m = min(m, len(eta_sq))
    # Floating-point cumsum can misjudge a borderline prefix; settle those
    # with exact rational sums.
    if m < len(eta_sq) and abs(cum[m - 1] - theta * total) <= 1e-9 * total:
        while m < len(eta_sq) and not _bulk_holds(eta_sq[order[:m]], theta, eta_sq):
            m += 1
    return np.sort(order[:m])


def _bulk_holds(selected, theta, eta_sq):
    lhs = sum(Fraction(float(v)) for v in selected)
    rhs = Fraction(float(theta)) * sum(Fraction(float(v)) for v in eta_sq)
    return lhs >= rhs


def doerfler_mark_bruteforce(eta_sq, theta):
    """Exhaustive minimum-cardinality bulk set (test oracle, n <= 16)."""
    eta_sq = np.asarray(eta_sq, dtype=float)
    n = len(eta_sq)
    if n > 16:
        raise ValueError("brute force limited to 16 elements")
    if eta_sq.sum() <= 0.0:
        return np.empty(0, dtype=np.int64)
    for size in range(n + 1):
        for combo in itertools.combinations(range(n), size):
            if _bulk_holds(eta_sq[list(combo)], theta, eta_sq):
                return np.asarray(combo, dtype=np.int64)
    raise AssertionError("unreachable: the full set satisfies the criterion")


@dataclass
class LevelRecord:
    k: int
    elements: int
    dofs: int
    eta: float
    eta_tilde: float
    osc: float
    energy_error: float
    marked: int
    seconds: float


@dataclass
class AdaptiveHistory:
    """Per-iteration record of one adaptive (or uniform) run."""

    records: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    indicator_fields: list = field(default_factory=list)
    reduction_checks: list = field(default_factory=list)
    integrity_checks: list = field(default_factory=list)

    CSV_HEADER = "k,elements,dofs,eta,eta_tilde,osc,energy_error,marked,seconds"

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER.split(","))
            for r in self.records:
                writer.writerow([r.k, r.elements, r.dofs, r.eta, r.eta_tilde,
                                 r.osc, r.energy_error, r.marked, r.seconds])


def anfem(mesh0, f, material, eps, theta, max_iters=30, max_dofs=100_000,
          marking=None, boundary_jumps="trace", volume_degree=4,
          exact=None, keep_meshes=False, verify_reductions=True,
          uniform=False, beta1=1.0):
    """Adaptive loop returning (final mesh, final solution, history).

    ``exact`` (optional) provides a Hessian for true energy errors.  With
    ``verify_reductions`` the estimator and data halving properties of the
    transferred solution and the mesh integrity bounds are checked at every
    step and recorded on the history.  ``uniform=True`` disables marking and
    refines every element twice per round.
    """
    if eps < 0:
        raise ValueError("tolerance must be nonnegative")
    if marking is None:
        marking = MarkingConfig(theta=theta) if not uniform else MarkingConfig()
    angle_bound = nvb_min_angle_bound(mesh0) - 1e-9
    area0 = mesh0.area.sum()

    mesh = mesh0
    history = AdaptiveHistory()
    u = None
    for k in itertools.count():
        t0 = time.perf_counter()
        u = syst.solve(syst.assemble(mesh, material, f, volume_degree))
        field = est.indicators(u, f, boundary_jumps, volume_degree)
        eta = field.eta_total()
        err = syst.energy_error(exact, u, material) if exact is not None \
            else float("nan")
        record = LevelRecord(
            k=k, elements=mesh.num_triangles, dofs=len(dof_map(mesh).free),
            eta=eta, eta_tilde=est.eta_tilde(field, beta1),
            osc=field.osc_total(), energy_error=err, marked=0,
            seconds=time.perf_counter() - t0)
        history.records.append(record)
        if keep_meshes:
            history.meshes.append(mesh)
            history.solutions.append(u)
            history.indicator_fields.append(field)

        if eta < eps or k >= max_iters or record.dofs >= max_dofs:
            break
        if uniform:
            marked = np.arange(mesh.num_triangles)
        else:
            marked = doerfler_mark(field.eta_sq, marking.theta)
        if marked.size == 0:
            break
        record.marked = int(marked.size)

        fine = mesh.bisect(marked)
        if uniform or marking.bisections_per_mark == 2:
            # Second sweep over the children of the marked elements.
            anc = fine.ancestors_in(mesh)
            is_new = ~np.isin(fine.tri_ids, mesh.tri_ids)
            again = np.flatnonzero(np.isin(anc, marked) & is_new)
            fine = fine.bisect(again)
        if verify_reductions:
            history.reduction_checks.append({
                "k": k,
                "estimator": est.estimator_reduction_check(
                    u, f, mesh, fine, boundary_jumps, volume_degree),
                "meshsize": est.meshsize_reduction_check(
                    f, mesh, fine, volume_degree),
            })
            history.integrity_checks.append(_integrity(fine, angle_bound, area0))
        mesh = fine
    return mesh, u, history


def _integrity(mesh, angle_bound, area0):
    # Conformity is enforced by construction (the view constructor raises),
    # so record the metric checks.
    min_angle, _, _ = mesh.shape_metrics()
    area = mesh.area.sum()
    return {"elements": mesh.num_triangles,
            "min_angle": min_angle,
            "angle_ok": bool(min_angle >= angle_bound),
            "area_ok": bool(abs(area - area0) <= 1e-12 * area0),
            "conforming": True}


def uniform_run(mesh0, f, material, levels, **kwargs):
    """Uniform refinement study: every element, two bisection sweeps per
    level."""
    kwargs.setdefault("max_dofs", 10 ** 9)
    return anfem(mesh0, f, material, eps=0.0, theta=0.5, max_iters=levels,
                 uniform=True, **kwargs)


def marked_vs_refined_check(history):
    """Complexity ratios (#T_k - #T_0) / sum of earlier marked counts."""
    records = history.records
    n0 = records[0].elements
    ratios = []
    cum = 0
    for r in records[1:]:
        cum += records[r.k - 1].marked
        if cum > 0:
            ratios.append((r.k, (r.elements - n0) / cum))
    out = {"ratios": ratios}
    tail = [v for k, v in ratios if k >= 2]
    if tail:
        out["max_over_min"] = max(tail) / min(tail)
    return out
