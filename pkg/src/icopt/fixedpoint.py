"""Closed-form limits of local SGD on quadratics and their bounds.

For strongly convex quadratics the synchronized iterates converge (for any
valid outer step) to x_inf = C^{-1} (1/M) sum_m C_m x_m*, where
C_m = I - (I - eta A_m)^K contracts K local gradient steps into one linear
map. The convex case is characterized through the minimum-norm solution of
C x = c-tilde, with an explicit divergent branch when the right-hand side
leaves the image of C.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import (
    NotInImage,
    contraction_power,
    eigen_extremes,
    min_norm_solve,
    solve_spd,
)
from .problems import (
    Instance,
    NoUniqueOptimumError,
    QuadraticMachine,
    global_optimum,
)

STATUS_CONVERGED = "converged"
STATUS_DIVERGENT = "divergent"
STATUS_STATIONARY = "stationary-at-origin"


class NotStronglyConvexError(ValueError):
    """Raised by the strongly convex path; use convex_fixed_point instead."""


@dataclass
class FixedPointResult:
    per_machine_C: list
    aggregate_C: np.ndarray
    status: str
    fixed_point: np.ndarray | None = None
    discrepancy: float | None = None
    divergent_limit: np.ndarray | None = None   # lim_R C x_bar_R on the divergent branch


def _contraction_maps(inst: Instance, eta: float, K: int):
    if inst.kind != "quadratic":
        raise ValueError("fixed points are defined for quadratic instances")
    cs = []
    for m in inst.machines:
        d = m.dim
        cs.append(np.eye(d) - contraction_power(m.hessian, eta, K))
    agg = sum(cs) / len(cs)
    return cs, 0.5 * (agg + agg.T)


def _check_step(inst: Instance, eta: float) -> float:
    H = max(eigen_extremes(m.hessian)[1] for m in inst.machines)
    if not 0.0 < eta < 1.0 / H:
        raise ValueError(f"need 0 < eta < 1/H = {1.0 / H:.6g}, got {eta}")
    return H


def compute_fixed_point(inst: Instance, eta: float, K: int) -> FixedPointResult:
    """Fixed point of local SGD on a strongly convex quadratic instance.

    Independent of the outer step size. Requires eta < 1/H, a positive
    strong-convexity constant, and per-machine minimizers.
    """
    _check_step(inst, eta)
    mu = min(eigen_extremes(m.hessian)[0] for m in inst.machines)
    if mu <= 1e-10:
        raise NotStronglyConvexError(
            "instance is not strongly convex; use convex_fixed_point")
    if any(m.optimum is None for m in inst.machines):
        raise ValueError("every machine needs a minimizer")
    cs, agg = _contraction_maps(inst, eta, K)
    rhs = sum(c @ m.optimum for c, m in zip(cs, inst.machines)) / len(cs)
    x_inf = solve_spd(agg, rhs)
    x_star = global_optimum(inst)
    return FixedPointResult(
        per_machine_C=cs, aggregate_C=agg, status=STATUS_CONVERGED,
        fixed_point=x_inf, discrepancy=float(np.linalg.norm(x_star - x_inf)),
    )


def fixed_point_norm_bound(mu: float, H: float, tau: float, zeta_star: float,
                           B_bar: float, eta: float, K: int) -> float:
    """Closed-form bound on ||x_inf||: min(eta tau K kappa zeta* + B-bar, kappa B-bar)."""
    if mu <= 0 or not 0 < eta < 1.0 / H:
        raise ValueError("need mu > 0 and 0 < eta < 1/H")
    kappa = H / mu
    return min(eta * tau * K * kappa * zeta_star + B_bar, kappa * B_bar)


def discrepancy_bound(mu: float, H: float, tau: float, zeta_star: float,
                      eta: float, K: int) -> float:
    """Closed-form bound on the fixed-point discrepancy ||x* - x_inf||.

    Zero whenever tau, zeta*, or the local-step count collapses the bias
    (K = 1 makes local SGD mini-batch SGD).
    """
    if mu <= 0 or not 0 < eta < 1.0 / H:
        raise ValueError("need mu > 0 and 0 < eta < 1/H")
    K = int(K)
    if tau == 0.0 or zeta_star == 0.0 or K == 1:
        return 0.0
    denom = 1.0 - (1.0 - eta * mu) ** K
    first = ((1.0 - eta * H) ** K - 1.0 + eta * H * K
             + eta * mu * K * (1.0 - (1.0 - eta * H) ** (K - 1))) / denom
    second = 1.0 + eta * mu * K * (1.0 - eta * mu) ** (K - 1) / denom
    return (zeta_star * tau / mu) * min(first, second)


def _affine_drive(machine: QuadraticMachine, eta: float, K: int) -> np.ndarray:
    # c_m = -eta * sum_{j<K} (I - eta A_m)^j b_m; equals C_m x_m* when a
    # minimizer exists.
    d = machine.dim
    step = np.eye(d) - eta * machine.hessian
    acc = np.zeros(d)
    power_b = machine.affine.copy()
    for _ in range(K):
        acc += power_b
        power_b = step @ power_b
    return -eta * acc


def convex_fixed_point(inst: Instance, eta: float, K: int) -> FixedPointResult:
    """Limit behavior of noiseless local GD on a merely convex quadratic instance.

    Returns the minimum-norm fixed point when the drive vector lies in the
    image of C; flags the stationary case when it vanishes; otherwise reports
    divergence together with the limit of y_R = C x_bar_R (an invariant of
    the run even though the iterates themselves explode).
    """
    _check_step(inst, eta)
    cs, agg = _contraction_maps(inst, eta, K)
    drive = sum(_affine_drive(m, eta, K) for m in inst.machines) / len(cs)
    scale = 1.0 + max(float(np.linalg.norm(m.affine)) for m in inst.machines)
    if np.linalg.norm(drive) <= 1e-14 * scale:
        d = inst.dim
        return FixedPointResult(per_machine_C=cs, aggregate_C=agg,
                                status=STATUS_STATIONARY,
                                fixed_point=np.zeros(d), discrepancy=None)
    sol = min_norm_solve(agg, drive)
    if isinstance(sol, NotInImage):
        limit = drive - sol.residual   # projection of the drive onto im(C)
        return FixedPointResult(per_machine_C=cs, aggregate_C=agg,
                                status=STATUS_DIVERGENT, divergent_limit=limit)
    try:
        x_star = global_optimum(inst)
        disc = float(np.linalg.norm(x_star - sol))
    except NoUniqueOptimumError:
        disc = None
    return FixedPointResult(per_machine_C=cs, aggregate_C=agg,
                            status=STATUS_CONVERGED, fixed_point=sol,
                            discrepancy=disc)


def kernel_intersection_trivial(inst: Instance) -> bool:
    """True iff the machines' Hessian kernels intersect only at zero.

    Equivalent to the average Hessian being positive definite, which is the
    condition under which the convex fixed point always exists.
    """
    lo, hi = eigen_extremes(inst.average_hessian)
    return lo > 1e-10 * max(1.0, hi)


def geometry_comparison(inst: Instance, eta: float, K_list) -> list[dict]:
    """Fixed points and per-machine contraction spectra across local-step counts.

    For each K the row carries x_inf(K) and, per machine, the eigenvalue
    profile of C_m normalized by its trace; growing K flattens the
    high-curvature directions, damping machines with outlier curvature.
    """
    rows = []
    for K in K_list:
        res = compute_fixed_point(inst, eta, int(K))
        profiles = []
        for c in res.per_machine_C:
            w = np.linalg.eigvalsh(c)
            profiles.append(w / np.trace(c))
        rows.append({
            "K": int(K),
            "x_inf": res.fixed_point,
            "discrepancy": res.discrepancy,
            "machine_profiles": profiles,
        })
    return rows


def fixed_point_result_to_json(res: FixedPointResult, bounds: dict | None = None,
                               geometry: list[dict] | None = None) -> str:
    doc = {
        "status": res.status,
        "fixed_point": None if res.fixed_point is None else [float(v) for v in res.fixed_point],
        "discrepancy": res.discrepancy,
        "divergent_limit": (None if res.divergent_limit is None
                            else [float(v) for v in res.divergent_limit]),
    }
    if bounds:
        doc["bounds"] = {k: float(v) for k, v in bounds.items()}
    if geometry:
        doc["geometry"] = [
            {"K": row["K"],
             "x_inf": [float(v) for v in row["x_inf"]],
             "discrepancy": row["discrepancy"],
             "machine_profiles": [[float(v) for v in p] for p in row["machine_profiles"]]}
            for row in geometry
        ]
    return json.dumps(doc, indent=2)
