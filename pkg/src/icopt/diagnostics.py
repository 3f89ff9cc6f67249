"""Per-step trace quantities and the uniform consensus-error bounds.

The canonical consensus errors are the double sums over ordered machine
pairs, (1/M^2) sum_{m,n} ||x^m - x^n||^p for p in {2, 4}; the per-machine
deviation form (1/M) sum_m ||x_bar - x^m||^2 is exposed alongside since it
is what some one-step recursions consume (Jensen puts it below the pair
form). Expectations are estimated as trial averages with the trial count
kept, and bound checks should use mean + 3 standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import Instance, NoUniqueOptimumError, global_optimum


@dataclass
class TraceRecord:
    t: int
    delta_t: int
    iterate_error_sq: float | None
    iterate_error_4th: float | None
    consensus_sq: float
    consensus_4th: float
    func_subopt: float | None
    grad_norm_sq: float | None


def consensus_errors(iterates) -> tuple[float, float]:
    """Second and fourth moments of pairwise disagreement, (1/M^2) double sums."""
    X = np.asarray(iterates, dtype=float)
    M = X.shape[0]
    diff = X[:, None, :] - X[None, :, :]
    sq = np.einsum("mnd,mnd->mn", diff, diff)
    return float(sq.sum() / (M * M)), float((sq**2).sum() / (M * M))


def per_machine_consensus(iterates) -> float:
    """Deviation form (1/M) sum_m ||x_bar - x^m||^2; at most the pair form."""
    X = np.asarray(iterates, dtype=float)
    xbar = X.mean(axis=0)
    return float(np.sum((X - xbar) ** 2) / X.shape[0])


def iterate_errors(x_bar, x_star) -> tuple[float, float]:
    """Squared and fourth-power distance of the averaged iterate to x*."""
    sq = float(np.sum((np.asarray(x_bar) - np.asarray(x_star)) ** 2))
    return sq, sq * sq


def objective_stats(inst: Instance, x) -> tuple[float | None, float]:
    """Function suboptimality and squared gradient norm of the average objective.

    The suboptimality is None when the instance has no unique optimum; the
    gradient is always returned.
    """
    g = inst.gradient(x)
    gsq = float(g @ g)
    try:
        x_star = global_optimum(inst)
    except NoUniqueOptimumError:
        return None, gsq
    e = inst.value(x) - inst.value(x_star)
    return max(float(e), 0.0) if e > -1e-10 else float(e), gsq


def consensus_bound_second(eta: float, K: int, H: float, zeta: float,
                           sigma2: float) -> float:
    """Uniform bound 3 K^2 eta^2 H^2 zeta^2 + 6 K sigma2^2 eta^2 on C(t).

    Valid for K >= 2 and eta <= 1/(2H) under uniformly bounded first-order
    heterogeneity (equal Hessians, zeta = max pair ||b_m - b_n|| / H).
    """
    if int(K) < 2:
        raise ValueError("the bound requires K >= 2")
    if H > 0 and eta > 0.5 / H:
        raise ValueError("the bound requires eta <= 1/(2H)")
    return 3.0 * K**2 * eta**2 * H**2 * zeta**2 + 6.0 * K * sigma2**2 * eta**2


def consensus_bound_fourth(eta: float, K: int, H: float, zeta: float,
                           sigma2: float, sigma4: float) -> float:
    """Uniform bound on D(t): 2620 e^4K^4H^4z^4 + 5000 e^4K^2 s2^4 + 320 e^4 s4^4 K."""
    if int(K) < 2:
        raise ValueError("the bound requires K >= 2")
    if H > 0 and eta > 0.5 / H:
        raise ValueError("the bound requires eta <= 1/(2H)")
    return (2620.0 * eta**4 * K**4 * H**4 * zeta**4
            + 5000.0 * eta**4 * K**2 * sigma2**4
            + 320.0 * eta**4 * sigma4**4 * K)


def uniform_zeta_bound(report, D: float) -> np.ndarray:
    """Pairwise matrix H (zeta*_m + zeta*_n) + tau (D + B-bar).

    Bounds sup_{||x|| <= D} ||grad F_m(x) - grad F_n(x)|| for every machine
    pair from the measured heterogeneity report.
    """
    if report.zeta_star_per_machine is None:
        raise ValueError("report lacks zeta* fields (missing minimizers)")
    zm = report.zeta_star_per_machine
    H, tau, B_bar = report.smoothness_H, report.tau, report.B_bar
    return H * (zm[:, None] + zm[None, :]) + tau * (D + B_bar)


class ConsensusProbe:
    """Probe for the runners: records one TraceRecord per timestep.

    Pass ``x_star`` to fill the iterate-error columns and ``inst`` to fill
    function suboptimality and gradient norm; both are optional so cheap
    consensus-only collection stays cheap.
    """

    def __init__(self, inst: Instance | None = None, x_star=None,
                 local_steps: int = 1, with_objective: bool = False):
        self.inst = inst
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=float)
        self.K = int(local_steps)
        self.with_objective = with_objective
        self.rows: list[TraceRecord] = []

    def __call__(self, t: int, X, ghost):
        c2, c4 = consensus_errors(X)
        a = b = None
        if self.x_star is not None:
            a, b = iterate_errors(ghost, self.x_star)
        e = gsq = None
        if self.with_objective and self.inst is not None:
            e, gsq = objective_stats(self.inst, ghost)
        self.rows.append(TraceRecord(
            t=t, delta_t=t - (t % self.K), iterate_error_sq=a,
            iterate_error_4th=b, consensus_sq=c2, consensus_4th=c4,
            func_subopt=e, grad_norm_sq=gsq,
        ))

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)


class TrialStats:
    """Mean and standard error over trials of per-step series.

    Per-trial series are accumulated in trial order and reduced with numpy's
    pairwise summation, so results do not depend on worker scheduling.
    """

    def __init__(self):
        self._series: list[np.ndarray] = []

    def add(self, series) -> None:
        self._series.append(np.asarray(series, dtype=float))

    @property
    def n_trials(self) -> int:
        return len(self._series)

    def mean(self) -> np.ndarray:
        return np.asarray(self._series).mean(axis=0)

    def stderr(self) -> np.ndarray:
        arr = np.asarray(self._series)
        n = arr.shape[0]
        if n < 2:
            return np.zeros(arr.shape[1:])
        return arr.std(axis=0, ddof=1) / np.sqrt(n)

    def upper(self, z: float = 3.0) -> np.ndarray:
        """mean + z standard errors, the side used against closed-form bounds."""
        return self.mean() + z * self.stderr()
