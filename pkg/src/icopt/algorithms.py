"""Optimization runners under the intermittent-communication schedule.

All runners are strictly sequential in t (the dynamics are Markov chains);
randomness enters only through counter-based streams keyed by
(seed, trial, machine, timestep), so independent (trial, grid-point) runs can
execute in parallel without affecting results. Divergence is a legitimate
observable: runs that blow up are flagged and halted, never raised.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .problems import (Instance, QuadraticMachine, multi_point_gradient,
                       oracle_needs_rng, stochastic_gradient)
from .rng import StepStream, stream

DIVERGENCE_FACTOR = 1e12


@dataclass(frozen=True)
class ICSchedule:
    """Intermittent-communication grid: M machines, K local steps, R rounds."""

    machines: int
    local_steps: int
    rounds: int

    def __post_init__(self):
        if min(self.machines, self.local_steps, self.rounds) < 1:
            raise ValueError("M, K, R must all be >= 1")

    @property
    def horizon(self) -> int:
        return self.local_steps * self.rounds


@dataclass(frozen=True)
class LocalSGDConfig:
    inner_step: float
    outer_step: float
    schedule: ICSchedule
    init: np.ndarray
    output_mode: str = "last"          # "last" | "uniform" | "weighted"
    output_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.inner_step < 0 or self.outer_step < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.output_mode not in ("last", "uniform", "weighted"):
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.output_mode == "weighted" and self.output_weights is None:
            raise ValueError("weighted output mode needs weights")


@dataclass(frozen=True)
class CELSGDConfig:
    step: float
    momentum: float
    warm_batch: int
    local_batch: int
    local_steps: int
    schedule: ICSchedule
    init: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        if min(self.warm_batch, self.local_batch, self.local_steps) < 1:
            raise ValueError("warm_batch, local_batch, local_steps must be >= 1")


@dataclass
class RunTrace:
    """Per-round synchronized iterates plus optional per-step instrumentation."""

    rounds: np.ndarray                 # (rounds_run + 1, d), x_bar after each round
    output: np.ndarray
    diverged: bool
    rounds_run: int
    seed: int
    trial: int
    config: dict
    ghost: np.ndarray | None = None            # (T_run + 1, d) cross-machine averages
    per_machine: np.ndarray | None = None      # (T_run + 1, M, d)
    extras: dict = field(default_factory=dict)


def _divergence_threshold(inst: Instance, x0: np.ndarray) -> float:
    b = 0.0
    for m in inst.machines:
        opt = getattr(m, "optimum", None)
        if opt is not None:
            b = max(b, float(np.linalg.norm(opt)))
    return DIVERGENCE_FACTOR * (1.0 + float(np.linalg.norm(x0)) + b)


def _blown_up(x: np.ndarray, threshold: float) -> bool:
    return not np.all(np.isfinite(x)) or float(np.linalg.norm(x)) > threshold


def _finish(cfg: LocalSGDConfig, ghost_list, rounds_list) -> np.ndarray:
    if cfg.output_mode == "last":
        return rounds_list[-1].copy()
    ghost = np.asarray(ghost_list)
    if cfg.output_mode == "uniform":
        # average of the ghost iterates x_0 .. x_{T-1}
        return ghost[:-1].mean(axis=0) if ghost.shape[0] > 1 else ghost[0].copy()
    w = np.asarray(cfg.output_weights, dtype=float)
    if w.shape[0] != ghost.shape[0]:
        raise ValueError(f"need {ghost.shape[0]} weights, got {w.shape[0]}")
    return (w[:, None] * ghost).sum(axis=0) / w.sum()


def run_local_sgd(inst: Instance, cfg: LocalSGDConfig, seed: int,
                  probe=None, trial: int = 0, store_steps: bool = False,
                  stop_tol: float | None = None,
                  stop_error: tuple | None = None) -> RunTrace:
    """Local SGD: K local stochastic steps per machine, then an outer-step average.

    Every machine restarts each round from the previous synchronized iterate;
    the update is x_bar_r = x_bar_{r-1} + (beta/M) sum_m (x_{r,K}^m - x_bar_{r-1}).
    ``probe(t, X, ghost)`` is called at every step with the per-machine states
    and the ghost average; the ghost is never fed back into the dynamics.
    ``stop_tol`` optionally halts once the synchronized iterate is stationary
    to that relative tolerance (the remaining rounds cannot move it further
    at working precision); ``stop_error=(ref, eps)`` halts once
    ||x_bar_r - ref|| <= eps, for rounds-to-target sweeps.
    """
    sched = cfg.schedule
    M, K, R = sched.machines, sched.local_steps, sched.rounds
    if M != inst.num_machines:
        raise ValueError("schedule machine count does not match instance")
    x0 = np.asarray(cfg.init, dtype=float)
    threshold = _divergence_threshold(inst, x0)
    eta, beta = cfg.inner_step, cfg.outer_step

    xbar = x0.copy()
    X = np.tile(xbar, (M, 1))
    noisy = [oracle_needs_rng(m) for m in inst.machines]
    streams = [StepStream(seed, rngmod.TAG_ORACLE, trial, m) if noisy[m] else None
               for m in range(M)]
    rounds_list = [xbar.copy()]
    ghost_list = [xbar.copy()] if (store_steps or cfg.output_mode != "last") else None
    machines_list = [X.copy()] if store_steps else None
    if probe is not None:
        probe(0, X, xbar)

    diverged = False
    rounds_run = 0
    for r in range(1, R + 1):
        X[:] = xbar
        for k in range(K):
            t = (r - 1) * K + k
            for m in range(M):
                g = stochastic_gradient(
                    inst.machines[m], X[m],
                    streams[m].at(t) if noisy[m] else None)
                X[m] -= eta * g
            if (t + 1) % K == 0:
                xbar = xbar + (beta / M) * (X - xbar).sum(axis=0)
                X[:] = xbar
            g_avg = X.mean(axis=0)
            if ghost_list is not None:
                ghost_list.append(g_avg.copy())
            if machines_list is not None:
                machines_list.append(X.copy())
            if probe is not None:
                probe(t + 1, X, g_avg)
        rounds_list.append(xbar.copy())
        rounds_run = r
        if _blown_up(xbar, threshold):
            diverged = True
            break
        if stop_tol is not None and r >= 2:
            if np.linalg.norm(rounds_list[-1] - rounds_list[-2]) <= stop_tol * (
                    1.0 + np.linalg.norm(xbar)):
                break
        if stop_error is not None:
            ref, eps = stop_error
            if np.linalg.norm(xbar - ref) <= eps:
                break

    out = (np.full_like(xbar, np.nan) if diverged
           else _finish(cfg, ghost_list if ghost_list is not None else rounds_list,
                        rounds_list))
    return RunTrace(
        rounds=np.asarray(rounds_list), output=out, diverged=diverged,
        rounds_run=rounds_run, seed=seed, trial=trial,
        config={"algorithm": "local_sgd", "eta": eta, "beta": beta,
                "M": M, "K": K, "R": R, "output_mode": cfg.output_mode},
        ghost=None if ghost_list is None else np.asarray(ghost_list),
        per_machine=None if machines_list is None else np.asarray(machines_list),
    )


def run_minibatch_sgd(inst: Instance, cfg: LocalSGDConfig, seed: int,
                      probe=None, trial: int = 0, store_steps: bool = False) -> RunTrace:
    """Mini-batch SGD: all K per-round gradients are taken at the synchronized point.

    The update is x_bar_r = x_bar_{r-1} - (beta/M) sum_{m,k} g; beta is the
    single step size of this runner and the config's inner step is unused.
    """
    sched = cfg.schedule
    M, K, R = sched.machines, sched.local_steps, sched.rounds
    if M != inst.num_machines:
        raise ValueError("schedule machine count does not match instance")
    x0 = np.asarray(cfg.init, dtype=float)
    threshold = _divergence_threshold(inst, x0)
    beta = cfg.outer_step

    xbar = x0.copy()
    noisy = [oracle_needs_rng(m) for m in inst.machines]
    streams = [StepStream(seed, rngmod.TAG_ORACLE, trial, m) if noisy[m] else None
               for m in range(M)]
    rounds_list = [xbar.copy()]
    ghost_list = [xbar.copy()] if (store_steps or cfg.output_mode != "last") else None
    machines_list = [np.tile(xbar, (M, 1))] if store_steps else None
    if probe is not None:
        probe(0, np.tile(xbar, (M, 1)), xbar)

    diverged = False
    rounds_run = 0
    for r in range(1, R + 1):
        total = np.zeros_like(xbar)
        for k in range(K):
            t = (r - 1) * K + k
            for m in range(M):
                total += stochastic_gradient(
                    inst.machines[m], xbar,
                    streams[m].at(t) if noisy[m] else None)
            at = xbar if (t + 1) % K else xbar - (beta / M) * total
            if ghost_list is not None:
                ghost_list.append(at.copy())
            if machines_list is not None:
                machines_list.append(np.tile(at, (M, 1)))
            if probe is not None:
                probe(t + 1, np.tile(at, (M, 1)), at)
        xbar = xbar - (beta / M) * total
        rounds_list.append(xbar.copy())
        rounds_run = r
        if _blown_up(xbar, threshold):
            diverged = True
            break

    out = (np.full_like(xbar, np.nan) if diverged
           else _finish(cfg, ghost_list if ghost_list is not None else rounds_list,
                        rounds_list))
    return RunTrace(
        rounds=np.asarray(rounds_list), output=out, diverged=diverged,
        rounds_run=rounds_run, seed=seed, trial=trial,
        config={"algorithm": "minibatch_sgd", "beta": beta,
                "M": M, "K": K, "R": R, "output_mode": cfg.output_mode},
        ghost=None if ghost_list is None else np.asarray(ghost_list),
        per_machine=None if machines_list is None else np.asarray(machines_list),
    )


def run_serial_sgd(machine_index: int, inst: Instance, step: float, steps: int,
                   seed: int, probe=None, trial: int = 0, init=None) -> RunTrace:
    """Plain SGD on a single machine's objective; probes still see the run."""
    if not 0 <= machine_index < inst.num_machines:
        raise ValueError("machine_index out of range")
    machine = inst.machines[machine_index]
    x = np.zeros(inst.dim) if init is None else np.asarray(init, dtype=float).copy()
    path = [x.copy()]
    threshold = _divergence_threshold(inst, x)
    diverged = False
    if probe is not None:
        probe(0, x[None, :], x)
    noisy = oracle_needs_rng(machine)
    st = StepStream(seed, rngmod.TAG_ORACLE, trial, machine_index) if noisy else None
    for t in range(steps):
        g = stochastic_gradient(machine, x, st.at(t) if noisy else None)
        x = x - step * g
        path.append(x.copy())
        if probe is not None:
            probe(t + 1, x[None, :], x)
        if _blown_up(x, threshold):
            diverged = True
            break
    path_arr = np.asarray(path)
    return RunTrace(
        rounds=path_arr, output=path_arr[-1].copy(), diverged=diverged,
        rounds_run=len(path) - 1, seed=seed, trial=trial,
        config={"algorithm": "serial_sgd", "eta": step, "machine": machine_index,
                "T": steps},
        ghost=path_arr,
    )


def run_ce_lsgd(inst: Instance, cfg: CELSGDConfig, seed: int, trial: int = 0) -> RunTrace:
    """Momentum-variance-reduced local SGD with a single active client per round.

    Round 0 warms up with momentum 1 (so the previous iterate never enters),
    one local step, and a batch of ``warm_batch`` shared-datum two-point
    queries; later rounds use momentum ``beta``, ``local_steps`` corrective
    local steps, and server batches of size ``local_steps``. One uniformly
    chosen client runs the corrective local loop each round. The returned
    output is drawn uniformly from all local iterates at which local
    gradients were queried (including round 0's warm point).
    """
    sched = cfg.schedule
    M, R = sched.machines, sched.rounds
    if M != inst.num_machines:
        raise ValueError("schedule machine count does not match instance")
    x_prev = np.asarray(cfg.init, dtype=float).copy()
    x_cur = x_prev.copy()
    threshold = _divergence_threshold(inst, x_cur)
    eta, beta, P, b = cfg.step, cfg.momentum, cfg.local_steps, cfg.local_batch

    v = np.zeros_like(x_cur)
    noisy = [oracle_needs_rng(m) for m in inst.machines]
    server_streams = [StepStream(seed, rngmod.TAG_SERVER, trial, m) if noisy[m] else None
                      for m in range(M)]
    local_streams = [StepStream(seed, rngmod.TAG_LOCAL, trial, m) if noisy[m] else None
                     for m in range(M)]
    picker = StepStream(seed, rngmod.TAG_CLIENT_PICK, trial)
    rounds_list = [x_cur.copy()]
    pool = []
    diverged = False
    rounds_run = 0
    for r in range(R):
        if r == 0:
            rho, Q, B = 1.0, 1, cfg.warm_batch
        else:
            rho, Q, B = beta, P, P
        # server-side paired queries at (x_r, x_{r-1}) with one shared batch each
        g_cur = np.zeros_like(x_cur)
        g_prev = np.zeros_like(x_cur)
        for m in range(M):
            gc, gp = multi_point_gradient(
                inst.machines[m], [x_cur, x_prev],
                server_streams[m].at(r) if noisy[m] else None, batch=B)
            g_cur += gc
            g_prev += gp
        g_cur /= M
        g_prev /= M
        v = g_cur + (1.0 - rho) * (v - g_prev)

        m_sel = int(picker.at(r).integers(M))
        w_prev = x_cur.copy()
        w_cur = x_cur.copy()
        v_loc = v.copy()
        for k in range(1, Q + 1):
            gk, gk_prev = multi_point_gradient(
                inst.machines[m_sel], [w_cur, w_prev],
                (local_streams[m_sel].at((r << 32) | k)
                 if noisy[m_sel] else None), batch=b)
            v_loc = v_loc + gk - gk_prev
            pool.append(w_cur.copy())
            w_prev = w_cur
            w_cur = w_cur - eta * v_loc
        x_prev = x_cur
        x_cur = w_cur
        rounds_list.append(x_cur.copy())
        rounds_run = r + 1
        if _blown_up(x_cur, threshold):
            diverged = True
            break

    chooser = stream(seed, rngmod.TAG_OUTPUT, trial)
    pick = int(chooser.integers(len(pool))) if pool else 0
    out = (np.full_like(x_cur, np.nan) if diverged
           else (pool[pick].copy() if pool else x_cur.copy()))
    return RunTrace(
        rounds=np.asarray(rounds_list), output=out, diverged=diverged,
        rounds_run=rounds_run, seed=seed, trial=trial,
        config={"algorithm": "ce_lsgd", "eta": eta, "beta": beta,
                "b0": cfg.warm_batch, "b": b, "P": P, "M": M, "R": R},
        extras={"output_index": pick, "pool_size": len(pool)},
    )


def run_mb_storm(inst: Instance, cfg: CELSGDConfig, seed: int, trial: int = 0) -> RunTrace:
    """Mini-batch STORM baseline: the P = 1 specialization of the same runner."""
    pinned = CELSGDConfig(step=cfg.step, momentum=cfg.momentum,
                          warm_batch=cfg.warm_batch, local_batch=cfg.local_batch,
                          local_steps=1, schedule=cfg.schedule, init=cfg.init)
    trace = run_ce_lsgd(inst, pinned, seed, trial=trial)
    trace.config["algorithm"] = "mb_storm"
    return trace


def closed_form_shared_optimum_iterate(H: float, eta: float, beta: float,
                                       K: int, R: int, x_star) -> np.ndarray:
    """Exact iterate of noiseless local GD on the shared-optimum pair.

    After R rounds from zero: x_star * (1 - (1 - (beta/2)(1-(1-eta*H)^K))^R).
    """
    x = np.asarray(x_star, dtype=float)
    if R == 0:
        return np.zeros_like(x)
    factor = 1.0 - (1.0 - (beta / 2.0) * (1.0 - (1.0 - eta * H) ** K)) ** R
    return x * factor


@dataclass
class TuneResult:
    best_eta: float | None
    best_metric: float
    table: list            # (eta, mean_metric, n_diverged) per grid point

    @property
    def all_diverged(self) -> bool:
        return self.best_eta is None


def tune_step_size(run_errors, grid, metric, trials: int, base_seed: int) -> TuneResult:
    """Grid-search a step size with shared per-trial seeds across grid points.

    ``run_errors(eta, trial)`` must return the per-round error sequence of one
    run (np.inf entries once diverged). ``metric`` is either "final-error" or
    ("rounds-to-target", eps): the latter scores a run by the first round
    reaching eps, with sentinel R_max + 1 when the target is never reached.
    Diverged runs score infinity; ties break toward the smaller eta.
    """
    grid = sorted(float(e) for e in grid)
    if not grid:
        raise ValueError("step-size grid must be nonempty")
    table = []
    best_eta, best_metric = None, np.inf
    for eta in grid:
        scores = np.empty(trials)
        n_div = 0
        for trial in range(trials):
            errs = np.asarray(run_errors(eta, trial), dtype=float)
            if not np.all(np.isfinite(errs)):
                scores[trial] = np.inf
                n_div += 1
                continue
            if metric == "final-error":
                scores[trial] = errs[-1]
            else:
                kind, eps = metric
                if kind != "rounds-to-target":
                    raise ValueError(f"unknown metric {metric!r}")
                hit = np.nonzero(errs <= eps)[0]
                r_max = len(errs) - 1
                scores[trial] = float(hit[0]) if hit.size else float(r_max + 1)
        mean_score = float(np.mean(scores))
        table.append((eta, mean_score, n_div))
        if np.isfinite(mean_score) and mean_score < best_metric:
            best_eta, best_metric = eta, mean_score
    return TuneResult(best_eta=best_eta, best_metric=best_metric, table=table)


# ---------------------------------------------------------------------------
# trace export
# ---------------------------------------------------------------------------

def export_trace_csv(inst: Instance, trace: RunTrace, path, x_star=None) -> None:
    """Write the per-step trace CSV and a JSON sidecar with config and seed.

    Requires a trace recorded with ``store_steps=True``. Columns follow the
    fixed schema (t, r, is_comm_round, iterate_error_sq, consensus_error_sq,
    func_subopt, grad_norm_sq); the function-suboptimality column is empty
    when the instance has no unique optimum.
    """
    from .diagnostics import consensus_errors, objective_stats
    from .problems import NoUniqueOptimumError, global_optimum

    if trace.ghost is None or trace.per_machine is None:
        raise ValueError("trace was not recorded with store_steps=True")
    if x_star is None:
        try:
            x_star = global_optimum(inst)
        except NoUniqueOptimumError:
            x_star = None
    K = trace.config.get("K", 1)
    path = str(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "r", "is_comm_round", "iterate_error_sq",
                    "consensus_error_sq", "func_subopt", "grad_norm_sq"])
        for t in range(trace.ghost.shape[0]):
            ghost = trace.ghost[t]
            c2, _ = consensus_errors(trace.per_machine[t])
            e, gsq = objective_stats(inst, ghost)
            row = [str(t), str(t // K), str(int(t % K == 0))]
            if x_star is not None:
                row.append(f"{float(np.sum((ghost - x_star) ** 2)):.17g}")
            else:
                row.append("")
            row.append(f"{c2:.17g}")
            row.append("" if e is None else f"{e:.17g}")
            row.append(f"{gsq:.17g}")
            w.writerow(row)
    with open(path + ".meta.json", "w") as fh:
        json.dump({"config": trace.config, "seed": trace.seed, "trial": trace.trial,
                   "diverged": trace.diverged}, fh, indent=2)
