"""Configuration-driven experiment front end.

Subcommands: heatmap | comm-complexity | fixed-point | online-regret |
validate | instance. Each report command reads an optional JSON/TOML config
(CLI flags override config fields), runs its sweep over a deterministic
worker pool, and writes a CSV (17-significant-digit decimals, config hash
embedded in every row), a JSON sidecar with the resolved config, and a PNG
figure next to the CSV. Exit codes: 0 ok, 1 validation failure, 2 config
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import plots
from . import rng as rngmod
from .algorithms import ICSchedule, LocalSGDConfig, run_local_sgd, run_serial_sgd
from .diagnostics import (
    ConsensusProbe,
    TrialStats,
    consensus_bound_fourth,
    consensus_bound_second,
    consensus_errors,
)
from .fixedpoint import (
    NotStronglyConvexError,
    compute_fixed_point,
    convex_fixed_point,
    discrepancy_bound,
    fixed_point_norm_bound,
)
from .online import (
    OnlineConfig,
    make_linear_adversary,
    one_point_estimator,
    run_fed_osgd,
    run_fed_posgd,
    run_nc_ogd,
    sample_unit_sphere,
    tuned_steps_fed_osgd,
    tuned_steps_fed_posgd,
    two_point_estimator,
)
from .problems import (
    QuadraticMachine,
    build_instance,
    cohort_means,
    cohort_truths,
    global_optimum,
    heterogeneity_report,
    instance_from_json,
    instance_to_json,
    make_condition_number_instance,
    make_offset_highdim_instance,
    make_regression_cohort,
    make_rotated_pair,
    make_shared_optimum_pair,
    make_tau_decoupled_pair,
    random_strongly_convex_instance,
    sample_spherical_cap,
)
from .rng import stream

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    pass


def fmt(x) -> str:
    return f"{float(x):.17g}"


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""

    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i:j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return 0.0
    return float(ra @ rb) / denom


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def load_config_file(path: str) -> dict:
    text = open(path, "rb").read()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text.decode())
    return json.loads(text.decode())


def resolve_config(defaults: dict, path: str | None, overrides: dict) -> dict:
    cfg = dict(defaults)
    if path:
        try:
            loaded = load_config_file(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return cfg


def write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_meta(path: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {"config": cfg, "config_hash": config_hash(cfg)}
    if extra:
        doc.update(extra)
    with open(path + ".meta.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _pool_map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunk = max(1, len(jobs) // (workers * 4))
        return list(pool.map(fn, jobs, chunksize=chunk))


def _log_grid(lo: float, hi: float, n: int) -> list[float]:
    return [float(v) for v in np.geomspace(lo, hi, n)]


# ---------------------------------------------------------------------------
# heatmap / communication-complexity cohort machinery
# ---------------------------------------------------------------------------

HEATMAP_DEFAULTS = {
    "d": 5,
    "M": 20,
    "K": 10,
    "R": 5,
    "sigma_noise": 0.1,
    "n_runs": 20,
    "R_star": 1.0,
    "mu0": 5.0,
    "beta": 1.0,
    "eta_grid": _log_grid(1e-3, 1e-1, 7),
    "tau_grid": _log_grid(0.1, 10.0, 8),
    "zeta_grid": _log_grid(0.02, 2.0, 8),
}

COMM_DEFAULTS = {
    "d": 5,
    "M": 20,
    "K": 10,
    "sigma_noise": 0.1,
    "n_runs": 20,
    "R_star": 1.0,
    "mu0": 5.0,
    "beta": 1.0,
    "zeta_star": 1.0,
    "target": 0.04,
    "R_max": 100,
    "eta_grid": _log_grid(1e-3, 1e-1, 7),
    "tau_grid": _log_grid(0.5, 10.0, 8),
}


def _cohort_instance(cfg: dict, seed: int, cell: int, trial: int,
                     tau: float, zeta: float):
    """Cohort for one (cell, trial): truths fixed per cell, means fresh per trial."""
    from .problems import RegressionMachine

    d, M = cfg["d"], cfg["M"]
    truth_rng = stream(seed, rngmod.TAG_INSTANCE, cell)
    center, truths = cohort_truths(M, d, cfg["R_star"], zeta, truth_rng)
    mean_rng = stream(seed, rngmod.TAG_INSTANCE, cell, 1000 + trial)
    means = cohort_means(M, d, cfg["mu0"], tau, center, mean_rng)
    machines = [RegressionMachine(mean=mu, truth=x, label_noise=cfg["sigma_noise"])
                for mu, x in zip(means, truths)]
    inst = build_instance(machines)
    x_bar_star = np.mean(truths, axis=0)
    return inst, x_bar_star


def _heatmap_job(job):
    cfg, seed, cell, trial, tau, zeta = job
    inst, x_bar_star = _cohort_instance(cfg, seed, cell, trial, tau, zeta)
    x_star = global_optimum(inst)
    sched = ICSchedule(machines=cfg["M"], local_steps=cfg["K"], rounds=cfg["R"])
    best = (np.inf, np.inf, None)
    for eta in cfg["eta_grid"]:
        lcfg = LocalSGDConfig(inner_step=eta, outer_step=cfg["beta"],
                              schedule=sched, init=np.zeros(cfg["d"]))
        trace = run_local_sgd(inst, lcfg, seed, trial=trial)
        if trace.diverged:
            continue
        err_bar = float(np.linalg.norm(trace.rounds[-1] - x_bar_star))
        err_star = float(np.linalg.norm(trace.rounds[-1] - x_star))
        if err_bar < best[0]:
            best = (err_bar, err_star, eta)
    return cell, trial, best[0], best[1], best[2]


def cmd_heatmap(cfg: dict, seed: int, out: str, workers: int,
                make_plots: bool = True) -> int:
    taus = [float(t) for t in cfg["tau_grid"]]
    zetas = [float(z) for z in cfg["zeta_grid"]]
    cells = [(ti, zi) for zi in range(len(zetas)) for ti in range(len(taus))]
    jobs = []
    for cell, (ti, zi) in enumerate(cells):
        for trial in range(cfg["n_runs"]):
            jobs.append((cfg, seed, cell, trial, taus[ti], zetas[zi]))
    results = _pool_map(_heatmap_job, jobs, workers)

    by_cell = {}
    for cell, trial, err_bar, err_star, eta in results:
        by_cell.setdefault(cell, []).append((trial, err_bar, err_star, eta))
    chash = config_hash(cfg)
    rows = []
    err_grid = np.full((len(zetas), len(taus)), np.nan)
    for cell, (ti, zi) in enumerate(cells):
        entries = sorted(by_cell[cell])
        errs = np.array([e[1] for e in entries])
        errs_star = np.array([e[2] for e in entries])
        etas = [e[3] for e in entries if e[3] is not None]
        mode_eta = max(set(etas), key=etas.count) if etas else float("nan")
        mean = float(errs.mean())
        se = float(errs.std(ddof=1) / math.sqrt(len(errs))) if len(errs) > 1 else 0.0
        err_grid[zi, ti] = mean
        rows.append([fmt(taus[ti]), fmt(zetas[zi]), fmt(mean), fmt(se),
                     fmt(float(errs_star.mean())), fmt(mode_eta), chash])
    write_csv(out, ["tau", "zeta_star", "mean_err", "stderr",
                    "mean_err_to_global", "best_eta_mode", "config_hash"], rows)
    write_meta(out, cfg, {"seed": seed, "command": "heatmap"})
    if make_plots:
        plots.heatmap_figure(taus, zetas, err_grid, out + ".png")
    return EXIT_OK


def _comm_job(job):
    cfg, seed, cell, trial, tau = job
    inst, x_bar_star = _cohort_instance(cfg, seed, cell, trial, tau, cfg["zeta_star"])
    sched = ICSchedule(machines=cfg["M"], local_steps=cfg["K"], rounds=cfg["R_max"])
    target = cfg["target"]
    sentinel = cfg["R_max"] + 1
    best = sentinel
    for eta in cfg["eta_grid"]:
        lcfg = LocalSGDConfig(inner_step=eta, outer_step=cfg["beta"],
                              schedule=sched, init=np.zeros(cfg["d"]))
        trace = run_local_sgd(inst, lcfg, seed, trial=trial,
                              stop_error=(x_bar_star, target))
        if trace.diverged:
            continue
        errs = np.linalg.norm(trace.rounds - x_bar_star, axis=1)
        hit = np.nonzero(errs <= target)[0]
        rounds = int(hit[0]) if hit.size else sentinel
        best = min(best, rounds)
    return cell, trial, best


def cmd_comm_complexity(cfg: dict, seed: int, out: str, workers: int,
                        make_plots: bool = True) -> int:
    taus = [float(t) for t in cfg["tau_grid"]]
    jobs = []
    for cell, tau in enumerate(taus):
        for trial in range(cfg["n_runs"]):
            jobs.append((cfg, seed, cell, trial, tau))
    results = _pool_map(_comm_job, jobs, workers)

    by_cell = {}
    for cell, trial, rounds in results:
        by_cell.setdefault(cell, []).append((trial, rounds))
    chash = config_hash(cfg)
    sentinel = cfg["R_max"] + 1
    rows, means, ses = [], [], []
    for cell, tau in enumerate(taus):
        entries = sorted(by_cell[cell])
        rounds = np.array([e[1] for e in entries], dtype=float)
        mean = float(rounds.mean())
        se = float(rounds.std(ddof=1) / math.sqrt(len(rounds))) if len(rounds) > 1 else 0.0
        frac = float(np.mean(rounds >= sentinel))
        rows.append([fmt(tau), fmt(mean), fmt(se), fmt(frac), chash])
        means.append(mean)
        ses.append(se)
    write_csv(out, ["tau", "mean_rounds", "stderr", "frac_censored", "config_hash"], rows)
    write_meta(out, cfg, {"seed": seed, "command": "comm-complexity"})
    if make_plots:
        plots.comm_complexity_figure(taus, means, ses, out + ".png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fixed-point report
# ---------------------------------------------------------------------------

FIXED_POINT_DEFAULTS = {
    "instance": None,            # path to an instance JSON; None = builtin
    "eta_scale": 6.0 / 7.0,      # c in the families c/H, c/(H K), c/(H K^2)
    "K_list": list(range(1, 31)),
    "families": ["c/H", "c/HK", "c/HK^2"],
}

# Builtin 2-d cohort: five strongly convex machines with eigenvalues inside
# [1, 6] and well-separated optima, exercising all three step-size families.
_BUILTIN_THETAS = [0.0, math.pi / 2, math.pi / 6, math.pi / 3, 3 * math.pi / 4]
_BUILTIN_EIGS = [(6.0, 1.0), (5.0, 1.5), (4.0, 1.0), (6.0, 2.0), (3.0, 1.0)]
_BUILTIN_OPTIMA = [(5.0, 5.0), (15.0, 5.0), (15.0, 10.0), (10.0, 20.0), (5.0, 15.0)]


def builtin_fixed_point_instance():
    machines = []
    for theta, (l1, l2), opt in zip(_BUILTIN_THETAS, _BUILTIN_EIGS, _BUILTIN_OPTIMA):
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        a = rot @ np.diag([l1, l2]) @ rot.T
        machines.append(QuadraticMachine.from_optimum(a, np.array(opt)))
    return build_instance(machines)


def _family_eta(family: str, c: float, H: float, K: int) -> float:
    if family == "c/H":
        return c / H
    if family == "c/HK":
        return c / (H * K)
    if family == "c/HK^2":
        return c / (H * K * K)
    raise ConfigError(f"unknown step-size family {family!r}")


def cmd_fixed_point(cfg: dict, seed: int, out: str, workers: int,
                    make_plots: bool = True) -> int:
    if cfg["instance"]:
        inst = instance_from_json(open(cfg["instance"]).read())
    else:
        inst = builtin_fixed_point_instance()
    rep = heterogeneity_report(inst)
    H, mu = rep.smoothness_H, rep.strong_convexity_mu
    chash = config_hash(cfg)
    rows_csv, rows_fig = [], []
    strongly_convex = mu > 1e-10
    for family in cfg["families"]:
        for K in cfg["K_list"]:
            eta = _family_eta(family, cfg["eta_scale"], H, int(K))
            if strongly_convex:
                res = compute_fixed_point(inst, eta, int(K))
                disc = res.discrepancy
                nb = fixed_point_norm_bound(mu, H, rep.tau, rep.zeta_star,
                                            rep.B_bar, eta, int(K))
                db = discrepancy_bound(mu, H, rep.tau, rep.zeta_star, eta, int(K))
                rows_csv.append([family, str(int(K)), fmt(eta), fmt(disc),
                                 fmt(math.log10(max(disc, 1e-300))), fmt(nb),
                                 fmt(db), res.status, chash])
                rows_fig.append({"family": family, "K": int(K), "discrepancy": disc})
            else:
                res = convex_fixed_point(inst, eta, int(K))
                norm = (float(np.linalg.norm(res.fixed_point))
                        if res.fixed_point is not None else float("nan"))
                rows_csv.append([family, str(int(K)), fmt(eta),
                                 "" if res.discrepancy is None else fmt(res.discrepancy),
                                 "", "", "", res.status, chash])
    write_csv(out, ["family", "K", "eta", "discrepancy", "log10_discrepancy",
                    "norm_bound", "discrepancy_bound", "status", "config_hash"],
              rows_csv)
    doc = {
        "config_hash": chash,
        "heterogeneity": {
            "H": H, "mu": mu, "tau": rep.tau, "zeta_star": rep.zeta_star,
            "B_bar": rep.B_bar, "B": rep.B,
        },
        "rows": [
            {"family": r[0], "K": int(r[1]), "eta": float(r[2]),
             "discrepancy": (float(r[3]) if r[3] else None), "status": r[7]}
            for r in rows_csv
        ],
    }
    with open(out + ".json", "w") as fh:
        json.dump(doc, fh, indent=2)
    write_meta(out, cfg, {"seed": seed, "command": "fixed-point"})
    if make_plots and strongly_convex:
        plots.fixed_point_figure(rows_fig, out + ".png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# online regret sweeps
# ---------------------------------------------------------------------------

ONLINE_DEFAULTS = {
    "algorithms": ["fed_osgd"],
    "adversary": "stochastic-iid",
    "G": 1.0,
    "B": 1.0,
    "d": 5,
    "M": 4,
    "K": 1,
    "zeta_hat": 0.0,
    "T_grid": [64, 128, 256, 512, 1024, 2048, 4096],
    "n_trials": 10,
    "eta": "auto",
    "delta": "auto",
}

_ONLINE_RUNNERS = {"nc_ogd": run_nc_ogd, "fed_posgd": run_fed_posgd,
                   "fed_osgd": run_fed_osgd}


def _online_job(job):
    cfg, seed, algorithm, T, trial = job
    d, M, K = cfg["d"], cfg["M"], cfg["K"]
    G, B = cfg["G"], cfg["B"]
    R = max(1, T // K)
    adv = make_linear_adversary(cfg["adversary"], G, d, cfg["zeta_hat"], seed)
    if cfg["eta"] == "auto":
        if algorithm == "fed_posgd":
            eta, delta = tuned_steps_fed_posgd(G, B, d, M, K, T, cfg["zeta_hat"])
        else:
            eta, delta = tuned_steps_fed_osgd(G, B, d, M, K, T)
    else:
        eta = float(cfg["eta"])
        delta = B if cfg["delta"] == "auto" else float(cfg["delta"])
    ocfg = OnlineConfig(step=eta, smoothing=delta, ball_radius=B,
                        schedule=ICSchedule(machines=M, local_steps=K, rounds=R))
    trace = _ONLINE_RUNNERS[algorithm](adv, ocfg, seed, trial=trial)
    return algorithm, T, trial, trace.avg_regret


def fit_loglog_slope(ts, values) -> float | None:
    ts = np.asarray(ts, dtype=float)
    vs = np.asarray(values, dtype=float)
    if np.any(vs <= 0):
        return None
    slope = np.polyfit(np.log(ts), np.log(vs), 1)[0]
    return float(slope)


def cmd_online_regret(cfg: dict, seed: int, out: str, workers: int,
                      make_plots: bool = True) -> int:
    for alg in cfg["algorithms"]:
        if alg not in _ONLINE_RUNNERS:
            raise ConfigError(f"unknown algorithm {alg!r}")
    jobs = [(cfg, seed, alg, int(T), trial)
            for alg in cfg["algorithms"]
            for T in cfg["T_grid"]
            for trial in range(cfg["n_trials"])]
    results = _pool_map(_online_job, jobs, workers)

    table = {}
    for alg, T, trial, regret in results:
        table.setdefault((alg, T), []).append((trial, regret))
    chash = config_hash(cfg)
    rows, series = [], []
    for alg in cfg["algorithms"]:
        ts, means = [], []
        for T in cfg["T_grid"]:
            entries = sorted(table[(alg, int(T))])
            vals = np.array([e[1] for e in entries])
            mean = float(vals.mean())
            se = (float(vals.std(ddof=1) / math.sqrt(len(vals)))
                  if len(vals) > 1 else 0.0)
            rows.append([alg, cfg["adversary"], str(int(T)),
                         str(cfg["n_trials"]), fmt(mean), fmt(se), "", chash])
            ts.append(int(T))
            means.append(mean)
        slope = fit_loglog_slope(ts, means)
        rows.append([alg, cfg["adversary"], "", str(cfg["n_trials"]), "", "",
                     "" if slope is None else fmt(slope), chash])
        series.append((alg, ts, means))
    write_csv(out, ["algorithm", "adversary", "T", "n_trials", "mean_regret",
                    "stderr", "loglog_slope", "config_hash"], rows)
    write_meta(out, cfg, {"seed": seed, "command": "online-regret"})
    if make_plots:
        plots.regret_figure(series, out + ".png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validation suites
# ---------------------------------------------------------------------------

def _check(name, fn, fault):
    if fault == name:
        return {"name": name, "passed": False, "detail": "injected fault"}
    try:
        detail = fn()
        return {"name": name, "passed": True, "detail": detail or "ok"}
    except AssertionError as exc:
        return {"name": name, "passed": False, "detail": str(exc)}


def _suite_fixedpoint(fault):
    checks = []

    def k1_identity():
        rng = stream(11, rngmod.TAG_INSTANCE, 0)
        for i in range(20):
            inst = random_strongly_convex_instance(4, 3, rng)
            H = heterogeneity_report(inst).smoothness_H
            res = compute_fixed_point(inst, 0.5 / H, 1)
            gap = float(np.linalg.norm(res.fixed_point - global_optimum(inst)))
            assert gap <= 1e-10, f"instance {i}: K=1 gap {gap:.3e}"
        return "20 instances, max gap <= 1e-10"

    checks.append(_check("fixedpoint.k1-identity", k1_identity, fault))

    def oracle_equivalence():
        rng = stream(12, rngmod.TAG_INSTANCE, 0)
        for i in range(5):
            inst = random_strongly_convex_instance(4, 3, rng, mu=1.0, H=3.0)
            H = heterogeneity_report(inst).smoothness_H
            for K in (2, 5):
                eta = 0.5 / H
                res = compute_fixed_point(inst, eta, K)
                sched = ICSchedule(machines=3, local_steps=K, rounds=10000)
                cfg = LocalSGDConfig(inner_step=eta, outer_step=1.0,
                                     schedule=sched, init=np.zeros(4))
                tr = run_local_sgd(inst, cfg, seed=i, stop_tol=1e-15)
                gap = float(np.linalg.norm(tr.rounds[-1] - res.fixed_point))
                assert gap <= 1e-8, f"instance {i}, K={K}: gap {gap:.3e}"
        return "5 instances x K in {2,5}, sim-vs-formula <= 1e-8"

    checks.append(_check("fixedpoint.oracle-equivalence", oracle_equivalence, fault))

    def beta_invariance():
        rng = stream(13, rngmod.TAG_INSTANCE, 0)
        inst = random_strongly_convex_instance(3, 4, rng, mu=1.0, H=2.5)
        H = heterogeneity_report(inst).smoothness_H
        eta, K = 0.4 / H, 5
        res = compute_fixed_point(inst, eta, K)
        beta_max = 1.0 / (1.0 - (1.0 - eta * H) ** K)
        for beta in (0.5, 1.0, beta_max):
            sched = ICSchedule(machines=4, local_steps=K, rounds=20000)
            cfg = LocalSGDConfig(inner_step=eta, outer_step=beta,
                                 schedule=sched, init=np.zeros(3))
            tr = run_local_sgd(inst, cfg, seed=0, stop_tol=1e-15)
            gap = float(np.linalg.norm(tr.rounds[-1] - res.fixed_point))
            assert gap <= 1e-7, f"beta={beta}: gap {gap:.3e}"
        return "fixed point invariant over beta in {0.5, 1, 1/(1-(1-eta H)^K)}"

    checks.append(_check("fixedpoint.beta-invariance", beta_invariance, fault))

    def disc_bound_vanishes():
        vals = [discrepancy_bound(1.0, 4.0, 2.0, 1.0, 2.0**-j / 4.0, 8)
                for j in range(1, 21)]
        tail = vals[8:]   # small-eta regime where the vanishing branch is active
        assert all(b <= a + 1e-15 for a, b in zip(tail, tail[1:])), "tail not decreasing"
        assert vals[-1] <= 1e-4 * max(vals), f"tail {vals[-1]:.3e}"
        return "bound tends to zero along eta = 2^-j / H"

    checks.append(_check("fixedpoint.discrepancy-bound-vanishes",
                         disc_bound_vanishes, fault))

    def convex_min_norm():
        m1 = QuadraticMachine.from_optimum(np.diag([1.0, 0.0]), [2.0, 0.0])
        m2 = QuadraticMachine.from_optimum(np.diag([1.0, 0.0]), [1.0, 0.0])
        inst = build_instance([m1, m2])
        res = convex_fixed_point(inst, 0.5, 3)
        assert res.status == "converged", res.status
        c = res.aggregate_C
        drive = c @ res.fixed_point
        machines_drive = sum(cm @ m.optimum for cm, m in
                             zip(res.per_machine_C, inst.machines)) / 2
        assert np.linalg.norm(drive - machines_drive) <= 1e-8
        w, v = np.linalg.eigh(c)
        kernel = v[:, w <= 1e-10 * w[-1]]
        assert np.linalg.norm(kernel.T @ res.fixed_point) <= 1e-8, "not min-norm"
        return "Cx = c and kernel orthogonality hold"

    checks.append(_check("fixedpoint.convex-min-norm", convex_min_norm, fault))
    return checks


def _suite_consensus(fault):
    checks = []

    def comm_steps_zero():
        inst = make_shared_optimum_pair(1.0, [1.0, 1.0], sigma2=0.5)
        probe = ConsensusProbe(local_steps=4)
        sched = ICSchedule(machines=2, local_steps=4, rounds=3)
        cfg = LocalSGDConfig(inner_step=0.2, outer_step=1.0, schedule=sched,
                             init=np.zeros(2))
        run_local_sgd(inst, cfg, seed=5, probe=probe)
        for row in probe.rows:
            if row.t % 4 == 0:
                assert row.consensus_sq == 0.0, f"t={row.t}: C={row.consensus_sq}"
        return "C(t) = 0 at every communication step"

    checks.append(_check("consensus.zero-at-comm-steps", comm_steps_zero, fault))

    def second_bound():
        _consensus_dominance(n_trials=100, K=4, which="second")
        return "mean C(t) + 3 SE below the closed-form bound"

    checks.append(_check("consensus.second-moment-bound", second_bound, fault))

    def fourth_bound():
        _consensus_dominance(n_trials=100, K=4, which="fourth")
        return "mean D(t) + 3 SE below the closed-form bound"

    checks.append(_check("consensus.fourth-moment-bound", fourth_bound, fault))

    def noise_scaling():
        base = _time_avg_consensus(sigma2=0.4, n_trials=100, seed_off=0)
        double = _time_avg_consensus(sigma2=0.8, n_trials=100, seed_off=10_000)
        ratio = double / base
        assert abs(ratio - 4.0) <= 1.0, f"ratio {ratio:.3f} not within 25% of 4"
        return f"doubling sigma2 scaled time-avg C(t) by {ratio:.3f}"

    checks.append(_check("consensus.noise-scaling", noise_scaling, fault))
    return checks


def _equal_hessian_instance(d=4, M=4, H=1.0, spread=1.0, sigma2=0.3):
    rng = stream(21, rngmod.TAG_INSTANCE, 0)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.linspace(0.4 * H, H, d)
    a = (q * lam) @ q.T
    machines = [
        QuadraticMachine.from_optimum(a, spread * rng.standard_normal(d),
                                      noise_second=sigma2)
        for _ in range(M)
    ]
    return build_instance(machines)


def _consensus_dominance(n_trials: int, K: int, which: str, eta=None):
    inst = _equal_hessian_instance()
    rep = heterogeneity_report(inst)
    H = rep.smoothness_H
    # equal Hessians: zeta = max pair ||b_m - b_n|| / H, exact by construction
    zeta = max(
        float(np.linalg.norm(mi.affine - mj.affine)) / H
        for mi in inst.machines for mj in inst.machines
    )
    sigma2 = inst.machines[0].noise_second
    sigma4 = inst.machines[0].noise_fourth
    eta = 0.4 / H if eta is None else eta
    sched = ICSchedule(machines=inst.num_machines, local_steps=K, rounds=3)
    stats = TrialStats()
    for trial in range(n_trials):
        probe = ConsensusProbe(local_steps=K)
        cfg = LocalSGDConfig(inner_step=eta, outer_step=1.0, schedule=sched,
                             init=np.zeros(inst.dim))
        run_local_sgd(inst, cfg, seed=97, trial=trial, probe=probe)
        stats.add(probe.column("consensus_sq" if which == "second" else "consensus_4th"))
    upper = stats.upper(3.0)
    if which == "second":
        bound = consensus_bound_second(eta, K, H, zeta, sigma2)
    else:
        bound = consensus_bound_fourth(eta, K, H, zeta, sigma2, sigma4)
    worst = float(np.max(upper))
    assert worst <= bound, f"max mean+3SE {worst:.4g} exceeds bound {bound:.4g}"


def _time_avg_consensus(sigma2: float, n_trials: int, seed_off: int) -> float:
    inst = build_instance([
        QuadraticMachine.from_optimum(np.eye(3), np.zeros(3), noise_second=sigma2)
        for _ in range(4)
    ])
    sched = ICSchedule(machines=4, local_steps=4, rounds=2)
    acc = []
    for trial in range(n_trials):
        probe = ConsensusProbe(local_steps=4)
        cfg = LocalSGDConfig(inner_step=0.1, outer_step=1.0, schedule=sched,
                             init=np.zeros(3))
        run_local_sgd(inst, cfg, seed=31, trial=seed_off + trial, probe=probe)
        acc.append(probe.column("consensus_sq").mean())
    return float(np.mean(acc))


def _suite_estimators(fault):
    checks = []

    def one_point_unbiased():
        d, delta, n = 4, 0.7, 20000
        beta = np.array([0.6, -0.2, 0.3, 0.1])
        w = np.array([0.2, 0.1, -0.3, 0.4])
        rng = stream(41, rngmod.TAG_PERTURB, 0)
        est = np.empty((n, d))
        for i in range(n):
            u = sample_unit_sphere(d, rng)
            est[i] = one_point_estimator(float(beta @ (w + delta * u)), u, delta, d)
        err = est.mean(axis=0) - beta
        se = est.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(err) <= 5 * se + 1e-12), f"bias {err}"
        return "one-point estimator unbiased for linear losses"

    checks.append(_check("estimators.one-point-unbiased", one_point_unbiased, fault))

    def two_point_smoothed():
        d, delta, n = 4, 0.3, 20000
        a = np.diag([1.0, 2.0, 0.5, 1.5])
        x = np.array([0.3, -0.2, 0.5, 0.1])
        grad = a @ x   # quadratics: smoothed gradient equals the true gradient
        rng = stream(42, rngmod.TAG_PERTURB, 0)
        est = np.empty((n, d))
        for i in range(n):
            u = sample_unit_sphere(d, rng)
            fp = 0.5 * float((x + delta * u) @ (a @ (x + delta * u)))
            fm = 0.5 * float((x - delta * u) @ (a @ (x - delta * u)))
            est[i] = two_point_estimator(fp, fm, u, delta, d)
        err = est.mean(axis=0) - grad
        se = est.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(err) <= 5 * se + 1e-12), f"bias {err}"
        return "two-point estimator matches the smoothed gradient"

    checks.append(_check("estimators.two-point-smoothed-gradient",
                         two_point_smoothed, fault))

    def two_point_second_moment():
        d, delta, n, G = 5, 0.25, 20000, 1.0
        a = np.ones(d) / math.sqrt(d)
        x = 0.8 * a

        def f(z):  # G-Lipschitz sine ridge; curvature keeps the moment off dG^2
            return G * math.sin(float(a @ z))

        rng = stream(43, rngmod.TAG_PERTURB, 0)
        mom = 0.0
        for i in range(n):
            u = sample_unit_sphere(d, rng)
            g = two_point_estimator(f(x + delta * u), f(x - delta * u), u, delta, d)
            mom += float(g @ g)
        mom /= n
        assert mom <= d * G * G, f"second moment {mom:.3f} > dG^2 = {d * G * G}"
        return f"empirical second moment {mom:.3f} <= dG^2"

    checks.append(_check("estimators.two-point-second-moment",
                         two_point_second_moment, fault))

    def sphere_isotropy():
        d, n = 5, 20000
        rng = stream(44, rngmod.TAG_PERTURB, 0)
        outer = np.zeros((d, d))
        mean = np.zeros(d)
        for _ in range(n):
            u = sample_unit_sphere(d, rng)
            outer += np.outer(u, u)
            mean += u
        outer /= n
        mean /= n
        assert np.linalg.norm(mean) <= 4 * math.sqrt(d / n), "mean not near zero"
        assert np.max(np.abs(outer - np.eye(d) / d)) <= 4 / math.sqrt(n), "not isotropic"
        return "uniform sphere sampler is centered and isotropic"

    checks.append(_check("estimators.sphere-isotropy", sphere_isotropy, fault))
    return checks


def _suite_hard_instances(fault):
    checks = []

    def shared_optimum():
        inst = make_shared_optimum_pair(2.0, [1.0, -1.0])
        rep = heterogeneity_report(inst)
        assert abs(rep.tau - 2.0) <= 1e-12 and rep.zeta_star <= 1e-12
        assert rep.phi_star <= 1e-9 and rep.kappa is None
        return "zeta* = phi* = 0, tau = H, kappa undefined"

    checks.append(_check("hard-instances.shared-optimum", shared_optimum, fault))

    def tau_decoupled():
        rep = heterogeneity_report(make_tau_decoupled_pair(1.0, 0.3, [1.0, 1.0, 1.0]))
        assert abs(rep.tau - 0.3) <= 1e-12 and abs(rep.smoothness_H - 1.0) <= 1e-12
        return "tau = 0.3 decoupled from H = 1"

    checks.append(_check("hard-instances.tau-decoupled", tau_decoupled, fault))

    def rotated_pair():
        inst = make_rotated_pair(1.0, 0.5, [0.3, 0.4])
        lo, hi = np.linalg.eigvalsh(inst.average_hessian)[[0, -1]]
        assert abs(hi / lo - 3.0) <= 1e-9, f"cond {hi / lo}"
        for m in inst.machines:
            w = np.linalg.eigvalsh(m.hessian)
            assert abs(w[0]) <= 1e-12 and abs(w[-1] - 1.0) <= 1e-12
        return "average-Hessian condition (1+a)/(1-a); rank-1 machines"

    checks.append(_check("hard-instances.rotated-pair", rotated_pair, fault))

    def condition_number():
        for R in (1, 5, 20):
            inst = make_condition_number_instance(2.0, R, 1.5)
            w = np.linalg.eigvalsh(inst.machines[0].hessian)
            assert abs(w[-1] / w[0] - 12 * R) <= 1e-9
            assert abs(np.linalg.norm(inst.machines[0].optimum) - 1.5) <= 1e-12
        return "eigenvalue ratio 12R and ||x*|| = B"

    checks.append(_check("hard-instances.condition-number", condition_number, fault))

    def offset_highdim():
        for M in (2, 4, 8):
            inst = make_offset_highdim_instance(M, 3.0)
            x = global_optimum(inst)
            assert abs(np.linalg.norm(x) - math.sqrt(M) * 3.0 / 3.0) <= 1e-10
            for m in inst.machines:
                assert float(np.linalg.norm(m.optimum)) == 3.0
        return "||x*|| = sqrt(M) B-bar / 3; machine norms exactly B-bar"

    checks.append(_check("hard-instances.offset-highdim", offset_highdim, fault))

    def cohort():
        rng = stream(51, rngmod.TAG_INSTANCE, 0)
        inst = make_regression_cohort(8, 5, 1.0, 0.8, 5.0, 2.0, 0.1, rng)
        rep = heterogeneity_report(inst)
        for m in inst.machines:
            assert abs(np.linalg.norm(m.truth) - 1.0) <= 1e-12
            assert abs(np.linalg.norm(m.mean) - 5.0) <= 1e-12
            w = np.linalg.eigvalsh(m.hessian)
            assert abs(w[-1] / w[0] - 26.0) <= 1e-9
        assert rep.zeta_star_max <= 0.8 + 1e-12
        return "exact norms, condition number 26, pairwise caps hold"

    checks.append(_check("hard-instances.regression-cohort", cohort, fault))

    def cap_sampler():
        rng = stream(52, rngmod.TAG_INSTANCE, 0)
        center = sample_unit_sphere(5, rng)
        assert np.array_equal(sample_spherical_cap(center, 0.0, rng), center)
        phi = math.pi / 4
        angles = []
        for _ in range(2000):
            v = sample_spherical_cap(center, phi, rng)
            angles.append(math.acos(min(1.0, max(-1.0, float(v @ center)))))
        assert max(angles) <= phi + 1e-9, "sample outside the cap"
        assert max(angles) >= 0.9 * phi, "cap interior never approached"
        return "cap sampler respects and fills the half-angle"

    checks.append(_check("hard-instances.cap-sampler", cap_sampler, fault))
    return checks


_SUITES = {
    "fixedpoint": _suite_fixedpoint,
    "consensus": _suite_consensus,
    "estimators": _suite_estimators,
    "hard-instances": _suite_hard_instances,
}


def cmd_validate(suite: str, fault: str | None, out: str | None) -> int:
    if suite == "all":
        names = list(_SUITES)
    elif suite in _SUITES:
        names = [suite]
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose from "
                          f"{sorted(_SUITES) + ['all']}")
    checks = []
    for name in names:
        checks.extend(_SUITES[name](fault))
    passed = all(c["passed"] for c in checks)
    report = {"suite": suite, "passed": passed, "checks": checks}
    text = json.dumps(report, indent=2)
    print(text)
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    return EXIT_OK if passed else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# instance generation / inspection
# ---------------------------------------------------------------------------

INSTANCE_KINDS = ("shared-optimum", "tau-decoupled", "rotated",
                  "condition-number", "offset-highdim", "regression-cohort",
                  "random-strongly-convex")


def generate_instance(kind: str, params: dict, seed: int):
    rng = stream(seed, rngmod.TAG_INSTANCE, 0)
    if kind == "shared-optimum":
        return make_shared_optimum_pair(params.get("H", 1.0),
                                        params.get("x_star", [1.0, 1.0]),
                                        params.get("sigma2", 0.0))
    if kind == "tau-decoupled":
        return make_tau_decoupled_pair(params.get("H", 1.0), params.get("tau", 0.5),
                                       params.get("x_star", [1.0, 1.0, 1.0]),
                                       params.get("sigma2", 0.0))
    if kind == "rotated":
        return make_rotated_pair(params.get("H", 1.0), params.get("alpha", 0.5),
                                 params.get("x_star", [1.0, 1.0]))
    if kind == "condition-number":
        return make_condition_number_instance(params.get("H", 1.0),
                                              int(params.get("R", 5)),
                                              params.get("B", 1.0))
    if kind == "offset-highdim":
        return make_offset_highdim_instance(int(params.get("M", 4)),
                                            params.get("B_bar", 1.0))
    if kind == "regression-cohort":
        return make_regression_cohort(
            int(params.get("M", 20)), int(params.get("d", 5)),
            params.get("R_star", 1.0), params.get("zeta_star", 1.0),
            params.get("mu0", 5.0), params.get("tau", 1.0),
            params.get("sigma_noise", 0.1), rng)
    if kind == "random-strongly-convex":
        return random_strongly_convex_instance(
            int(params.get("d", 4)), int(params.get("M", 4)), rng,
            mu=params.get("mu", 1.0), H=params.get("H", None),
            sigma2=params.get("sigma2", 0.0))
    raise ConfigError(f"unknown instance kind {kind!r}; choose from {INSTANCE_KINDS}")


def _report_to_doc(rep) -> dict:
    def arr(a):
        return None if a is None else [float(v) for v in np.asarray(a).ravel()]

    return {
        "tau": rep.tau, "smoothness_H": rep.smoothness_H,
        "strong_convexity_mu": rep.strong_convexity_mu, "kappa": rep.kappa,
        "zeta_star": rep.zeta_star, "zeta_star_max": rep.zeta_star_max,
        "zeta_star_fourth": rep.zeta_star_fourth,
        "zeta_star_per_machine": arr(rep.zeta_star_per_machine),
        "phi_star": rep.phi_star, "phi_star_fourth": rep.phi_star_fourth,
        "phi_star_per_machine": arr(rep.phi_star_per_machine),
        "B_bar": rep.B_bar, "B": rep.B, "third_order_Q": rep.third_order_Q,
    }


def cmd_instance(args) -> int:
    if args.action == "generate":
        params = {}
        for item in args.param or []:
            if "=" not in item:
                raise ConfigError(f"--param expects key=value, got {item!r}")
            key, val = item.split("=", 1)
            try:
                params[key] = json.loads(val)
            except json.JSONDecodeError:
                params[key] = val
        inst = generate_instance(args.kind, params, args.seed)
        text = instance_to_json(inst)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        else:
            print(text)
        return EXIT_OK
    # inspect
    inst = instance_from_json(open(args.path).read())
    rep = heterogeneity_report(inst)
    print(json.dumps({"kind": inst.kind, "d": inst.dim, "M": inst.num_machines,
                      "report": _report_to_doc(rep)}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", default=None, help="JSON/TOML config file")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--out", required=True, help="output CSV path")
    sub.add_argument("--no-plots", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icopt", description=__doc__)
    subs = p.add_subparsers(dest="command", required=True)

    for name in ("heatmap", "comm-complexity", "fixed-point", "online-regret"):
        _add_common(subs.add_parser(name))

    v = subs.add_parser("validate")
    v.add_argument("--suite", default="all",
                   choices=sorted(_SUITES) + ["all"])
    v.add_argument("--inject-fault", default=None,
                   help="name of an invariant to tamper (testing the harness)")
    v.add_argument("--out", default=None)

    i = subs.add_parser("instance")
    isubs = i.add_subparsers(dest="action", required=True)
    gen = isubs.add_parser("generate")
    gen.add_argument("--kind", required=True, choices=INSTANCE_KINDS)
    gen.add_argument("--param", action="append",
                     help="key=value generator parameter (repeatable)")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default=None)
    insp = isubs.add_parser("inspect")
    insp.add_argument("path")
    return p


_REPORTS = {
    "heatmap": (HEATMAP_DEFAULTS, cmd_heatmap),
    "comm-complexity": (COMM_DEFAULTS, cmd_comm_complexity),
    "fixed-point": (FIXED_POINT_DEFAULTS, cmd_fixed_point),
    "online-regret": (ONLINE_DEFAULTS, cmd_online_regret),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in _REPORTS:
            defaults, fn = _REPORTS[args.command]
            cfg = resolve_config(defaults, args.config, {})
            return fn(cfg, args.seed, args.out, args.workers,
                      make_plots=not args.no_plots)
        if args.command == "validate":
            return cmd_validate(args.suite, args.inject_fault, args.out)
        if args.command == "instance":
            return cmd_instance(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
