"""Federated online and bandit optimization against oblivious adversaries.

Losses are linear, f_t^m(x) = <beta_t^m, x> with ||beta_t^m|| <= G. The three
runners share the intermittent-communication pattern: independent online
gradient descent (no communication), projected one-point bandit descent with
lazy averaging, and two-point bandit descent in the local-SGD pattern.
Regret is always measured at the points the oracle was queried, against the
single hindsight comparator in the ball of radius B.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .algorithms import ICSchedule
from .rng import StepStream, stream

ADVERSARY_KINDS = ("stochastic-iid", "coordinated-rademacher", "heterogeneity-controlled")


@dataclass(frozen=True)
class LinearAdversary:
    """Oblivious linear-loss sequence generator with ||beta_t^m|| <= G.

    ``stochastic-iid`` draws each machine's loss uniformly from the ball,
    ``coordinated-rademacher`` plays the same scaled sign vector on every
    machine, and ``heterogeneity-controlled`` adds zero-sum per-machine
    offsets of norm at most zeta_hat to a shared base vector.
    """

    kind: str
    G: float
    d: int
    zeta_hat: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ADVERSARY_KINDS:
            raise ValueError(f"unknown adversary kind {self.kind!r}")
        if self.G < 0 or self.d < 1:
            raise ValueError("need G >= 0 and d >= 1")
        if not 0.0 <= self.zeta_hat <= 2.0 * self.G:
            raise ValueError("need 0 <= zeta_hat <= 2G")
        object.__setattr__(self, "_streams", {})

    def _stream_at(self, trial: int, t: int, machine: int | None):
        key = (trial, machine)
        cached = self._streams.get(key)
        if cached is None:
            parts = (rngmod.TAG_ADVERSARY, trial) if machine is None else (
                rngmod.TAG_ADVERSARY, trial, 1 + machine)
            cached = StepStream(self.seed, *parts)
            self._streams[key] = cached
        return cached.at(t)

    def losses(self, trial: int, t: int, M: int) -> np.ndarray:
        """Loss vectors beta_t^m for all machines at step t, shape (M, d)."""
        if self.kind == "coordinated-rademacher":
            shared = self._stream_at(trial, t, None)
            signs = shared.integers(0, 2, size=self.d) * 2.0 - 1.0
            beta = (self.G / math.sqrt(self.d)) * signs
            return np.tile(beta, (M, 1))
        if self.kind == "stochastic-iid":
            out = np.empty((M, self.d))
            for m in range(M):
                out[m] = _uniform_ball(self._stream_at(trial, t, m), self.d, self.G)
            return out
        # heterogeneity-controlled: shared base plus centered offsets
        delta_radius = min(self.zeta_hat / 2.0, self.G / 2.0)
        base_radius = max(0.0, self.G - 2.0 * delta_radius)
        base = _uniform_ball(self._stream_at(trial, t, None), self.d, base_radius)
        if delta_radius == 0.0:
            return np.tile(base, (M, 1))
        raw = np.empty((M, self.d))
        for m in range(M):
            raw[m] = _uniform_ball(self._stream_at(trial, t, m), self.d, delta_radius)
        offsets = raw - raw.mean(axis=0)
        return base[None, :] + offsets


def _uniform_ball(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    if radius == 0.0:
        return np.zeros(d)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return radius * rng.random() ** (1.0 / d) * v


def make_linear_adversary(kind: str, G: float, d: int, zeta_hat: float = 0.0,
                          seed: int = 0) -> LinearAdversary:
    return LinearAdversary(kind=kind, G=G, d=d, zeta_hat=zeta_hat, seed=seed)


@dataclass(frozen=True)
class OnlineConfig:
    step: float
    smoothing: float
    ball_radius: float
    schedule: ICSchedule

    def __post_init__(self):
        if self.step < 0 or self.smoothing <= 0 or self.ball_radius <= 0:
            raise ValueError("need step >= 0, smoothing > 0, ball_radius > 0")


@dataclass
class RegretTrace:
    """Queried points, incurred losses, and the hindsight regret of one run."""

    queried: np.ndarray           # (T, M, Q, d) query points
    losses: np.ndarray            # (T, M, Q) loss at each query
    loss_vectors: np.ndarray      # (T, M, d) adversary vectors
    iterates: np.ndarray          # (T, M, d) played/maintained models
    x_star: np.ndarray | None = None
    avg_regret: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def num_queries(self) -> int:
        return self.losses.shape[2]

    def incurred_average(self) -> float:
        # two-point runs divide by the query pair count
        T, M, Q = self.losses.shape
        return float(self.losses.sum() / (T * M * Q))


def sample_unit_sphere(d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit vector via Gaussian normalization."""
    if d < 1:
        raise ValueError("need d >= 1")
    while True:
        v = rng.standard_normal(d)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def one_point_estimator(f_value: float, u, delta: float, d: int) -> np.ndarray:
    """Single-evaluation gradient estimate (d * f / delta) * u."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return (d * f_value / delta) * np.asarray(u, dtype=float)


def two_point_estimator(f_plus: float, f_minus: float, u, delta: float, d: int) -> np.ndarray:
    """Paired-evaluation estimate d (f+ - f-) u / (2 delta); unbiased for the
    sphere-smoothed objective."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    return (d * (f_plus - f_minus) / (2.0 * delta)) * np.asarray(u, dtype=float)


def project_ball(x: np.ndarray, radius: float) -> np.ndarray:
    n = float(np.linalg.norm(x))
    if n <= radius or n == 0.0:
        return x
    return x * (radius / n)


def run_nc_ogd(adversary: LinearAdversary, config: OnlineConfig, seed: int,
               trial: int = 0) -> RegretTrace:
    """Independent online gradient descent on every machine; no communication."""
    sched = config.schedule
    M, T = sched.machines, sched.horizon
    d, eta = adversary.d, config.step
    X = np.zeros((M, d))
    queried = np.empty((T, M, 1, d))
    losses = np.empty((T, M, 1))
    loss_vectors = np.empty((T, M, d))
    iterates = np.empty((T, M, d))
    for t in range(T):
        betas = adversary.losses(trial, t, M)
        loss_vectors[t] = betas
        iterates[t] = X
        queried[t, :, 0, :] = X
        losses[t, :, 0] = np.einsum("md,md->m", betas, X)
        X = X - eta * betas
    trace = RegretTrace(queried=queried, losses=losses, loss_vectors=loss_vectors,
                        iterates=iterates,
                        config={"algorithm": "nc_ogd", "eta": eta, "M": M,
                                "K": sched.local_steps, "R": sched.rounds})
    finalize_regret(trace, config.ball_radius)
    return trace


def run_fed_posgd(adversary: LinearAdversary, config: OnlineConfig, seed: int,
                  trial: int = 0) -> RegretTrace:
    """Projected one-point bandit descent with lazy (unprojected) averaging.

    Each machine projects to the ball, queries at the perturbed projected
    point, and updates the unprojected state; every K-th step the server
    averages the unprojected states. Regret is measured at the queried
    points.
    """
    sched = config.schedule
    M, K, T = sched.machines, sched.local_steps, sched.horizon
    d = adversary.d
    eta, delta, B = config.step, config.smoothing, config.ball_radius
    X = np.zeros((M, d))
    perturb = [StepStream(seed, rngmod.TAG_PERTURB, trial, m) for m in range(M)]
    queried = np.empty((T, M, 1, d))
    losses = np.empty((T, M, 1))
    loss_vectors = np.empty((T, M, d))
    iterates = np.empty((T, M, d))
    for t in range(T):
        betas = adversary.losses(trial, t, M)
        loss_vectors[t] = betas
        iterates[t] = X
        G_step = np.empty((M, d))
        for m in range(M):
            w = project_ball(X[m], B)
            u = sample_unit_sphere(d, perturb[m].at(t))
            q = w + delta * u
            fval = float(betas[m] @ q)
            queried[t, m, 0, :] = q
            losses[t, m, 0] = fval
            G_step[m] = one_point_estimator(fval, u, delta, d)
        X = X - eta * G_step
        if (t + 1) % K == 0:
            X[:] = X.mean(axis=0)
    trace = RegretTrace(queried=queried, losses=losses, loss_vectors=loss_vectors,
                        iterates=iterates,
                        config={"algorithm": "fed_posgd", "eta": eta, "delta": delta,
                                "B": B, "M": M, "K": K, "R": sched.rounds})
    finalize_regret(trace, B)
    return trace


def run_fed_osgd(adversary: LinearAdversary, config: OnlineConfig, seed: int,
                 trial: int = 0) -> RegretTrace:
    """Two-point bandit descent in the local-SGD pattern.

    Queries x +/- delta*u, incurs both losses, and averages the post-update
    states across machines every K-th step. Regret averages the two queried
    points per step.
    """
    sched = config.schedule
    M, K, T = sched.machines, sched.local_steps, sched.horizon
    d = adversary.d
    eta, delta, B = config.step, config.smoothing, config.ball_radius
    X = np.zeros((M, d))
    perturb = [StepStream(seed, rngmod.TAG_PERTURB, trial, m) for m in range(M)]
    queried = np.empty((T, M, 2, d))
    losses = np.empty((T, M, 2))
    loss_vectors = np.empty((T, M, d))
    iterates = np.empty((T, M, d))
    for t in range(T):
        betas = adversary.losses(trial, t, M)
        loss_vectors[t] = betas
        iterates[t] = X
        G_step = np.empty((M, d))
        for m in range(M):
            u = sample_unit_sphere(d, perturb[m].at(t))
            q_plus = X[m] + delta * u
            q_minus = X[m] - delta * u
            f_plus = float(betas[m] @ q_plus)
            f_minus = float(betas[m] @ q_minus)
            queried[t, m, 0, :] = q_plus
            queried[t, m, 1, :] = q_minus
            losses[t, m, 0] = f_plus
            losses[t, m, 1] = f_minus
            G_step[m] = two_point_estimator(f_plus, f_minus, u, delta, d)
        X = X - eta * G_step
        if (t + 1) % K == 0:
            X[:] = X.mean(axis=0)
    trace = RegretTrace(queried=queried, losses=losses, loss_vectors=loss_vectors,
                        iterates=iterates,
                        config={"algorithm": "fed_osgd", "eta": eta, "delta": delta,
                                "B": B, "M": M, "K": K, "R": sched.rounds})
    finalize_regret(trace, B)
    return trace


def hindsight_comparator(loss_vectors: np.ndarray, B: float) -> tuple[np.ndarray, float]:
    """Best fixed point in the B-ball for summed linear losses.

    Returns (x_star, average comparator loss per step-machine). With
    s = sum_{t,m} beta / M the minimizer is -B s / ||s||; when s = 0 every
    point ties and the comparator value is zero.
    """
    T, M, d = loss_vectors.shape
    s = loss_vectors.sum(axis=(0, 1)) / M
    norm = float(np.linalg.norm(s))
    if norm == 0.0:
        return np.zeros(d), 0.0
    x_star = -B * s / norm
    return x_star, float(-B * norm / T)


def finalize_regret(trace: RegretTrace, B: float) -> tuple[np.ndarray, float]:
    """Fill the trace's hindsight comparator and average regret, and return them."""
    x_star, comp_avg = hindsight_comparator(trace.loss_vectors, B)
    regret = trace.incurred_average() - comp_avg
    trace.x_star = x_star
    trace.avg_regret = float(regret)
    return x_star, float(regret)


def hindsight_regret(trace: RegretTrace, B: float) -> tuple[np.ndarray, float]:
    """Hindsight comparator and average regret of a completed loss sequence."""
    return finalize_regret(trace, B)


def projected_gradient_comparator(gradient, d: int, B: float,
                                  step: float = None, max_iter: int = 100000,
                                  tol: float = 1e-8):
    """Constrained comparator for non-linear summed losses by projected descent.

    ``gradient(x)`` must return the gradient of the summed objective. Stops
    once the projected-gradient norm certificate drops below ``tol``.
    """
    x = np.zeros(d)
    if step is None:
        step = B / max(1.0, float(np.linalg.norm(gradient(x))) + 1e-12)
    for _ in range(max_iter):
        g = np.asarray(gradient(x), dtype=float)
        x_new = project_ball(x - step * g, B)
        cert = float(np.linalg.norm(x - x_new)) / step
        x = x_new
        if cert <= tol:
            return x, cert
    return x, cert


def tuned_steps_fed_osgd(G: float, B: float, d: int, M: int, K: int, T: int):
    """Step and smoothing choices from the two-point regret guarantee."""
    R = max(1, T // K)
    terms = [1.0, math.sqrt(M) / math.sqrt(d)]
    if K > 1:
        terms.append(1.0 / (math.sqrt(K) * d**0.25))
    eta = B / (G * math.sqrt(T)) * min(terms)
    delta = B * d**0.25 / math.sqrt(R) * (1.0 + d**0.25 / math.sqrt(M * K))
    return eta, delta


def tuned_steps_fed_posgd(G: float, B: float, d: int, M: int, K: int, T: int,
                          zeta_hat: float = 0.0):
    """Step and smoothing choices from the one-point regret guarantee (delta = B)."""
    terms = [1.0, math.sqrt(M) / (d * B)]
    if K > 1:
        terms.append(1.0 / (math.sqrt(d * B) * K**0.25))
        if zeta_hat > 0:
            terms.append(math.sqrt(G) / math.sqrt(zeta_hat * K))
    eta = B / (G * math.sqrt(T)) * min(terms)
    return eta, B


def export_regret_csv(trace: RegretTrace, path) -> None:
    """Regret CSV: one row per (t, machine, query); cumulative regret uses the
    per-query comparator convention (two-point rows weigh half)."""
    x_star = trace.x_star
    T, M, Q = trace.losses.shape
    cum = 0.0
    with open(str(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "machine", "query_index", "loss", "cum_regret"])
        for t in range(T):
            for m in range(M):
                comp = float(trace.loss_vectors[t, m] @ x_star)
                for q in range(Q):
                    cum += (trace.losses[t, m, q] - comp) / Q
                    w.writerow([str(t), str(m), str(q),
                                f"{trace.losses[t, m, q]:.17g}", f"{cum:.17g}"])
