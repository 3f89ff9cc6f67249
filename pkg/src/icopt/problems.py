"""Problem instances, stochastic oracles, and heterogeneity measurement.

Two machine kinds are supported: quadratic machines F_m(x) = x'A_m x / 2 +
b_m'x (optionally carrying their minimizer when -b_m lies in the image of
A_m), and linear-regression machines with Gaussian covariates whose
population loss is the strictly convex quadratic with Hessian mu_m mu_m' + I.
Instances are immutable after construction; randomness always enters through
an explicit generator argument.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    as_sym_matrix,
    as_vec,
    eigen_extremes,
    operator_norm,
    solve_spd,
)

PSD_TOL = 1e-10
OPT_RESIDUAL_TOL = 1e-9


class NoUniqueOptimumError(ValueError):
    pass


@dataclass(frozen=True)
class QuadraticMachine:
    """One client's quadratic objective plus its oracle noise model.

    The gradient is A x + b. ``optimum`` is present iff -b is in the image of
    A; generators always populate it. ``noise_second`` is the bound (and for
    the Gaussian oracle the exact value) of E||xi||^2; ``noise_fourth`` the
    fourth-moment analogue, derived from the Gaussian model when omitted.
    """

    hessian: np.ndarray
    affine: np.ndarray
    optimum: np.ndarray | None = None
    noise_second: float = 0.0
    noise_fourth: float = 0.0

    def __post_init__(self):
        a = as_sym_matrix(self.hessian)
        d = a.shape[0]
        b = as_vec(self.affine, d)
        lo, hi = eigen_extremes(a)
        if lo < -PSD_TOL * max(1.0, hi):
            raise ValueError("hessian is not PSD to tolerance")
        object.__setattr__(self, "hessian", a)
        object.__setattr__(self, "affine", b)
        if self.optimum is not None:
            x = as_vec(self.optimum, d)
            if np.linalg.norm(a @ x + b) > OPT_RESIDUAL_TOL * (1.0 + np.linalg.norm(b)):
                raise ValueError("claimed optimum does not annihilate the gradient")
            object.__setattr__(self, "optimum", x)
        if self.noise_second < 0:
            raise ValueError("noise_second must be nonnegative")
        if self.noise_fourth == 0.0 and self.noise_second > 0.0:
            # isotropic Gaussian: E||xi||^4 = sigma2^4 * (1 + 2/d)
            object.__setattr__(
                self, "noise_fourth", self.noise_second * (1.0 + 2.0 / d) ** 0.25
            )
        if self.noise_fourth < self.noise_second:
            raise ValueError("noise_fourth must be at least noise_second")

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    @classmethod
    def from_optimum(cls, hessian, optimum, noise_second=0.0, noise_fourth=0.0):
        a = as_sym_matrix(hessian)
        x = as_vec(optimum, a.shape[0])
        return cls(hessian=a, affine=-(a @ x), optimum=x,
                   noise_second=noise_second, noise_fourth=noise_fourth)

    def gradient(self, x) -> np.ndarray:
        return self.hessian @ x + self.affine

    def value(self, x) -> float:
        # Constant offset chosen so machines built from an optimum have
        # minimum value zero there.
        v = 0.5 * float(x @ (self.hessian @ x)) + float(self.affine @ x)
        if self.optimum is not None:
            v += 0.5 * float(self.optimum @ (self.hessian @ self.optimum))
        return v


@dataclass(frozen=True)
class RegressionMachine:
    """Linear-regression client: covariates N(mean, I), labels <truth, beta> + noise.

    The population loss is (x - truth)'(mean mean' + I)(x - truth)/2 plus a
    constant, so the implied Hessian is strictly positive definite.
    """

    mean: np.ndarray
    truth: np.ndarray
    label_noise: float = 0.0

    def __post_init__(self):
        mu = as_vec(self.mean)
        x = as_vec(self.truth, mu.shape[0])
        if self.label_noise < 0:
            raise ValueError("label_noise must be nonnegative")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "truth", x)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def hessian(self) -> np.ndarray:
        return np.outer(self.mean, self.mean) + np.eye(self.dim)

    @property
    def optimum(self) -> np.ndarray:
        return self.truth

    def gradient(self, x) -> np.ndarray:
        # population gradient
        return self.hessian @ (x - self.truth)

    def value(self, x) -> float:
        diff = x - self.truth
        return 0.5 * float(diff @ (self.hessian @ diff)) + 0.5 * self.label_noise**2

    def to_population_quadratic(self) -> QuadraticMachine:
        return QuadraticMachine.from_optimum(self.hessian, self.truth)


Machine = QuadraticMachine | RegressionMachine


@dataclass(frozen=True)
class Instance:
    """M machines of one kind sharing a dimension; the objective is their mean."""

    machines: tuple
    dim: int
    average_hessian: np.ndarray = field(repr=False, default=None)

    @property
    def num_machines(self) -> int:
        return len(self.machines)

    @property
    def kind(self) -> str:
        return "quadratic" if isinstance(self.machines[0], QuadraticMachine) else "regression"

    def machine_hessians(self) -> list[np.ndarray]:
        return [m.hessian for m in self.machines]

    def gradient(self, x) -> np.ndarray:
        g = np.zeros(self.dim)
        for m in self.machines:
            g += m.gradient(x)
        return g / self.num_machines

    def value(self, x) -> float:
        return sum(m.value(x) for m in self.machines) / self.num_machines


def build_instance(machines) -> Instance:
    """Validate machines (same kind, same dimension) and cache the mean Hessian."""
    machines = tuple(machines)
    if not machines:
        raise ValueError("need at least one machine")
    kinds = {type(m) for m in machines}
    if len(kinds) > 1:
        raise ValueError("machines must all be of the same kind")
    d = machines[0].dim
    for m in machines:
        if m.dim != d:
            raise ValueError("dimension mismatch across machines")
    avg = sum(m.hessian for m in machines) / len(machines)
    return Instance(machines=machines, dim=d, average_hessian=0.5 * (avg + avg.T))


def global_optimum(inst: Instance) -> np.ndarray:
    """Unique minimizer of the average objective; requires a PD mean Hessian."""
    b_bar = sum(
        (m.affine if isinstance(m, QuadraticMachine) else -(m.hessian @ m.truth))
        for m in inst.machines
    ) / inst.num_machines
    try:
        x = solve_spd(inst.average_hessian, -b_bar)
    except ValueError as exc:
        raise NoUniqueOptimumError("average Hessian is singular; no unique optimum") from exc
    return x


# ---------------------------------------------------------------------------
# stochastic oracles
# ---------------------------------------------------------------------------

def oracle_needs_rng(machine: Machine) -> bool:
    """Whether the machine's stochastic oracle consumes randomness."""
    return isinstance(machine, RegressionMachine) or machine.noise_second > 0.0


def stochastic_gradient(machine: Machine, x, rng: np.random.Generator | None) -> np.ndarray:
    """One stochastic gradient of the machine's objective at x.

    Quadratic machines add isotropic Gaussian noise with E||xi||^2 = sigma2^2.
    Regression machines sample a covariate-label pair and return the
    per-sample gradient beta (<beta, x> - <beta, truth> - eps). ``rng`` may
    be None for oracles that consume no randomness.
    """
    if isinstance(machine, QuadraticMachine):
        g = machine.gradient(x)
        if machine.noise_second > 0.0:
            d = machine.dim
            g = g + (machine.noise_second / math.sqrt(d)) * rng.standard_normal(d)
        return g
    beta = machine.mean + rng.standard_normal(machine.dim)
    eps = machine.label_noise * rng.standard_normal() if machine.label_noise > 0 else 0.0
    return beta * (float(beta @ x) - float(beta @ machine.truth) - eps)


def multi_point_gradient(machine: Machine, points, rng: np.random.Generator | None,
                         batch: int = 1) -> list[np.ndarray]:
    """Gradients at several points computed from one shared random datum.

    One datum (or one mini-batch of ``batch`` data) is drawn and used for
    every point, so gradient differences between points are exact for
    quadratics and mean-smooth for regression machines.
    """
    if not points:
        raise ValueError("need at least one point")
    if isinstance(machine, QuadraticMachine):
        d = machine.dim
        if machine.noise_second > 0.0:
            xi = (machine.noise_second / math.sqrt(d)) * rng.standard_normal(d)
            if batch > 1:
                for _ in range(batch - 1):
                    xi += (machine.noise_second / math.sqrt(d)) * rng.standard_normal(d)
                xi /= batch
        else:
            xi = np.zeros(d)
        return [machine.gradient(p) + xi for p in points]
    betas = machine.mean + rng.standard_normal((batch, machine.dim))
    eps = (machine.label_noise * rng.standard_normal(batch)
           if machine.label_noise > 0 else np.zeros(batch))
    shift = betas @ machine.truth + eps
    return [betas.T @ (betas @ p - shift) / batch for p in points]


# ---------------------------------------------------------------------------
# heterogeneity measurement
# ---------------------------------------------------------------------------

@dataclass
class HeterogeneityReport:
    """Measured first- and second-order heterogeneity of an instance.

    ``zeta_star`` is the mean pairwise optimum distance (the aggregate used
    by the closed-form bounds); the max-pair and fourth-moment aggregates and
    the full pairwise matrix are exposed alongside it.
    """

    zeta_star_pairs: np.ndarray | None
    zeta_star: float | None
    zeta_star_max: float | None
    zeta_star_fourth: float | None
    zeta_star_per_machine: np.ndarray | None
    phi_star_per_machine: np.ndarray | None
    phi_star: float | None
    phi_star_fourth: float | None
    tau: float
    smoothness_H: float
    strong_convexity_mu: float
    kappa: float | None
    B_bar: float | None
    B: float | None
    third_order_Q: float = 0.0

    @property
    def kappa_defined(self) -> bool:
        return self.kappa is not None


def heterogeneity_report(inst: Instance) -> HeterogeneityReport:
    """Measure zeta*, phi*, tau, H, mu, kappa, B-bar, B on an instance.

    Regression machines are converted to their implied population quadratics
    first. Missing minimizers or a singular mean Hessian leave the dependent
    fields as None rather than failing the whole report.
    """
    if inst.kind == "regression":
        machines = [m.to_population_quadratic() for m in inst.machines]
    else:
        machines = list(inst.machines)
    M = len(machines)
    hessians = [m.hessian for m in machines]

    tau = 0.0
    for i in range(M):
        for j in range(i + 1, M):
            tau = max(tau, operator_norm(hessians[i] - hessians[j]))
    extremes = [eigen_extremes(a) for a in hessians]
    H = max(hi for _, hi in extremes)
    mu = min(lo for lo, _ in extremes)
    kappa = (H / mu) if mu > PSD_TOL * max(1.0, H) else None

    optima = [m.optimum for m in machines]
    if any(x is None for x in optima):
        return HeterogeneityReport(
            zeta_star_pairs=None, zeta_star=None, zeta_star_max=None,
            zeta_star_fourth=None, zeta_star_per_machine=None,
            phi_star_per_machine=None, phi_star=None, phi_star_fourth=None,
            tau=tau, smoothness_H=H, strong_convexity_mu=mu, kappa=kappa,
            B_bar=None, B=None,
        )

    pairs = np.zeros((M, M))
    for i in range(M):
        for j in range(M):
            pairs[i, j] = np.linalg.norm(optima[i] - optima[j])
    zeta_mean = float(pairs.mean())
    zeta_max = float(pairs.max())
    zeta_fourth = float((pairs**4).mean() ** 0.25)
    zeta_per_machine = pairs.mean(axis=1)
    B_bar = float(np.mean([np.linalg.norm(x) for x in optima]))

    try:
        x_star = global_optimum(inst)
    except NoUniqueOptimumError:
        phi_pm = phi = phi4 = B = None
    else:
        phi_pm = np.array([np.linalg.norm(x - x_star) for x in optima])
        phi = float(phi_pm.mean())
        phi4 = float((phi_pm**4).mean() ** 0.25)
        B = float(np.linalg.norm(x_star))

    return HeterogeneityReport(
        zeta_star_pairs=pairs, zeta_star=zeta_mean, zeta_star_max=zeta_max,
        zeta_star_fourth=zeta_fourth, zeta_star_per_machine=zeta_per_machine,
        phi_star_per_machine=phi_pm, phi_star=phi, phi_star_fourth=phi4,
        tau=tau, smoothness_H=H, strong_convexity_mu=mu, kappa=kappa,
        B_bar=B_bar, B=B,
    )


# ---------------------------------------------------------------------------
# hard-instance generators
# ---------------------------------------------------------------------------

def make_shared_optimum_pair(H: float, x_star, sigma2: float = 0.0) -> Instance:
    """Two 2-d machines with Hessians diag(H,0) and diag(0,H) sharing x_star.

    First-order heterogeneity is zero while the second-order heterogeneity is
    the worst possible value tau = H.
    """
    if H <= 0:
        raise ValueError("H must be positive")
    x = as_vec(x_star, 2)
    m1 = QuadraticMachine.from_optimum(np.diag([H, 0.0]), x, noise_second=sigma2)
    m2 = QuadraticMachine.from_optimum(np.diag([0.0, H]), x, noise_second=sigma2)
    return build_instance([m1, m2])


def make_tau_decoupled_pair(H: float, tau: float, x_star, sigma2: float = 0.0) -> Instance:
    """3-d shared-optimum pair with Hessians diag(tau,0,H) and diag(0,tau,H).

    The extra shared high-curvature coordinate decouples the smoothness H
    from the second-order heterogeneity tau.
    """
    if not 0.0 <= tau <= H:
        raise ValueError("need 0 <= tau <= H")
    x = as_vec(x_star, 3)
    m1 = QuadraticMachine.from_optimum(np.diag([tau, 0.0, H]), x, noise_second=sigma2)
    m2 = QuadraticMachine.from_optimum(np.diag([0.0, tau, H]), x, noise_second=sigma2)
    return build_instance([m1, m2])


def make_rotated_pair(H: float, alpha: float, x_star) -> Instance:
    """Two rank-1 machines: H*diag(1,0) and H*vv' with v = (alpha, sqrt(1-alpha^2)).

    Both Hessians have eigenvalues {0, H}; the average Hessian has condition
    number (1+alpha)/(1-alpha), which blows up as alpha -> 1.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    x = as_vec(x_star, 2)
    v = np.array([alpha, math.sqrt(1.0 - alpha * alpha)])
    m1 = QuadraticMachine.from_optimum(H * np.diag([1.0, 0.0]), x)
    m2 = QuadraticMachine.from_optimum(H * np.outer(v, v), x)
    return build_instance([m1, m2])


def make_condition_number_instance(H: float, R: int, B: float) -> Instance:
    """Single 2-d quadratic with condition number 12R and ||x_star|| = B.

    Eigenvalues are {H, H/(12R)} on the standard basis and the minimizer is
    -B(e1+e2)/sqrt(2), the instance on which R rounds of plain gradient
    descent stall regardless of the step size.
    """
    if H <= 0 or B <= 0 or int(R) < 1:
        raise ValueError("need H > 0, B > 0, R >= 1")
    kappa = 12 * int(R)
    hessian = np.diag([H, H / kappa])
    x_star = -(B / math.sqrt(2.0)) * np.array([1.0, 1.0])
    return build_instance([QuadraticMachine.from_optimum(hessian, x_star)])


# Pair blocks behind the high-dimensional offset construction. Their minimizers
# are (-c, 0) and (c, 0) while the minimizer of their average is (-c/3, c/3).
_BLOCK_F = np.array([[6.0, 2.0], [2.0, 2.0]])
_BLOCK_G = np.array([[4.0, 2.0], [2.0, 2.0]])


def make_offset_highdim_instance(M: int, B_bar: float) -> Instance:
    """M machines on d = M dims whose average optimum has norm sqrt(M)*B_bar/3.

    Machines 2j-1 and 2j act on coordinate pair j through the two offset
    blocks and are flat elsewhere, so every machine optimum has norm exactly
    B_bar while the global optimum is (-B_bar/3, B_bar/3, ...) with norm
    sqrt(M)*B_bar/3: averaging pushes the optimizer off the convex hull of
    the machines' optima.
    """
    if M < 2 or M % 2 != 0:
        raise ValueError("M must be an even integer >= 2")
    d = M
    machines = []
    for pair in range(M // 2):
        i = 2 * pair
        for block, sign in ((_BLOCK_F, -1.0), (_BLOCK_G, 1.0)):
            a = np.zeros((d, d))
            a[i:i + 2, i:i + 2] = block
            x = np.zeros(d)
            x[i] = sign * B_bar
            machines.append(QuadraticMachine.from_optimum(a, x))
    return build_instance(machines)


def sample_spherical_cap(center, half_angle: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the spherical cap of ``half_angle`` around ``center``.

    The polar angle is drawn from the exact cap density proportional to
    sin(theta)^(d-2) on [0, half_angle] by rejection under the majorizing
    power-law envelope theta^(d-2) (so tiny caps stay O(1) per sample), the
    azimuthal part is uniform on the orthogonal (d-1)-sphere, and a
    Householder reflection rotates the pole onto ``center``.
    """
    c = as_vec(center)
    d = c.shape[0]
    if d < 2:
        raise ValueError("need dimension >= 2")
    if abs(np.linalg.norm(c) - 1.0) > 1e-9:
        raise ValueError("center must be a unit vector")
    if not 0.0 <= half_angle <= math.pi:
        raise ValueError("half_angle must lie in [0, pi]")
    if half_angle == 0.0:
        return c.copy()

    p = d - 2  # sin^p theta target on [0, half_angle]
    while True:
        theta = half_angle * rng.random() ** (1.0 / (p + 1))
        if p == 0:
            break
        if rng.random() <= (math.sin(theta) / theta) ** p:
            break

    w = rng.standard_normal(d - 1)
    w /= np.linalg.norm(w)
    local = np.concatenate([math.sin(theta) * w, [math.cos(theta)]])

    pole = np.zeros(d)
    pole[-1] = 1.0
    v = pole - c
    vnorm2 = float(v @ v)
    if vnorm2 < 1e-30:
        out = local
    else:
        out = local - (2.0 * float(v @ local) / vnorm2) * v
    return out / np.linalg.norm(out)


def cohort_truths(M: int, d: int, R_star: float, zeta_star: float,
                  rng: np.random.Generator, center=None):
    """Ground-truth models on the sphere of radius R_star with pairwise spread <= zeta_star."""
    if zeta_star < 0 or zeta_star > 2 * R_star:
        raise ValueError("need 0 <= zeta_star <= 2*R_star")
    if center is None:
        center = rng.standard_normal(d)
        center /= np.linalg.norm(center)
    else:
        center = as_vec(center, d)
    phi = math.asin(zeta_star / (2.0 * R_star))
    truths = [R_star * sample_spherical_cap(center, phi, rng) for _ in range(M)]
    return center, truths


def cohort_means(M: int, d: int, mu0: float, tau_knob: float,
                 center, rng: np.random.Generator):
    """Covariate means on the sphere of radius mu0 with pairwise spread <= tau_knob."""
    if tau_knob < 0 or tau_knob > 2 * mu0:
        raise ValueError("need 0 <= tau_knob <= 2*mu0")
    theta = math.asin(tau_knob / (2.0 * mu0))
    return [mu0 * sample_spherical_cap(center, theta, rng) for _ in range(M)]


def make_regression_cohort(M: int, d: int, R_star: float, zeta_star: float,
                           mu0: float, tau_knob: float, sigma_noise: float,
                           rng: np.random.Generator) -> Instance:
    """Regression cohort with angular-dispersion control of both heterogeneities.

    Every ||x_m*|| equals R_star and every ||mu_m|| equals mu0 exactly, so
    the Hessian condition number stays 1 + mu0^2 for all machines and only
    the pairwise spreads (<= zeta_star resp. <= tau_knob) vary.
    """
    center, truths = cohort_truths(M, d, R_star, zeta_star, rng)
    means = cohort_means(M, d, mu0, tau_knob, center, rng)
    machines = [RegressionMachine(mean=mu, truth=x, label_noise=sigma_noise)
                for mu, x in zip(means, truths)]
    return build_instance(machines)


def random_strongly_convex_instance(d: int, M: int, rng: np.random.Generator,
                                    mu: float = 1.0, H: float | None = None,
                                    spread: float = 1.0, sigma2: float = 0.0) -> Instance:
    """Random strongly convex quadratic instance with eigenvalues in [mu, H]."""
    if H is None:
        H = mu * float(rng.uniform(1.5, 5.0))
    machines = []
    for _ in range(M):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        lam = rng.uniform(mu, H, size=d)
        lam[0], lam[-1] = mu, H
        a = (q * lam) @ q.T
        x = spread * rng.standard_normal(d)
        machines.append(QuadraticMachine.from_optimum(a, x, noise_second=sigma2))
    return build_instance(machines)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def instance_to_json(inst: Instance) -> str:
    """Serialize an instance to a JSON document with bit-exact float round-trip."""
    doc = {"kind": inst.kind, "d": inst.dim, "M": inst.num_machines, "machines": []}
    for m in inst.machines:
        if isinstance(m, QuadraticMachine):
            rec = {
                "hessian": [float(v) for v in m.hessian.ravel()],
                "affine": [float(v) for v in m.affine],
                "optimum": None if m.optimum is None else [float(v) for v in m.optimum],
                "noise": {"second": float(m.noise_second), "fourth": float(m.noise_fourth)},
            }
        else:
            rec = {
                "mean": [float(v) for v in m.mean],
                "optimum": [float(v) for v in m.truth],
                "noise": {"sigma_noise": float(m.label_noise)},
            }
        doc["machines"].append(rec)
    return json.dumps(doc, indent=2)


def instance_from_json(text: str) -> Instance:
    doc = json.loads(text)
    d = int(doc["d"])
    machines = []
    for rec in doc["machines"]:
        if doc["kind"] == "quadratic":
            machines.append(QuadraticMachine(
                hessian=np.array(rec["hessian"], dtype=float).reshape(d, d),
                affine=np.array(rec["affine"], dtype=float),
                optimum=None if rec["optimum"] is None else np.array(rec["optimum"], dtype=float),
                noise_second=float(rec["noise"]["second"]),
                noise_fourth=float(rec["noise"]["fourth"]),
            ))
        else:
            machines.append(RegressionMachine(
                mean=np.array(rec["mean"], dtype=float),
                truth=np.array(rec["optimum"], dtype=float),
                label_noise=float(rec["noise"]["sigma_noise"]),
            ))
    return build_instance(machines)
