import math

import numpy as np
import pytest

from icopt import rng as rngmod
from icopt.diagnostics import uniform_zeta_bound
from icopt.numerics import operator_norm
from icopt.problems import (
    QuadraticMachine,
    RegressionMachine,
    build_instance,
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
    multi_point_gradient,
    random_strongly_convex_instance,
    sample_spherical_cap,
    stochastic_gradient,
)
from icopt.rng import stream


def test_build_instance_identical_machines():
    m = QuadraticMachine.from_optimum(np.diag([1.0, 2.0]), [0.5, -0.5])
    inst = build_instance([m, m])
    assert np.allclose(inst.average_hessian, m.hessian)


def test_build_instance_dimension_mismatch():
    m2 = QuadraticMachine.from_optimum(np.eye(2), [0.0, 0.0])
    m3 = QuadraticMachine.from_optimum(np.eye(3), [0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="dimension"):
        build_instance([m2, m3])


def test_build_instance_shared_optimum_average():
    inst = make_shared_optimum_pair(2.0, [1.0, 1.0])
    assert np.allclose(inst.average_hessian, np.diag([1.0, 1.0]))


def test_global_optimum_homogeneous():
    m = QuadraticMachine.from_optimum(np.diag([1.0, 3.0]), [0.2, 0.4])
    inst = build_instance([m, m, m])
    assert np.allclose(global_optimum(inst), [0.2, 0.4], atol=1e-12)


def test_global_optimum_1d_weighted():
    m1 = QuadraticMachine.from_optimum([[1.0]], [0.0])
    m2 = QuadraticMachine.from_optimum([[2.0]], [1.0])
    inst = build_instance([m1, m2])
    assert abs(global_optimum(inst)[0] - 2.0 / 3.0) <= 1e-12


@pytest.mark.parametrize("M", [2, 4, 8])
def test_offset_highdim_optimum(M):
    b_bar = 3.0
    inst = make_offset_highdim_instance(M, b_bar)
    x = global_optimum(inst)
    want = np.tile([-b_bar / 3.0, b_bar / 3.0], M // 2)
    assert np.allclose(x, want, atol=1e-10)
    for m in inst.machines:
        assert float(np.linalg.norm(m.optimum)) == b_bar


def test_offset_highdim_rejects_odd():
    with pytest.raises(ValueError):
        make_offset_highdim_instance(3, 1.0)


def test_gradient_vanishes_at_global_optimum():
    for seed in range(25):
        rng = stream(10, seed)
        inst = random_strongly_convex_instance(int(rng.integers(2, 7)),
                                               int(rng.integers(1, 6)), rng)
        x = global_optimum(inst)
        assert np.linalg.norm(inst.gradient(x)) <= 1e-8


def test_heterogeneity_report_homogeneous():
    m = QuadraticMachine.from_optimum(np.diag([1.0, 2.0]), [1.0, 1.0])
    rep = heterogeneity_report(build_instance([m, m]))
    assert rep.zeta_star == 0.0 and rep.phi_star <= 1e-12 and rep.tau == 0.0


def test_heterogeneity_report_shared_optimum_pair():
    rep = heterogeneity_report(make_shared_optimum_pair(1.0, [1.0, 1.0]))
    assert rep.zeta_star <= 1e-12
    assert rep.phi_star <= 1e-9
    assert abs(rep.tau - 1.0) <= 1e-12
    assert rep.kappa is None and not rep.kappa_defined


def test_heterogeneity_report_tau_decoupled():
    rep = heterogeneity_report(make_tau_decoupled_pair(1.0, 0.3, [1.0, 0.0, 2.0]))
    assert abs(rep.tau - 0.3) <= 1e-12
    assert abs(rep.smoothness_H - 1.0) <= 1e-12


def test_tau_at_most_twice_smoothness():
    for seed in range(15):
        rng = stream(11, seed)
        inst = random_strongly_convex_instance(4, 4, rng)
        rep = heterogeneity_report(inst)
        assert rep.tau <= 2.0 * rep.smoothness_H + 1e-12


def test_report_without_minimizer_restricted():
    # affine machine with no minimizer: -b outside image(A)
    m = QuadraticMachine(hessian=np.diag([1.0, 0.0]), affine=np.array([0.0, -1.0]))
    rep = heterogeneity_report(build_instance([m]))
    assert rep.zeta_star is None and rep.phi_star is None
    assert rep.smoothness_H == 1.0


def test_stochastic_gradient_noiseless():
    m = QuadraticMachine.from_optimum(np.diag([1.0, 2.0]), [1.0, -1.0])
    assert np.allclose(stochastic_gradient(m, m.optimum, None), 0.0)
    x = np.array([0.3, 0.4])
    assert np.allclose(stochastic_gradient(m, x, None), m.hessian @ x + m.affine)


def test_stochastic_gradient_noise_moments():
    m = QuadraticMachine.from_optimum(np.eye(3), np.zeros(3), noise_second=0.7)
    rng = stream(12, 0)
    draws = np.array([stochastic_gradient(m, np.zeros(3), rng) for _ in range(20000)])
    second = float((draws**2).sum(axis=1).mean())
    assert abs(second - 0.49) <= 5 * 0.49 * math.sqrt(2.0 / (3 * 20000)) + 0.01


def test_regression_gradient_matches_population():
    machine = RegressionMachine(mean=np.array([1.0, -0.5, 0.2]),
                                truth=np.array([0.3, 0.1, -0.2]), label_noise=0.1)
    x = np.array([0.5, -0.5, 0.5])
    rng = stream(13, 0)
    n = 100_000
    draws = np.array([stochastic_gradient(machine, x, rng) for _ in range(n)])
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(n)
    want = machine.gradient(x)
    assert np.all(np.abs(mean - want) <= 4 * se)


def test_multi_point_shared_datum():
    m = QuadraticMachine.from_optimum(np.diag([2.0, 1.0]), [1.0, 1.0],
                                      noise_second=0.5)
    x, y = np.array([0.0, 0.0]), np.array([1.0, -1.0])
    gx, gy = multi_point_gradient(m, [x, y], stream(14, 0))
    # shared additive noise cancels exactly in the difference
    assert np.allclose(gx - gy, m.hessian @ (x - y), atol=1e-14)
    ga, gb = multi_point_gradient(m, [x, x], stream(14, 1))
    assert np.array_equal(ga, gb)


def test_multi_point_noiseless_exact():
    m = QuadraticMachine.from_optimum(np.diag([2.0, 1.0]), [1.0, 1.0])
    x, y = np.array([0.2, 0.1]), np.array([-0.3, 0.7])
    gx, gy = multi_point_gradient(m, [x, y], None)
    assert np.allclose(gx, m.gradient(x)) and np.allclose(gy, m.gradient(y))


def test_regression_multi_point_mean_smooth():
    machine = RegressionMachine(mean=np.array([2.0, 0.0]), truth=np.array([1.0, 1.0]),
                                label_noise=0.3)
    rng = stream(15, 0)
    x, y = np.array([0.5, 0.5]), np.array([0.4, 0.6])
    gaps = []
    for _ in range(5000):
        gx, gy = multi_point_gradient(machine, [x, y], rng)
        gaps.append(np.linalg.norm(gx - gy))
    mean_gap = float(np.mean(gaps))
    mean_smooth = float(np.mean([np.linalg.norm(np.outer(b, b), 2)
                                 for b in (machine.mean
                                           + stream(15, 1).standard_normal((5000, 2)))]))
    assert mean_gap <= (mean_smooth + 1.0) * np.linalg.norm(x - y)


def test_shared_optimum_pair_fields():
    inst = make_shared_optimum_pair(1.0, [1.0, 1.0])
    assert np.allclose(inst.machines[0].hessian, np.diag([1.0, 0.0]))
    assert np.allclose(inst.machines[1].hessian, np.diag([0.0, 1.0]))
    assert np.allclose(global_optimum(inst), [1.0, 1.0])


def test_rotated_pair_spectrum():
    inst = make_rotated_pair(3.0, 0.5, [0.0, 0.0])
    for m in inst.machines:
        w = np.linalg.eigvalsh(m.hessian)
        assert abs(w[0]) <= 1e-12 and abs(w[-1] - 3.0) <= 1e-12
    w = np.linalg.eigvalsh(inst.average_hessian)
    assert abs(w[-1] / w[0] - 3.0) <= 1e-9       # (1 + a) / (1 - a) at a = 1/2
    with pytest.raises(ValueError):
        make_rotated_pair(1.0, 1.0, [0.0, 0.0])


def test_rotated_pair_small_alpha_limit():
    inst = make_rotated_pair(1.0, 1e-9, [0.0, 0.0])
    assert np.allclose(inst.machines[1].hessian, np.diag([0.0, 1.0]), atol=1e-8)


def test_condition_number_instance():
    inst = make_condition_number_instance(12.0, 1, 2.0)
    w = np.sort(np.linalg.eigvalsh(inst.machines[0].hessian))
    assert np.allclose(w, [1.0, 12.0])
    assert abs(np.linalg.norm(inst.machines[0].optimum) - 2.0) <= 1e-12


def test_tau_decoupled_limits():
    inst0 = make_tau_decoupled_pair(1.0, 0.0, [0.0, 0.0, 1.0])
    assert np.allclose(inst0.machines[0].hessian, inst0.machines[1].hessian)
    with pytest.raises(ValueError):
        make_tau_decoupled_pair(1.0, 1.5, [0.0, 0.0, 0.0])


def test_cap_sampler_degenerate_and_range():
    rng = stream(16, 0)
    center = np.zeros(5)
    center[2] = 1.0
    assert np.array_equal(sample_spherical_cap(center, 0.0, rng), center)
    phi = math.pi / 4
    angles = [math.acos(np.clip(float(sample_spherical_cap(center, phi, rng) @ center),
                                -1, 1))
              for _ in range(10_000)]
    assert max(angles) <= phi + 1e-9
    assert max(angles) >= 0.9 * phi


def test_cap_sampler_full_sphere_symmetry():
    rng = stream(16, 1)
    center = np.array([1.0, 0.0, 0.0, 0.0])
    samples = np.array([sample_spherical_cap(center, math.pi, rng)
                        for _ in range(10_000)])
    assert np.linalg.norm(samples.mean(axis=0)) <= 4 * math.sqrt(4.0 / 10_000)


def test_cap_sampler_rejects_non_unit_center():
    with pytest.raises(ValueError, match="unit"):
        sample_spherical_cap(np.array([1.0, 1.0]), 0.3, stream(16, 2))


def test_regression_cohort_constraints():
    rng = stream(17, 0)
    inst = make_regression_cohort(12, 5, 1.0, 0.8, 5.0, 2.0, 0.1, rng)
    truths = [m.truth for m in inst.machines]
    means = [m.mean for m in inst.machines]
    for x, mu in zip(truths, means):
        assert abs(np.linalg.norm(x) - 1.0) <= 1e-12
        assert abs(np.linalg.norm(mu) - 5.0) <= 1e-12
    for i in range(12):
        for j in range(12):
            assert np.linalg.norm(truths[i] - truths[j]) <= 0.8 + 1e-12
            assert np.linalg.norm(means[i] - means[j]) <= 2.0 + 1e-12
    for m in inst.machines:
        w = np.linalg.eigvalsh(m.hessian)
        assert abs(w[-1] / w[0] - 26.0) <= 1e-9


def test_regression_cohort_zero_spread():
    rng = stream(17, 1)
    inst = make_regression_cohort(5, 4, 1.0, 0.0, 5.0, 0.0, 0.0, rng)
    for m in inst.machines[1:]:
        assert np.array_equal(m.truth, inst.machines[0].truth)
        assert np.array_equal(m.mean, inst.machines[0].mean)


def test_serialization_round_trip_quadratic():
    rng = stream(18, 0)
    inst = random_strongly_convex_instance(4, 3, rng, sigma2=0.37)
    text = instance_to_json(inst)
    back = instance_from_json(text)
    for a, b in zip(inst.machines, back.machines):
        assert np.array_equal(a.hessian, b.hessian)
        assert np.array_equal(a.affine, b.affine)
        assert np.array_equal(a.optimum, b.optimum)
        assert a.noise_second == b.noise_second
    assert instance_to_json(back) == text


def test_serialization_round_trip_regression():
    rng = stream(18, 1)
    inst = make_regression_cohort(4, 3, 1.0, 0.5, 5.0, 1.0, 0.1, rng)
    back = instance_from_json(instance_to_json(inst))
    for a, b in zip(inst.machines, back.machines):
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.truth, b.truth)
        assert a.label_noise == b.label_noise


def _sampled_sup_gradient_gap(m1, m2, radius, n, rng):
    sup = 0.0
    for _ in range(n):
        v = rng.standard_normal(m1.dim)
        v *= radius * rng.random() ** (1.0 / m1.dim) / np.linalg.norm(v)
        sup = max(sup, float(np.linalg.norm(m1.gradient(v) - m2.gradient(v))))
    return sup


def test_gradient_gap_grows_linearly_iff_hessians_differ():
    rng = stream(19, 0)
    m1 = QuadraticMachine.from_optimum(np.diag([2.0, 1.0]), [1.0, 0.0])
    m2 = QuadraticMachine.from_optimum(np.diag([1.0, 1.5]), [0.0, 1.0])
    gap = operator_norm(m1.hessian - m2.hessian)
    sups = {}
    for radius in (10.0, 100.0, 1000.0):
        # exact sup on the ball: maximize ||Dx + c|| over ||x|| <= radius
        d_mat = m1.hessian - m2.hessian
        c = m1.affine - m2.affine
        best = 0.0
        w, v = np.linalg.eigh(d_mat)
        for i in range(len(w)):
            for sign in (1.0, -1.0):
                x = sign * radius * v[:, i]
                best = max(best, float(np.linalg.norm(d_mat @ x + c)))
        best = max(best, _sampled_sup_gradient_gap(m1, m2, radius, 1000, rng))
        sups[radius] = best
    slope = (sups[1000.0] - sups[100.0]) / 900.0
    assert abs(slope - gap) <= 0.05 * gap
    # equal Hessians: the gap is constant in the radius
    m3 = QuadraticMachine.from_optimum(m1.hessian, [0.0, 1.0])
    gaps = [_sampled_sup_gradient_gap(m1, m3, r, 500, rng) for r in (10.0, 1000.0)]
    assert abs(gaps[0] - gaps[1]) <= 1e-8


def test_uniform_gap_bound_dominates_sampled_sup():
    for seed in range(20):
        rng = stream(19, 1 + seed)
        inst = random_strongly_convex_instance(5, 4, rng)
        rep = heterogeneity_report(inst)
        radius = 5.0
        bound = uniform_zeta_bound(rep, radius)
        for i in range(4):
            for j in range(4):
                sup = _sampled_sup_gradient_gap(inst.machines[i], inst.machines[j],
                                                radius, 1000, rng)
                assert sup <= bound[i, j] + 1e-9
