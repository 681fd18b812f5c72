import json
import math

import numpy as np
import pytest

from logistic_bd.estimator import (
    BinnedCorrelation,
    Estimate,
    TestFunction,
    ensemble_stats,
    estimate_correlations,
    estimate_functional,
)
from logistic_bd.hierarchy import HierarchyOperator, SolverConfig, initial_grid, integrate_rk4
from logistic_bd.kernels import KernelSpec, ModelSpec, derive_constants
from logistic_bd.simulator import Fixed, PoissonHomogeneous, ThinnedPoisson, run
from logistic_bd.verifier import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    AlignmentError,
    BoundCheck,
    UnsupportedInitialError,
    VerifierError,
    check_convolution_bound,
    check_global_moments,
    check_linear_growth,
    check_type_growth,
    convolution_rhs,
    cross_validate,
    decide,
    exit_code,
    mean_field_density,
    sigma_sweep,
    summary_table,
)

K = KernelSpec
THETA = TestFunction(K.gaussian(0.5, 1.0))


def simulate(spec, kappa0, horizon, times, replicas, seed):
    return run(spec, PoissonHomogeneous(kappa0), horizon, times, replicas=replicas, master_seed=seed,
               threads=4, record_events=False).snapshots


def solve(spec, kappa0, G, n_max, times, closure, dt=0.005):
    g0 = initial_grid(PoissonHomogeneous(kappa0), spec, G, n_max)
    cfg = SolverConfig(dt=dt, closure=closure, n_max=n_max, kappa0=kappa0)
    op = HierarchyOperator(spec, g0.geometry, cfg, derive_constants(spec, strict=False))
    return integrate_rk4(g0, max(times), op, times)


def fake_binned(k1, k1_se=0.01, times=(0.0, 1.0)):
    T = len(times)
    k1 = np.broadcast_to(np.asarray(k1, dtype=float), (T,)).copy()
    se = np.full(T, k1_se)
    return BinnedCorrelation(np.asarray(times, dtype=float), 100, 2.0, k1, se, k1[:, None], se[:, None], 2.0,
                             np.array([0.0, 1.0]), np.array([2.0]), (k1**2)[:, None], se[:, None])


# ---- verdict policy ----

def test_decide_policy():
    assert decide([1.0], [1.0], [0.0], 0.0) == PASS
    assert decide([1.1], [1.0], [0.01], 0.0) == FAIL
    assert decide([1.02], [1.0], [0.01], 0.0) == PASS
    assert decide([1.1], [1.0], [0.6], 0.0) == INCONCLUSIVE
    assert decide([0.0], [1.0], [0.01], 0.0) == PASS
    assert decide([0.0], [1.0], [0.01], 0.0, two_sided=True) == FAIL
    assert decide([np.nan, 1.0], [1.0, 1.0], [0.0, 0.0], 0.0) == PASS
    assert decide([np.nan], [1.0], [0.0], 0.0) == INCONCLUSIVE
    # a clear violation outranks noise elsewhere
    assert decide([1.1, 1.5], [1.0, 1.0], [0.01, 0.9], 0.0) == FAIL
    # noisy but far beyond the 3 SE band
    assert decide([50.0], [1.0], [2.0], 0.0) == FAIL


def test_bound_check_roundtrip_is_exact():
    c = check_type_growth(fake_binned([2.0, 2.5]), 2.0, 1.0)
    back = BoundCheck.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back.verdict == c.verdict
    assert decide(back.lhs, back.rhs, back.se, back.tol, back.two_sided) == c.verdict
    np.testing.assert_array_equal(back.lhs, c.lhs)
    np.testing.assert_array_equal(back.slack, c.slack)
    assert "type_growth" in summary_table([c])
    assert exit_code([c]) == 0 and exit_code([]) == 1


# ---- type growth ----

def test_type_growth_negative_control():
    # k1 at twice the bound
    c = check_type_growth(fake_binned([4.0, 6.0]), 2.0, 1.0)
    assert c.verdict == FAIL


def test_type_growth_pure_death():
    spec = ModelSpec(1, 2.0, K.constant(0), K.constant(1), K.tophat(1, 0.5))
    s = simulate(spec, 2.0, 2.0, [0.0, 1.0, 2.0], 200, 1)
    bc = estimate_correlations(s, n_bins=4)
    c = check_type_growth(bc, 2.0, 0.0)
    assert c.verdict in (PASS, INCONCLUSIVE)
    assert np.all(c.rhs[c.labels.index("k1")] == 2.0)
    traj = solve(spec, 2.0, 8, 2, [0.0, 1.0, 2.0], "zero")
    assert check_type_growth(traj, 2.0, 0.0).verdict == PASS


def test_type_growth_logistic_short_run():
    spec = ModelSpec(1, 5.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    s = simulate(spec, 2.0, 2.0, [0.0, 1.0, 2.0], 300, 2)
    c = check_type_growth(estimate_correlations(s, n_bins=10), 2.0, 1.0)
    assert c.verdict == PASS


# ---- convolution bound ----

def test_convolution_rhs_closed_form():
    spec = ModelSpec(1, 3.0, K.constant(1), K.constant(1), K.constant(0))
    t = 0.7
    rho, q = 1 - math.exp(-t), math.exp(-t)
    expected = math.exp((rho + 2.0 * q) * THETA.integral(3.0))
    assert convolution_rhs(t, spec, THETA, PoissonHomogeneous(2.0)) == pytest.approx(expected, rel=1e-12)
    assert convolution_rhs(t, spec, TestFunction(K.constant(0)), PoissonHomogeneous(2.0)) == 1.0


def test_convolution_equality_for_decoupled_model():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(1), K.constant(0))
    s = simulate(spec, 2.0, 2.0, [0.0, 0.5, 1.0, 2.0], 2000, 4)
    est = estimate_functional(s, "F_theta", THETA)
    c = check_convolution_bound(est, spec, THETA, PoissonHomogeneous(2.0), mode="equal")
    assert c.verdict == PASS
    assert np.all(np.abs(c.lhs - c.rhs) <= 3 * c.se)


def test_convolution_zero_theta():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    s = simulate(spec, 2.0, 1.0, [0.0, 1.0], 10, 5)
    zero = TestFunction(K.constant(0))
    c = check_convolution_bound(estimate_functional(s, "F_theta", zero), spec, zero, PoissonHomogeneous(2.0))
    assert np.all(c.lhs == 1.0) and np.all(c.rhs == 1.0)
    assert c.verdict == PASS


def test_convolution_negative_control_and_errors():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    rhs = convolution_rhs(1.0, spec, THETA, PoissonHomogeneous(2.0))
    est = Estimate(np.array([1.0]), np.array([2 * rhs]), np.array([0.01]), 100)
    assert check_convolution_bound(est, spec, THETA, PoissonHomogeneous(2.0)).verdict == FAIL
    with pytest.raises(UnsupportedInitialError):
        check_convolution_bound(est, spec, THETA, Fixed.of([[0.0]]))
    with pytest.raises(VerifierError):
        check_convolution_bound(est, spec, THETA, PoissonHomogeneous(2.0), mode="lower")
    thinned = ThinnedPoisson(4.0, K.constant(0.5))
    assert convolution_rhs(0.0, spec, THETA, thinned) == pytest.approx(
        convolution_rhs(0.0, spec, THETA, PoissonHomogeneous(2.0)), rel=1e-12)


# ---- global moments ----

def test_mean_field_density_values():
    logistic = ModelSpec(1, 5.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    assert mean_field_density(logistic) == pytest.approx(1.0)
    spec = ModelSpec(1, 5.0, K.constant(2), K.constant(1), K.tophat(1, 0.5))
    assert mean_field_density(spec) == pytest.approx((-1 + 3) / 2)
    assert mean_field_density(ModelSpec(1, 2.0, K.constant(3), K.constant(1.5), K.constant(0))) == 2.0
    assert mean_field_density(ModelSpec(1, 2.0, K.constant(3), K.constant(0), K.constant(0))) == math.inf


def test_global_moments_decoupled_relaxes_to_b_over_m():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(1), K.constant(0))
    times = [0.0, 1.0, 2.0, 3.0, 4.0, 4.6, 5.0]
    s = simulate(spec, 2.0, 5.0, times, 4000, 6)
    stats = ensemble_stats(s, n_max=2)
    dens = stats.density()
    assert abs(dens.mean[-1] - (1 + math.exp(-5.0))) <= 3 * dens.se[-1]
    c = check_global_moments(stats, spec)
    assert c.verdict == PASS
    assert c.policy["parts"] == {"saturation phi_1": PASS, "mean-field density": PASS}


def test_global_moments_long_range_competition_matches_mean_field():
    # competition range comparable to the window: the mean-field fixed point is accurate
    spec = ModelSpec(1, 5.0, K.constant(1), K.constant(0), K.tophat(0.1, 5.0))
    times = [0.0, 1.0, 2.0, 3.0, 4.0, 4.6, 5.0]
    stats = ensemble_stats(simulate(spec, 2.0, 5.0, times, 300, 7), n_max=2)
    c = check_global_moments(stats, spec)
    assert c.verdict == PASS
    assert abs(stats.density().mean[-1] - 1.0) < 0.1


def test_global_moments_pure_immigration_fails_saturation():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(0), K.constant(0))
    times = [0.0, 1.0, 2.0, 3.0, 4.0, 4.6, 5.0]
    stats = ensemble_stats(simulate(spec, 2.0, 5.0, times, 300, 8), n_max=2)
    c = check_global_moments(stats, spec)
    assert c.verdict == FAIL
    assert c.policy["rho_star"] is None
    assert check_linear_growth(stats, spec).verdict == PASS


def test_global_moments_mean_field_negative_control():
    spec = ModelSpec(1, 5.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    times = np.array([0.0, 1.0, 2.0, 5.0])
    stats = ensemble_stats(simulate(spec, 2.0, 0.0, [0.0], 10, 9))
    flat = lambda v: Estimate(times, np.full(4, v), np.full(4, 0.01), 100)
    stats.times = times
    stats.factorial = {1: flat(30.0), 2: flat(900.0)}  # density 3 against rho* = 1
    c = check_global_moments(stats, spec)
    assert c.verdict == FAIL
    assert c.policy["parts"]["mean-field density"] == FAIL
    with pytest.raises(VerifierError):
        check_global_moments(stats, spec, horizon=0.0)


def test_linear_growth_requires_pure_immigration():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    stats = ensemble_stats(simulate(spec, 1.0, 0.0, [0.0], 5, 1))
    with pytest.raises(VerifierError):
        check_linear_growth(stats, spec)


# ---- cross validation ----

def test_cross_validate_decoupled_and_time_zero():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(1), K.constant(0))
    times = [0.0, 0.5, 1.0]
    s = simulate(spec, 2.0, 1.0, times, 1500, 10)
    bc = estimate_correlations(s, n_bins=4)
    r = solve(spec, 2.0, 8, 2, times, "ruelle_cap")
    z = solve(spec, 2.0, 8, 2, times, "zero")
    c = cross_validate(bc, r, z)
    assert c.verdict == PASS
    np.testing.assert_array_equal(c.tol, 0.0)  # the closures coincide when a = 0
    assert np.all(c.rhs[np.asarray(c.times) == 0.0] == [2.0] + [4.0] * 4)


def test_cross_validate_logistic_at_unit_time():
    spec = ModelSpec(1, 5.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    s = simulate(spec, 2.0, 1.0, [1.0], 1000, 11)
    bc = estimate_correlations(s, n_bins=10)
    r = solve(spec, 2.0, 20, 3, [0.0, 1.0], "ruelle_cap")
    z = solve(spec, 2.0, 20, 3, [0.0, 1.0], "zero")
    assert cross_validate(bc, r, z).verdict == PASS


def test_cross_validate_negative_control_and_alignment():
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(1), K.constant(0))
    r = solve(spec, 2.0, 4, 2, [0.0, 1.0], "ruelle_cap")
    z = solve(spec, 2.0, 4, 2, [0.0, 1.0], "zero")
    bad = fake_binned([4.0, 4.0])
    assert cross_validate(bad, r, z).verdict == FAIL
    with pytest.raises(AlignmentError):
        cross_validate(fake_binned([2.0, 2.0], times=(0.0, 0.7)), r, z)


# ---- sigma sweep ----

def count_estimate(series):
    c = series.counts().astype(float)
    return Estimate(series.times, c.mean(axis=0), c.std(axis=0, ddof=1) / math.sqrt(len(c)), len(c))


def test_sigma_sweep_trend_and_baseline():
    spec = ModelSpec(1, 5.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    table = sigma_sweep(spec, PoissonHomogeneous(1.0), [1.0, 0.0, 0.5], count_estimate, 2.0, [2.0], 200,
                        master_seed=12, threads=4)
    np.testing.assert_array_equal(table.sigmas, [0.0, 0.5, 1.0])
    base = count_estimate(simulate(spec, 1.0, 2.0, [2.0], 200, 12))
    np.testing.assert_array_equal(table.values[0], base.mean)
    assert table.monotone.all()
    assert table.deviation[2, 0] > 3 * table.se[0, 0]
    assert len(list(table.rows())) == 3


def test_sigma_sweep_small_window_insensitive():
    spec = ModelSpec(1, 0.1, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    table = sigma_sweep(spec, PoissonHomogeneous(1.0), [0.0, 0.5, 1.0], count_estimate, 1.0, [1.0], 300,
                        master_seed=13, threads=4)
    assert np.all(table.deviation[:, 0] <= 3 * table.se[0, 0] + 1e-12)


def test_sigma_sweep_needs_zero_and_three_values():
    spec = ModelSpec(1, 1.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    with pytest.raises(VerifierError):
        sigma_sweep(spec, PoissonHomogeneous(1.0), [0.1, 0.5, 1.0], count_estimate, 1.0, [1.0], 2)
    with pytest.raises(VerifierError):
        sigma_sweep(spec, PoissonHomogeneous(1.0), [0.0, 1.0], count_estimate, 1.0, [1.0], 2)
