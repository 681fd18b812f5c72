import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg, stats

from logistic_bd.kernels import KernelSpec, ModelSpec, derive_constants
from logistic_bd.simulator import (
    BIRTH,
    DEATH,
    BlowUpError,
    Fixed,
    PoissonHomogeneous,
    PoissonInhomogeneous,
    SimState,
    SimulationError,
    ThinnedPoisson,
    replica_rng,
    run,
    sample_initial,
    step,
    total_rate,
)

K = KernelSpec


def spec1(b=1.0, m=0.0, a=K.constant(0), W=1.0, sigma=0.0, d=1):
    return ModelSpec(d, W, K.constant(b), K.constant(m), a, sigma)


def within_3se(mean, se, target):
    return abs(mean - target) <= 3 * se


def test_sample_initial_empty_and_poisson_counts():
    spec = spec1(W=1.0)
    rng = replica_rng(0, 0)
    assert len(sample_initial(PoissonHomogeneous(0.0), spec, rng)) == 0
    n = np.array([len(sample_initial(PoissonHomogeneous(5.0), spec, rng)) for _ in range(10_000)])
    assert abs(n.mean() - 10) <= 3 * math.sqrt(10 / 10_000)


def test_sample_initial_thinned_is_poisson():
    spec = spec1(W=1.0)
    rng = replica_rng(1, 0)
    law = ThinnedPoisson(5.0, K.constant(0.5))
    n = np.array([len(sample_initial(law, spec, rng)) for _ in range(10_000)], dtype=float)
    phi2 = n * (n - 1)
    assert within_3se(phi2.mean(), phi2.std(ddof=1) / 100, (0.5 * 5 * 2) ** 2)


def test_sample_initial_inhomogeneous_and_fixed():
    spec = spec1(W=3.0)
    rng = replica_rng(2, 0)
    law = PoissonInhomogeneous(K.gaussian(4.0, 1.0))
    n = np.array([len(sample_initial(law, spec, rng)) for _ in range(4000)])
    target = 4.0 * math.sqrt(math.pi) * math.erf(3.0)
    assert within_3se(n.mean(), n.std(ddof=1) / math.sqrt(4000), target)
    with pytest.raises(SimulationError):
        PoissonInhomogeneous(lambda x: np.ones(len(x))).envelope()
    pts = sample_initial(Fixed.of([[0.5], [-0.2]]), spec, rng)
    np.testing.assert_array_equal(pts, [[0.5], [-0.2]])
    with pytest.raises(SimulationError):
        sample_initial(Fixed.of([[3.5]]), spec, rng)


def test_total_rate_cases():
    a = K.gaussian(0.7, 0.4)
    spec = ModelSpec(1, 2.0, K.constant(1.5), K.gaussian(0.9, 1.0), a, sigma=0.3)
    c = derive_constants(spec)
    assert total_rate(SimState(spec, np.zeros((0, 1)))) == pytest.approx(c.mean_b_sigma)
    x = np.array([[0.4]])
    assert total_rate(SimState(spec, x)) == pytest.approx(c.mean_b_sigma + spec.m_sigma(x)[0])
    pts = np.array([[0.4], [-1.7]])
    ref = c.mean_b_sigma
    for i in range(2):
        ref += float(spec.m_sigma(pts[i:i + 1])[0])
        for j in range(2):
            if i != j:
                disp = pts[i, 0] - pts[j, 0]
                disp -= 4.0 * round(disp / 4.0)
                psi_i = 1 / (1 + 0.3 * pts[i, 0] ** 2)
                psi_j = 1 / (1 + 0.3 * pts[j, 0] ** 2)
                ref += 0.7 * math.exp(-(disp / 0.4) ** 2) * psi_i * psi_j
    assert total_rate(SimState(spec, pts)) == pytest.approx(ref, rel=1e-12)


def test_single_particle_death_clock():
    spec = spec1(b=0.0, m=2.0)
    rng = replica_rng(3, 0)
    waits = []
    for _ in range(4000):
        s = SimState(spec, np.array([[0.1]]))
        s, (t, kind, x) = step(s, rng)
        assert kind == DEATH and x[0] == 0.1 and s.n == 0
        waits.append(t)
    waits = np.array(waits)
    assert within_3se(waits.mean(), waits.std(ddof=1) / math.sqrt(len(waits)), 0.5)


def test_immigration_interevent_times():
    spec = spec1(b=1.5, W=2.0, sigma=0.4)
    c = derive_constants(spec, strict=False)
    rng = replica_rng(4, 0)
    s = SimState(spec, np.zeros((0, 1)))
    times = [0.0]
    for _ in range(5000):
        s, (t, kind, _) = step(s, rng)
        assert kind == BIRTH
        times.append(t)
    gaps = np.diff(times)
    assert within_3se(gaps.mean(), gaps.std(ddof=1) / math.sqrt(len(gaps)), 1 / c.mean_b_sigma)
    assert stats.kstest(gaps * c.mean_b_sigma, "expon").pvalue > 0.01


def test_rate_caches_match_full_recompute():
    spec = ModelSpec(2, 3.0, K.constant(2.0), K.constant(0.2), K.gaussian(0.8, 0.6), sigma=0.2)
    rng = replica_rng(5, 0)
    s = SimState(spec, rng.uniform(-3, 3, size=(30, 2)))
    for _ in range(400):
        step(s, rng)
        full = s.full_rates()
        np.testing.assert_allclose(s.death_rates, full, rtol=1e-9, atol=1e-12)
        assert np.all(s.death_rates >= 0)
        assert abs(s.total_death - full.sum()) <= 1e-9 * max(1, s.n)


def test_blow_up_cap():
    spec = spec1(b=100.0, W=1.0)
    with pytest.raises(BlowUpError):
        run(spec, PoissonHomogeneous(0.0), 10.0, [10.0], max_population=50)


def test_zero_horizon_snapshots_equal_initial_draws():
    spec = spec1(W=2.0, a=K.tophat(1, 0.5))
    res = run(spec, PoissonHomogeneous(3.0), 0.0, [0.0], replicas=5, master_seed=9)
    for rid in range(5):
        ref = sample_initial(PoissonHomogeneous(3.0), spec, replica_rng(9, rid))
        np.testing.assert_array_equal(res.snapshots.configs[rid][0], ref)
        assert len(res.event_logs[rid]) == 0


def test_immigration_linear_growth():
    spec = spec1(b=1.0, W=1.0)
    res = run(spec, PoissonHomogeneous(0.0), 3.0, [1.0, 2.0, 3.0], replicas=2000, master_seed=10)
    n = res.snapshots.counts()
    for k, t in enumerate([1.0, 2.0, 3.0]):
        assert within_3se(n[:, k].mean(), n[:, k].std(ddof=1) / math.sqrt(2000), 2.0 * t)


def test_birth_death_scalar_ode():
    spec = spec1(b=1.0, m=1.0, W=1.0)
    res = run(spec, PoissonHomogeneous(0.0), 2.0, [0.5, 1.0, 2.0], replicas=2000, master_seed=11)
    n = res.snapshots.counts()
    for k, t in enumerate([0.5, 1.0, 2.0]):
        assert within_3se(n[:, k].mean(), n[:, k].std(ddof=1) / math.sqrt(2000), 2.0 * (1 - math.exp(-t)))


def chain_mean(lam, level, m, n0_law, t, nmax=120):
    """E[N_t] for the birth-death chain with rates lam and n (m + level (n - 1))."""
    Q = np.zeros((nmax + 1, nmax + 1))
    for n in range(nmax + 1):
        if n < nmax:
            Q[n, n + 1] = lam
        if n > 0:
            Q[n, n - 1] = n * (m + level * (n - 1))
        Q[n, n] = -Q[n].sum()
    p = n0_law @ linalg.expm(Q * t)
    return float(p @ np.arange(nmax + 1))


def test_global_competition_matches_birth_death_chain():
    # constant competition on the torus couples every pair equally, so N_t is a Markov chain
    W, b, c, kappa = 1.0, 3.0, 0.4, 1.0
    spec = ModelSpec(1, W, K.constant(b), K.constant(0.1), K.constant(c))
    times = [0.5, 1.0, 3.0]
    res = run(spec, PoissonHomogeneous(kappa), 3.0, times, replicas=3000, master_seed=12, threads=4)
    n = res.snapshots.counts()
    lam0 = kappa * 2 * W
    p0 = np.array([math.exp(-lam0) * lam0**k / math.factorial(k) for k in range(121)])
    for k, t in enumerate(times):
        ref = chain_mean(b * 2 * W, c, 0.1, p0, t)
        assert within_3se(n[:, k].mean(), n[:, k].std(ddof=1) / math.sqrt(len(n)), ref)


def naive_density(spec, kappa, T, replicas, seed):
    """Textbook Gillespie with all rates rebuilt at every event."""
    rng = np.random.default_rng(seed)
    W = spec.half_width
    out = []
    for _ in range(replicas):
        x = rng.uniform(-W, W, size=rng.poisson(kappa * 2 * W))
        t = 0.0
        while True:
            d = x[:, None] - x[None, :]
            d -= 2 * W * np.round(d / (2 * W))
            a = np.where(np.abs(d) <= spec.a.width, spec.a.amplitude, 0.0)
            np.fill_diagonal(a, 0.0)
            death = a.sum(axis=1) + spec.m.amplitude
            rates = np.concatenate([[spec.b.amplitude * 2 * W], death])
            R = rates.sum()
            t += rng.exponential(1 / R)
            if t > T:
                break
            k = rng.choice(len(rates), p=rates / R)
            x = np.append(x, rng.uniform(-W, W)) if k == 0 else np.delete(x, k - 1)
        out.append(len(x) / (2 * W))
    return np.array(out)


@pytest.mark.slow
def test_short_range_benchmark_against_naive_simulator():
    spec = ModelSpec(1, 5.0, K.constant(1), K.constant(0), K.tophat(1, 0.5))
    ref = naive_density(spec, 2.0, 3.0, 300, 13)
    res = run(spec, PoissonHomogeneous(2.0), 3.0, [3.0], replicas=1000, master_seed=14)
    got = res.snapshots.counts()[:, 0] / 10.0
    se = math.hypot(got.std(ddof=1) / math.sqrt(len(got)), ref.std(ddof=1) / math.sqrt(len(ref)))
    assert abs(got.mean() - ref.mean()) <= 3 * se


def test_pure_death_population_non_increasing():
    spec = ModelSpec(1, 3.0, K.constant(0), K.constant(0.3), K.tophat(1, 1.0))
    res = run(spec, PoissonHomogeneous(3.0), 5.0, [5.0], replicas=20, master_seed=15)
    for log in res.event_logs:
        assert np.all(log.kinds == DEATH)


def test_determinism_and_thread_independence():
    spec = ModelSpec(1, 3.0, K.constant(1), K.constant(0.1), K.tophat(1, 0.5))
    kw = dict(horizon=2.0, snapshot_times=[0.0, 1.0, 2.0], replicas=12, master_seed=16)
    r1 = run(spec, PoissonHomogeneous(2.0), **kw)
    r2 = run(spec, PoissonHomogeneous(2.0), **kw, threads=3)
    for a, b in zip(r1.event_logs, r2.event_logs):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.kinds, b.kinds)
        np.testing.assert_array_equal(a.points, b.points)
    for ca, cb in zip(r1.snapshots.configs, r2.snapshots.configs):
        for x, y in zip(ca, cb):
            np.testing.assert_array_equal(x, y)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_snapshots_replay_event_log(seed):
    spec = ModelSpec(1, 2.0, K.constant(1), K.constant(0.2), K.tophat(1, 0.5))
    res = run(spec, PoissonHomogeneous(1.0), 3.0, [0.0, 1.5, 3.0], replicas=1, master_seed=seed)
    log = res.event_logs[0]
    n0 = len(res.snapshots.configs[0][0])
    for k, t in enumerate([0.0, 1.5, 3.0]):
        done = log.times <= t
        n = n0 + int(np.sum(log.kinds[done] == BIRTH)) - int(np.sum(log.kinds[done] == DEATH))
        assert len(res.snapshots.configs[0][k]) == n
    assert np.all(np.diff(log.times) > 0)


def test_snapshot_time_validation():
    spec = spec1()
    with pytest.raises(ValueError):
        run(spec, PoissonHomogeneous(1.0), 1.0, [0.5, 0.2])
    with pytest.raises(ValueError):
        run(spec, PoissonHomogeneous(1.0), 1.0, [2.0])
