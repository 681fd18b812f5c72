"""Bound checks on simulation and solver output, with a 3-SE verdict policy.

Each check produces a ``BoundCheck`` listing one row per (time, label) point.
A point *violates* when ``lhs > rhs + 3 se + tol`` (one-sided checks) or
``|lhs - rhs| > 3 se + tol`` (two-sided checks).  A point is *noisy* when
``se > 0.5 |rhs|``.  The verdict is FAIL if any point violates,
otherwise INCONCLUSIVE if any point is noisy, otherwise PASS.  Points whose
lhs is NaN (e.g. empty correlation bins) are skipped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import BinnedCorrelation, EnsembleStats, Estimate, TestFunction
from .hierarchy import Trajectory
from .kernels import ModelSpec, _window_integral, derive_constants, qt_rho
from .simulator import PoissonHomogeneous, PoissonInhomogeneous, ThinnedPoisson, _evaluate, run

__all__ = [
    "PASS",
    "FAIL",
    "INCONCLUSIVE",
    "VerifierError",
    "AlignmentError",
    "UnsupportedInitialError",
    "BoundCheck",
    "SweepTable",
    "decide",
    "check_type_growth",
    "check_convolution_bound",
    "check_global_moments",
    "check_linear_growth",
    "cross_validate",
    "sigma_sweep",
    "mean_field_density",
    "summary_table",
    "exit_code",
]

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"
SE_FACTOR = 3.0
NOISE_RATIO = 0.5


class VerifierError(ValueError):
    pass


class AlignmentError(VerifierError):
    pass


class UnsupportedInitialError(VerifierError):
    pass


@dataclass
class BoundCheck:
    name: str
    times: np.ndarray
    labels: list
    lhs: np.ndarray
    rhs: np.ndarray
    se: np.ndarray
    tol: np.ndarray
    verdict: str
    two_sided: bool = False
    policy: dict = field(default_factory=dict)

    @property
    def slack(self):
        return self.rhs - self.lhs

    def to_dict(self):
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        return {
            "name": self.name,
            "verdict": self.verdict,
            "two_sided": self.two_sided,
            "policy": self.policy,
            "times": clean(self.times),
            "labels": list(self.labels),
            "lhs": clean(self.lhs),
            "rhs": clean(self.rhs),
            "se": clean(self.se),
            "tol": clean(self.tol),
            "slack": clean(self.slack),
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: np.array([np.nan if v is None else v for v in d[k]], dtype=float)
        return cls(d["name"], arr("times"), list(d["labels"]), arr("lhs"), arr("rhs"), arr("se"),
                   arr("tol"), d["verdict"], d["two_sided"], d["policy"])


def decide(lhs, rhs, se, tol, two_sided=False):
    """Verdict for a set of points under the 3-SE policy."""
    lhs, rhs, se, tol = (np.asarray(v, dtype=float) for v in (lhs, rhs, se, tol))
    ok = np.isfinite(lhs)
    if not np.any(ok):
        return INCONCLUSIVE
    lhs, rhs, se, tol = (np.broadcast_to(v, ok.shape)[ok] for v in (lhs, rhs, se, tol))
    band = SE_FACTOR * se + tol
    gap = np.abs(lhs - rhs) if two_sided else lhs - rhs
    violates = gap > band
    noisy = se > NOISE_RATIO * np.abs(rhs)
    # the band already carries the noise, so an excursion beyond it fails even when noisy
    if np.any(violates):
        return FAIL
    if np.any(noisy):
        return INCONCLUSIVE
    return PASS


def _make(name, times, labels, lhs, rhs, se, tol, two_sided=False, **policy):
    n = len(lhs)
    tol = np.broadcast_to(np.asarray(tol, dtype=float), (n,)).copy()
    lhs, rhs, se = (np.asarray(v, dtype=float) for v in (lhs, rhs, se))
    policy = {"se_factor": SE_FACTOR, "noise_ratio": NOISE_RATIO, **policy}
    return BoundCheck(name, np.asarray(times, dtype=float), list(labels), lhs, rhs, se, tol,
                      decide(lhs, rhs, se, tol, two_sided), two_sided, policy)


def check_type_growth(source, kappa0, norm_b, tol=0.0) -> BoundCheck:
    """``k^(n)_t <= (kappa0 + ||b|| t)^n`` for binned estimates or solver trajectories.

    ``source`` is a ``BinnedCorrelation`` (checks k1, its spatial cells and every
    non-empty k2 bin) or a ``Trajectory`` (checks the node maximum per order,
    with ``se = 0``).
    """
    times, labels, lhs, rhs, se = [], [], [], [], []

    def add(t, label, l, s, n):
        times.append(t)
        labels.append(label)
        lhs.append(l)
        se.append(s)
        rhs.append((kappa0 + norm_b * t) ** n)

    if isinstance(source, BinnedCorrelation):
        for i, t in enumerate(source.times):
            add(t, "k1", source.k1[i], source.k1_se[i], 1)
            cells = source.k1_cells[i].ravel()
            if cells.size > 1:
                cse = source.k1_cells_se[i].ravel()
                for c in range(cells.size):
                    add(t, f"k1[cell {c}]", cells[c], cse[c], 1)
            for b in range(len(source.k2[i])):
                add(t, f"k2[bin {b}]", source.k2[i, b], source.k2_se[i, b], 2)
    elif isinstance(source, Trajectory):
        for t, g in zip(source.times, source.grids):
            for n in range(1, g.n_max + 1):
                add(t, f"max k{n}", g.max_abs(n), 0.0, n)
    else:
        raise TypeError("source must be a BinnedCorrelation or a Trajectory")
    return _make("type_growth", times, labels, lhs, rhs, se, tol, kappa0=kappa0, norm_b=norm_b)


def _initial_intensity(law):
    if isinstance(law, PoissonHomogeneous):
        return lambda x: np.full(np.shape(x)[:-1], law.kappa)
    if isinstance(law, PoissonInhomogeneous):
        return lambda x: _evaluate(law.density, x, np.shape(x)[-1])
    if isinstance(law, ThinnedPoisson):
        return lambda x: law.kappa * _evaluate(law.q, x, np.shape(x)[-1])
    raise UnsupportedInitialError(
        f"{type(law).__name__} initial law: the thinned-initial functional has no closed form here"
    )


def convolution_rhs(t, spec: ModelSpec, theta: TestFunction, law, order=16):
    """``exp(int rho_t theta) * exp(int kappa0 q_t theta)`` for a Poisson-type initial law."""
    intensity = _initial_intensity(law)
    d, W = spec.dimension, spec.half_width

    def integrand(x):
        q, rho = qt_rho(x, t, spec)
        return (rho + intensity(x) * q) * theta(x)

    return math.exp(_window_integral(integrand, W, d, order=order))


def check_convolution_bound(estimate: Estimate, spec: ModelSpec, theta: TestFunction, law,
                            mode="upper", tol=1e-9) -> BoundCheck:
    """Estimated ``mu_t(F^theta)`` against the Poisson-convolution bound.

    ``mode="equal"`` makes the check two-sided (exact for the decoupled model).
    """
    if mode not in ("upper", "equal"):
        raise VerifierError("mode must be 'upper' or 'equal'")
    rhs = [convolution_rhs(t, spec, theta, law) for t in estimate.times]
    return _make("convolution_bound", estimate.times, ["F_theta"] * len(rhs), estimate.mean, rhs,
                 estimate.se, tol, two_sided=(mode == "equal"), mode=mode)


def mean_field_density(spec: ModelSpec, consts=None):
    """Fixed point ``(-m + sqrt(m^2 + 4 <a> b)) / (2 <a>)`` with window-averaged ``b``, ``m``.

    Returns ``b / m`` when ``<a> = 0 < m`` and ``inf`` when both vanish.
    """
    consts = consts if consts is not None else derive_constants(spec, strict=False)
    vol = spec.volume
    b = consts.mean_b_sigma / vol
    m = _window_integral(spec.m_sigma, spec.half_width, spec.dimension) / vol
    a = consts.mean_a
    if a == 0.0:
        return b / m if m > 0 else math.inf
    return (-m + math.sqrt(m * m + 4.0 * a * b)) / (2.0 * a)


def check_global_moments(stats: EnsembleStats, spec: ModelSpec, horizon=None, n_max=2,
                         mean_field_tol=0.25, early_fraction=0.9) -> BoundCheck:
    """Saturation diagnostic for ``phi_n`` and the long-time density against mean field.

    Saturation: the maximum of ``phi_n`` over times ``>= early_fraction * T``
    must not exceed its maximum over earlier times (one-sided, 3 SE).  Mean
    field: the density at the last time must lie within ``mean_field_tol``
    (relative) of the fixed point (two-sided, 3 SE plus that tolerance).
    """
    times = np.asarray(stats.times, dtype=float)
    T = float(times[-1]) if horizon is None else float(horizon)
    early = times < early_fraction * T
    late = ~early
    if not early.any() or not late.any():
        raise VerifierError("need snapshot times on both sides of the saturation cut")
    pts_t, labels, lhs, rhs, se, tol = [], [], [], [], [], []
    for n in range(1, n_max + 1):
        est = stats.factorial[n]
        i_late = np.flatnonzero(late)[np.argmax(est.mean[late])]
        i_early = np.flatnonzero(early)[np.argmax(est.mean[early])]
        pts_t.append(times[i_late])
        labels.append(f"saturation phi_{n}")
        lhs.append(est.mean[i_late])
        rhs.append(est.mean[i_early])
        se.append(math.hypot(est.se[i_late], est.se[i_early]))
        tol.append(0.0)
    consts = derive_constants(spec, strict=False)
    rho_star = mean_field_density(spec, consts)
    dens = stats.density()
    policy = {"early_fraction": early_fraction, "mean_field_tol": mean_field_tol,
              "rho_star": rho_star if math.isfinite(rho_star) else None}
    checks = []
    sat = _make("global_moments", pts_t, labels, lhs, rhs, se, tol, **policy)
    if math.isfinite(rho_star):
        mf = _make("global_moments", [times[-1]], ["mean-field density"], [dens.mean[-1]], [rho_star],
                   [dens.se[-1]], [mean_field_tol * rho_star], two_sided=True, **policy)
        checks = [sat, mf]
    else:
        checks = [sat]
    return _combine("global_moments", checks, policy)


def _combine(name, checks, policy):
    verdicts = [c.verdict for c in checks]
    verdict = FAIL if FAIL in verdicts else INCONCLUSIVE if INCONCLUSIVE in verdicts else PASS
    cat = lambda attr: np.concatenate([np.asarray(getattr(c, attr), dtype=float) for c in checks])
    labels = [l for c in checks for l in c.labels]
    pol = {**policy, "se_factor": SE_FACTOR, "noise_ratio": NOISE_RATIO,
           "parts": {c.labels[0]: c.verdict for c in checks},
           "two_sided_labels": [l for c in checks if c.two_sided for l in c.labels]}
    return BoundCheck(name, cat("times"), labels, cat("lhs"), cat("rhs"), cat("se"), cat("tol"),
                      verdict, False, pol)


def check_linear_growth(stats: EnsembleStats, spec: ModelSpec, tol=0.0) -> BoundCheck:
    """Pure immigration control: mean count equals ``N_0 + <b_sigma> t`` (two-sided)."""
    consts = derive_constants(spec, strict=False)
    if not spec.a.is_zero or not spec.m.is_zero:
        raise VerifierError("the linear-growth control needs a = 0 and m = 0")
    est = stats.factorial[1]
    if stats.region is not None:
        raise VerifierError("the linear-growth control uses the full window")
    rhs = est.mean[0] + consts.mean_b_sigma * (np.asarray(stats.times) - stats.times[0])
    se = np.hypot(est.se, est.se[0])
    return _make("linear_growth", stats.times, ["mean N"] * len(rhs), est.mean, rhs, se, tol,
                 two_sided=True)


def cross_validate(binned: BinnedCorrelation, ruelle: Trajectory, zero: Trajectory,
                   grid_tol=0.0) -> BoundCheck:
    """Simulation estimates against the hierarchy solver within the truncation band.

    The band at each point is ``3 se + |k_zero - k_ruelle| + grid_tol``.  The
    solver ``k2`` is averaged over node pairs falling in each distance bin;
    bins without node pairs are skipped.
    """
    for traj in (ruelle, zero):
        for t in binned.times:
            if not np.any(np.abs(traj.times - t) <= 1e-9):
                raise AlignmentError(f"solver trajectory has no output at t={t}")
    times, labels, lhs, rhs, se, tol = [], [], [], [], [], []
    for i, t in enumerate(binned.times):
        gr, gz = ruelle.at(t), zero.at(t)
        k1r, k1z = float(np.mean(gr.k1)), float(np.mean(gz.k1))
        times.append(t)
        labels.append("k1")
        lhs.append(binned.k1[i])
        rhs.append(k1r)
        se.append(binned.k1_se[i])
        tol.append(abs(k1r - k1z) + grid_tol)
        if gr.k2 is None:
            continue
        pr, pz = gr.pair_profile(binned.edges), gz.pair_profile(binned.edges)
        for b in range(len(pr)):
            if not (np.isfinite(pr[b]) and np.isfinite(binned.k2[i, b])):
                continue
            times.append(t)
            labels.append(f"k2[bin {b}]")
            lhs.append(binned.k2[i, b])
            rhs.append(pr[b])
            se.append(binned.k2_se[i, b])
            tol.append(abs(pr[b] - pz[b]) + grid_tol)
    return _make("cross_validate", times, labels, lhs, rhs, se, tol, two_sided=True, grid_tol=grid_tol)


@dataclass
class SweepTable:
    sigmas: np.ndarray
    times: np.ndarray
    values: np.ndarray  # (S, T)
    se: np.ndarray
    deviation: np.ndarray  # |obs(sigma) - obs(0)|
    monotone: np.ndarray  # per time: deviation non-decreasing in sigma

    def rows(self):
        for s, sig in enumerate(self.sigmas):
            for k, t in enumerate(self.times):
                yield {"sigma": float(sig), "time": float(t), "value": float(self.values[s, k]),
                       "se": float(self.se[s, k]), "deviation": float(self.deviation[s, k])}


def sigma_sweep(spec: ModelSpec, law, sigmas, observable, horizon, snapshot_times, replicas,
                master_seed=0, threads=1) -> SweepTable:
    """Run the simulator at each sigma with a common seed and tabulate ``observable``.

    ``observable`` maps a ``SnapshotSeries`` to an ``Estimate``.
    """
    sigmas = np.asarray(sorted(float(s) for s in sigmas))
    if len(sigmas) < 3 or sigmas[0] != 0.0:
        raise VerifierError("sigma sweep needs at least 3 values including 0")
    vals, ses = [], []
    for s in sigmas:
        res = run(spec.with_sigma(s), law, horizon, snapshot_times, replicas=replicas,
                  master_seed=master_seed, threads=threads, record_events=False)
        est = observable(res.snapshots)
        vals.append(est.mean)
        ses.append(est.se)
    vals, ses = np.asarray(vals), np.asarray(ses)
    dev = np.abs(vals - vals[0])
    mono = np.all(np.diff(dev, axis=0) >= 0, axis=0)
    return SweepTable(sigmas, np.asarray(snapshot_times, dtype=float), vals, ses, dev, mono)


def summary_table(checks) -> str:
    rows = [("check", "verdict", "points", "worst slack")]
    for c in checks:
        ok = np.isfinite(c.lhs)
        if c.two_sided:
            worst = float(np.min(c.tol[ok] + SE_FACTOR * c.se[ok] - np.abs(c.lhs[ok] - c.rhs[ok]))) if ok.any() else math.nan
        else:
            worst = float(np.min(c.slack[ok])) if ok.any() else math.nan
        rows.append((c.name, c.verdict, str(int(ok.sum())), f"{worst:.6g}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def exit_code(checks):
    return 0 if checks and all(c.verdict == PASS for c in checks) else 1
