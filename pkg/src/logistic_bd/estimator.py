"""Ensemble estimators: factorial moments, binned correlations, multiplicative functionals.

Every estimate is a mean over independent replicas with standard error
``std(ddof=1) / sqrt(replicas)``.  Snapshots at different times of the same
replica are correlated; no attempt is made to correct for that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn

from .calculus import f_theta, f_tilde_v, factorial_count, temperedness
from .kernels import KernelSpec, _window_integral, minimum_image
from .simulator import SnapshotSeries

__all__ = [
    "EstimatorError",
    "RegionError",
    "InsufficientReplicasError",
    "TestFunction",
    "Estimate",
    "EnsembleStats",
    "BinnedCorrelation",
    "estimate_factorial_moments",
    "estimate_correlations",
    "estimate_functional",
    "ensemble_stats",
    "shell_volumes",
    "factorial_moment_by_counting",
]


class EstimatorError(ValueError):
    pass


class RegionError(EstimatorError):
    pass


class InsufficientReplicasError(EstimatorError):
    pass


@dataclass(frozen=True)
class TestFunction:
    """Radial profile ``kernel`` centred at ``center``; used for theta and v."""

    __test__ = False  # not a pytest class

    kernel: KernelSpec
    center: tuple = (0.0,)

    @property
    def dimension(self):
        return len(self.center)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dimension
        if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            return self.kernel(x - self.center[0], 1)
        return self.kernel(x - np.asarray(self.center), d)

    def integral(self, half_width, weight=None, order=16):
        """``int_window theta(x) weight(x) dx`` by composite Gauss-Legendre."""
        d = self.dimension
        if weight is None:
            f = self
        else:
            f = lambda x: self(x) * weight(x)
        return _window_integral(f, half_width, d, order=order)


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    R = values.shape[0]
    if R < 2:
        raise InsufficientReplicasError("at least 2 replicas are needed for a standard error")
    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / math.sqrt(R)
    return mean, se


@dataclass
class Estimate:
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    replicas: int
    label: str = ""


@dataclass
class EnsembleStats:
    times: np.ndarray
    replicas: int
    region: tuple | None
    region_volume: float
    factorial: dict = field(default_factory=dict)
    functionals: dict = field(default_factory=dict)

    def density(self):
        """Mean count per unit volume of the region."""
        f1 = self.factorial[1]
        return Estimate(self.times, f1.mean / self.region_volume, f1.se / self.region_volume,
                        self.replicas, "density")


@dataclass
class BinnedCorrelation:
    times: np.ndarray
    replicas: int
    window_volume: float
    k1: np.ndarray
    k1_se: np.ndarray
    k1_cells: np.ndarray  # (T, cells...) spatial histogram of k1
    k1_cells_se: np.ndarray
    cell_volume: float
    edges: np.ndarray
    bin_volumes: np.ndarray
    k2: np.ndarray  # (T, B), NaN where no pair was ever observed
    k2_se: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def _check_region(series: SnapshotSeries, region):
    W, d = series.half_width, series.dimension
    if region is None:
        return None, series.volume
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=float), (d,)) for v in region)
    if np.any(lo < -W) or np.any(hi > W) or np.any(lo >= hi):
        raise RegionError(f"region {region!r} is not a non-empty box inside [-{W}, {W}]^{d}")
    return (lo, hi), float(np.prod(hi - lo))


def estimate_factorial_moments(series: SnapshotSeries, region=None, n_max=4) -> EnsembleStats:
    """Mean and SE of ``N (N-1) ... (N-n+1)`` for ``N`` the count in ``region`` (a box)."""
    if not 1 <= n_max <= 4:
        raise EstimatorError("n_max must lie in 1..4")
    box, vol = _check_region(series, region)
    if series.replicas < 2:
        raise InsufficientReplicasError("at least 2 replicas are needed for a standard error")
    stats = EnsembleStats(series.times, series.replicas, None if box is None else tuple(map(tuple, box)), vol)
    counts = np.empty((series.replicas, len(series.times)), dtype=np.int64)
    for r, rep in enumerate(series.configs):
        for k, gamma in enumerate(rep):
            if box is None:
                counts[r, k] = len(gamma)
            else:
                counts[r, k] = np.count_nonzero(np.all((gamma >= box[0]) & (gamma <= box[1]), axis=-1))
    for n in range(1, n_max + 1):
        ff = np.ones(counts.shape, dtype=float)
        for j in range(n):
            ff *= np.maximum(counts - j, 0)
        mean, se = _mean_se(ff)
        stats.factorial[n] = Estimate(series.times, mean, se, series.replicas, f"phi_{n}")
    return stats


def _torus_shell_volume(r0, r1, W, d):
    def ball(r):
        if d == 1:
            return 2.0 * min(r, W)
        if r > W:
            raise EstimatorError("bins beyond the half-width need the torus ball volume; use rmax <= half_width")
        return math.pi ** (d / 2.0) / gamma_fn(d / 2.0 + 1.0) * r**d

    return ball(r1) - ball(r0)


def shell_volumes(edges, half_width, d):
    return np.array([_torus_shell_volume(edges[i], edges[i + 1], half_width, d)
                     for i in range(len(edges) - 1)])


def estimate_correlations(series: SnapshotSeries, n_bins=40, rmax=None, k1_cells=1) -> BinnedCorrelation:
    """Binned ``k1`` and distance-binned ``k2`` from ordered distinct pairs.

    ``k2(bin) = (pairs with torus distance in bin) / (|window| * shell volume)``.
    """
    R = series.replicas
    if R < 2:
        raise InsufficientReplicasError("at least 2 replicas are needed for a standard error")
    W, d = series.half_width, series.dimension
    rmax = W if rmax is None else float(rmax)
    if not 0 < rmax <= W:
        raise EstimatorError(f"rmax must lie in (0, {W}]")
    edges = np.linspace(0.0, rmax, n_bins + 1)
    bvol = shell_volumes(edges, W, d)
    vol = series.volume
    T = len(series.times)
    k1 = np.empty((R, T))
    cells = np.empty((R, T) + (k1_cells,) * d)
    cell_edges = np.linspace(-W, W, k1_cells + 1)
    cell_vol = (2.0 * W / k1_cells) ** d
    pairs = np.zeros((R, T, n_bins))
    for r, rep in enumerate(series.configs):
        for k, gamma in enumerate(rep):
            n = len(gamma)
            k1[r, k] = n / vol
            if n:
                h, _ = np.histogramdd(gamma, bins=[cell_edges] * d)
            else:
                h = np.zeros((k1_cells,) * d)
            cells[r, k] = h / cell_vol
            if n >= 2:
                i, j = np.triu_indices(n, 1)
                disp = minimum_image(gamma[i] - gamma[j], W)
                dist = np.sqrt(np.sum(disp * disp, axis=-1))
                pairs[r, k] = 2.0 * np.histogram(dist, bins=edges)[0]
    k1m, k1s = _mean_se(k1)
    cm, cs = _mean_se(cells)
    dens = pairs / (vol * bvol)
    k2m, k2s = _mean_se(dens)
    missing = pairs.sum(axis=0) == 0
    k2m = np.where(missing, np.nan, k2m)
    k2s = np.where(missing, np.nan, k2s)
    return BinnedCorrelation(series.times, R, vol, k1m, k1s, cm, cs, cell_vol, edges, bvol, k2m, k2s)


FUNCTIONALS = ("F_theta", "F_tilde", "Phi")


def estimate_functional(series: SnapshotSeries, kind, fn=None) -> Estimate:
    """Replica mean and SE of ``prod(1 + theta)``, ``exp(-sum v psi)`` or ``sum psi``."""
    if kind not in FUNCTIONALS:
        raise EstimatorError(f"kind must be one of {FUNCTIONALS}")
    if kind != "Phi" and fn is None:
        raise EstimatorError(f"{kind} needs a test function")
    d = series.dimension
    vals = np.empty((series.replicas, len(series.times)))
    for r, rep in enumerate(series.configs):
        for k, gamma in enumerate(rep):
            if kind != "Phi" and len(gamma) and np.any(np.asarray(fn(gamma)) < 0):
                raise EstimatorError(f"{kind} needs a non-negative test function")
            if kind == "F_theta":
                vals[r, k] = f_theta(gamma, fn)
            elif kind == "F_tilde":
                vals[r, k] = f_tilde_v(gamma, fn, d)
            else:
                vals[r, k] = temperedness(gamma, d)
    mean, se = _mean_se(vals)
    return Estimate(series.times, mean, se, series.replicas, kind)


def ensemble_stats(series: SnapshotSeries, region=None, n_max=4, theta=None, v=None) -> EnsembleStats:
    """Factorial moments plus whichever functionals have test functions, and Phi."""
    stats = estimate_factorial_moments(series, region, n_max)
    if theta is not None:
        stats.functionals["F_theta"] = estimate_functional(series, "F_theta", theta)
    if v is not None:
        stats.functionals["F_tilde"] = estimate_functional(series, "F_tilde", v)
    stats.functionals["Phi"] = estimate_functional(series, "Phi")
    return stats


def factorial_moment_by_counting(series: SnapshotSeries, n, region=None):
    """Same estimator through ``factorial_count``; a second code path for cross-checks."""
    box, _ = _check_region(series, region)
    vals = np.array([[factorial_count(g, n, box) for g in rep] for rep in series.configs], dtype=float)
    return vals.mean(axis=0)
