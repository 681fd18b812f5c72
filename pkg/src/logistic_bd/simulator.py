"""Exact event-driven simulation of the regularized birth-and-death jump process.

Births arrive at total rate ``<b_sigma>`` (the window integral of
``b * psi_sigma``) at locations with density ``b_sigma / <b_sigma>``.  A
particle at ``x`` dies at rate ``m_sigma(x) + sum_{y != x} a_sigma(x, y)``.
The window is a torus; competition uses minimum-image displacements.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import DerivedConstants, KernelSpec, ModelSpec, derive_constants

__all__ = [
    "SimulationError",
    "BlowUpError",
    "KernelShapeError",
    "PoissonHomogeneous",
    "PoissonInhomogeneous",
    "ThinnedPoisson",
    "Fixed",
    "SimState",
    "EventLog",
    "SnapshotSeries",
    "RunResult",
    "replica_rng",
    "sample_initial",
    "total_rate",
    "step",
    "run",
    "BIRTH",
    "DEATH",
]

BIRTH = 1
DEATH = -1
RESUM_EVERY = 2**14
MAX_PROPOSALS = 10**6


class SimulationError(RuntimeError):
    pass


class BlowUpError(SimulationError):
    """Population exceeded the configured hard cap."""


class KernelShapeError(SimulationError):
    """Rejection sampling of a birth location did not terminate."""


def _evaluate(f, x, d):
    if isinstance(f, KernelSpec):
        return f(x, d)
    return np.asarray(f(x), dtype=float)


# --- initial laws -----------------------------------------------------------


@dataclass(frozen=True)
class PoissonHomogeneous:
    kappa: float

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class PoissonInhomogeneous:
    """Poisson law with bounded intensity ``density`` (a KernelSpec or callable on points)."""

    density: object
    bound: float | None = None

    def envelope(self):
        bound = self.density.sup if isinstance(self.density, KernelSpec) else self.bound
        if bound is None or not math.isfinite(bound) or bound < 0:
            raise SimulationError("inhomogeneous Poisson law needs a finite density bound for rejection sampling")
        return float(bound)


@dataclass(frozen=True)
class ThinnedPoisson:
    """Homogeneous Poisson(kappa) followed by independent retention with probability ``q(x)``."""

    kappa: float
    q: object

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class Fixed:
    points: tuple

    @classmethod
    def of(cls, points):
        return cls(tuple(map(tuple, np.atleast_2d(np.asarray(points, dtype=float)))))


def replica_rng(master_seed, replica_id):
    """Independent stream for one replica, derived from ``(master_seed, replica_id)`` only."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(replica_id),))
    return np.random.Generator(np.random.PCG64(ss))


def _uniform_points(rng, n, W, d):
    return rng.uniform(-W, W, size=(n, d))


def sample_initial(law, spec: ModelSpec, rng) -> np.ndarray:
    """Draw an initial configuration, an ``(n, d)`` array inside the window."""
    W, d = spec.half_width, spec.dimension
    vol = spec.volume
    if isinstance(law, PoissonHomogeneous):
        n = rng.poisson(law.kappa * vol) if law.kappa > 0 else 0
        return _uniform_points(rng, n, W, d)
    if isinstance(law, PoissonInhomogeneous):
        bound = law.envelope()
        n = rng.poisson(bound * vol) if bound > 0 else 0
        pts = _uniform_points(rng, n, W, d)
        dens = _evaluate(law.density, pts, d) if n else np.zeros(0)
        if np.any(dens > bound * (1 + 1e-12)):
            raise SimulationError("density exceeds its declared bound")
        keep = rng.random(n) * bound < dens
        return pts[keep]
    if isinstance(law, ThinnedPoisson):
        n = rng.poisson(law.kappa * vol) if law.kappa > 0 else 0
        pts = _uniform_points(rng, n, W, d)
        q = _evaluate(law.q, pts, d) if n else np.zeros(0)
        if np.any((q < 0) | (q > 1)):
            raise SimulationError("retention probability q must take values in [0, 1]")
        keep = rng.random(n) < q
        return pts[keep]
    if isinstance(law, Fixed):
        pts = np.asarray(law.points, dtype=float).reshape(-1, d)
        if np.any(pts < -W) or np.any(pts >= W):
            raise SimulationError("fixed initial configuration has points outside the window")
        return pts.copy()
    raise TypeError(f"unknown initial law {law!r}")


# --- state ------------------------------------------------------------------


class SimState:
    """Mutable simulator state with cached per-particle death rates.

    ``death_rates[i] = m_sigma(x_i) + sum_{j != i} a_sigma(x_i, x_j)``.
    """

    def __init__(self, spec: ModelSpec, points, consts: DerivedConstants | None = None,
                 time=0.0, max_population=10**6):
        self.spec = spec
        self.d = spec.dimension
        self.W = spec.half_width
        if consts is None:
            consts = derive_constants(spec, strict=False)
        self.birth_total = float(consts.mean_b_sigma)
        self._b_envelope = spec.b.sup
        self._uniform_birth = spec.sigma == 0.0 and spec.b.is_constant
        self.max_population = int(max_population)
        self.time = float(time)
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        cap = max(64, 2 * len(pts))
        self._pos = np.empty((cap, self.d))
        self._rates = np.zeros(cap)
        self.n = len(pts)
        if self.n > self.max_population:
            raise BlowUpError(f"initial population {self.n} exceeds cap {self.max_population}")
        self._pos[: self.n] = pts
        self.events_since_resum = 0
        self.recompute()

    @property
    def gamma(self):
        return self._pos[: self.n].copy()

    @property
    def death_rates(self):
        return self._rates[: self.n]

    def full_rates(self):
        """Death rates recomputed from scratch (chunked pairwise sums)."""
        pos = self._pos[: self.n]
        rates = np.asarray(self.spec.m_sigma(pos), dtype=float).reshape(self.n).copy()
        for start in range(0, self.n, 512):
            blk = pos[start:start + 512]
            pair = self.spec.a_sigma(blk[:, None, :], pos[None, :, :])
            idx = np.arange(start, start + len(blk))
            pair[idx - start, idx] = 0.0
            rates[start:start + len(blk)] += pair.sum(axis=1)
        return rates

    def recompute(self):
        self._rates[: self.n] = self.full_rates()
        self.total_death = float(np.sum(self._rates[: self.n]))
        self.events_since_resum = 0

    def total_rate(self):
        return self.birth_total + self.total_death

    def _grow(self):
        cap = 2 * len(self._rates)
        pos = np.empty((cap, self.d))
        pos[: self.n] = self._pos[: self.n]
        rates = np.zeros(cap)
        rates[: self.n] = self._rates[: self.n]
        self._pos, self._rates = pos, rates

    def _birth_location(self, rng):
        if self._uniform_birth:
            return rng.uniform(-self.W, self.W, size=self.d)
        env = self._b_envelope
        for _ in range(MAX_PROPOSALS):
            x = rng.uniform(-self.W, self.W, size=self.d)
            if rng.random() * env < float(self.spec.b_sigma(x[None, :])[0]):
                return x
        raise KernelShapeError(f"birth-location rejection sampling exceeded {MAX_PROPOSALS} proposals")

    def add(self, x):
        if self.n + 1 > self.max_population:
            raise BlowUpError(f"population exceeded hard cap {self.max_population} at t={self.time:.6g}")
        if self.n == len(self._rates):
            self._grow()
        n = self.n
        pos = self._pos[:n]
        # radial kernels: a_sigma(x, y) == a_sigma(y, x)
        contrib = self.spec.a_sigma(pos, x[None, :]) if n else np.zeros(0)
        self._rates[:n] += contrib
        own = float(self.spec.m_sigma(x[None, :])[0]) + float(np.sum(contrib))
        self._pos[n] = x
        self._rates[n] = own
        self.n = n + 1
        self.total_death += own + float(np.sum(contrib))

    def remove(self, i):
        n = self.n
        x = self._pos[i].copy()
        removed = self._rates[i]
        last = n - 1
        self._pos[i] = self._pos[last]
        self._rates[i] = self._rates[last]
        self.n = last
        if last:
            pos = self._pos[:last]
            contrib = self.spec.a_sigma(pos, x[None, :])
            self._rates[:last] -= contrib
            np.maximum(self._rates[:last], 0.0, out=self._rates[:last])
            self.total_death -= removed + float(np.sum(contrib))
        else:
            self.total_death = 0.0
        self.total_death = max(self.total_death, 0.0)
        return x

    def draw_wait(self, rng):
        R = self.total_rate()
        if R <= 0.0:
            return math.inf
        return rng.exponential(1.0 / R)

    def fire(self, new_time, rng):
        """Advance the clock to ``new_time`` and realize one jump."""
        R = self.total_rate()
        self.time = float(new_time)
        u = rng.random() * R
        if u < self.birth_total or self.n == 0:
            x = self._birth_location(rng)
            self.add(x)
            event = (self.time, BIRTH, x)
        else:
            cum = np.cumsum(self._rates[: self.n])
            i = int(np.searchsorted(cum, u - self.birth_total, side="right"))
            i = min(i, self.n - 1)
            while self._rates[i] <= 0.0 and i > 0:
                i -= 1
            x = self.remove(i)
            event = (self.time, DEATH, x)
        self.events_since_resum += 1
        if self.events_since_resum >= RESUM_EVERY:
            self.recompute()
        return event


def total_rate(state: SimState):
    """``<b_sigma> + sum_x (m_sigma(x) + sum_{y != x} a_sigma(x, y))``."""
    return state.total_rate()


def step(state: SimState, rng):
    """Draw the exponential waiting time and realize one jump; mutates ``state``."""
    if state.total_rate() <= 0.0:
        raise SimulationError("total rate is zero: the state is absorbing")
    wait = state.draw_wait(rng)
    return state, state.fire(state.time + wait, rng)


# --- records ----------------------------------------------------------------


@dataclass
class EventLog:
    replica_id: int
    seed: int
    times: np.ndarray
    kinds: np.ndarray
    points: np.ndarray

    def __len__(self):
        return len(self.times)


@dataclass
class SnapshotSeries:
    """Configurations per replica at the requested times: ``configs[replica][time_index]``."""

    times: np.ndarray
    configs: list
    half_width: float
    dimension: int

    @property
    def replicas(self):
        return len(self.configs)

    @property
    def volume(self):
        return (2.0 * self.half_width) ** self.dimension

    def counts(self):
        return np.array([[len(c) for c in rep] for rep in self.configs], dtype=np.int64)


@dataclass
class RunResult:
    snapshots: SnapshotSeries
    event_logs: list = field(default_factory=list)


def _simulate_replica(spec, consts, law, horizon, snap_times, rid, master_seed, record, cap):
    rng = replica_rng(master_seed, rid)
    gamma0 = sample_initial(law, spec, rng)
    state = SimState(spec, gamma0, consts=consts, max_population=cap)
    snaps = []
    k = 0
    ev_t, ev_k, ev_x = [], [], []
    while True:
        next_t = state.time + state.draw_wait(rng)
        while k < len(snap_times) and snap_times[k] < next_t:
            snaps.append(state.gamma)
            k += 1
        if next_t > horizon:
            break
        t, kind, x = state.fire(next_t, rng)
        if record:
            ev_t.append(t)
            ev_k.append(kind)
            ev_x.append(x)
    while k < len(snap_times):
        snaps.append(state.gamma)
        k += 1
    d = spec.dimension
    log = EventLog(
        replica_id=rid,
        seed=int(master_seed),
        times=np.asarray(ev_t, dtype=float),
        kinds=np.asarray(ev_k, dtype=np.int8),
        points=np.asarray(ev_x, dtype=float).reshape(-1, d),
    ) if record else None
    return rid, snaps, log


def _run_chunk(args):
    spec, consts, law, horizon, snap_times, rids, master_seed, record, cap = args
    return [
        _simulate_replica(spec, consts, law, horizon, snap_times, rid, master_seed, record, cap)
        for rid in rids
    ]


def run(spec: ModelSpec, law, horizon, snapshot_times: Sequence[float], replicas=1,
        master_seed=0, threads=1, record_events=True, max_population=10**6,
        consts: DerivedConstants | None = None) -> RunResult:
    """Simulate independent replicas up to ``horizon`` and record snapshots.

    Snapshots follow the cadlag convention: the configuration after the last
    jump at or before each requested time.  Results depend only on the inputs
    and ``master_seed``; ``threads`` affects wall time only.
    """
    if not horizon >= 0:
        raise ValueError("horizon must be >= 0")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    snap_times = np.asarray(snapshot_times, dtype=float)
    if np.any(np.diff(snap_times) < 0) or np.any(snap_times < 0) or np.any(snap_times > horizon):
        raise ValueError("snapshot times must be sorted and lie in [0, horizon]")
    if consts is None:
        consts = derive_constants(spec, strict=False)
    rids = list(range(replicas))
    threads = max(1, int(threads))
    if threads == 1 or replicas == 1:
        chunks = [_run_chunk((spec, consts, law, horizon, snap_times, rids, master_seed,
                              record_events, max_population))]
    else:
        n_chunks = min(replicas, threads * 4)
        parts = [rids[i::n_chunks] for i in range(n_chunks)]
        jobs = [(spec, consts, law, horizon, snap_times, p, master_seed, record_events, max_population)
                for p in parts]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_chunk, jobs))
    results = sorted((r for chunk in chunks for r in chunk), key=lambda r: r[0])
    series = SnapshotSeries(
        times=snap_times,
        configs=[r[1] for r in results],
        half_width=spec.half_width,
        dimension=spec.dimension,
    )
    logs = [r[2] for r in results] if record_events else []
    return RunResult(snapshots=series, event_logs=logs)
