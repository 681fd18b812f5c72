"""Correlation-function hierarchy on a periodic grid.

The hierarchy ``dk/dt = L k`` is truncated at order ``n_max`` (1 to 3) and
discretized on a cell-centered grid with ``G`` nodes per axis.  Correlation
functions are piecewise constant on cells.  The coupling integral
``int a(x - y) k(eta + x) dx`` is evaluated with per-cell Gauss-Legendre
weights, so short-range kernels are resolved below the grid spacing.

Two closures supply the missing ``(n_max + 1)``-point function:

``zero``
    drop it.
``ruelle_cap``
    replace it by the type bound ``(kappa0 + ||b|| t)^(n_max + 1)``.

Internally the state is a flat vector ``[k0 | k1 | k2 | k3]``.  For the
series solver the ``ruelle_cap`` closure is carried by auxiliary "clock"
entries ``c_j = (kappa0 + ||b|| t)^j`` that obey the linear chain
``dc_j/dt = j ||b|| c_{j-1}``; this keeps the truncated system autonomous.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calculus import TabulatedG, lp_integral
from .kernels import (
    DerivedConstants,
    ModelSpec,
    box_quadrature,
    derive_constants,
    minimum_image,
    time_horizon,
)
from .simulator import Fixed, PoissonHomogeneous, PoissonInhomogeneous, ThinnedPoisson, _evaluate

__all__ = [
    "SolverError",
    "StepSizeError",
    "HorizonError",
    "SolverConfig",
    "GridGeometry",
    "CorrelationGrid",
    "EnergyCache",
    "HierarchyOperator",
    "Trajectory",
    "initial_grid",
    "apply_Ldelta",
    "integrate_rk4",
    "ovsyannikov_series",
    "norm_alpha",
    "g_norm_alpha",
    "save_trajectory",
    "load_trajectory",
]

CLOSURES = ("ruelle_cap", "zero")


class SolverError(ValueError):
    pass


class StepSizeError(SolverError):
    pass


class HorizonError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.01
    closure: str = "ruelle_cap"
    n_max: int = 2
    quadrature_order: int = 8
    subcells: int = 4
    kappa0: float | None = None
    alpha_track: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise SolverError(f"dt must be positive, got {self.dt}")
        if self.closure not in CLOSURES:
            raise SolverError(f"closure must be one of {CLOSURES}, got {self.closure!r}")
        if self.n_max not in (1, 2, 3):
            raise SolverError(f"n_max must be 1, 2 or 3, got {self.n_max}")


@dataclass(frozen=True)
class GridGeometry:
    points_per_axis: int
    dimension: int
    half_width: float

    @property
    def h(self):
        return 2.0 * self.half_width / self.points_per_axis

    @property
    def size(self):
        return self.points_per_axis**self.dimension

    @property
    def cell_volume(self):
        return self.h**self.dimension

    @property
    def axis(self):
        G, W = self.points_per_axis, self.half_width
        return -W + self.h * (np.arange(G) + 0.5)

    @property
    def nodes(self):
        ax = self.axis
        mesh = np.meshgrid(*([ax] * self.dimension), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class CorrelationGrid:
    """Truncated correlation functions on grid nodes; ``k2`` and ``k3`` are symmetric tensors."""

    geometry: GridGeometry
    k0: float
    k1: np.ndarray
    k2: np.ndarray | None = None
    k3: np.ndarray | None = None

    @property
    def n_max(self):
        return 3 if self.k3 is not None else 2 if self.k2 is not None else 1

    def component(self, n):
        return [np.asarray(self.k0), self.k1, self.k2, self.k3][n]

    def pack(self):
        parts = [np.array([self.k0])] + [self.component(n).ravel() for n in range(1, self.n_max + 1)]
        return np.concatenate(parts)

    @classmethod
    def unpack(cls, flat, geometry, n_max):
        M = geometry.size
        k0 = float(flat[0])
        off = 1
        comps = []
        for n in range(1, n_max + 1):
            size = M**n
            comps.append(flat[off:off + size].reshape((M,) * n).copy())
            off += size
        comps += [None] * (3 - n_max)
        return cls(geometry, k0, comps[0], comps[1], comps[2])

    def copy(self):
        return CorrelationGrid.unpack(self.pack(), self.geometry, self.n_max)

    def max_abs(self, n):
        return float(np.max(np.abs(self.component(n))))

    def is_symmetric(self, tol=0.0):
        ok = True
        if self.k2 is not None:
            ok &= bool(np.max(np.abs(self.k2 - self.k2.T), initial=0.0) <= tol)
        if self.k3 is not None:
            for perm in [(1, 0, 2), (0, 2, 1), (2, 1, 0)]:
                ok &= bool(np.max(np.abs(self.k3 - self.k3.transpose(perm)), initial=0.0) <= tol)
        return ok

    def pair_profile(self, bin_edges):
        """Average of ``k2`` over node pairs whose torus distance falls in each bin (NaN if none)."""
        nodes = self.geometry.nodes
        disp = minimum_image(nodes[:, None, :] - nodes[None, :, :], self.geometry.half_width)
        dist = np.sqrt(np.sum(disp**2, axis=-1)).ravel()
        vals = self.k2.ravel()
        idx = np.digitize(dist, bin_edges) - 1
        nb = len(bin_edges) - 1
        ok = (idx >= 0) & (idx < nb)
        sums = np.bincount(idx[ok], weights=vals[ok], minlength=nb)
        cnt = np.bincount(idx[ok], minlength=nb)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(cnt > 0, sums / np.maximum(cnt, 1), np.nan)


def initial_grid(law, spec: ModelSpec, points_per_axis, n_max=2) -> CorrelationGrid:
    """Correlation functions of a Poisson-type initial law at the grid nodes."""
    geom = GridGeometry(points_per_axis, spec.dimension, spec.half_width)
    x = geom.nodes
    if isinstance(law, PoissonHomogeneous):
        rho = np.full(len(x), float(law.kappa))
    elif isinstance(law, ThinnedPoisson):
        rho = law.kappa * _evaluate(law.q, x, spec.dimension)
    elif isinstance(law, PoissonInhomogeneous):
        rho = _evaluate(law.density, x, spec.dimension)
    elif isinstance(law, Fixed):
        raise SolverError("a fixed configuration has no bounded correlation functions; use a Poisson-type law")
    else:
        raise TypeError(f"unknown initial law {law!r}")
    rho = np.asarray(rho, dtype=float).reshape(len(x))
    k2 = np.multiply.outer(rho, rho) if n_max >= 2 else None
    k3 = np.multiply.outer(k2, rho) if n_max >= 3 else None
    return CorrelationGrid(geom, 1.0, rho, k2, k3)


@dataclass
class EnergyCache:
    """``E(eta) = sum m_sigma(x) + sum_{x != y} a_sigma(x, y)`` at grid nodes for |eta| = 1..3."""

    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray | None = None

    def flat(self, n_max):
        parts = [np.zeros(1), self.E1]
        if n_max >= 2:
            parts.append(self.E2.ravel())
        if n_max >= 3:
            parts.append(self.E3.ravel())
        return np.concatenate(parts)


class HierarchyOperator:
    """Discretized hierarchy operator for one model, grid and closure."""

    def __init__(self, spec: ModelSpec, geometry: GridGeometry, config: SolverConfig,
                 consts: DerivedConstants | None = None, kappa0: float | None = None):
        self.spec = spec
        self.geometry = geometry
        self.config = config
        self.consts = consts if consts is not None else derive_constants(spec, strict=False)
        self.n_max = config.n_max
        kap = config.kappa0 if config.kappa0 is not None else kappa0
        if config.closure == "ruelle_cap" and kap is None:
            raise SolverError("ruelle_cap closure needs the initial type kappa0")
        self.kappa0 = kap
        self.norm_b = self.consts.norm_b
        x = geometry.nodes
        M = geometry.size
        self.b = np.asarray(spec.b_sigma(x), dtype=float).reshape(M)
        m = np.asarray(spec.m_sigma(x), dtype=float).reshape(M)
        A = spec.a_sigma(x[:, None, :], x[None, :, :])
        self.point_a = A
        E2 = m[:, None] + m[None, :] + A + A.T
        E3 = None
        if self.n_max >= 3:
            S = A + A.T
            E3 = (m[:, None, None] + m[None, :, None] + m[None, None, :]
                  + S[:, :, None] + S[:, None, :] + S[None, :, :])
        self.energy = EnergyCache(m, E2, E3)
        self.coupling = self._coupling_matrix()
        self.coupling_rowsum = self.coupling.sum(axis=1)
        self._E_flat = self.energy.flat(self.n_max)

    def _coupling_matrix(self):
        """``C[i, j] = int_{cell j} a_sigma(x', x_i) dx'``."""
        geom, spec = self.geometry, self.spec
        h, d = geom.h, geom.dimension
        off, w = box_quadrature(-h / 2, h / 2, d, order=self.config.quadrature_order,
                                panels=self.config.subcells)
        x = geom.nodes
        M = len(x)
        if spec.sigma == 0.0:
            # translation invariant: depends on the grid offset between cells only
            G = geom.points_per_axis
            ax_idx = np.indices((G,) * d).reshape(d, -1).T
            disp = minimum_image(ax_idx * h, geom.half_width)
            vals = spec.a(disp[:, None, :] + off[None, :, :], d) @ w  # (M,)
            delta = (ax_idx[None, :, :] - ax_idx[:, None, :]) % G
            flat = np.ravel_multi_index(tuple(delta.reshape(-1, d).T), (G,) * d)
            return vals[flat].reshape(M, M)
        C = np.empty((M, M))
        for i in range(M):
            pts = x[:, None, :] + off[None, :, :]  # (M, Q, d)
            C[i] = spec.a_sigma(pts, x[i][None, None, :]) @ w
        return C

    # -- closure ----------------------------------------------------------
    def cap(self, t):
        if self.config.closure == "zero":
            return 0.0
        return (self.kappa0 + self.norm_b * t) ** (self.n_max + 1)

    @property
    def n_clocks(self):
        return self.n_max + 2 if self.config.closure == "ruelle_cap" else 0

    def clocks_at(self, t):
        if not self.n_clocks:
            return np.zeros(0)
        base = self.kappa0 + self.norm_b * t
        return base ** np.arange(self.n_clocks, dtype=float)

    # -- operator pieces on flat vectors ------------------------------------
    def B(self, flat, cap):
        """Birth and coupling part: ``(L + E) k`` with closure value ``cap``."""
        M = self.geometry.size
        N = self.n_max
        g = CorrelationGrid.unpack(flat, self.geometry, N)
        b, C, Cs = self.b, self.coupling, self.coupling_rowsum
        out = [np.zeros(1)]
        # order 1
        d1 = b * g.k0
        if N >= 2:
            d1 = d1 - np.einsum("ij,ij->i", C, g.k2)
        else:
            d1 = d1 - cap * Cs
        out.append(d1)
        if N >= 2:
            d2 = b[:, None] * g.k1[None, :] + b[None, :] * g.k1[:, None]
            if N >= 3:
                d2 = d2 - np.einsum("il,ijl->ij", C, g.k3) - np.einsum("jl,ijl->ij", C, g.k3)
            else:
                d2 = d2 - cap * (Cs[:, None] + Cs[None, :])
            out.append(d2.ravel())
        if N >= 3:
            k2 = g.k2
            d3 = (b[:, None, None] * k2[None, :, :] + b[None, :, None] * k2[:, None, :]
                  + b[None, None, :] * k2[:, :, None])
            d3 = d3 - cap * (Cs[:, None, None] + Cs[None, :, None] + Cs[None, None, :])
            out.append(d3.ravel())
        assert sum(len(o) for o in out) == 1 + sum(M**n for n in range(1, N + 1))
        return np.concatenate(out)

    def E_flat(self):
        return self._E_flat

    def apply(self, flat, t):
        return self.B(flat, self.cap(t)) - self._E_flat * flat

    # augmented autonomous system (hierarchy + clocks) for the series
    def B_aug(self, aug):
        nc = self.n_clocks
        if not nc:
            return self.B(aug, 0.0)
        hier, clk = aug[:-nc], aug[-nc:]
        out_h = self.B(hier, clk[-1])
        out_c = np.zeros(nc)
        out_c[1:] = np.arange(1, nc) * self.norm_b * clk[:-1]
        return np.concatenate([out_h, out_c])

    def E_aug(self):
        return np.concatenate([self._E_flat, np.zeros(self.n_clocks)])

    def max_decay(self):
        return float(np.max(np.abs(self._E_flat)))


def apply_Ldelta(k: CorrelationGrid, op: HierarchyOperator, t=0.0) -> CorrelationGrid:
    """Increment ``L k`` at time ``t`` (the time enters only through the closure)."""
    if k.n_max != op.n_max:
        raise SolverError(f"grid has order {k.n_max}, operator expects {op.n_max}")
    return CorrelationGrid.unpack(op.apply(k.pack(), t), k.geometry, k.n_max)


@dataclass
class Trajectory:
    times: np.ndarray
    grids: list
    closure: str = ""
    norms: np.ndarray | None = None

    def component(self, n):
        return np.stack([g.component(n) for g in self.grids])

    def at(self, t, tol=1e-9):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol:
            raise KeyError(f"time {t} not on the trajectory")
        return self.grids[i]


def integrate_rk4(k0: CorrelationGrid, T, op: HierarchyOperator, output_times=None) -> Trajectory:
    """Classical fourth-order Runge-Kutta with fixed step ``op.config.dt``.

    Steps are shortened to land exactly on every output time.
    """
    dt = op.config.dt
    decay = op.max_decay()
    if dt * decay > 0.5:
        raise StepSizeError(
            f"dt={dt} violates dt*max|E|<=0.5 (max|E|={decay:.4g}); use dt <= {0.5 / decay:.4g}"
        )
    if output_times is None:
        output_times = [0.0, T]
    output_times = np.asarray(sorted(set(float(t) for t in output_times)), dtype=float)
    if output_times[0] < 0 or output_times[-1] > T + 1e-12:
        raise SolverError("output times must lie in [0, T]")
    y = k0.pack().astype(float)
    t = 0.0
    grids = []
    alpha = op.config.alpha_track
    norms = []
    for t_out in output_times:
        while t < t_out - 1e-12:
            hstep = min(dt, t_out - t)
            k1 = op.apply(y, t)
            k2 = op.apply(y + 0.5 * hstep * k1, t + 0.5 * hstep)
            k3 = op.apply(y + 0.5 * hstep * k2, t + 0.5 * hstep)
            k4 = op.apply(y + hstep * k3, t + hstep)
            y = y + (hstep / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = t_out if abs(t + hstep - t_out) < 1e-12 else t + hstep
        g = CorrelationGrid.unpack(y, k0.geometry, k0.n_max)
        grids.append(g)
        if alpha is not None:
            norms.append(norm_alpha(g, alpha))
    return Trajectory(output_times, grids, op.config.closure,
                      np.asarray(norms) if alpha is not None else None)


def _lagrange_basis(nodes, x):
    """Values ``l_j(x)`` of the Lagrange basis on ``nodes`` at points ``x``: shape (len(x), len(nodes))."""
    x = np.asarray(x, dtype=float)[:, None]
    L = np.ones((x.shape[0], len(nodes)))
    for j, sj in enumerate(nodes):
        for m, sm in enumerate(nodes):
            if m != j:
                L[:, j] *= (x[:, 0] - sm) / (sj - sm)
    return L


def ovsyannikov_series(k0: CorrelationGrid, t, alpha, alpha_prime, L_max, op: HierarchyOperator,
                       order=8) -> CorrelationGrid:
    """Truncated series ``S(t) k0 + sum_{l=1}^{L_max} (iterated simplex integrals)``.

    Level ``l`` is ``u_l(s) = int_0^s S(s - r) B u_{l-1}(r) dr`` with
    ``u_0(s) = S(s) k0`` and ``S(s) = exp(-s E)``.  Each level is collocated on
    the ``order`` Gauss-Legendre nodes of ``[0, t]``; the inner integrals
    ``int_0^{s_i}`` use a second Gauss-Legendre rule of the same order mapped
    onto ``[0, s_i]``.
    """
    horizon = time_horizon(alpha, alpha_prime, op.consts)
    if not t < horizon:
        raise HorizonError(f"t={t} is not below the convergence horizon T={horizon:.6g}")
    if t < 0:
        raise SolverError("t must be >= 0")
    E = op.E_aug()
    y0 = np.concatenate([k0.pack(), op.clocks_at(0.0)])
    total = np.exp(-t * E) * y0
    if L_max == 0 or t == 0.0:
        return CorrelationGrid.unpack(total[: len(total) - op.n_clocks], k0.geometry, k0.n_max)
    g, w = np.polynomial.legendre.leggauss(order)
    s = 0.5 * t * (g + 1.0)
    ws = 0.5 * t * w
    # I[i, j] = int_0^{s_i} l_j(r) dr
    I = np.empty((order, order))
    for i, si in enumerate(s):
        r = 0.5 * si * (g + 1.0)
        I[i] = (0.5 * si * w) @ _lagrange_basis(s, r)
    U = np.exp(-np.outer(s, E)) * y0[None, :]
    grow = np.exp(np.outer(s, E))
    for _ in range(L_max):
        F = grow * np.stack([op.B_aug(U[j]) for j in range(order)])
        total = total + np.exp(-t * E) * (ws @ F)
        U = np.exp(-np.outer(s, E)) * (I @ F)
    flat = total[: len(total) - op.n_clocks]
    return CorrelationGrid.unpack(flat, k0.geometry, k0.n_max)


def norm_alpha(k: CorrelationGrid, alpha) -> float:
    """``max_n max|k^(n)| exp(-alpha n)`` over the stored orders (including n = 0)."""
    return max(k.max_abs(n) * math.exp(-alpha * n) for n in range(0, k.n_max + 1))


def g_norm_alpha(G: TabulatedG, alpha, half_width, d=1, order=16) -> float:
    """Weighted L1 norm ``|G(0)| + sum_n e^{n alpha}/n! int |G^(n)|`` by tensor quadrature."""
    if G.n_max > 4:
        raise SolverError("g_norm_alpha supports components up to n = 4")
    absG = TabulatedG(abs(G.g0), {n: (lambda c: lambda x: np.abs(c(x)))(c) for n, c in G.components.items()})
    return lp_integral(absG, G.n_max, half_width, d=d, order=order, weight=lambda n: math.exp(n * alpha))


def save_trajectory(traj: Trajectory, directory, name):
    """Dense ``.npy`` arrays per order plus a JSON header describing the axes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    geom = traj.grids[0].geometry
    n_max = traj.grids[0].n_max
    files = {}
    for n in range(1, n_max + 1):
        fname = f"{name}_k{n}.npy"
        np.save(directory / fname, traj.component(n))
        files[f"k{n}"] = fname
    header = {
        "closure": traj.closure,
        "n_max": n_max,
        "times": [float(t) for t in traj.times],
        "k0": [float(g.k0) for g in traj.grids],
        "points_per_axis": geom.points_per_axis,
        "dimension": geom.dimension,
        "half_width": geom.half_width,
        "spacing": geom.h,
        "axis": [float(a) for a in geom.axis],
        "layout": "row-major flattened nodes; array shape (times, nodes, ..., nodes)",
        "files": files,
    }
    (directory / f"{name}.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header


def load_trajectory(directory, name) -> Trajectory:
    directory = Path(directory)
    header = json.loads((directory / f"{name}.json").read_text())
    geom = GridGeometry(header["points_per_axis"], header["dimension"], header["half_width"])
    comps = [np.load(directory / header["files"][f"k{n}"]) for n in range(1, header["n_max"] + 1)]
    comps += [None] * (3 - header["n_max"])
    grids = []
    for i, k0 in enumerate(header["k0"]):
        grids.append(CorrelationGrid(geom, k0, comps[0][i],
                                     None if comps[1] is None else comps[1][i],
                                     None if comps[2] is None else comps[2][i]))
    return Trajectory(np.asarray(header["times"]), grids, header["closure"])
