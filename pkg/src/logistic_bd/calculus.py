"""Exact combinatorics on finite configurations.

A configuration is an ``(n, d)`` float array; rows are points and repeated
rows are allowed (multisets).  Every enumeration below works on row indices,
so duplicated points are treated as distinguishable copies.

Functions on finite configurations (``TabulatedG``) are given component-wise:
``components[n]`` is a callable taking an array of shape ``(..., n, d)`` and
returning an array of shape ``(...)``.  Components must be symmetric under
permutation of the ``n`` points.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .kernels import box_quadrature, psi

__all__ = [
    "SizeError",
    "TabulatedG",
    "as_configuration",
    "e_product",
    "k_transform",
    "star_product",
    "lp_integral",
    "factorial_count",
    "subgraph_expansion_check",
    "f_theta",
    "phi_theta",
    "psi_tau",
    "f_tilde_v",
    "temperedness",
    "product_g",
    "indicator_empty",
]

K_GUARD = 20
STAR_GUARD = 12
LP_COST_GUARD = 5e7


class SizeError(ValueError):
    """Input too large for exact enumeration or tensor quadrature."""


def as_configuration(points, d=1):
    """Coerce ``points`` to an ``(n, d)`` float array."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.zeros((0, d))
    if arr.ndim == 1:
        arr = arr.reshape(-1, d)
    if arr.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {arr.shape}")
    return arr


@dataclass
class TabulatedG:
    """Bounded-support function on finite configurations."""

    g0: float = 0.0
    components: Mapping[int, Callable] = field(default_factory=dict)

    @property
    def n_max(self):
        return max(self.components, default=0)

    def component(self, n):
        return self.components.get(n)

    def __call__(self, eta):
        n = len(eta)
        if n == 0:
            return float(self.g0)
        comp = self.components.get(n)
        if comp is None:
            return 0.0
        return float(comp(np.asarray(eta)[None, ...])[0])


def indicator_empty(value=1.0):
    """``G`` equal to ``value`` at the empty configuration and zero elsewhere."""
    return TabulatedG(g0=value)


def product_g(theta, n_max, g0=1.0):
    """``G^(n)(x_1..x_n) = prod theta(x_i)`` for ``1 <= n <= n_max``.

    ``theta`` maps an array of points ``(..., d)`` to values ``(...)``.
    """

    def comp(x):
        return np.prod(theta(x), axis=-1)

    return TabulatedG(g0=g0, components={n: comp for n in range(1, n_max + 1)})


def e_product(eta, q):
    """``prod_{x in eta} q(x)``; the empty product is 1."""
    eta = np.asarray(eta, dtype=float)
    if len(eta) == 0:
        return 1.0
    return float(np.prod(q(eta)))


def k_transform(G: TabulatedG, gamma):
    """``sum_{eta subset gamma} G(eta)`` over all sub-multisets, including the empty one."""
    gamma = np.asarray(gamma, dtype=float)
    n = len(gamma)
    if n > K_GUARD:
        raise SizeError(f"k_transform enumerates 2^{n} subsets; limit is |gamma| <= {K_GUARD}")
    total = float(G.g0)
    for size in range(1, min(n, G.n_max) + 1):
        comp = G.component(size)
        if comp is None:
            continue
        idx = np.array(list(itertools.combinations(range(n), size)), dtype=int)
        total += float(np.sum(comp(gamma[idx])))
    return total


def star_product(G1: TabulatedG, G2: TabulatedG, eta):
    """``(G1 * G2)(eta) = sum_{xi1 in eta} sum_{xi2 in eta minus xi1} G1(xi1 + xi2) G2(eta minus xi2)``."""
    eta = np.asarray(eta, dtype=float)
    n = len(eta)
    if n > STAR_GUARD:
        raise SizeError(f"star_product enumerates 3^{n} splittings; limit is |eta| <= {STAR_GUARD}")
    total = 0.0
    # label 0: in xi1, 1: in xi2, 2: in neither
    for labels in itertools.product((0, 1, 2), repeat=n):
        lab = np.array(labels, dtype=int)
        union = eta[lab != 2]
        rest = eta[lab != 1]
        total += G1(union) * G2(rest)
    return total


def lp_integral(G: TabulatedG, n_max, half_width, d=1, order=32, weight=None):
    """Lebesgue-Poisson integral ``G(0) + sum_n 1/n! int_{window^n} G^(n)``.

    ``weight(n)`` optionally rescales the n-th term (used for weighted norms).
    The window is ``[-half_width, half_width]^d``; quadrature is a Gauss-Legendre
    tensor rule with ``order`` points per axis.
    """
    total = float(G.g0) * (weight(0) if weight else 1.0)
    nodes1, w1 = box_quadrature(-half_width, half_width, d, order=order)
    for n in range(1, n_max + 1):
        comp = G.component(n)
        if comp is None:
            continue
        cost = float(len(w1)) ** n
        if cost > LP_COST_GUARD:
            raise SizeError(
                f"tensor quadrature for n={n} needs {cost:.3g} evaluations (limit {LP_COST_GUARD:.0e})"
            )
        idx = np.indices((len(w1),) * n, dtype=np.int32).reshape(n, -1).T
        pts = nodes1[idx]  # (P, n, d)
        wts = np.prod(w1[idx], axis=-1)
        term = float(np.dot(wts, comp(pts))) / math.factorial(n)
        total += term * (weight(n) if weight else 1.0)
    return total


def _in_region(gamma, region):
    lo, hi = (np.asarray(v, dtype=float) for v in region)
    return np.all((gamma >= lo) & (gamma <= hi), axis=-1)


def factorial_count(gamma, n, region=None):
    """Number of ordered ``n``-tuples of distinct indices with all points in ``region``.

    ``region`` is a box ``(lo, hi)``; ``None`` means the whole configuration.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gamma = np.asarray(gamma, dtype=float)
    k = len(gamma) if region is None else int(np.count_nonzero(_in_region(gamma, region)))
    return math.perm(k, n) if k >= n else 0


def _partition_of(edges, n):
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in edges:
        parent[find(i)] = find(j)
    roots = sorted({find(i) for i in range(n)})
    return [roots.index(find(i)) for i in range(n)], len(roots)


def subgraph_expansion_check(g, gamma, n):
    """Both sides of the distinct-index expansion over spanning subgraphs of ``K_n``.

    ``lhs`` sums ``g`` over ordered tuples of pairwise-distinct indices.
    ``rhs`` sums, over every edge subset of ``K_n``, the signed unrestricted
    sum of ``g`` with the variables of each connected component identified.
    """
    if n not in (2, 3):
        raise ValueError("n must be 2 or 3")
    gamma = np.asarray(gamma, dtype=float)
    N = len(gamma)
    if N > 8:
        raise SizeError("subgraph expansion check is limited to |gamma| <= 8")
    if N == 0:
        return 0.0, 0.0
    perms = list(itertools.permutations(range(N), n))
    lhs = float(np.sum(g(gamma[np.array(perms, dtype=int)]))) if perms else 0.0

    all_edges = list(itertools.combinations(range(n), 2))
    rhs = 0.0
    for r in range(len(all_edges) + 1):
        for edges in itertools.combinations(all_edges, r):
            comp_of, n_comp = _partition_of(edges, n)
            tuples = np.array(list(itertools.product(range(N), repeat=n_comp)), dtype=int)
            pts = gamma[tuples[:, comp_of]]  # (N^n_comp, n, d)
            rhs += (-1) ** len(edges) * float(np.sum(g(pts)))
    return lhs, rhs


def f_theta(gamma, theta):
    """``prod_{x in gamma} (1 + theta(x))``."""
    gamma = np.asarray(gamma, dtype=float)
    if len(gamma) == 0:
        return 1.0
    return float(np.prod(1.0 + theta(gamma)))


def phi_theta(gamma, theta):
    """Linear statistic ``sum_{x in gamma} theta(x)``."""
    gamma = np.asarray(gamma, dtype=float)
    if len(gamma) == 0:
        return 0.0
    return float(np.sum(theta(gamma)))


def psi_tau(gamma, thetas, tau):
    """Bounded test function ``prod_theta Phi/(1 + tau Phi)`` with ``Phi = sum theta(x)``."""
    if not 0.0 < tau <= 0.5:
        raise ValueError(f"tau must lie in (0, 1/2], got {tau}")
    out = 1.0
    for theta in thetas:
        phi = phi_theta(gamma, theta)
        out *= phi / (1.0 + tau * phi)
    return out


def f_tilde_v(gamma, v, d=1):
    """``exp(-sum_{x in gamma} v(x) psi(x))``; lies in (0, 1] for ``v >= 0``."""
    gamma = np.asarray(gamma, dtype=float)
    if len(gamma) == 0:
        return 1.0
    return float(np.exp(-np.sum(v(gamma) * psi(gamma, d))))


def temperedness(gamma, d=1):
    """``sum_{x in gamma} psi(x)``."""
    gamma = np.asarray(gamma, dtype=float)
    if len(gamma) == 0:
        return 0.0
    return float(np.sum(psi(gamma, d)))
