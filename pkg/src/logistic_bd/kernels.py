"""Rate kernels of the logistic birth-and-death model and their derived constants.

All positions live in the periodic window ``[-W, W)^d``.  Competition acts
through the minimum-image displacement, so ``a`` is evaluated on vectors whose
components lie in ``[-W, W]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, gamma as gamma_fn

__all__ = [
    "ModelError",
    "KernelSpec",
    "ModelSpec",
    "DerivedConstants",
    "psi",
    "psi_sigma",
    "derive_constants",
    "qt_rho",
    "time_horizon",
    "minimum_image",
    "box_quadrature",
]

FAMILIES = ("constant", "gaussian", "tophat")


class ModelError(ValueError):
    """Invalid model parameters or a model outside the supported class."""


def _norm(x, d):
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        return np.abs(x)
    return np.sqrt(np.sum(x * x, axis=-1))


def psi(x, d):
    """Tempering weight ``1 / (1 + |x|^(d+1))``.

    ``x`` is either an array of shape ``(..., d)`` or, for ``d == 1``, a
    scalar / array of scalars.
    """
    r = _norm(x, d)
    return 1.0 / (1.0 + r ** (d + 1))


def psi_sigma(x, sigma, d):
    """Regularizing weight ``1 / (1 + sigma |x|^(d+1))``; identically 1 at sigma = 0."""
    if not 0.0 <= sigma <= 1.0:
        raise ModelError(f"sigma must lie in [0, 1], got {sigma}")
    r = _norm(x, d)
    if sigma == 0.0:
        return np.ones_like(r)
    return 1.0 / (1.0 + sigma * r ** (d + 1))


def minimum_image(disp, half_width):
    """Wrap displacement vectors onto the torus of side ``2 * half_width``."""
    L = 2.0 * half_width
    return disp - L * np.round(disp / L)


@dataclass(frozen=True)
class KernelSpec:
    """Radial kernel ``k(x) = amplitude * profile(|x|)``.

    ``constant``: ``amplitude`` everywhere.
    ``gaussian``: ``amplitude * exp(-|x|^2 / width^2)``.
    ``tophat``:   ``amplitude`` on ``|x| <= width`` (``width`` is the radius).
    """

    family: str
    amplitude: float
    width: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not (math.isfinite(self.amplitude) and self.amplitude >= 0.0):
            raise ModelError(f"kernel amplitude must be finite and >= 0, got {self.amplitude}")
        if not (math.isfinite(self.width) and self.width >= 0.0):
            raise ModelError(f"kernel width must be finite and >= 0, got {self.width}")
        if self.family == "gaussian" and self.width == 0.0 and self.amplitude > 0.0:
            raise ModelError("gaussian kernel needs width > 0")

    @classmethod
    def constant(cls, level):
        return cls("constant", float(level))

    @classmethod
    def gaussian(cls, amplitude, width):
        return cls("gaussian", float(amplitude), float(width))

    @classmethod
    def tophat(cls, amplitude, radius):
        return cls("tophat", float(amplitude), float(radius))

    @property
    def is_zero(self):
        return self.amplitude == 0.0 or (self.family == "tophat" and self.width == 0.0)

    @property
    def is_constant(self):
        return self.family == "constant" or self.is_zero

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        if self.family == "constant":
            return np.full(r.shape, self.amplitude)
        if self.family == "gaussian":
            return self.amplitude * np.exp(-(r / self.width) ** 2)
        return np.where(r <= self.width, self.amplitude, 0.0)

    def __call__(self, x, d):
        return self.radial(_norm(x, d))

    @property
    def sup(self):
        """Supremum over all of space (attained at the origin for every family)."""
        return 0.0 if self.is_zero else self.amplitude


@dataclass(frozen=True)
class ModelSpec:
    """Birth intensity ``b``, mortality ``m``, competition ``a`` on the torus ``[-W, W)^d``."""

    dimension: int
    half_width: float
    b: KernelSpec
    m: KernelSpec
    a: KernelSpec
    sigma: float = 0.0

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ModelError(f"dimension must be a positive integer, got {self.dimension}")
        if not (self.half_width > 0 and math.isfinite(self.half_width)):
            raise ModelError(f"window half-width must be positive, got {self.half_width}")
        if not 0.0 <= self.sigma <= 1.0:
            raise ModelError(f"sigma must lie in [0, 1], got {self.sigma}")

    @property
    def volume(self):
        return (2.0 * self.half_width) ** self.dimension

    @property
    def homogeneous(self):
        """Translation invariant on the torus: position-free b, m and no regularization."""
        return self.sigma == 0.0 and self.b.is_constant and self.m.is_constant

    def with_sigma(self, sigma):
        return ModelSpec(self.dimension, self.half_width, self.b, self.m, self.a, sigma)

    # regularized rates; positions are (..., d) arrays
    def psi_s(self, x):
        return psi_sigma(x, self.sigma, self.dimension)

    def b_sigma(self, x):
        return self.b(x, self.dimension) * self.psi_s(x)

    def m_sigma(self, x):
        return self.m(x, self.dimension) * self.psi_s(x)

    def a_sigma(self, x, y):
        """``a(x - y) psi_s(x) psi_s(y)`` with the minimum-image displacement."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        disp = minimum_image(x - y, self.half_width)
        val = self.a(disp, self.dimension)
        if self.sigma > 0.0:
            val = val * self.psi_s(x) * self.psi_s(y)
        return val


@dataclass(frozen=True)
class DerivedConstants:
    norm_a: float
    norm_b: float
    norm_m: float
    mean_a: float
    mean_psi: float
    mean_b_sigma: float
    volume: float = field(default=float("nan"))

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


def box_quadrature(lo, hi, d, order=16, panels=1):
    """Composite Gauss-Legendre tensor rule on the box ``[lo, hi]^d``.

    Returns ``(nodes, weights)`` with ``nodes`` of shape ``(P, d)``.
    """
    g, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x1 = (mid[:, None] + half[:, None] * g[None, :]).ravel()
    w1 = (half[:, None] * w[None, :]).ravel()
    grids = np.meshgrid(*([x1] * d), indexing="ij")
    wgrids = np.meshgrid(*([w1] * d), indexing="ij")
    nodes = np.stack([gr.ravel() for gr in grids], axis=-1)
    weights = np.prod(np.stack([wg.ravel() for wg in wgrids], axis=-1), axis=-1)
    return nodes, weights


def _window_integral(f, half_width, d, support=None, order=16):
    """Integrate ``f`` over ``[-W, W]^d``; ``support`` restricts to ``[-s, s]^d``."""
    lim = half_width if support is None else min(support, half_width)
    if lim <= 0.0:
        return 0.0
    panels = max(1, int(math.ceil(2.0 * lim)))
    if d >= 2:
        panels += panels % 2  # keep the origin on a panel edge
    if d == 3:
        panels = min(panels, 12)
    nodes, weights = box_quadrature(-lim, lim, d, order=order, panels=panels)
    return float(np.dot(weights, f(nodes)))


def _ball_volume(r, d):
    return math.pi ** (d / 2.0) / gamma_fn(d / 2.0 + 1.0) * r**d


def _kernel_integral(k: KernelSpec, half_width, d):
    """Integral of a kernel over the displacement box ``[-W, W]^d``."""
    if k.is_zero:
        return 0.0
    if k.family == "constant":
        return k.amplitude * (2.0 * half_width) ** d
    if k.family == "gaussian":
        one = k.width * math.sqrt(math.pi) * erf(half_width / k.width)
        return k.amplitude * one**d
    r = k.width
    if d == 1:
        return k.amplitude * 2.0 * min(r, half_width)
    if r <= half_width:
        return k.amplitude * _ball_volume(r, d)
    return _window_integral(lambda x: k(x, d), half_width, d, order=24)


def _sup_a_over_psi(a: KernelSpec, half_width, d):
    """``sup a(x) (1 + |x|^(d+1))`` over displacements in the window."""
    if a.is_zero:
        return 0.0
    rmax = math.sqrt(d) * half_width
    if a.family == "constant":
        return a.amplitude * (1.0 + rmax ** (d + 1))
    if a.family == "tophat":
        return a.amplitude * (1.0 + min(a.width, rmax) ** (d + 1))
    # radial grid search with successive refinement
    def g(r):
        return a.radial(r) * (1.0 + r ** (d + 1))

    lo, hi = 0.0, rmax
    best_r, best = 0.0, float(g(0.0))
    for _ in range(4):
        r = np.linspace(lo, hi, 2001)
        v = g(r)
        i = int(np.argmax(v))
        if v[i] > best:
            best_r, best = float(r[i]), float(v[i])
        step = (hi - lo) / 2000
        lo, hi = max(0.0, best_r - 2 * step), min(rmax, best_r + 2 * step)
    return best


def derive_constants(spec: ModelSpec, *, strict=True) -> DerivedConstants:
    """Compute the suprema and window integrals the bounds depend on.

    With ``strict=True`` a competition kernel with ``a(0) = 0`` is rejected.
    ``strict=False`` admits the decoupled reference model ``a == 0``.
    """
    d, W = spec.dimension, spec.half_width
    if strict and spec.a.sup <= 0.0:
        raise ModelError("competition kernel must satisfy a(0)>0")
    mean_psi = _window_integral(lambda x: psi(x, d), W, d)
    if spec.sigma == 0.0:
        mean_b_sigma = _kernel_integral(spec.b, W, d)
    elif spec.b.is_zero:
        mean_b_sigma = 0.0
    else:
        support = spec.b.width if spec.b.family == "tophat" and d == 1 else None
        mean_b_sigma = _window_integral(spec.b_sigma, W, d, support=support)
    return DerivedConstants(
        norm_a=_sup_a_over_psi(spec.a, W, d),
        norm_b=spec.b.sup,
        norm_m=spec.m.sup,
        mean_a=_kernel_integral(spec.a, W, d),
        mean_psi=mean_psi,
        mean_b_sigma=mean_b_sigma,
        volume=spec.volume,
    )


def qt_rho(x, t, spec: ModelSpec):
    """Survival factor ``q_t = exp(-m t)`` and newcomer density ``rho_t``.

    Uses the regularized rates ``b_sigma``, ``m_sigma`` (identical to ``b``,
    ``m`` when ``sigma = 0``).
    """
    if t < 0:
        raise ModelError(f"time must be >= 0, got {t}")
    m = np.asarray(spec.m_sigma(x), dtype=float)
    b = np.asarray(spec.b_sigma(x), dtype=float)
    q = np.exp(-m * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(m > 0.0, -np.expm1(-m * t) * b / np.where(m > 0, m, 1.0), b * t)
    if q.ndim == 0:
        return float(q), float(rho)
    return q, rho


def time_horizon(alpha, alpha_prime, consts: DerivedConstants):
    """Convergence horizon ``(alpha - alpha') / (||b|| e^{-alpha'} + <a> e^{alpha})``."""
    if not alpha > alpha_prime:
        raise ModelError(f"need alpha > alpha', got alpha={alpha}, alpha'={alpha_prime}")
    rate = consts.norm_b * math.exp(-alpha_prime) + consts.mean_a * math.exp(alpha)
    if rate == 0.0:
        return math.inf  # no birth, no competition: the series is entire
    return (alpha - alpha_prime) / rate
