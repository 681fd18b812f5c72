"""Run configuration: a YAML document validated against a strict schema."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

from .estimator import TestFunction
from .hierarchy import SolverConfig
from .kernels import KernelSpec, ModelSpec
from .simulator import Fixed, PoissonHomogeneous, PoissonInhomogeneous, ThinnedPoisson

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "config_hash",
    "format_validation_error",
]


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelConfig(_Strict):
    family: Literal["constant", "gaussian", "tophat"]
    amplitude: float = Field(ge=0)
    width: float = Field(default=0.0, ge=0)

    def build(self):
        return KernelSpec(self.family, self.amplitude, self.width)


class BumpConfig(KernelConfig):
    center: list[float] = Field(default_factory=lambda: [0.0])

    def build_test_function(self):
        return TestFunction(self.build(), tuple(self.center))


class ModelConfig(_Strict):
    dimension: int = Field(ge=1, le=3)
    half_width: float = Field(gt=0)
    sigma: float = Field(default=0.0, ge=0, le=1)
    b: KernelConfig
    m: KernelConfig
    a: KernelConfig
    allow_zero_competition: bool = False

    @model_validator(mode="after")
    def _competition(self):
        a = self.a.build()
        if a.is_zero and not self.allow_zero_competition:
            raise ValueError("competition kernel must satisfy a(0)>0 (set allow_zero_competition for a = 0 references)")
        return self

    def build(self):
        return ModelSpec(self.dimension, self.half_width, self.b.build(), self.m.build(), self.a.build(), self.sigma)


class PoissonLaw(_Strict):
    law: Literal["poisson"]
    kappa: float = Field(ge=0)

    def build(self):
        return PoissonHomogeneous(self.kappa)


class InhomogeneousLaw(_Strict):
    law: Literal["poisson_inhomogeneous"]
    density: KernelConfig

    def build(self):
        return PoissonInhomogeneous(self.density.build())


class ThinnedLaw(_Strict):
    law: Literal["thinned_poisson"]
    kappa: float = Field(ge=0)
    q: KernelConfig

    @field_validator("q")
    @classmethod
    def _probability(cls, q):
        if q.amplitude > 1:
            raise ValueError("retention probability must not exceed 1")
        return q

    def build(self):
        return ThinnedPoisson(self.kappa, self.q.build())


class FixedLaw(_Strict):
    law: Literal["fixed"]
    points: list[list[float]]

    def build(self):
        return Fixed.of(self.points) if self.points else Fixed(())


InitialConfig = Union[PoissonLaw, InhomogeneousLaw, ThinnedLaw, FixedLaw]


class SimulationConfig(_Strict):
    threads: int = Field(default=1, ge=1)
    max_population: int = Field(default=10**6, ge=1)
    record_events: bool = False


class SeriesConfig(_Strict):
    enabled: bool = False
    L_max: int = Field(default=8, ge=0)
    order: int = Field(default=8, ge=1)
    horizon_fraction: float = Field(default=0.4, gt=0, lt=1)
    alpha_gap: float = Field(default=1.0, gt=0)


class SolverSection(_Strict):
    enabled: bool = True
    points_per_axis: int = Field(default=20, ge=1)
    n_max: int = Field(default=3, ge=1, le=3)
    dt: float = Field(default=0.005, gt=0)
    closures: list[Literal["ruelle_cap", "zero"]] = Field(default_factory=lambda: ["ruelle_cap", "zero"])
    quadrature_order: int = Field(default=8, ge=1)
    subcells: int = Field(default=4, ge=1)
    alpha_track: Optional[float] = None
    series: SeriesConfig = Field(default_factory=SeriesConfig)

    def build(self, closure, kappa0):
        return SolverConfig(dt=self.dt, closure=closure, n_max=self.n_max,
                            quadrature_order=self.quadrature_order, subcells=self.subcells,
                            kappa0=kappa0, alpha_track=self.alpha_track)


class EstimatorSection(_Strict):
    region: Optional[list[list[float]]] = None
    n_max: int = Field(default=4, ge=1, le=4)
    n_bins: int = Field(default=40, ge=1)
    rmax: Optional[float] = Field(default=None, gt=0)
    k1_cells: int = Field(default=1, ge=1)
    theta: Optional[BumpConfig] = None
    v: Optional[BumpConfig] = None

    @field_validator("region")
    @classmethod
    def _box(cls, region):
        if region is not None and len(region) != 2:
            raise ValueError("region is a pair [lo, hi] of corner vectors")
        return region


CHECKS = ("type_growth", "convolution_bound", "global_moments", "linear_growth", "cross_validate")


class VerifierSection(_Strict):
    checks: list[Literal[CHECKS]] = Field(default_factory=lambda: ["type_growth", "convolution_bound", "global_moments"])
    convolution_mode: Literal["upper", "equal"] = "upper"
    mean_field_tol: float = Field(default=0.25, gt=0)
    saturation_fraction: float = Field(default=0.9, gt=0, lt=1)
    moment_order: int = Field(default=2, ge=1, le=4)
    grid_tol: float = Field(default=0.0, ge=0)
    type_growth_tol: float = Field(default=0.0, ge=0)


class SweepSection(_Strict):
    sigmas: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0])
    replicas: Optional[int] = Field(default=None, ge=2)
    observable: Literal["density", "Phi"] = "density"


class OutputSection(_Strict):
    directory: str = "runs"
    timestamped: bool = True


class RunConfig(_Strict):
    model: ModelConfig
    initial: InitialConfig = Field(discriminator="law")
    horizon: float = Field(ge=0)
    snapshot_times: list[float]
    replicas: int = Field(ge=1)
    master_seed: int = Field(default=0, ge=0, lt=2**64)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    solver: SolverSection = Field(default_factory=SolverSection)
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    verifier: VerifierSection = Field(default_factory=VerifierSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @field_validator("snapshot_times")
    @classmethod
    def _times(cls, ts, info: ValidationInfo):
        if not ts:
            raise ValueError("must not be empty")
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("must be sorted")
        horizon = info.data.get("horizon")
        if ts[0] < 0 or (horizon is not None and ts[-1] > horizon):
            raise ValueError("must lie in [0, horizon]")
        return ts

    def spec(self):
        return self.model.build()

    def law(self):
        return self.initial.build()

    def kappa0(self):
        """Type of the initial law (supremum of its intensity)."""
        init = self.initial
        if isinstance(init, PoissonLaw):
            return init.kappa
        if isinstance(init, InhomogeneousLaw):
            return init.density.amplitude
        if isinstance(init, ThinnedLaw):
            return init.kappa * init.q.amplitude
        return None

    def with_overrides(self, seed=None, replicas=None, threads=None):
        data = self.model_dump(mode="json")
        if seed is not None:
            data["master_seed"] = seed
        if replicas is not None:
            data["replicas"] = replicas
        if threads is not None:
            data["simulation"]["threads"] = threads
        return RunConfig.model_validate(data)


def format_validation_error(err: ValidationError):
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"]) or "<root>"
    return path, f"{path}: {first['msg']}"


def parse_config(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level", "<root>")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        path, msg = format_validation_error(err)
        raise ConfigError(msg, path) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found", "<file>")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})", "<file>") from None
    return parse_config(data)


def config_hash(cfg: RunConfig) -> str:
    """Hash of the result-determining settings (thread count excluded)."""
    data = cfg.model_dump(mode="json")
    data["simulation"].pop("threads", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
