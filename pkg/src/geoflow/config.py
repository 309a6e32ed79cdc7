"""Run configuration: a strict schema (unknown keys rejected) loaded from YAML
or JSON, with dotted-key overrides, converted to the library's config types."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from geoflow.augment import BSplineSetting
from geoflow.errors import ConfigError
from geoflow.grid import GridSpec
from geoflow.kernel import DEFAULT_RELATIVE_SIGMAS, KernelSpec
from geoflow.registration import OptimizerConfig, RegConfig
from geoflow.shooting import ShootConfig
from geoflow.subspace import SamplerConfig
from geoflow.synthdata import Perturbation, default_scene


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelModel(_Strict):
    """Absolute sigmas (mm) or, when omitted, sigmas relative to the domain extent."""

    sigmas: Optional[list[float]] = None
    relative: list[float] = Field(default_factory=lambda: list(DEFAULT_RELATIVE_SIGMAS))
    weights: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check(self):
        n = len(self.sigmas) if self.sigmas is not None else len(self.relative)
        if n == 0:
            raise ValueError("kernel needs at least one sigma")
        if self.weights is not None and len(self.weights) != n:
            raise ValueError("one weight per sigma")
        if any(s <= 0 for s in (self.sigmas or self.relative)):
            raise ValueError("sigmas must be positive")
        return self

    def spec_for(self, grid: GridSpec) -> KernelSpec:
        if self.sigmas is not None:
            return KernelSpec.from_sigmas(self.sigmas, self.weights)
        extent = max(grid.extent)
        return KernelSpec.from_sigmas([r * extent for r in self.relative], self.weights)


class OptimizerModel(_Strict):
    max_iters: list[int] = [60, 50, 25]
    step_size: float = 0.5
    shrink: float = 0.5
    grow: float = 1.5
    grad_tol: float = 1e-8
    rel_tol: float = 1e-4
    max_backtracks: int = 20
    step_rule: Literal["bb", "grow"] = "bb"
    precondition: bool = True


class RegModel(_Strict):
    similarity: Literal["ssd", "lncc"] = "ssd"
    lncc_window: int = 9
    sim_weight: float = 5000.0
    multiscale: list[int] = [4, 2, 1]
    optimizer: OptimizerModel = OptimizerModel()


class SamplerModel(_Strict):
    t_range: tuple[float, float] = (-1.0, 2.0)
    K: int = 2
    rng_seed: Optional[int] = None  # defaults to the global seed


class SynthModel(_Strict):
    dims: list[int] = [64, 64]
    spacing: float = 1.0
    n: int = 10
    noise: float = 0.0
    center_scale: float = 1.5
    radius_scale: float = 0.08
    intensity_scale: float = 0.03
    rng_seed: Optional[int] = None

    @field_validator("dims")
    @classmethod
    def _dims(cls, v):
        if len(v) not in (2, 3) or any(n < 2 for n in v):
            raise ValueError("dims must have 2 or 3 entries, each >= 2")
        return v


class PipelineModel(_Strict):
    n_out: int = 50
    n_views: int = 20
    variant: Literal["fluid_aug_real", "fluid_aug_real_t1", "brainstorm_real"] = "fluid_aug_real"
    workers: int = 1
    bspline_settings: Optional[list[tuple[int, float]]] = None
    atlas_index: int = 0
    test_indices: list[int] = []

    @field_validator("n_out", "n_views", "workers")
    @classmethod
    def _nonneg(cls, v):
        if v < 0:
            raise ValueError("must be nonnegative")
        return v


class RunConfig(_Strict):
    seed: int = 0
    steps_per_unit_time: int = 20
    kernel: KernelModel = KernelModel()
    reg: RegModel = RegModel()
    sampler: SamplerModel = SamplerModel()
    synth: SynthModel = SynthModel()
    pipeline: PipelineModel = PipelineModel()

    # -- conversion to library configs ------------------------------------
    def shoot_config(self, grid: GridSpec) -> ShootConfig:
        return ShootConfig(self.steps_per_unit_time, self.kernel.spec_for(grid))

    def reg_config(self, grid: GridSpec) -> RegConfig:
        o = self.reg.optimizer
        opt = OptimizerConfig(tuple(o.max_iters), o.step_size, o.shrink, o.grow, o.grad_tol, o.max_backtracks,
                              rel_tol=o.rel_tol, step_rule=o.step_rule, precondition=o.precondition)
        return RegConfig(self.reg.similarity, self.reg.lncc_window, self.reg.sim_weight,
                         self.shoot_config(grid), opt, tuple(self.reg.multiscale))

    def sampler_config(self, grid: GridSpec) -> SamplerConfig:
        seed = self.seed if self.sampler.rng_seed is None else self.sampler.rng_seed
        return SamplerConfig(tuple(self.sampler.t_range), self.sampler.K, seed, self.shoot_config(grid))

    def synth_grid(self) -> GridSpec:
        return GridSpec.uniform(tuple(self.synth.dims), self.synth.spacing)

    def scene(self):
        return default_scene(self.synth_grid(), self.synth.noise, self.synth_seed())

    def synth_seed(self) -> int:
        return self.seed if self.synth.rng_seed is None else self.synth.rng_seed

    def perturbation(self) -> Perturbation:
        s = self.synth
        return Perturbation(s.center_scale, s.radius_scale, s.intensity_scale)

    def bspline_settings(self, ndim: int):
        from geoflow.augment import DEFAULT_BSPLINE_SETTINGS

        if self.pipeline.bspline_settings is None:
            return DEFAULT_BSPLINE_SETTINGS
        return tuple(BSplineSetting(int(m), float(s)) for m, s in self.pipeline.bspline_settings)


def _wrap(exc: ValidationError) -> ConfigError:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return ConfigError("; ".join(parts))


def parse_config(data: Optional[dict]) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise _wrap(exc) from None


def load_config(path: Union[str, Path, None]) -> dict:
    """Raw mapping from a YAML or JSON file (empty when ``path`` is None)."""
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def apply_override(data: dict, dotted: str, value: Any) -> dict:
    """Set ``a.b.c = value`` in a nested mapping (copying along the path)."""
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {dotted!r}")
    out = dict(data)
    node = out
    for k in keys[:-1]:
        child = node.get(k, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted!r} descends into a non-mapping")
        node[k] = dict(child)
        node = node[k]
    node[keys[-1]] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as YAML (so numbers and lists work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from None
