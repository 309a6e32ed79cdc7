"""Deterministic synthetic labeled scenes (soft-edged shapes plus noise)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from geoflow.grid import GridSpec, ScalarField
from geoflow.labels import LabelMap

KINDS = ("ellipse", "annulus", "blob")
MAX_RETRIES = 100


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple[float, ...]
    radii: tuple[float, ...]
    label: int
    intensity: float
    edge: float = 2.0
    inner: float = 0.5  # annulus: inner radii as a fraction of the outer radii
    lobes: int = 3  # blob: number of boundary lobes
    amplitude: float = 0.15  # blob: relative lobe height

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if len(self.center) != len(self.radii):
            raise ValueError("center and radii must have the same length")
        if any(r <= 0 for r in self.radii) or self.edge <= 0:
            raise ValueError("radii and edge width must be positive")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("shape intensity must lie in [0, 1]")
        if not 0.0 < self.inner < 1.0 or not 0.0 <= self.amplitude < 1.0:
            raise ValueError("invalid annulus/blob parameters")

    @property
    def reach(self) -> tuple[float, ...]:
        """Half extent of the bounding box along each axis."""
        grow = 1.0 + self.amplitude if self.kind == "blob" else 1.0
        return tuple(r * grow for r in self.radii)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Approximate signed distance in mm (negative inside)."""
        rel = (x - np.asarray(self.center)) / np.asarray(self.radii)
        rho = np.sqrt(np.sum(rel**2, axis=-1))
        rmin = min(self.radii)
        if self.kind == "blob":
            theta = np.arctan2(rel[..., 1], rel[..., 0])
            wobble = 1.0 + self.amplitude * np.cos(self.lobes * theta)
            if x.shape[-1] == 3:
                wobble = wobble * (1.0 + 0.5 * self.amplitude * rel[..., 2] / np.maximum(rho, 1e-12))
            return (rho / wobble - 1.0) * rmin
        outer = (rho - 1.0) * rmin
        if self.kind == "ellipse":
            return outer
        inner = (rho / self.inner - 1.0) * rmin * self.inner
        return np.maximum(outer, -inner)


@dataclass(frozen=True)
class ShapeSceneSpec:
    grid: GridSpec
    shapes: tuple[Shape, ...] = ()
    noise: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.noise < 0:
            raise ValueError("noise sigma must be nonnegative")
        for s in self.shapes:
            if len(s.center) != self.grid.ndim:
                raise ValueError("shape dimensionality does not match the grid")
            if not _fits(s, self.grid):
                raise ValueError(f"shape {s} does not fit in the domain with its edge margin")
        labels = sorted({s.label for s in self.shapes})
        if labels != list(range(1, len(labels) + 1)):
            raise ValueError(f"label ids must be dense from 1, got {labels}")

    @property
    def label_count(self) -> int:
        return 1 + max((s.label for s in self.shapes), default=0)


@dataclass(frozen=True)
class Perturbation:
    center: float = 1.5  # mm, std of center shifts
    radius: float = 0.08  # relative std of radius scaling
    intensity: float = 0.03  # std of intensity shifts


def _fits(shape: Shape, grid: GridSpec) -> bool:
    for c, r, o, ext in zip(shape.center, shape.reach, grid.origin, grid.extent):
        if c - r < o + shape.edge or c + r > o + ext - shape.edge:
            return False
    return True


def generate_scene(spec: ShapeSceneSpec) -> tuple[ScalarField, LabelMap]:
    """Render the scene: later shapes cover earlier ones in image and labels."""
    x = spec.grid.points()
    image = np.zeros(spec.grid.dims)
    labels = np.zeros(spec.grid.dims, dtype=np.int64)
    for s in spec.shapes:
        sd = s.signed_distance(x)
        alpha = 0.5 * (1.0 - np.tanh(2.0 * sd / s.edge))
        image = image * (1.0 - alpha) + s.intensity * alpha
        labels[sd < 0] = s.label
    if spec.noise > 0:
        rng = np.random.default_rng(spec.rng_seed)
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0 + 3.0 * spec.noise)
    return ScalarField(spec.grid, image), LabelMap(spec.grid, labels, spec.label_count)


def _perturb(shape: Shape, scales: Perturbation, rng: np.random.Generator) -> Shape:
    d = len(shape.center)
    center = np.asarray(shape.center) + rng.normal(0.0, scales.center, d)
    radii = np.asarray(shape.radii) * np.exp(rng.normal(0.0, scales.radius, d))
    intensity = float(np.clip(shape.intensity + rng.normal(0.0, scales.intensity), 0.0, 1.0))
    return replace(shape, center=tuple(center), radii=tuple(radii), intensity=intensity)


def generate_population(base: ShapeSceneSpec, n: int, scales: Perturbation = Perturbation(),
                        rng_seed: int = 0) -> list[tuple[ScalarField, LabelMap]]:
    """``n`` scenes; index 0 is the unperturbed base (usable as an atlas)."""
    if n < 1:
        raise ValueError("population size must be >= 1")
    out = [generate_scene(base)]
    for i in range(1, n):
        rng = np.random.default_rng([rng_seed, i])
        for _ in range(MAX_RETRIES):
            shapes = tuple(_perturb(s, scales, rng) for s in base.shapes)
            if all(_fits(s, base.grid) for s in shapes):
                break
        else:
            raise ValueError(f"could not place perturbed shapes for scene {i} in {MAX_RETRIES} tries")
        noise_seed = int(rng.integers(0, 2**63))
        out.append(generate_scene(replace(base, shapes=shapes, rng_seed=noise_seed)))
    return out


def default_scene(grid: GridSpec, noise: float = 0.0, rng_seed: int = 0) -> ShapeSceneSpec:
    """A three-label nested scene scaled to the grid: an outer ellipse, an
    annulus and an off-center blob."""
    ext = np.asarray(grid.extent)
    c = np.asarray(grid.origin) + ext / 2.0
    edge = 2.0 * min(grid.spacing)
    d = grid.ndim
    stretch = np.array([1.0, 0.85, 0.9][:d])
    shapes = (
        Shape("ellipse", tuple(c), tuple(0.34 * ext * stretch), 1, 0.35, edge),
        Shape("annulus", tuple(c + 0.03 * ext * np.eye(d)[0]), tuple(0.2 * ext * stretch[::-1]), 2, 0.7, edge, inner=0.55),
        Shape("blob", tuple(c - 0.13 * ext * np.eye(d)[1] - 0.1 * ext * np.eye(d)[0]), tuple(np.full(d, 0.07) * ext), 3, 1.0, edge),
    )
    return ShapeSceneSpec(grid, shapes, noise, rng_seed)
