"""Regular-grid field types, multilinear interpolation, map composition,
finite differences and Jacobian determinants.

Array layout: a field on a grid with ``dims = (nx, ny[, nz])`` is stored as a
numpy array indexed ``[ix, iy(, iz)]`` (axis 0 is x); vector-valued fields carry
their components on a trailing axis. Files written by :mod:`geoflow.io` flatten
this with x fastest.

The ``*_array`` functions operate on raw arrays in *index* coordinates and are
what the integrators use internally; the public functions wrap them with the
field types and physical coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from geoflow import _interp
from geoflow.errors import DimensionMismatchError, GridMismatchError

# Index coordinates closer than this to an integer are snapped onto it, so that
# sampling at grid points (e.g. through an identity map with non-dyadic spacing)
# returns stored values exactly.
_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...] = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = (0.0,) * len(dims) if self.origin is None else tuple(float(o) for o in self.origin)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid dimensionality must be 2 or 3, got {len(dims)}")
        if len(spacing) != len(dims) or len(origin) != len(dims):
            raise ValueError("dims, spacing and origin must have the same length")
        if any(n < 2 for n in dims):
            raise ValueError(f"all dims must be >= 2, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"all spacings must be positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError("origin must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def uniform(cls, dims: Sequence[int], spacing: float = 1.0) -> "GridSpec":
        return cls(tuple(dims), (spacing,) * len(dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> tuple[float, ...]:
        """Physical length of each axis, first to last grid point."""
        return tuple((n - 1) * s for n, s in zip(self.dims, self.spacing))

    def points(self) -> np.ndarray:
        """Physical coordinates of every grid point, shape ``(*dims, ndim)``."""
        axes = [o + np.arange(n) * s for n, s, o in zip(self.dims, self.spacing, self.origin)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_index(self, coords: np.ndarray) -> np.ndarray:
        """Physical coordinates -> (fractional) index coordinates."""
        idx = (coords - np.asarray(self.origin)) / np.asarray(self.spacing)
        near = np.rint(idx)
        return np.where(np.abs(idx - near) < _SNAP, near, idx)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values)
        if values.shape != self.grid.dims:
            raise ValueError(f"values shape {values.shape} does not match grid dims {self.grid.dims}")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar field contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: GridSpec
    vectors: np.ndarray

    def __post_init__(self):
        vectors = _readonly(self.vectors)
        expected = (*self.grid.dims, self.grid.ndim)
        if vectors.shape != expected:
            raise ValueError(f"vector array shape {vectors.shape} != {expected}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("vector field contains non-finite values")
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        return cls(grid, np.zeros((*grid.dims, grid.ndim)))

    def __add__(self, other: "VectorField") -> "VectorField":
        _check_same_grid(self.grid, other.grid)
        return VectorField(self.grid, self.vectors + other.vectors)

    def __sub__(self, other: "VectorField") -> "VectorField":
        _check_same_grid(self.grid, other.grid)
        return VectorField(self.grid, self.vectors - other.vectors)

    def __mul__(self, a: float) -> "VectorField":
        return VectorField(self.grid, self.vectors * a)

    __rmul__ = __mul__

    def __neg__(self) -> "VectorField":
        return VectorField(self.grid, -self.vectors)


@dataclass(frozen=True, eq=False)
class DeformationMap:
    """Point-wise physical coordinates; represents either phi or phi^-1."""

    grid: GridSpec
    coords: np.ndarray

    def __post_init__(self):
        coords = _readonly(self.coords)
        expected = (*self.grid.dims, self.grid.ndim)
        if coords.shape != expected:
            raise ValueError(f"coords shape {coords.shape} != {expected}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("deformation map contains non-finite coordinates")
        object.__setattr__(self, "coords", coords)

    @cached_property
    def displacement(self) -> np.ndarray:
        return self.coords - self.grid.points()


Field = Union[ScalarField, VectorField, DeformationMap]


def _check_same_grid(a: GridSpec, b: GridSpec) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


# ---------------------------------------------------------------------------
# multilinear interpolation on raw arrays (index coordinates, clamp to border)


def _flat(values: np.ndarray, d: int):
    dims = values.shape[:d]
    return np.ascontiguousarray(values.reshape(int(np.prod(dims)), -1), dtype=np.float64), dims


def _points(idx: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(idx.reshape(-1, idx.shape[-1]), dtype=np.float64)


def interp_array(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sample ``values`` (shape ``(*dims, ...)``) at index coordinates ``idx``
    (shape ``(..., d)``). Trailing channel axes of ``values`` are preserved."""
    d = idx.shape[-1]
    flat, dims = _flat(values, d)
    pts = _points(idx)
    out = np.empty((pts.shape[0], flat.shape[1]))
    if d == 2:
        _interp.interp2(flat, dims[0], dims[1], pts, out)
    else:
        _interp.interp3(flat, dims[0], dims[1], dims[2], pts, out)
    return out.reshape(*idx.shape[:-1], *values.shape[d:])


def interp_array_grad(values: np.ndarray, idx: np.ndarray):
    """Values and derivative w.r.t. the index coordinates of the query points.

    Returns ``(out, jac)`` with ``out`` of shape ``(..., C)`` and ``jac`` of
    shape ``(..., C, d)``; the derivative along an axis is zero where that
    coordinate is clamped.
    """
    d = idx.shape[-1]
    flat, dims = _flat(values, d)
    pts = _points(idx)
    out = np.empty((pts.shape[0], flat.shape[1]))
    jac = np.empty((pts.shape[0], flat.shape[1], d))
    if d == 2:
        _interp.interp2_grad(flat, dims[0], dims[1], pts, out, jac)
    else:
        _interp.interp3_grad(flat, dims[0], dims[1], dims[2], pts, out, jac)
    lead = idx.shape[:-1]
    return out.reshape(*lead, flat.shape[1]), jac.reshape(*lead, flat.shape[1], d)


def interp_array_transpose(weights: np.ndarray, idx: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`interp_array` with respect to the sampled values.

    ``weights`` has shape ``(*idx.shape[:-1], C)``; returns ``(*dims, C)``.
    """
    dims = tuple(dims)
    pts = _points(idx)
    wts = np.ascontiguousarray(weights.reshape(pts.shape[0], -1), dtype=np.float64)
    out = np.zeros((int(np.prod(dims)), wts.shape[1]))
    if len(dims) == 2:
        _interp.interp2_transpose(wts, dims[0], dims[1], pts, out)
    else:
        _interp.interp3_transpose(wts, dims[0], dims[1], dims[2], pts, out)
    return out.reshape(*dims, wts.shape[1])


def warp_displacement_array(disp: np.ndarray, idx: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Evaluate a map ``x + u(x)`` at points: displacement ``u`` is interpolated
    with border clamp, the identity part is evaluated exactly."""
    return coords + interp_array(disp, idx)


# ---------------------------------------------------------------------------
# finite differences on raw arrays


def _sl(axis: int, s: slice) -> tuple:
    return (slice(None),) * axis + (s,)


def diff_array(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central differences in the interior, one-sided at both borders.

    Trailing channel axes of ``f`` are carried along."""
    out = np.empty_like(f)
    out[_sl(axis, slice(1, -1))] = (f[_sl(axis, slice(2, None))] - f[_sl(axis, slice(None, -2))]) * (0.5 / h)
    out[_sl(axis, 0)] = (f[_sl(axis, 1)] - f[_sl(axis, 0)]) / h
    out[_sl(axis, -1)] = (f[_sl(axis, -1)] - f[_sl(axis, -2)]) / h
    return out


def diff_array_transpose(g: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Transpose of :func:`diff_array` along ``axis``."""
    out = np.zeros_like(g)
    inner = g[_sl(axis, slice(1, -1))] * (0.5 / h)
    out[_sl(axis, slice(None, -2))] -= inner
    out[_sl(axis, slice(2, None))] += inner
    first = g[_sl(axis, 0)] / h
    last = g[_sl(axis, -1)] / h
    out[_sl(axis, 0)] -= first
    out[_sl(axis, 1)] += first
    out[_sl(axis, -2)] -= last
    out[_sl(axis, -1)] += last
    return out


def gradient_array(f: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Gradient of a scalar array, shape ``(*dims, d)``."""
    return np.stack([diff_array(f, h, a) for a, h in enumerate(spacing)], axis=-1)


def jacobian_array(vec: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """``J[..., i, j] = d vec_i / d x_j``."""
    return np.stack([diff_array(vec, h, a) for a, h in enumerate(spacing)], axis=-1)


def divergence_array(vec: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    return sum(diff_array(vec[..., a], h, a) for a, h in enumerate(spacing))


# ---------------------------------------------------------------------------
# public operations


def identity_map(grid: GridSpec) -> DeformationMap:
    return DeformationMap(grid, grid.points())


def _channels(f: Field) -> np.ndarray:
    if isinstance(f, ScalarField):
        return f.values
    if isinstance(f, VectorField):
        return f.vectors
    raise TypeError(f"cannot interpolate {type(f).__name__}")


def interpolate(field: Union[ScalarField, VectorField], points: DeformationMap):
    """Sample a scalar or vector field at the physical coordinates held by
    ``points``; the result lives on ``points.grid``."""
    if field.grid.ndim != points.grid.ndim:
        raise DimensionMismatchError(
            f"field is {field.grid.ndim}D but points are {points.grid.ndim}D")
    out = interp_array(_channels(field), field.grid.to_index(points.coords))
    if isinstance(field, ScalarField):
        return ScalarField(points.grid, out)
    return VectorField(points.grid, out)


def compose_maps(outer: DeformationMap, inner: DeformationMap) -> DeformationMap:
    """``result(x) = outer(inner(x))``.

    The outer map is extended beyond its grid as ``y + u(clamp(y))``: its
    displacement is clamped to the border, the identity part is exact.
    """
    if outer.grid.ndim != inner.grid.ndim:
        raise DimensionMismatchError(
            f"outer map is {outer.grid.ndim}D but inner map is {inner.grid.ndim}D")
    idx = outer.grid.to_index(inner.coords)
    return DeformationMap(inner.grid, warp_displacement_array(outer.displacement, idx, inner.coords))


def gradient(f: ScalarField) -> VectorField:
    return VectorField(f.grid, gradient_array(f.values, f.grid.spacing))


def divergence(v: VectorField) -> ScalarField:
    return ScalarField(v.grid, divergence_array(v.vectors, v.grid.spacing))


def jacobian_determinant(phi: DeformationMap) -> ScalarField:
    jac = jacobian_array(phi.coords, phi.grid.spacing)
    return ScalarField(phi.grid, np.linalg.det(jac))


def interior_mask(grid: GridSpec, margin: int = 1) -> np.ndarray:
    """Boolean mask excluding ``margin`` points at every border."""
    mask = np.zeros(grid.dims, dtype=bool)
    mask[tuple(slice(margin, n - margin) for n in grid.dims)] = True
    return mask
