"""Geodesic subspaces: convex combinations of registration momenta, shot to
a sampled time.

A sample draws simplex weights ``lam`` and a time ``t``, forms
``m = sum_j lam_j m_j`` and integrates the geodesic from ``m`` to ``t``.
Extrapolation happens for ``t`` outside ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from geoflow.errors import BlowUpError, DimensionMismatchError, SamplingError
from geoflow.grid import DeformationMap, VectorField
from geoflow.shooting import ShootConfig, shoot

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Provenance:
    target_id: str
    regularity: float
    similarity: float
    reason: str = ""


@dataclass(frozen=True, eq=False)
class MomentumSet:
    """Initial momenta registering one source to each of K targets."""

    source_id: str
    momenta: tuple[VectorField, ...]
    provenance: tuple[Provenance, ...] = ()

    def __post_init__(self):
        momenta = tuple(self.momenta)
        if not momenta:
            raise ValueError("a momentum set needs at least one momentum")
        if any(m.grid != momenta[0].grid for m in momenta):
            raise DimensionMismatchError("all momenta must share one grid")
        prov = tuple(self.provenance)
        if prov and len(prov) != len(momenta):
            raise ValueError("need one provenance record per momentum")
        object.__setattr__(self, "momenta", momenta)
        object.__setattr__(self, "provenance", prov)

    @property
    def K(self) -> int:
        return len(self.momenta)

    @property
    def grid(self):
        return self.momenta[0].grid


@dataclass(frozen=True)
class SamplerConfig:
    t_range: tuple[float, float] = (-1.0, 2.0)
    K: int = 2
    rng_seed: int = 0
    shoot: ShootConfig = ShootConfig()

    def __post_init__(self):
        lo, hi = (float(x) for x in self.t_range)
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValueError(f"invalid t_range {self.t_range}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        object.__setattr__(self, "t_range", (lo, hi))


@dataclass(frozen=True, eq=False)
class SubspaceSample:
    lam: tuple[float, ...]
    t: float
    m_tilde: VectorField
    phi_inv: DeformationMap
    phi: DeformationMap
    seed: int
    index: int


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-derived stream: identical for a given (seed, index) however
    samples are scheduled."""
    return np.random.default_rng([int(seed), int(index)])


def _check_simplex(lam: Sequence[float], K: int) -> np.ndarray:
    w = np.asarray(lam, dtype=np.float64)
    if w.shape != (K,):
        raise SamplingError(f"expected {K} weights, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise SamplingError("weights must be finite and nonnegative")
    total = float(w.sum())
    if total == 0.0:
        raise SamplingError("weights sum to zero")
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise SamplingError(f"weights sum to {total}, not 1")
    return w if total == 1.0 else w / total


def convex_combination(mset: MomentumSet, lam: Sequence[float]) -> VectorField:
    """``sum_j lam_j m_j``; weights within 1e-9 of the simplex are renormalized."""
    w = _check_simplex(lam, mset.K)
    nonzero = np.flatnonzero(w)
    if len(nonzero) == 1 and w[nonzero[0]] == 1.0:
        return mset.momenta[nonzero[0]]
    out = np.zeros(mset.momenta[0].vectors.shape)
    for wj, m in zip(w, mset.momenta):
        if wj != 0.0:
            out += wj * m.vectors
    return VectorField(mset.grid, out)


def sample_lambda(K: int, rng: np.random.Generator) -> tuple[float, ...]:
    """Uniform draw from the (K-1)-simplex via normalized exponentials."""
    if K < 1:
        raise SamplingError("K must be >= 1")
    if K == 1:
        return (1.0,)
    e = rng.standard_exponential(K)
    return tuple(float(x) for x in e / e.sum())


def sample_t(cfg: SamplerConfig, rng: np.random.Generator) -> float:
    lo, hi = cfg.t_range
    if lo == hi:
        return lo
    return float(min(rng.uniform(lo, hi), hi))


def draw_sample(mset: MomentumSet, cfg: SamplerConfig, index: int = 0,
                rng: Optional[np.random.Generator] = None,
                lam: Optional[Sequence[float]] = None, t: Optional[float] = None) -> SubspaceSample:
    """Sample ``index`` of the stream ``cfg.rng_seed``.

    ``rng`` continues a caller's stream instead (pipelines draw their pair
    choice first); ``lam``/``t`` force a value. Weights pass through
    :func:`convex_combination` unchanged, so a sample is reproduced
    bit-exactly by forcing its recorded ``lam`` and ``t``.
    """
    if rng is None:
        rng = sample_rng(cfg.rng_seed, index)
    drawn_lam = sample_lambda(mset.K, rng)
    drawn_t = sample_t(cfg, rng)
    lam = tuple(float(x) for x in (drawn_lam if lam is None else lam))
    t = drawn_t if t is None else float(t)
    m_tilde = convex_combination(mset, lam)
    try:
        state = shoot(m_tilde, t, cfg.shoot)
    except BlowUpError as exc:
        raise BlowUpError(f"{exc} (lambda={lam}, t={t}, seed={cfg.rng_seed}, index={index})",
                          exc.step) from exc
    return SubspaceSample(lam, t, m_tilde, state.phi_inv, state.phi, cfg.rng_seed, index)
