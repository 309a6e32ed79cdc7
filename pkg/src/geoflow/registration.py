"""Image registration by geodesic shooting: estimate the initial momentum
minimizing ``1/2 <m0, K m0> + sim_weight * Sim(I0 o phi_inv(1), I1)``.

Gradients are exact for the discretized energy: the forward integrator's steps
are replayed in reverse through their transposes (RK4 stages, the EPDiff
right-hand side, the semi-Lagrangian map update and the final image
interpolation). Gradients are returned as Riesz representers under
:func:`geoflow.kernel.inner_product`, so the directional derivative along
``dm`` is ``inner_product(grad, dm)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from geoflow.errors import BlowUpError, GridMismatchError, RegistrationError
from geoflow.grid import GridSpec, ScalarField, VectorField, interp_array, interp_array_grad
from geoflow.kernel import KernelSpec, smooth_array
from geoflow.shooting import ShootConfig, _Stepper, _split_time

log = logging.getLogger(__name__)

STALL_WINDOW = 5


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: tuple[int, ...] = (60, 50, 25)
    step_size: float = 0.5
    shrink: float = 0.5
    grow: float = 1.5
    grad_tol: float = 1e-8
    max_backtracks: int = 20
    rel_tol: float = 1e-4  # stop a level when 5 iterations gain less than this fraction
    step_rule: str = "bb"  # "bb" (Barzilai-Borwein trial step) or "grow"
    precondition: bool = True  # descend along -K grad instead of -grad

    def __post_init__(self):
        if self.step_rule not in ("bb", "grow"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        iters = (self.max_iters,) if isinstance(self.max_iters, int) else tuple(int(i) for i in self.max_iters)
        if not iters or any(i < 1 for i in iters):
            raise ValueError("max_iters must be >= 1 at every level")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.step_size <= 0 or self.grow < 1 or self.grad_tol < 0 or self.rel_tol < 0:
            raise ValueError("invalid optimizer settings")
        object.__setattr__(self, "max_iters", iters)


@dataclass(frozen=True)
class RegConfig:
    similarity: str = "ssd"
    lncc_window: int = 9
    sim_weight: float = 5000.0
    shoot: ShootConfig = ShootConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    multiscale: tuple[int, ...] = (4, 2, 1)

    def __post_init__(self):
        if self.similarity not in ("ssd", "lncc"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.similarity == "lncc" and (self.lncc_window < 3 or self.lncc_window % 2 == 0):
            raise ValueError("lncc_window must be odd and >= 3")
        if not self.sim_weight > 0:
            raise ValueError("sim_weight must be positive")
        factors = tuple(int(f) for f in self.multiscale)
        if not factors or any(f < 1 for f in factors) or any(b >= a for a, b in zip(factors, factors[1:])):
            raise ValueError("multiscale factors must be positive integers in descending order")
        object.__setattr__(self, "multiscale", factors)
        iters = self.optimizer.max_iters
        if len(iters) == 1 and len(factors) > 1:
            object.__setattr__(self, "optimizer", replace(self.optimizer, max_iters=iters * len(factors)))
        elif len(iters) != len(factors):
            raise ValueError("need one max_iters entry per multiscale level")


class TraceEntry(NamedTuple):
    level: int
    iteration: int
    regularity: float
    similarity: float

    @property
    def total(self) -> float:
        return self.regularity + self.similarity


@dataclass(frozen=True, eq=False)
class RegResult:
    m0: VectorField
    energy_trace: list[TraceEntry]
    final_warped: ScalarField
    converged: bool
    reason: str
    initial_ssd: float
    final_ssd: float


# ---------------------------------------------------------------------------
# similarity measures: value and derivative w.r.t. the warped image


def ssd(a: ScalarField, b: ScalarField) -> float:
    """Sum of squared differences times voxel volume."""
    if a.grid != b.grid:
        raise GridMismatchError("ssd needs images on one grid")
    return float(np.sum((a.values - b.values) ** 2) * a.grid.voxel_volume)


def _box_matrix(n: int, radius: int) -> np.ndarray:
    idx = np.arange(n)
    band = (np.abs(idx[:, None] - idx[None, :]) <= radius).astype(float)
    return band / band.sum(axis=1, keepdims=True)


class _Similarity:
    def __init__(self, cfg: RegConfig, target: np.ndarray, grid: GridSpec):
        self.kind = cfg.similarity
        self.weight = cfg.sim_weight
        self.vol = grid.voxel_volume
        self.target = target
        if self.kind == "lncc":
            r = cfg.lncc_window // 2
            self.boxes = [_box_matrix(n, r) for n in grid.dims]
            self.mu_t = self._mean(target)
            self.var_t = self._mean(target * target) - self.mu_t**2

    def _mean(self, f, transpose=False):
        for a, b in enumerate(self.boxes):
            mat = b.T if transpose else b
            f = np.moveaxis(np.tensordot(mat, f, axes=(1, a)), 0, a)
        return f

    def value_and_grad(self, warped: np.ndarray, need_grad: bool = True):
        if self.kind == "ssd":
            diff = warped - self.target
            val = self.weight * self.vol * float(np.sum(diff * diff))
            return val, (2.0 * self.weight * self.vol * diff if need_grad else None)
        eps = 1e-5
        mu_w = self._mean(warped)
        cov = self._mean(warped * self.target) - mu_w * self.mu_t
        var_w = self._mean(warped * warped) - mu_w**2
        den = var_w * self.var_t + eps
        cc = cov * cov / den
        val = self.weight * self.vol * float(np.sum(1.0 - cc))
        if not need_grad:
            return val, None
        g = -self.weight * self.vol
        a = g * 2.0 * cov / den
        b = g * (-cov * cov * self.var_t / den**2)
        grad = (self.target * self._mean(a, True) - self._mean(a * self.mu_t, True)
                + 2.0 * warped * self._mean(b, True) - 2.0 * self._mean(b * mu_w, True))
        return val, grad


# ---------------------------------------------------------------------------
# energy and adjoint gradient on one grid


def _step_sizes(t: float, spu: int) -> list[float]:
    full, partial = _split_time(t, spu)
    sign = 1.0 if t >= 0 else -1.0
    hs = [sign * ((k + 1) / spu - k / spu) for k in range(full)]
    if partial:
        hs.append(sign * partial)
    return hs


class _Problem:
    """Energy/gradient evaluator for one image pair on one grid."""

    def __init__(self, source: np.ndarray, target: np.ndarray, grid: GridSpec,
                 kernel: KernelSpec, cfg: RegConfig):
        self.grid = grid
        self.source = source
        self.stepper = _Stepper(grid, kernel)
        self.sim = _Similarity(cfg, target, grid)
        self.steps = _step_sizes(1.0, cfg.shoot.steps_per_unit_time)
        self.vol = grid.voxel_volume

    def forward(self, m0: np.ndarray, store: bool):
        st = self.stepper
        tape = []
        m = m0
        v = st.velocity(m)
        v0 = v
        disp = np.zeros_like(m0)
        for k, h in enumerate(self.steps):
            stages = st.rk_stages(m, h, v)
            new_disp, cache = st.inverse_map_update(disp, stages["w"], h)
            if store:
                tape.append((h, stages, disp, cache))
            m = stages["m_new"]
            v = st.velocity(m)
            disp = new_disp
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(disp))):
                raise BlowUpError(f"non-finite state at integration step {k + 1}", step=k + 1)
        idx = st.to_index(st.points + disp)
        return v0, disp, idx, tape

    def evaluate(self, m0: np.ndarray, need_grad: bool = True):
        v0, disp, idx, tape = self.forward(m0, store=need_grad)
        reg = 0.5 * self.vol * float(np.sum(m0 * v0))
        if not need_grad:
            warped = interp_array(self.source, idx)
            sim, _ = self.sim.value_and_grad(warped, need_grad=False)
            return reg, sim, None, warped
        warped, jac = interp_array_grad(self.source, idx)
        warped = warped[..., 0]
        sim, dsim = self.sim.value_and_grad(warped)
        lam_disp = dsim[..., None] * jac[..., 0, :] * self.stepper.inv_spacing
        lam_m = np.zeros_like(m0)
        for h, stages, disp_k, cache in reversed(tape):
            lam_disp, lam_w = self.stepper.inverse_map_adjoint(disp_k, stages["w"], h, cache, lam_disp)
            lam_m = self.stepper.rk_adjoint(stages, h, lam_m, lam_w)
        grad = v0 + lam_m / self.vol
        return reg, sim, grad, warped


def _check_pair(I0: ScalarField, I1: ScalarField) -> None:
    if I0.grid != I1.grid:
        raise GridMismatchError("source and target must share a grid")


def energy(m0: VectorField, I0: ScalarField, I1: ScalarField, cfg: RegConfig = RegConfig()):
    """``(total, regularity, similarity)`` of the shooting energy."""
    _check_pair(I0, I1)
    if m0.grid != I0.grid:
        raise GridMismatchError("momentum and images must share a grid")
    prob = _Problem(I0.values, I1.values, I0.grid, cfg.shoot.kernel_for(I0.grid), cfg)
    reg, sim, _, _ = prob.evaluate(m0.vectors, need_grad=False)
    return reg + sim, reg, sim


def energy_gradient(m0: VectorField, I0: ScalarField, I1: ScalarField, cfg: RegConfig = RegConfig()) -> VectorField:
    """Exact gradient of the discretized energy w.r.t. ``m0``."""
    _check_pair(I0, I1)
    if m0.grid != I0.grid:
        raise GridMismatchError("momentum and images must share a grid")
    prob = _Problem(I0.values, I1.values, I0.grid, cfg.shoot.kernel_for(I0.grid), cfg)
    _, _, grad, _ = prob.evaluate(m0.vectors)
    return VectorField(I0.grid, grad)


# ---------------------------------------------------------------------------
# multiscale optimizer


def coarse_grid(grid: GridSpec, factor: int) -> GridSpec:
    dims = tuple((n - 1) // factor + 1 for n in grid.dims)
    if any(n < 2 for n in dims):
        raise ValueError(f"downsample factor {factor} too large for dims {grid.dims}")
    return GridSpec(dims, tuple(s * factor for s in grid.spacing), grid.origin)


def downsample(image: ScalarField, factor: int) -> ScalarField:
    if factor == 1:
        return image
    g = coarse_grid(image.grid, factor)
    smoothed = ndimage.gaussian_filter(image.values, sigma=factor / 2.0, mode="nearest")
    sl = tuple(slice(0, n * factor, factor) for n in g.dims)
    return ScalarField(g, smoothed[sl])


def upsample_momentum(m: np.ndarray, coarse: GridSpec, fine: GridSpec) -> np.ndarray:
    """Multilinear upsampling. The kernel weights are normalized per grid, so
    momentum behaves as a density and needs no rescaling between levels."""
    return interp_array(m, coarse.to_index(fine.points()))


def _optimize_level(prob: _Problem, m0: np.ndarray, iters: int, opt: OptimizerConfig,
                    level: int, trace: list):
    kernel_apply = prob.stepper.velocity if opt.precondition else (lambda g: g)
    reg, sim, grad, _ = prob.evaluate(m0)
    trace.append(TraceEntry(level, 0, reg, sim))
    energy_now = reg + sim
    alpha = None
    m = m0
    for it in range(1, iters + 1):
        gnorm = math.sqrt(float(np.sum(grad * grad)) * prob.vol)
        if gnorm <= opt.grad_tol:
            return m, True, "gradient_tolerance"
        direction = -kernel_apply(grad)
        if alpha is None:
            vmax = float(np.max(np.abs(kernel_apply(direction))))
            alpha = opt.step_size * min(prob.grid.spacing) / max(vmax, 1e-300)
        accepted = False
        for _ in range(opt.max_backtracks):
            trial = m + alpha * direction
            try:
                # overly long trial steps may overflow before the blow-up check fires
                with np.errstate(over="ignore", invalid="ignore"):
                    t_reg, t_sim, t_grad, _ = prob.evaluate(trial)
            except BlowUpError:
                alpha *= opt.shrink
                continue
            if t_reg + t_sim < energy_now:
                accepted = True
                break
            alpha *= opt.shrink
        if not accepted:
            return m, True, "line_search_stalled"
        step, change = trial - m, t_grad - grad
        m, grad, energy_now = trial, t_grad, t_reg + t_sim
        trace.append(TraceEntry(level, it, t_reg, t_sim))
        if it >= STALL_WINDOW and trace[-1 - STALL_WINDOW].level == level:
            if trace[-1 - STALL_WINDOW].total - energy_now < opt.rel_tol * energy_now:
                return m, True, "energy_stalled"
        alpha *= opt.grow
        if opt.step_rule == "bb":
            # second Barzilai-Borwein step for the preconditioned direction
            curv = float(np.sum(step * change))
            pchange = kernel_apply(change)
            denom = float(np.sum(change * pchange))
            if curv > 0 and denom > 0:
                alpha = curv / denom
    return m, False, "max_iters"


def register(I0: ScalarField, I1: ScalarField, cfg: RegConfig = RegConfig()) -> RegResult:
    """Estimate the initial momentum warping ``I0`` onto ``I1``.

    The returned momentum lives on the input grid; ``interpolate(I0,
    shoot(m0, 1).phi_inv)`` approximates ``I1``.
    """
    _check_pair(I0, I1)
    if not (np.all(np.isfinite(I0.values)) and np.all(np.isfinite(I1.values))):
        raise RegistrationError("non-finite intensities")
    fine = I0.grid
    kernel = cfg.shoot.kernel_for(fine)
    trace: list[TraceEntry] = []
    m = None
    prev_grid = None
    converged, reason = False, "max_iters"
    for level, (factor, iters) in enumerate(zip(cfg.multiscale, cfg.optimizer.max_iters)):
        src = downsample(I0, factor)
        tgt = downsample(I1, factor)
        g = src.grid
        if m is None:
            m = np.zeros((*g.dims, g.ndim))
        else:
            m = upsample_momentum(m, prev_grid, g)
        prob = _Problem(src.values, tgt.values, g, kernel, cfg)
        try:
            m, converged, reason = _optimize_level(prob, m, iters, cfg.optimizer, level, trace)
        except BlowUpError as exc:
            raise RegistrationError(f"shooting blew up at level {level}: {exc}") from exc
        log.debug("level %d (factor %d): %s after %d entries", level, factor, reason, len(trace))
        prev_grid = g
    prob = _Problem(I0.values, I1.values, fine, kernel, cfg)
    _, _, _, warped = prob.evaluate(m, need_grad=False)
    if not np.all(np.isfinite(warped)):
        raise RegistrationError("non-finite energy")
    final = ScalarField(fine, warped[..., 0] if warped.ndim > fine.ndim else warped)
    return RegResult(
        m0=VectorField(fine, m),
        energy_trace=trace,
        final_warped=final,
        converged=converged,
        reason=reason,
        initial_ssd=ssd(I0, I1),
        final_ssd=ssd(final, I1),
    )


def build_momentum_set(Ic: ScalarField, targets: Sequence[ScalarField], cfg: RegConfig = RegConfig(),
                       source_id: str = "source", target_ids: Optional[Sequence[str]] = None):
    """Register ``Ic`` to every target; the momenta span a geodesic subspace."""
    from geoflow.subspace import MomentumSet, Provenance

    if not targets:
        raise RegistrationError("build_momentum_set needs at least one target")
    ids = [str(i) for i in range(len(targets))] if target_ids is None else [str(i) for i in target_ids]
    if len(ids) != len(targets):
        raise ValueError("need one id per target")
    momenta, prov = [], []
    for k, (tgt, tid) in enumerate(zip(targets, ids)):
        try:
            res = register(Ic, tgt, cfg)
        except (RegistrationError, GridMismatchError) as exc:
            raise RegistrationError(f"registration to target {k} ({tid}) failed: {exc}") from exc
        last = res.energy_trace[-1]
        momenta.append(res.m0)
        prov.append(Provenance(tid, last.regularity, last.similarity, res.reason))
    return MomentumSet(source_id, tuple(momenta), tuple(prov))
