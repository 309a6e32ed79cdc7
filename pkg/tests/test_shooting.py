import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_momentum
from geoflow.errors import BlowUpError
from geoflow.grid import GridSpec, VectorField, compose_maps, identity_map, interior_mask, jacobian_determinant
from geoflow.kernel import KernelSpec, inner_product, smooth, smooth_array
from geoflow.shooting import (
    ShootConfig,
    epdiff_rhs,
    epdiff_rhs_adjoint,
    epdiff_rhs_adjoint_reference,
    epdiff_rhs_array,
    epdiff_rhs_reference,
    shoot,
    shoot_arrays,
    shoot_sequence,
    step_count,
)

GRID = GridSpec.uniform((32, 32))
KERNEL = KernelSpec.from_sigmas([2.0, 4.0])
CFG = ShootConfig(20, KERNEL)


@pytest.fixture(scope="module")
def m0():
    return random_momentum(GRID, 7, scale=6.0)


class TestEpdiffRhs:
    def test_zero_momentum(self):
        v = random_momentum(GRID, 1)
        assert np.all(epdiff_rhs(VectorField.zeros(GRID), v).vectors == 0)

    def test_zero_velocity(self):
        m = random_momentum(GRID, 1)
        assert np.all(epdiff_rhs(m, VectorField.zeros(GRID)).vectors == 0)

    def test_symbolic_1d_analog(self):
        """Fields varying along x only: rhs_x = -(2 v' m + m' v)."""
        n = 128
        h = 2 * np.pi / (n - 1)
        g = GridSpec((n, 8), (h, h))
        x = g.points()[..., 0]
        m = np.stack([np.sin(x), np.zeros_like(x)], -1)
        v = np.stack([0.5 * np.cos(2 * x) + 0.3, np.zeros_like(x)], -1)
        out = epdiff_rhs(VectorField(g, m), VectorField(g, v)).vectors
        dv = -np.sin(2 * x)
        dm = np.cos(x)
        expect = -(2 * dv * np.sin(x) + dm * (0.5 * np.cos(2 * x) + 0.3))
        inner = (slice(2, -2), slice(None))
        assert np.max(np.abs(out[inner][..., 0] - expect[inner])) < 1e-2  # O(h^2), h ~ 0.05
        assert np.max(np.abs(out[..., 1])) < 1e-12

    def test_symbolic_2d_second_order(self):
        """Interior error against the continuous formula shrinks ~4x per halving."""
        errs = []
        for n in (33, 65):
            h = 1.0 / (n - 1)
            g = GridSpec((n, n), (h, h))
            p = g.points()
            x, y = p[..., 0], p[..., 1]
            m = np.stack([np.sin(3 * x) * y, np.cos(2 * y) + x], -1)
            v = np.stack([x * x * y, np.sin(x + y)], -1)
            # analytic derivatives
            dm = np.empty((*g.dims, 2, 2))
            dm[..., 0, 0], dm[..., 0, 1] = 3 * np.cos(3 * x) * y, np.sin(3 * x)
            dm[..., 1, 0], dm[..., 1, 1] = 1.0, -2 * np.sin(2 * y)
            dv = np.empty((*g.dims, 2, 2))
            dv[..., 0, 0], dv[..., 0, 1] = 2 * x * y, x * x
            dv[..., 1, 0], dv[..., 1, 1] = np.cos(x + y), np.cos(x + y)
            div = dv[..., 0, 0] + dv[..., 1, 1]
            expect = -(div[..., None] * m + np.einsum("...ji,...j->...i", dv, m) + np.einsum("...ij,...j->...i", dm, v))
            out = epdiff_rhs(VectorField(g, m), VectorField(g, v)).vectors
            k = (n - 1) // 16
            inner = (slice(k, -k), slice(k, -k))
            errs.append(np.max(np.abs(out[inner] - expect[inner])))
        assert errs[1] < errs[0] / 3.0

    def test_compiled_matches_reference(self):
        g = GridSpec((9, 11), (0.5, 1.5))
        rng = np.random.default_rng(3)
        m, v, mu = (rng.normal(size=(9, 11, 2)) for _ in range(3))
        assert np.allclose(epdiff_rhs_array(m, v, g.spacing), epdiff_rhs_reference(m, v, g.spacing), atol=1e-12)
        got = epdiff_rhs_adjoint(m, v, mu, g.spacing)
        ref = epdiff_rhs_adjoint_reference(m, v, mu, g.spacing)
        for a, b in zip(got, ref):
            assert np.allclose(a, b, atol=1e-12)

    def test_compiled_matches_reference_3d(self):
        g = GridSpec((5, 6, 4), (1.0, 0.5, 2.0))
        rng = np.random.default_rng(4)
        m, v = (rng.normal(size=(5, 6, 4, 3)) for _ in range(2))
        assert np.allclose(epdiff_rhs_array(m, v, g.spacing), epdiff_rhs_reference(m, v, g.spacing), atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_adjoint_identity(self, seed):
        """The rhs is bilinear, so its transposes satisfy exact dot-product tests."""
        g = GridSpec((7, 9), (1.0, 0.5))
        rng = np.random.default_rng(seed)
        m, v, mu, dm, dv = (rng.normal(size=(7, 9, 2)) for _ in range(5))
        lam_m, lam_v = epdiff_rhs_adjoint(m, v, mu, g.spacing)
        assert np.sum(epdiff_rhs_array(dm, v, g.spacing) * mu) == pytest.approx(np.sum(dm * lam_m), rel=1e-10, abs=1e-10)
        assert np.sum(epdiff_rhs_array(m, dv, g.spacing) * mu) == pytest.approx(np.sum(dv * lam_v), rel=1e-10, abs=1e-10)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_discrete_energy_identity(self, seed):
        """<rhs(m, Km), Km> vanishes, so the semi-discrete flow conserves <m, Km>."""
        m = np.random.default_rng(seed).normal(size=(12, 10, 2))
        g = GridSpec.uniform((12, 10))
        v = smooth_array(m, g, KERNEL)
        r = epdiff_rhs_array(m, v, g.spacing)
        assert abs(np.sum(r * v)) < 1e-10 * np.sum(np.abs(r)) * np.max(np.abs(v))


class TestShoot:
    def test_zero_momentum(self):
        s = shoot(VectorField.zeros(GRID), 1.3, CFG)
        x = GRID.points()
        assert np.array_equal(s.phi.coords, x) and np.array_equal(s.phi_inv.coords, x)
        assert np.all(s.m.vectors == 0)

    def test_t0_identity(self, m0):
        s = shoot(m0, 0.0, CFG)
        assert np.array_equal(s.phi_inv.coords, identity_map(GRID).coords)
        assert np.array_equal(s.phi.coords, identity_map(GRID).coords)
        assert np.array_equal(s.m.vectors, m0.vectors)

    def test_velocity_is_smoothed_momentum(self, m0):
        s = shoot(m0, 0.7, CFG)
        assert np.allclose(s.v.vectors, smooth(s.m, KERNEL).vectors, atol=1e-13)

    def test_step_count(self):
        assert step_count(0.0, 20) == 0
        assert step_count(1.0, 20) == 20
        assert step_count(-0.51, 20) == 11
        assert step_count(1e-4, 20) == 1
        with pytest.raises(ValueError):
            ShootConfig(0)

    def test_self_convergence(self):
        m = random_momentum(GRID, 11, scale=4.0)
        coarse = shoot(m, 1.0, ShootConfig(20, KERNEL)).phi_inv.coords
        fine = shoot(m, 1.0, ShootConfig(320, KERNEL)).phi_inv.coords
        assert np.max(np.abs(coarse - fine)) < 0.01

    def test_energy_conserved(self, m0):
        states = shoot_sequence(m0, np.linspace(0, 1, 6), CFG)
        e = np.array([inner_product(s.m, s.v) for s in states])
        assert np.max(np.abs(e - e[0])) / e[0] < 0.01

    def test_time_reversal(self, m0):
        """Backward shooting runs the same arithmetic as shooting the negated momentum."""
        a = shoot(m0, -0.8, CFG)
        b = shoot(-m0, 0.8, CFG)
        assert np.array_equal(a.phi_inv.coords, b.phi_inv.coords)
        assert np.array_equal(a.phi.coords, b.phi.coords)
        assert np.array_equal(a.m.vectors, -b.m.vectors)

    def test_inverse_consistency(self, m0):
        mask = interior_mask(GRID, 2)
        for s in shoot_sequence(m0, [-1.0, -0.3, 0.5, 1.0, 2.0], CFG):
            for comp in (compose_maps(s.phi, s.phi_inv), compose_maps(s.phi_inv, s.phi)):
                assert np.max(np.abs(comp.displacement[mask])) < 0.5

    def test_diffeomorphic_over_extrapolation(self, m0):
        for s in shoot_sequence(m0, [-3.0, -1.0, 2.0, 4.0], CFG):
            assert jacobian_determinant(s.phi_inv).values.min() > 0

    def test_3d(self):
        g = GridSpec.uniform((8, 9, 7))
        m = random_momentum(g, 2, scale=2.0, smooth_sigma=1.0)
        cfg = ShootConfig(10, KernelSpec.from_sigmas([1.5]))
        s = shoot(m, 1.0, cfg)
        assert jacobian_determinant(s.phi_inv).values.min() > 0
        assert np.max(np.abs(compose_maps(s.phi, s.phi_inv).displacement[2:-2, 2:-2, 2:-2])) < 0.5

    def test_nonfinite_is_blow_up(self):
        bad = np.zeros((*GRID.dims, 2))
        bad[3, 3, 0] = np.inf
        with pytest.raises(BlowUpError) as info:
            shoot_arrays(bad, GRID, KERNEL, [1.0], 20)
        assert info.value.step == 0


class TestShootSequence:
    def test_zero_time(self, m0):
        (s,) = shoot_sequence(m0, [0.0], CFG)
        assert np.array_equal(s.phi_inv.coords, GRID.points())

    def test_aligned_bit_identical(self, m0):
        (s,) = shoot_sequence(m0, [1.0], CFG)
        assert np.array_equal(s.phi_inv.coords, shoot(m0, 1.0, CFG).phi_inv.coords)

    def test_matches_independent_calls(self, m0):
        ts = [-1.0, -0.33, 0.5, 0.77, 2.0]
        for s in shoot_sequence(m0, ts, CFG):
            ref = shoot(m0, s.t, CFG)
            assert np.max(np.abs(s.phi_inv.coords - ref.phi_inv.coords)) < 1e-12
            assert np.max(np.abs(s.phi.coords - ref.phi.coords)) < 1e-12

    def test_monotone_magnitude(self, m0):
        states = shoot_sequence(m0, [-1.0, 0.5, 2.0], CFG)
        mag = {s.t: np.max(np.abs(s.phi_inv.displacement)) for s in states}
        assert mag[0.5] < mag[-1.0] < mag[2.0]

    def test_rejects_unsorted(self, m0):
        with pytest.raises(ValueError):
            shoot_sequence(m0, [1.0, 0.5], CFG)


class TestConvergenceOrder:
    def test_doubling_steps_halves_error(self):
        m = random_momentum(GRID, 21, scale=5.0)
        ref = shoot(m, 1.0, ShootConfig(320, KERNEL)).phi_inv.coords
        err = [np.max(np.abs(shoot(m, 1.0, ShootConfig(n, KERNEL)).phi_inv.coords - ref)) for n in (10, 20, 40)]
        assert err[1] <= err[0] / 2 and err[2] <= err[1] / 2
