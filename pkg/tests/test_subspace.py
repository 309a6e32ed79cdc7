import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_momentum
from geoflow.errors import DimensionMismatchError, SamplingError
from geoflow.grid import GridSpec, VectorField, compose_maps, interior_mask
from geoflow.kernel import KernelSpec
from geoflow.shooting import ShootConfig, shoot
from geoflow.subspace import (
    MomentumSet,
    Provenance,
    SamplerConfig,
    convex_combination,
    draw_sample,
    sample_lambda,
    sample_rng,
    sample_t,
)

GRID = GridSpec.uniform((24, 24))
SHOOT = ShootConfig(10, KernelSpec.from_sigmas([2.0, 4.0]))


@pytest.fixture(scope="module")
def mset():
    return MomentumSet("src", (random_momentum(GRID, 1, 4.0), random_momentum(GRID, 2, 4.0)),
                       (Provenance("a", 1.0, 2.0), Provenance("b", 1.5, 2.5)))


class TestMomentumSet:
    def test_validation(self):
        with pytest.raises(ValueError):
            MomentumSet("s", ())
        with pytest.raises(DimensionMismatchError):
            MomentumSet("s", (VectorField.zeros(GRID), VectorField.zeros(GridSpec.uniform((5, 5)))))
        with pytest.raises(ValueError):
            MomentumSet("s", (VectorField.zeros(GRID),), (Provenance("a", 0, 0), Provenance("b", 0, 0)))


class TestConvexCombination:
    def test_one_hot_bit_exact(self, mset):
        assert np.array_equal(convex_combination(mset, (1.0, 0.0)).vectors, mset.momenta[0].vectors)
        assert np.array_equal(convex_combination(mset, (0.0, 1.0)).vectors, mset.momenta[1].vectors)

    def test_opposite_momenta_cancel(self):
        m = random_momentum(GRID, 5)
        z = convex_combination(MomentumSet("s", (m, -m)), (0.5, 0.5))
        assert np.all(z.vectors == 0)
        assert np.array_equal(shoot(z, 1.0, SHOOT).phi_inv.coords, GRID.points())

    def test_weighted_sum(self, mset):
        out = convex_combination(mset, (0.3, 0.7)).vectors
        assert np.allclose(out, 0.3 * mset.momenta[0].vectors + 0.7 * mset.momenta[1].vectors, atol=1e-15)

    def test_near_simplex_renormalized(self, mset):
        a = convex_combination(mset, (0.3 + 5e-10, 0.7)).vectors
        assert np.allclose(a, convex_combination(mset, (0.3, 0.7)).vectors, atol=1e-9)

    @pytest.mark.parametrize("lam", [(0.5,), (0.5, 0.5, 0.0), (-0.1, 1.1), (0.0, 0.0), (0.5, 0.6), (np.nan, 1.0)])
    def test_invalid_weights(self, mset, lam):
        with pytest.raises(SamplingError):
            convex_combination(mset, lam)


class TestSampling:
    def test_k1(self):
        rng = np.random.default_rng(0)
        assert all(sample_lambda(1, rng) == (1.0,) for _ in range(10))
        with pytest.raises(SamplingError):
            sample_lambda(0, rng)

    @pytest.mark.parametrize("K", [2, 3, 5])
    def test_uniform_simplex_means(self, K):
        rng = np.random.default_rng(K)
        draws = np.array([sample_lambda(K, rng) for _ in range(100_000)])
        assert np.allclose(draws.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(draws >= 0)
        assert np.all(np.abs(draws.mean(axis=0) - 1.0 / K) < 0.01)

    def test_simplex_marginal_is_beta(self):
        """For K=3 the first weight is Beta(1, 2): variance 1/18."""
        rng = np.random.default_rng(9)
        draws = np.array([sample_lambda(3, rng)[0] for _ in range(50_000)])
        assert draws.var() == pytest.approx(1.0 / 18.0, abs=0.003)

    def test_t_uniform(self):
        cfg = SamplerConfig((-1.0, 2.0))
        rng = np.random.default_rng(1)
        ts = np.array([sample_t(cfg, rng) for _ in range(100_000)])
        assert abs(ts.mean() - 0.5) < 0.02
        assert ts.min() >= -1.0 and ts.max() <= 2.0
        assert abs(ts.var() - 9.0 / 12.0) < 0.02

    def test_t_degenerate(self):
        assert sample_t(SamplerConfig((0.0, 0.0)), np.random.default_rng(0)) == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig((2.0, 1.0))
        with pytest.raises(ValueError):
            SamplerConfig(K=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 10**6))
    def test_counter_streams_reproducible(self, seed, index):
        a = sample_rng(seed, index).random(3)
        b = sample_rng(seed, index).random(3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, sample_rng(seed, index + 1).random(3))


class TestDrawSample:
    def test_forced_t0_identity(self, mset):
        s = draw_sample(mset, SamplerConfig(K=2, shoot=SHOOT), t=0.0)
        assert np.array_equal(s.phi_inv.coords, GRID.points())
        assert np.array_equal(s.phi.coords, GRID.points())

    def test_one_hot_t1_matches_single_shot(self, mset):
        s = draw_sample(mset, SamplerConfig(K=2, shoot=SHOOT), lam=(0.0, 1.0), t=1.0)
        assert np.array_equal(s.phi_inv.coords, shoot(mset.momenta[1], 1.0, SHOOT).phi_inv.coords)

    def test_deterministic(self, mset):
        cfg = SamplerConfig(K=2, rng_seed=42, shoot=SHOOT)
        a, b = draw_sample(mset, cfg, 3), draw_sample(mset, cfg, 3)
        assert a.lam == b.lam and a.t == b.t
        assert np.array_equal(a.phi_inv.coords, b.phi_inv.coords)
        assert (a.seed, a.index) == (42, 3)

    def test_forcing_recorded_values_reproduces(self, mset):
        cfg = SamplerConfig(K=2, rng_seed=5, shoot=SHOOT)
        a = draw_sample(mset, cfg, 1)
        b = draw_sample(mset, cfg, 99, lam=a.lam, t=a.t)
        assert np.array_equal(a.phi_inv.coords, b.phi_inv.coords)

    def test_sample_properties(self, mset):
        cfg = SamplerConfig((-1.0, 2.0), K=2, rng_seed=0, shoot=SHOOT)
        mask = interior_mask(GRID, 2)
        for i in range(4):
            s = draw_sample(mset, cfg, i)
            assert abs(sum(s.lam) - 1.0) < 1e-12 and -1.0 <= s.t <= 2.0
            assert np.max(np.abs(compose_maps(s.phi, s.phi_inv).displacement[mask])) < 0.5


class TestConvexityControl:
    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3).filter(lambda w: sum(w) > 1e-3),
           st.integers(0, 1000))
    def test_k_norm_bounded_by_largest_momentum(self, w, seed):
        from geoflow.kernel import inner_product, smooth

        k = SHOOT.kernel
        ms = MomentumSet("s", tuple(random_momentum(GRID, seed + j, scale=1.0 + j) for j in range(3)))
        lam = tuple(x / sum(w) for x in w)
        m = convex_combination(ms, lam)
        norm = lambda f: inner_product(f, smooth(f, k)) ** 0.5
        assert norm(m) <= max(norm(x) for x in ms.momenta) * (1 + 1e-9)
