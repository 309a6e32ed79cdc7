import numpy as np
import pytest

from geoflow.grid import GridSpec
from geoflow.synthdata import Perturbation, Shape, ShapeSceneSpec, default_scene, generate_population, generate_scene

G = GridSpec.uniform((64, 64))


class TestScene:
    def test_empty(self):
        img, lab = generate_scene(ShapeSceneSpec(G))
        assert np.all(img.values == 0) and np.all(lab.labels == 0) and lab.label_count == 1

    def test_disc_area(self):
        r = 15.0
        spec = ShapeSceneSpec(G, (Shape("ellipse", (31.5, 31.5), (r, r), 1, 0.8),))
        _, lab = generate_scene(spec)
        area = np.pi * r * r
        assert abs(np.sum(lab.labels == 1) - area) / area < 0.02

    def test_anisotropic_spacing_area(self):
        g = GridSpec((64, 32), (0.5, 1.0))
        spec = ShapeSceneSpec(g, (Shape("ellipse", (16.0, 16.0), (10.0, 10.0), 1, 0.8),))
        _, lab = generate_scene(spec)
        area = np.sum(lab.labels == 1) * g.voxel_volume
        assert abs(area - np.pi * 100) / (np.pi * 100) < 0.02

    def test_deterministic_with_noise(self):
        spec = default_scene(G, noise=0.05, rng_seed=4)
        a, b = generate_scene(spec), generate_scene(spec)
        assert np.array_equal(a[0].values, b[0].values)

    def test_validation(self):
        with pytest.raises(ValueError):
            Shape("star", (1, 1), (1, 1), 1, 0.5)
        with pytest.raises(ValueError):
            ShapeSceneSpec(G, (Shape("ellipse", (2.0, 30.0), (5.0, 5.0), 1, 0.5),))
        with pytest.raises(ValueError):
            ShapeSceneSpec(G, (Shape("ellipse", (30.0, 30.0), (5.0, 5.0), 2, 0.5),))

    def test_default_scene_labels(self):
        _, lab = generate_scene(default_scene(G))
        assert lab.label_count == 4
        assert set(np.unique(lab.labels)) == {0, 1, 2, 3}

    def test_3d(self):
        g = GridSpec.uniform((24, 24, 24))
        img, lab = generate_scene(default_scene(g))
        assert img.values.shape == (24, 24, 24) and lab.labels.max() == 3


class TestPopulation:
    def test_zero_scales_copies(self):
        pop = generate_population(default_scene(G), 3, Perturbation(0.0, 0.0, 0.0))
        for img, lab in pop[1:]:
            assert np.array_equal(img.values, pop[0][0].values)
            assert np.array_equal(lab.labels, pop[0][1].labels)

    def test_deterministic_and_varied(self):
        a = generate_population(default_scene(G), 4, rng_seed=3)
        b = generate_population(default_scene(G), 4, rng_seed=3)
        c = generate_population(default_scene(G), 4, rng_seed=4)
        assert all(np.array_equal(x[0].values, y[0].values) for x, y in zip(a, b))
        assert not np.array_equal(a[1][0].values, c[1][0].values)
        assert not np.array_equal(a[1][0].values, a[2][0].values)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            generate_population(default_scene(G), 0)


def test_intensity_range_with_noise():
    sigma = 0.1
    for img, lab in generate_population(default_scene(G, noise=sigma, rng_seed=1), 3, rng_seed=1):
        assert img.values.min() >= 0.0 and img.values.max() <= 1.0 + 3 * sigma
        assert lab.labels.min() >= 0 and lab.labels.max() < lab.label_count
