import json
from dataclasses import replace

import pytest

from geoflow.config import RunConfig, apply_override, load_config, parse_config, parse_override
from geoflow.errors import ConfigError
from geoflow.grid import GridSpec
from geoflow.registration import RegConfig


class TestSchema:
    def test_defaults(self):
        cfg = parse_config({})
        assert cfg.seed == 0 and cfg.sampler.K == 2 and cfg.sampler.t_range == (-1.0, 2.0)
        assert cfg.pipeline.n_views == 20

    def test_library_defaults_agree(self):
        g = GridSpec.uniform((64, 64))
        lib = RegConfig()
        assert parse_config({}).reg_config(g) == replace(lib, shoot=lib.shoot.with_kernel(lib.shoot.kernel_for(g)))

    @pytest.mark.parametrize("data", [
        {"sede": 1},
        {"reg": {"sim_wieght": 3}},
        {"synth": {"dims": [5]}},
        {"pipeline": {"variant": "other"}},
        {"kernel": {"sigmas": [1.0, 2.0], "weights": [1.0]}},
        {"pipeline": {"n_out": -1}},
    ])
    def test_rejects(self, data):
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_frozen(self):
        cfg = parse_config({})
        with pytest.raises(Exception):
            cfg.seed = 3

    def test_seed_inheritance(self):
        cfg = parse_config({"seed": 9})
        g = GridSpec.uniform((8, 8))
        assert cfg.sampler_config(g).rng_seed == 9 and cfg.synth_seed() == 9
        cfg = parse_config({"seed": 9, "sampler": {"rng_seed": 2}})
        assert cfg.sampler_config(g).rng_seed == 2

    def test_kernel_sigmas(self):
        g = GridSpec.uniform((11, 11))
        spec = parse_config({"kernel": {"relative": [0.1, 0.2]}}).kernel.spec_for(g)
        assert [s for s, _ in spec.components] == [1.0, 2.0]
        spec = parse_config({"kernel": {"sigmas": [3.0]}}).kernel.spec_for(g)
        assert spec.components == ((3.0, 1.0),)


class TestLoading:
    def test_yaml_and_json(self, tmp_path):
        (tmp_path / "a.yaml").write_text("seed: 4\nreg:\n  sim_weight: 7\n")
        (tmp_path / "b.json").write_text(json.dumps({"seed": 4, "reg": {"sim_weight": 7}}))
        assert parse_config(load_config(tmp_path / "a.yaml")) == parse_config(load_config(tmp_path / "b.json"))

    def test_bad_files(self, tmp_path):
        (tmp_path / "x.yaml").write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "x.yaml")
        (tmp_path / "y.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "y.json")

    def test_overrides(self):
        key, value = parse_override("reg.optimizer.max_iters=[3, 2, 1]")
        data = apply_override({"reg": {"sim_weight": 1.0}}, key, value)
        assert data == {"reg": {"sim_weight": 1.0, "optimizer": {"max_iters": [3, 2, 1]}}}
        assert parse_override("seed=5") == ("seed", 5)
        with pytest.raises(ConfigError):
            parse_override("seed")
        with pytest.raises(ConfigError):
            apply_override({"seed": 1}, "seed.x", 2)

    def test_round_trip_through_dump(self):
        cfg = parse_config({"seed": 3, "pipeline": {"bspline_settings": [[5, 1.0]]}})
        assert parse_config(json.loads(json.dumps(cfg.model_dump(mode="json")))) == cfg
        assert isinstance(cfg, RunConfig)
