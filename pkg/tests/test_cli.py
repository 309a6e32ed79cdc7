import json
from pathlib import Path

import numpy as np
import pytest

from geoflow.cli import main
from geoflow.io import read_field

SMALL = """
seed: 5
steps_per_unit_time: 10
synth: {dims: [24, 24], n: 5}
reg: {sim_weight: 2000, multiscale: [2, 1], optimizer: {max_iters: [15, 10]}}
pipeline: {n_out: 3, n_views: 2, test_indices: [4]}
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.yaml").write_text(SMALL)
    assert main(["gen", "--config", str(d / "small.yaml"), "--out", str(d / "ds")]) == 0
    return d


class TestBasics:
    def test_gen_deterministic(self, workspace, capsys):
        code, out, _ = run(capsys, "gen", "--config", workspace / "small.yaml", "--out", workspace / "ds2")
        assert code == 0 and json.loads(out)["images"] == 5
        a, b = files(workspace / "ds"), files(workspace / "ds2")
        assert a == b

    def test_register_identical(self, workspace, capsys, tmp_path):
        img = workspace / "ds" / "img000.image.gf"
        code, out, _ = run(capsys, "register", "--config", workspace / "small.yaml", "--source", img,
                           "--target", img, "--out", tmp_path / "r")
        assert code == 0 and json.loads(out)["momentum_norm_below_tolerance"] is True

    def test_shoot_t0_identity(self, workspace, capsys, tmp_path):
        img = workspace / "ds" / "img000.image.gf"
        tgt = workspace / "ds" / "img001.image.gf"
        run(capsys, "register", "--config", workspace / "small.yaml", "--source", img, "--target", tgt,
            "--out", tmp_path / "r")
        code, out, _ = run(capsys, "shoot", "--config", workspace / "small.yaml", "--momentum", tmp_path / "r" / "m0.gf",
                           "--t", 0, 1, "--out", tmp_path / "s")
        assert code == 0
        phi_inv = read_field(tmp_path / "s" / "phi_inv_t+0.0000.gf", kind="map")
        assert np.array_equal(phi_inv.coords, phi_inv.grid.points())
        assert json.loads(out)["min_jacobian_phi_inv"]["+1.0000"] > 0

    def test_subspace_grid_export(self, workspace, capsys, tmp_path):
        code, out, _ = run(capsys, "subspace", "--config", workspace / "small.yaml", "--dataset", workspace / "ds",
                           "--out", tmp_path / "ss", "--n-samples", 1, "--grid-lambdas", 0, 0.5, 1,
                           "--grid-times", -1, 0, 2)
        assert code == 0 and json.loads(out)["grid_cells"] == 9
        names = sorted(p.name for p in (tmp_path / "ss" / "grid").iterdir())
        assert len(names) == 9 and "lam_0.500_0.500_t_+2.000.png" in names

    def test_dice_and_jacobian(self, workspace, capsys):
        lab = workspace / "ds" / "img000.labels.gf"
        code, out, _ = run(capsys, "dice", "--a", lab, "--b", lab)
        assert code == 0 and json.loads(out)["mean"] == 1.0

    def test_export(self, workspace, capsys, tmp_path):
        code, _, _ = run(capsys, "export", "--field", workspace / "ds" / "img000.labels.gf", "--png", tmp_path / "l.png")
        assert code == 0 and (tmp_path / "l.png").exists()


class TestErrors:
    def test_unknown_config_key(self, workspace, capsys, tmp_path):
        code, _, err = run(capsys, "gen", "--set", "synth.bogus=1", "--out", tmp_path / "x")
        assert code != 0 and json.loads(err.strip().splitlines()[-1])["error"] == "config_invalid"

    def test_missing_input(self, capsys, tmp_path):
        code, _, err = run(capsys, "dice", "--a", tmp_path / "none.gf", "--b", tmp_path / "none.gf")
        assert code != 0 and json.loads(err.strip())["error"] == "io_error"

    def test_kind_mismatch(self, workspace, capsys):
        img = workspace / "ds" / "img000.image.gf"
        code, _, err = run(capsys, "dice", "--a", img, "--b", img)
        assert code != 0 and json.loads(err.strip())["error"] == "kind_mismatch"

    def test_usage(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 2 and json.loads(err.strip())["error"] == "usage_error"

    def test_rerun_detects_changed_input(self, workspace, capsys, tmp_path):
        ds = tmp_path / "ds"
        run(capsys, "gen", "--config", workspace / "small.yaml", "--out", ds)
        run(capsys, "bspline", "--config", workspace / "small.yaml", "--dataset", ds, "--out", tmp_path / "b")
        (ds / "img000.image.gf").write_bytes((ds / "img001.image.gf").read_bytes())
        code, _, err = run(capsys, "rerun", tmp_path / "b" / "manifest.json", "--out", tmp_path / "b2")
        assert code != 0 and "changed" in json.loads(err.strip())["message"]


class TestPipeline:
    def test_end_to_end_and_rerun(self, workspace, capsys, tmp_path):
        cfg, ds, cache = workspace / "small.yaml", workspace / "ds", tmp_path / "cache"
        steps = [
            ("augment-train", "--dataset", ds, "--out", tmp_path / "train", "--cache", cache),
            ("augment-test", "--dataset", ds, "--out", tmp_path / "test", "--cache", cache),
            ("oneshot", "--dataset", ds, "--out", tmp_path / "one", "--cache", cache),
            ("bspline", "--dataset", ds, "--out", tmp_path / "bs"),
        ]
        for cmd, *rest in steps:
            code, out, err = run(capsys, cmd, "--config", cfg, *rest)
            assert code == 0, err
        report = json.loads((tmp_path / "test" / "report.json").read_text())
        assert 0.0 < report["mean_dice"] <= 1.0
        assert len(list((tmp_path / "train" / "examples").iterdir())) == 3
        manifest = json.loads((tmp_path / "train" / "manifest.json").read_text())
        assert set(manifest) >= {"config", "config_hash", "inputs", "seeds", "versions"}
        assert str(tmp_path / "train") not in json.dumps(manifest)
        for name in ("train", "test", "one", "bs"):
            code, _, err = run(capsys, "rerun", tmp_path / name / "manifest.json", "--out", tmp_path / f"{name}_re",
                               "--workers", 2)
            assert code == 0, err
            assert files(tmp_path / name) == files(tmp_path / f"{name}_re")
