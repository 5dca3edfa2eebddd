"""End-to-end tests for the splatloc command-line interface."""

import numpy as np
import pytest

from splatloc.cli import (
    load_camera_txt,
    load_pose_txt,
    main,
    save_camera_txt,
    save_pose_txt,
)
from splatloc.config import load_config, make_config
from splatloc.errors import ConfigError
from splatloc.geometry import Camera, look_at_pose
from splatloc.maps import load_feature_map, save_feature_map
from splatloc.pipeline import load_bundle
from splatloc.rendering import render
from splatloc.synthetic import SyntheticSceneSpec, gen_synthetic_scene

SCENE_SPEC_TEXT = """\
# compact synthetic scene
primitive_count = 500
feature_dim = 24
scene_extent = 2.0
rng_seed = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-scene + fit once; later tests reuse the scene and bundle."""
    root = tmp_path_factory.mktemp("cli")
    spec = root / "scene_spec.txt"
    spec.write_text(SCENE_SPEC_TEXT)
    scene = root / "scene.llgf"
    bundle = root / "map.llbd"
    assert main(["gen-scene", "--spec", str(spec), "--out", str(scene)]) == 0
    assert main(["fit", "--scene", str(scene), "--out", str(bundle),
                 "--set", "anchor_count=2000"]) == 0
    gt = look_at_pose(np.array([1.4, 1.6, -1.1]), np.zeros(3), np.array([0.0, 1.0, 0.0]))
    pose_path = root / "gt_pose.txt"
    save_pose_txt(gt, pose_path)
    query = root / "query.fmap"
    assert main(["make-query", "--bundle", str(bundle), "--pose", str(pose_path),
                 "--out", str(query), "--noise", "0.05", "--seed", "11"]) == 0
    return {"root": root, "spec": spec, "scene": scene, "bundle": bundle,
            "pose": pose_path, "query": query}


class TestSidecars:
    def test_pose_round_trip(self, tmp_path):
        pose = look_at_pose(np.array([1.0, 2.0, 3.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]))
        path = tmp_path / "pose.txt"
        save_pose_txt(pose, path)
        loaded = load_pose_txt(path)
        np.testing.assert_allclose(loaded.R, pose.R, atol=1e-15)
        np.testing.assert_allclose(loaded.t, pose.t, atol=1e-15)

    def test_pose_wrong_shape(self, tmp_path):
        path = tmp_path / "pose.txt"
        np.savetxt(path, np.eye(3))
        with pytest.raises(ConfigError, match="4x4"):
            load_pose_txt(path)

    def test_pose_bad_last_row(self, tmp_path):
        mat = np.eye(4)
        mat[3, 0] = 0.5
        path = tmp_path / "pose.txt"
        np.savetxt(path, mat)
        with pytest.raises(ConfigError, match="last pose row"):
            load_pose_txt(path)

    def test_pose_bad_rotation(self, tmp_path):
        mat = np.eye(4)
        mat[0, 0] = 2.0
        path = tmp_path / "pose.txt"
        np.savetxt(path, mat)
        with pytest.raises(ConfigError):
            load_pose_txt(path)

    def test_camera_round_trip(self, tmp_path):
        cam = Camera(fx=81.5, fy=79.25, cx=31.5, cy=23.5, width=64, height=48)
        path = tmp_path / "camera.txt"
        save_camera_txt(cam, path)
        assert load_camera_txt(path) == cam

    def test_camera_missing_key(self, tmp_path):
        path = tmp_path / "camera.txt"
        path.write_text("fx = 80\nfy = 80\n")
        with pytest.raises(ConfigError):
            load_camera_txt(path)


class TestGenScene:
    def test_writes_field(self, workspace):
        assert workspace["scene"].exists()
        field, _ = gen_synthetic_scene(
            SyntheticSceneSpec(primitive_count=500, feature_dim=24,
                               scene_extent=2.0, rng_seed=3)
        )
        assert workspace["scene"].stat().st_size == 24 + 500 * (11 + 24) * 4
        # 20-byte header precedes the interleaved payload; the crc trails it
        np.testing.assert_array_equal(
            np.fromfile(workspace["scene"], dtype="<f4", count=3, offset=20),
            field.positions[0].astype(np.float32),
        )

    def test_defaults_without_spec(self, tmp_path, capsys):
        out = tmp_path / "default.llgf"
        assert main(["gen-scene", "--out", str(out)]) == 0
        assert "400 primitives" in capsys.readouterr().out

    def test_bad_spec_key(self, tmp_path):
        spec = tmp_path / "spec.txt"
        spec.write_text("primitive_count = 10\nwavelength = 3\n")
        assert main(["gen-scene", "--spec", str(spec), "--out", str(tmp_path / "x.llgf")]) == 2


class TestFit:
    def test_bundle_written(self, workspace):
        bundle = load_bundle(workspace["bundle"])
        assert len(bundle.field) == 500
        assert bundle.config.anchor_count == 2000

    def test_config_file_plus_set_override(self, workspace, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("anchor_count = 300\nseed = 9\n")
        out = tmp_path / "map.llbd"
        assert main(["fit", "--scene", str(workspace["scene"]), "--out", str(out),
                     "--config", str(cfg_file), "--set", "anchor_count=150"]) == 0
        bundle = load_bundle(out)
        assert bundle.config.anchor_count == 150  # --set wins over --config
        assert bundle.config.seed == 9

    def test_fit_with_views(self, workspace, tmp_path):
        field, _ = gen_synthetic_scene(
            SyntheticSceneSpec(primitive_count=200, feature_dim=8, rng_seed=1)
        )
        scene = tmp_path / "tiny.llgf"
        from splatloc.field import save_field

        save_field(field, scene)
        views = tmp_path / "views"
        views.mkdir()
        cam = Camera(fx=80.0, fy=80.0, cx=31.5, cy=31.5, width=64, height=64)
        save_camera_txt(cam, views / "camera.txt")
        opts = make_config().render_options()
        for i, eye in enumerate(([0.0, 0.3, 2.2], [1.6, 0.4, 1.4])):
            pose = look_at_pose(np.array(eye), np.zeros(3), np.array([0.0, 1.0, 0.0]))
            save_pose_txt(pose, views / f"view{i}.pose.txt")
            out = render(field, cam, pose, opts)
            save_feature_map(out.features, views / f"view{i}.fmap")
        bundle_path = tmp_path / "tiny.llbd"
        assert main(["fit", "--scene", str(scene), "--out", str(bundle_path),
                     "--views", str(views), "--set", "fit_steps=1",
                     "--set", "anchor_count=100"]) == 0
        refit = load_bundle(bundle_path)
        assert not np.array_equal(refit.field.features, field.features)

    def test_missing_pose_sidecar(self, workspace, tmp_path):
        views = tmp_path / "views"
        views.mkdir()
        cam = Camera(fx=80.0, fy=80.0, cx=31.5, cy=31.5, width=64, height=64)
        save_camera_txt(cam, views / "camera.txt")
        (views / "orphan.fmap").write_bytes(b"LLFM")
        assert main(["fit", "--scene", str(workspace["scene"]),
                     "--out", str(tmp_path / "x.llbd"), "--views", str(views)]) == 2

    def test_empty_views_dir(self, workspace, tmp_path):
        views = tmp_path / "views"
        views.mkdir()
        cam = Camera(fx=80.0, fy=80.0, cx=31.5, cy=31.5, width=64, height=64)
        save_camera_txt(cam, views / "camera.txt")
        assert main(["fit", "--scene", str(workspace["scene"]),
                     "--out", str(tmp_path / "x.llbd"), "--views", str(views)]) == 2


class TestLocalize:
    def test_success_with_gt_and_pose_out(self, workspace, capsys):
        est_path = workspace["root"] / "est_pose.txt"
        code = main(["localize", "--bundle", str(workspace["bundle"]),
                     "--query", str(workspace["query"]),
                     "--out-pose", str(est_path), "--gt", str(workspace["pose"])])
        assert code == 0
        out = capsys.readouterr().out
        assert "sparse matches" in out
        assert "error vs ground truth" in out
        est = load_pose_txt(est_path)
        gt = load_pose_txt(workspace["pose"])
        assert np.linalg.norm(est.t - gt.t) < 0.1

    def test_failure_exit_code(self, workspace):
        code = main(["localize", "--bundle", str(workspace["bundle"]),
                     "--query", str(workspace["query"]),
                     "--set", "sim_floor=0.9999999"])
        assert code == 3

    def test_bad_override_exit_code(self, workspace):
        code = main(["localize", "--bundle", str(workspace["bundle"]),
                     "--query", str(workspace["query"]), "--set", "factor=zero"])
        assert code == 2

    def test_missing_bundle(self, workspace, tmp_path):
        code = main(["localize", "--bundle", str(tmp_path / "nope.llbd"),
                     "--query", str(workspace["query"])])
        assert code == 2

    def test_set_without_equals(self, workspace):
        code = main(["localize", "--bundle", str(workspace["bundle"]),
                     "--query", str(workspace["query"]), "--set", "factor"])
        assert code == 2


class TestInspect:
    def test_field(self, workspace, capsys):
        assert main(["inspect", str(workspace["scene"])]) == 0
        out = capsys.readouterr().out
        assert "gaussian field" in out and "500 primitives" in out

    def test_bundle(self, workspace, capsys):
        assert main(["inspect", str(workspace["bundle"])]) == 0
        assert "map bundle" in capsys.readouterr().out

    def test_feature_map(self, workspace, capsys):
        assert main(["inspect", str(workspace["query"])]) == 0
        out = capsys.readouterr().out
        assert "feature map" in out and "160x160x24" in out

    def test_depth_map(self, workspace, tmp_path, capsys):
        from splatloc.field import load_field
        from splatloc.maps import save_depth_map

        field = load_field(workspace["scene"])
        config = make_config()
        pose = load_pose_txt(workspace["pose"])
        out = render(field, config.camera(), pose, config.render_options())
        path = tmp_path / "render.dmap"
        save_depth_map(out.depth, path)
        assert main(["inspect", str(path)]) == 0
        assert "depth map" in capsys.readouterr().out

    def test_unknown_magic(self, workspace):
        assert main(["inspect", str(workspace["pose"])]) == 2


class TestShowConfig:
    def test_prints_all_keys(self, capsys):
        assert main(["show-config"]) == 0
        out = capsys.readouterr().out
        assert "anchor_count = 16384" in out
        assert "kernel = huber" in out

    def test_out_file_parses(self, tmp_path):
        path = tmp_path / "resolved.cfg"
        assert main(["show-config", "--set", "seed=5", "--out", str(path)]) == 0
        assert load_config(path) == make_config({"seed": 5})


class TestBenchCommands:
    FAST = [
        "--set", "image_width=64", "--set", "image_height=64", "--set", "focal=80",
        "--set", "dense_iterations=1", "--set", "anchor_count=500",
    ]

    def test_bench(self, workspace, tmp_path, capsys):
        csv = tmp_path / "bench.csv"
        code = main(["bench", "--spec", str(workspace["spec"]), "-n", "2",
                     "--out", str(csv), *self.FAST])
        assert code == 0
        assert "accuracy" in capsys.readouterr().out
        assert len(csv.read_text().strip().splitlines()) == 3

    def test_ablate(self, workspace, tmp_path, capsys):
        csv = tmp_path / "ablation.csv"
        code = main(["ablate", "--spec", str(workspace["spec"]), "-n", "2",
                     "--out", str(csv), *self.FAST])
        assert code == 0
        out = capsys.readouterr().out
        assert "speedup" in out
        assert len(csv.read_text().strip().splitlines()) == 5
