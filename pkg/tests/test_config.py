"""Tests for the flat key = value pipeline configuration."""

import dataclasses

import numpy as np
import pytest

from splatloc.config import (
    PipelineConfig,
    coerce_fields,
    coerce_value,
    format_config,
    load_config,
    make_config,
    parse_config,
    parse_keyvalues,
    replace_config,
    save_config,
)
from splatloc.errors import ConfigError
from splatloc.field import Layout


class TestParseKeyvalues:
    def test_basic_lines(self):
        text = "a = 1\nb=hello\n  c  =  2.5  \n"
        assert parse_keyvalues(text) == {"a": "1", "b": "hello", "c": "2.5"}

    def test_comments_and_blanks_ignored(self):
        text = "# header\n\na = 1  # trailing\n   \n# done\n"
        assert parse_keyvalues(text) == {"a": "1"}

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_keyvalues("a = 1\nnot a pair\n")

    def test_empty_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_keyvalues("a =\n")

    def test_empty_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_keyvalues("= 3\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_keyvalues("a = 1\na = 2\n")


class TestCoercion:
    def test_bool_words(self):
        for word in ("true", "True", "1", "yes", "on"):
            assert coerce_value(word, bool, "k") is True
        for word in ("false", "FALSE", "0", "no", "off"):
            assert coerce_value(word, bool, "k") is False

    def test_bad_bool_rejected(self):
        with pytest.raises(ConfigError, match="boolean"):
            coerce_value("maybe", bool, "k")

    def test_int_parse(self):
        assert coerce_value("42", int, "k") == 42
        assert coerce_value("-3", int, "k") == -3

    def test_float_string_not_an_int(self):
        with pytest.raises(ConfigError, match="integer"):
            coerce_value("2.5", int, "k")

    def test_float_parse(self):
        assert coerce_value("2.5", float, "k") == 2.5
        assert coerce_value("1e-3", float, "k") == 0.001

    def test_bad_float_rejected(self):
        with pytest.raises(ConfigError, match="number"):
            coerce_value("fast", float, "k")

    def test_string_passthrough(self):
        assert coerce_value("huber", str, "k") == "huber"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            coerce_fields(PipelineConfig, {"not_a_key": "1"})

    def test_typed_values_pass_through(self):
        out = coerce_fields(PipelineConfig, {"seed": 9, "focal": 120.0})
        assert out == {"seed": 9, "focal": 120.0}


class TestValidation:
    @pytest.mark.parametrize(
        "key,value",
        [
            ("anchor_count", 0),
            ("image_width", 0),
            ("factor", 0),
            ("timing_repeats", 0),
            ("dense_iterations", -1),
            ("fit_steps", -1),
            ("seed", -1),
            ("focal", 0.0),
            ("temperature", 0.0),
            ("ransac_threshold_px", -1.0),
            ("query_noise", -0.1),
            ("alpha_valid", 0.0),
            ("alpha_valid", 1.5),
            ("ransac_confidence", 1.0),
            ("conf_floor", 1.0),
            ("sim_floor", 1.5),
            ("sparse_threshold", -2.0),
            ("kernel", "parabola"),
            ("kernel_scale", 0.0),
            ("storage_layout", "hybrid"),
            ("fit_loss", "l3"),
            ("fit_batch", "sorted"),
        ],
    )
    def test_bad_value_rejected(self, key, value):
        with pytest.raises((ConfigError, ValueError)):
            make_config({key: value})

    def test_kernel_none_allows_any_scale(self):
        cfg = make_config({"kernel": "none", "kernel_scale": 0.0})
        assert cfg.kernel == "none"

    def test_dense_iterations_zero_allowed(self):
        assert make_config({"dense_iterations": 0}).dense_iterations == 0


class TestDerivedOptions:
    def test_camera_centered(self):
        cfg = make_config({"image_width": 64, "image_height": 48, "focal": 80.0})
        cam = cfg.camera()
        assert (cam.width, cam.height) == (64, 48)
        assert (cam.fx, cam.fy) == (80.0, 80.0)
        assert (cam.cx, cam.cy) == (31.5, 23.5)

    def test_render_options_wired(self):
        cfg = make_config({"alpha_valid": 0.25, "tile_size": 8, "low_pass": 0.1})
        opts = cfg.render_options()
        assert (opts.alpha_valid, opts.tile_size, opts.low_pass) == (0.25, 8, 0.1)

    def test_detect_options_wired(self):
        cfg = make_config({"nms_radius": 2, "max_keypoints": 77, "sim_floor": 0.3})
        opts = cfg.detect_options()
        assert (opts.nms_radius, opts.max_kpts, opts.sim_floor) == (2, 77, 0.3)

    def test_ransac_options_wired(self):
        cfg = make_config({"kernel": "cauchy", "kernel_scale": 2.0})
        opts = cfg.ransac_options(seed=123)
        assert opts.seed == 123
        assert opts.kernel.kind == "cauchy"
        assert opts.kernel.scale == 2.0
        assert opts.threshold_px == cfg.ransac_threshold_px

    def test_fit_options_wired(self):
        cfg = make_config({"fit_steps": 3, "fit_loss": "l2", "seed": 5})
        opts = cfg.fit_options()
        assert (opts.steps, opts.loss, opts.seed) == (3, "l2", 5)
        assert opts.render == cfg.render_options()

    def test_layout_parse(self):
        assert Layout.parse(make_config().storage_layout) is Layout.DECOUPLED
        cfg = make_config({"storage_layout": "coupled"})
        assert Layout.parse(cfg.storage_layout) is Layout.COUPLED


class TestRoundTrip:
    def test_defaults_round_trip(self):
        cfg = make_config()
        assert parse_config(format_config(cfg)) == cfg

    def test_modified_round_trip(self):
        cfg = make_config({
            "seed": 17,
            "focal": 123.456789012345,
            "subpixel": False,
            "condense": True,
            "kernel": "cauchy",
            "low_pass": 1e-05,
        })
        assert parse_config(format_config(cfg)) == cfg

    def test_format_covers_every_field(self):
        text = format_config(make_config())
        keys = set(parse_keyvalues(text))
        assert keys == {f.name for f in dataclasses.fields(PipelineConfig)}

    def test_file_round_trip(self, tmp_path):
        cfg = make_config({"seed": 3, "temperature": 0.25})
        path = tmp_path / "pipeline.cfg"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.cfg")


class TestReplace:
    def test_replace_keeps_others(self):
        base = make_config({"seed": 4})
        out = replace_config(base, {"focal": "200"})
        assert out.focal == 200.0
        assert out.seed == 4
        assert base.focal == make_config().focal

    def test_replace_validates(self):
        with pytest.raises(ConfigError):
            replace_config(make_config(), {"factor": "0"})

    def test_string_overrides_coerced(self):
        out = make_config({"subpixel": "false", "condense_k": "64"})
        assert out.subpixel is False
        assert out.condense_k == 64
