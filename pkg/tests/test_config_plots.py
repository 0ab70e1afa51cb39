import pytest

from histotex.config import CONFIG_SCHEMA, ConfigError, RunConfig
from histotex.plots import line_plot_svg


class TestRunConfig:
    def test_fully_defaulted_is_valid(self):
        cfg = RunConfig()
        assert cfg["data.batch_size"] == 32
        assert cfg["train.head_epochs"] == 2
        assert cfg["train.full_epochs"] == 12  # 14-epoch default protocol
        assert cfg["train.beta2"] == 0.99
        assert cfg["lrfind.iters"] == 100
        assert cfg["stain.fit_lambda"] == 0.1

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig({"train.batch_size": 16})  # correct key is data.batch_size

    def test_type_coercion(self):
        cfg = RunConfig({"data.batch_size": "16", "aug.enabled": "false",
                         "train.lr_max": "2e-3"})
        assert cfg["data.batch_size"] == 16
        assert cfg["aug.enabled"] is False
        assert cfg["train.lr_max"] == 2e-3

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig({"data.batch_size": "many"})
        with pytest.raises(ConfigError):
            RunConfig({"aug.enabled": "probably"})

    def test_file_roundtrip(self, tmp_path):
        cfg = RunConfig({"seed": 42, "data.image_size": 64})
        path = tmp_path / "run.cfg"
        cfg.save(path)
        loaded = RunConfig.from_file(path)
        assert loaded.to_text() == cfg.to_text()
        assert loaded["seed"] == 42

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# a comment\n\nseed=7\n  train.lr_max = 0.02 \n")
        cfg = RunConfig.from_file(path)
        assert cfg["seed"] == 7 and cfg["train.lr_max"] == 0.02

    def test_every_documented_default_has_a_key(self):
        for key in ("model.dropout1", "model.dropout2", "model.bn_eps",
                    "model.bn_momentum", "train.warmup_frac",
                    "train.weight_decay", "lrfind.smooth_beta",
                    "lrfind.divergence_factor", "stain.background_beta",
                    "stain.percentile", "stain.max_pixels", "aug.zoom_max",
                    "aug.jitter_px", "aug.elastic_alpha", "aug.prob"):
            assert key in CONFIG_SCHEMA

    def test_list_helpers(self):
        cfg = RunConfig()
        assert cfg.floats("data.split_ratios") == (0.6, 0.2, 0.2)
        assert cfg.ints("bench.batch_sizes") == (1, 2, 4, 8, 16, 32, 64)


class TestSvgPlots:
    def test_writes_polylines(self, tmp_path):
        path = tmp_path / "p.svg"
        line_plot_svg(path, [("a", [0, 1, 2], [1.0, 0.5, 0.25]),
                             ("b", [0, 1, 2], [0.2, 0.4, 0.8])],
                      title="t", xlabel="x", ylabel="y")
        text = path.read_text()
        assert text.count("<polyline") == 2
        assert "</svg>" in text

    def test_deterministic_output(self, tmp_path):
        args = ([("a", [1e-6, 1e-3, 1.0], [3.0, 1.0, 2.0])],)
        line_plot_svg(tmp_path / "a.svg", *args, log_x=True)
        line_plot_svg(tmp_path / "b.svg", *args, log_x=True)
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            line_plot_svg(tmp_path / "e.svg", [("a", [], [])])
