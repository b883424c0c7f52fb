"""Config loading, validation, and model stack assembly."""

import hashlib

import numpy as np
import pytest

from clipaway.adapter import ProjectionAdapter, save_adapter
from clipaway.config import (
    ModelsConfig,
    PipelineConfig,
    ToolkitConfig,
    build_model_stack,
)
from clipaway.encoders import MockPlainEncoder, MockRegionEncoder, MockTextEncoder
from clipaway.errors import ConfigError


def write_config(tmp_path, text):
    path = tmp_path / "clipaway.toml"
    path.write_text(text)
    return path


class TestLoading:
    def test_defaults_validate(self):
        config = ToolkitConfig()
        config.validate()
        assert config.mock_mode is True
        assert config.pipeline.dilation_kernel == 5
        assert config.service.port == 8787

    def test_toml_round_trip(self, tmp_path):
        path = write_config(
            tmp_path,
            """
            mock_mode = true
            seed = 42
            device = "cpu"

            [pipeline]
            dilation_kernel = 7
            steps = 30

            [service]
            port = 9000
            max_upload_bytes = 1000000

            [eval]
            backends = ["sd", "unipaint"]
            limit = 10
            """,
        )
        config = ToolkitConfig.load(path)
        assert config.seed == 42
        assert config.pipeline.dilation_kernel == 7
        assert config.pipeline.steps == 30
        assert config.pipeline.guidance_scale == 7.5
        assert config.service.port == 9000
        assert config.eval.backends == ["sd", "unipaint"]
        assert config.eval.limit == 10

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="read"):
            ToolkitConfig.load(tmp_path / "nope.toml")

    def test_bad_toml_syntax(self, tmp_path):
        path = write_config(tmp_path, "mock_mode = [unclosed")
        with pytest.raises(ConfigError, match="bad TOML"):
            ToolkitConfig.load(path)

    def test_unknown_top_level_key(self, tmp_path):
        path = write_config(tmp_path, "mok_mode = true")
        with pytest.raises(ConfigError, match="mok_mode"):
            ToolkitConfig.load(path)

    def test_unknown_section_key(self, tmp_path):
        path = write_config(tmp_path, "[pipeline]\ndilation = 5")
        with pytest.raises(ConfigError, match="dilation"):
            ToolkitConfig.load(path)

    def test_unknown_model_entry_key(self, tmp_path):
        path = write_config(
            tmp_path, '[models.adapter_checkpoint]\npath = "x"\nsha = "y"'
        )
        with pytest.raises(ConfigError, match="sha"):
            ToolkitConfig.load(path)

    def test_unknown_model_name(self, tmp_path):
        path = write_config(tmp_path, '[models.decoder]\npath = "x"')
        with pytest.raises(ConfigError, match="decoder"):
            ToolkitConfig.load(path)


class TestValidation:
    @pytest.mark.parametrize(
        "section, key, value, fragment",
        [
            ("pipeline", "dilation_kernel", 4, "odd"),
            ("pipeline", "dilation_kernel", -1, "odd"),
            ("pipeline", "steps", 0, "steps"),
            ("pipeline", "guidance_scale", -0.5, "guidance"),
            ("pipeline", "ip_adapter_scale", -1.0, "scale"),
            ("service", "port", 0, "port"),
            ("service", "port", 70000, "port"),
            ("service", "max_upload_bytes", 0, "upload"),
            ("service", "job_retention", 0, "retention"),
            ("eval", "cmmd_sigma", 0.0, "sigma"),
        ],
    )
    def test_range_violations(self, section, key, value, fragment):
        config = ToolkitConfig()
        setattr(getattr(config, section), key, value)
        with pytest.raises(ConfigError, match=fragment):
            config.validate()

    def test_unknown_eval_backend(self):
        config = ToolkitConfig()
        config.eval.backends = ["dalle"]
        with pytest.raises(ConfigError, match="dalle"):
            config.validate()

    def test_referenced_model_must_exist(self, tmp_path):
        config = ToolkitConfig()
        config.models.adapter_checkpoint.path = str(tmp_path / "gone.npz")
        with pytest.raises(ConfigError, match="gone.npz"):
            config.validate()

    def test_model_hash_mismatch(self, tmp_path):
        weight = tmp_path / "weights.bin"
        weight.write_bytes(b"payload")
        config = ToolkitConfig()
        config.models.adapter_checkpoint.path = str(weight)
        config.models.adapter_checkpoint.sha256 = "0" * 64
        with pytest.raises(ConfigError, match="hash mismatch"):
            config.validate()

    def test_model_hash_match(self, tmp_path):
        weight = tmp_path / "weights.bin"
        weight.write_bytes(b"payload")
        digest = hashlib.sha256(b"payload").hexdigest()
        config = ToolkitConfig()
        config.models.adapter_checkpoint.path = str(weight)
        config.models.adapter_checkpoint.sha256 = digest.upper()
        config.validate()

    def test_snapshot_shape(self, tmp_path):
        weight = tmp_path / "weights.bin"
        weight.write_bytes(b"payload")
        config = ToolkitConfig()
        config.seed = 7
        config.models.adapter_checkpoint.path = str(weight)
        snap = config.snapshot()
        assert snap["seed"] == 7
        assert snap["mock_mode"] is True
        assert snap["pipeline"]["dilation_kernel"] == 5
        assert snap["models"]["adapter_checkpoint"]["path"].endswith("weights.bin")


class TestModelStack:
    def test_mock_stack_types(self):
        stack = build_model_stack(ToolkitConfig())
        assert isinstance(stack.region_encoder, MockRegionEncoder)
        assert isinstance(stack.plain_encoder, MockPlainEncoder)
        assert isinstance(stack.text_encoder, MockTextEncoder)
        assert stack.extractor_id == "mock-plain-encoder"

    def test_mock_adapter_seeded_by_config(self):
        one = build_model_stack(ToolkitConfig())
        config = ToolkitConfig()
        config.seed = 31
        other = build_model_stack(config)
        again = build_model_stack(config)
        assert not np.array_equal(one.adapter.theta, other.adapter.theta)
        assert np.array_equal(other.adapter.theta, again.adapter.theta)

    def test_adapter_checkpoint_loaded(self, tmp_path):
        trained = ProjectionAdapter(seed=99)
        checkpoint = tmp_path / "adapter.npz"
        save_adapter(trained, checkpoint)
        config = ToolkitConfig()
        config.models.adapter_checkpoint.path = str(checkpoint)
        stack = build_model_stack(config)
        assert np.array_equal(stack.adapter.theta, trained.theta)

    def test_real_mode_requires_encoder_paths(self):
        config = ToolkitConfig(mock_mode=False)
        with pytest.raises(ConfigError, match="region_encoder"):
            build_model_stack(config)


class TestSectionTypes:
    def test_models_config_entries(self):
        models = ModelsConfig()
        names = set(ToolkitConfig().model_entries())
        assert names == {
            "region_encoder",
            "plain_encoder",
            "adapter_checkpoint",
            "ip_adapter",
            "diffusion_backend",
        }
        assert models.region_encoder.path == ""

    def test_pipeline_defaults_match_request_defaults(self):
        from clipaway.pipeline import RemovalRequest

        request = RemovalRequest(
            image=np.zeros((8, 8, 3), dtype=np.uint8),
            mask=np.zeros((8, 8), dtype=np.uint8),
        )
        pipeline = PipelineConfig()
        assert pipeline.dilation_kernel == request.dilation_kernel
        assert pipeline.steps == request.steps
        assert pipeline.guidance_scale == request.guidance_scale
        assert pipeline.ip_adapter_scale == request.ip_adapter_scale
