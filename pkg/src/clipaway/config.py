"""TOML-backed configuration and component assembly.

Mock mode is the default: every model slot is served by a deterministic
stand-in so the full stack runs with zero weight files. Real mode checks
that each referenced weight file exists and matches its recorded hash
before anything loads it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .adapter import ProjectionAdapter, load_adapter
from .backends import BackendKind, MockTokenProjection
from .benchmark import ModelStack
from .encoders import (
    MockPlainEncoder,
    MockRegionEncoder,
    MockTextEncoder,
    TorchScriptPlainEncoder,
    TorchScriptRegionEncoder,
    sha256_file,
)
from .errors import ClipawayError, ConfigError


@dataclass
class ModelEntry:
    path: str = ""
    sha256: str = ""


@dataclass
class ModelsConfig:
    region_encoder: ModelEntry = field(default_factory=ModelEntry)
    plain_encoder: ModelEntry = field(default_factory=ModelEntry)
    adapter_checkpoint: ModelEntry = field(default_factory=ModelEntry)
    ip_adapter: ModelEntry = field(default_factory=ModelEntry)
    diffusion_backend: ModelEntry = field(default_factory=ModelEntry)


@dataclass
class PipelineConfig:
    dilation_kernel: int = 5
    steps: int = 50
    guidance_scale: float = 7.5
    ip_adapter_scale: float = 1.0
    composite_unmasked: bool = True


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8787
    max_upload_bytes: int = 16 * 1024 * 1024
    job_retention: int = 100
    data_dir: str = "clipaway-jobs"


@dataclass
class EvalConfig:
    annotation_file: str = ""
    image_dir: str = ""
    limit: Optional[int] = None
    output_dir: str = "eval-out"
    backends: list = field(default_factory=lambda: ["sd_inpaint"])
    with_clipaway: bool = True
    cmmd_sigma: float = 10.0


@dataclass
class ToolkitConfig:
    mock_mode: bool = True
    device: str = "cpu"
    seed: int = 0
    models: ModelsConfig = field(default_factory=ModelsConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def load(cls, path) -> "ToolkitConfig":
        """Parse a TOML file; unknown keys are errors, not typos to ignore."""
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad TOML in {path}: {exc}") from exc
        config = cls.from_dict(raw)
        config.validate()
        return config

    @classmethod
    def from_dict(cls, raw: dict) -> "ToolkitConfig":
        config = cls()
        top = dict(raw)
        for name, builder in (
            ("models", _models_from_dict),
            ("pipeline", _section_from_dict(PipelineConfig, "pipeline")),
            ("service", _section_from_dict(ServiceConfig, "service")),
            ("eval", _section_from_dict(EvalConfig, "eval")),
        ):
            if name in top:
                setattr(config, name, builder(top.pop(name)))
        for key in ("mock_mode", "device", "seed"):
            if key in top:
                setattr(config, key, top.pop(key))
        if top:
            raise ConfigError(f"unknown config keys: {sorted(top)}")
        return config

    def validate(self) -> None:
        p = self.pipeline
        if p.dilation_kernel < 1 or p.dilation_kernel % 2 == 0:
            raise ConfigError(f"dilation_kernel must be odd >= 1, got {p.dilation_kernel}")
        if p.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {p.steps}")
        if p.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {p.guidance_scale}")
        if p.ip_adapter_scale < 0:
            raise ConfigError(f"ip_adapter_scale must be >= 0, got {p.ip_adapter_scale}")
        s = self.service
        if not 1 <= s.port <= 65535:
            raise ConfigError(f"port out of range: {s.port}")
        if s.max_upload_bytes <= 0:
            raise ConfigError(f"max_upload_bytes must be positive, got {s.max_upload_bytes}")
        if s.job_retention < 1:
            raise ConfigError(f"job_retention must be >= 1, got {s.job_retention}")
        if self.eval.cmmd_sigma <= 0:
            raise ConfigError(f"cmmd_sigma must be positive, got {self.eval.cmmd_sigma}")
        for name in self.eval.backends:
            try:
                BackendKind.parse(name)
            except ClipawayError as exc:
                raise ConfigError(f"eval.backends: {exc}") from None
        self.verify_model_files()

    def verify_model_files(self) -> None:
        """Every referenced weight file must exist; hashes must match when given."""
        for name, entry in self.model_entries().items():
            if not entry.path:
                continue
            path = Path(entry.path)
            if not path.is_file():
                raise ConfigError(f"{name}: weight file not found: {path}")
            if entry.sha256:
                actual = sha256_file(path)
                if actual != entry.sha256.lower():
                    raise ConfigError(
                        f"{name}: hash mismatch for {path}: "
                        f"expected {entry.sha256}, found {actual}"
                    )

    def model_entries(self) -> dict:
        return {
            f.name: getattr(self.models, f.name)
            for f in dataclass_fields(self.models)
        }

    def snapshot(self) -> dict:
        """Provenance echo: settings plus the weight hashes in force."""
        return {
            "mock_mode": self.mock_mode,
            "device": self.device,
            "seed": self.seed,
            "pipeline": {
                "dilation_kernel": self.pipeline.dilation_kernel,
                "steps": self.pipeline.steps,
                "guidance_scale": self.pipeline.guidance_scale,
                "ip_adapter_scale": self.pipeline.ip_adapter_scale,
                "composite_unmasked": self.pipeline.composite_unmasked,
            },
            "models": {
                name: {"path": entry.path, "sha256": entry.sha256}
                for name, entry in self.model_entries().items()
            },
        }


def _section_from_dict(section_cls, label):
    def build(raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError(f"[{label}] must be a table")
        known = {f.name for f in dataclass_fields(section_cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{label}]: {sorted(unknown)}")
        return section_cls(**raw)

    return build


def _models_from_dict(raw: dict) -> ModelsConfig:
    if not isinstance(raw, dict):
        raise ConfigError("[models] must be a table")
    known = {f.name for f in dataclass_fields(ModelsConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [models]: {sorted(unknown)}")
    entries = {}
    for name, value in raw.items():
        if not isinstance(value, dict):
            raise ConfigError(f"[models.{name}] must be a table")
        bad = set(value) - {"path", "sha256"}
        if bad:
            raise ConfigError(f"unknown keys in [models.{name}]: {sorted(bad)}")
        entries[name] = ModelEntry(**value)
    return ModelsConfig(**entries)


def build_model_stack(config: ToolkitConfig) -> ModelStack:
    """Assemble encoders, adapter, and token projection per the config."""
    models = config.models
    if config.mock_mode:
        region = MockRegionEncoder()
        plain = MockPlainEncoder()
        text = MockTextEncoder()
        extractor_id = "mock-plain-encoder"
    else:
        if not models.region_encoder.path or not models.plain_encoder.path:
            raise ConfigError(
                "real mode needs models.region_encoder and models.plain_encoder paths"
            )
        region = TorchScriptRegionEncoder(
            models.region_encoder.path, sha256=models.region_encoder.sha256 or None
        )
        region.load()
        plain = TorchScriptPlainEncoder(
            models.plain_encoder.path, sha256=models.plain_encoder.sha256 or None
        )
        plain.load()
        # zero-shot text scoring has no real-weights path in this build
        text = None
        extractor_id = f"torchscript:{models.plain_encoder.sha256 or 'unhashed'}"

    if models.adapter_checkpoint.path:
        adapter = load_adapter(models.adapter_checkpoint.path)
    else:
        adapter = ProjectionAdapter(seed=config.seed)
    return ModelStack(
        region_encoder=region,
        plain_encoder=plain,
        text_encoder=text,
        adapter=adapter,
        token_projection=MockTokenProjection(),
        extractor_id=extractor_id,
    )
