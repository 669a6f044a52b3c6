"""
config.py - Configuration loading and validation for sgstream.

Handles:
- Loading config.yml with environment variable expansion
- Pipeline settings (clip window, top-K, guidance/embed/context modes, sampling)
- Model backend and embedder settings
- Latency profiles for simulated runs
"""

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(Exception):
    """Raised when configuration validation fails."""
    pass


GUIDANCE_MODES = ("none", "object", "query")
EMBED_MODES = ("graph_text", "original_text")
CONTEXT_MODES = ("none", "graphs", "timestamped_graphs")
SAMPLING_POLICIES = ("fixed", "streamingbench")
BACKEND_KINDS = ("scripted", "remote")
EMBEDDER_KINDS = ("hashing", "remote")

# Per-frame stage latencies (ms): SGG, retrieval, trigger
LATENCY_PRESETS: dict[str, tuple[float, float, float]] = {
    "embedding": (448.0, 21.0, 356.0),
    "kv-cache": (249.0, 20.0, 204.0),
    "baseline-embedding": (0.0, 0.0, 324.0),
    "baseline-kv-cache": (0.0, 0.0, 182.0),
}
# Measured latencies (profile None) differ from run to run
DEFAULT_LATENCY_PROFILE = "embedding"


@dataclass(frozen=True)
class LatencyProfile:
    sgg_ms: float
    retrieval_ms: float
    trigger_ms: float

    @property
    def total_ms(self) -> float:
        return self.sgg_ms + self.retrieval_ms + self.trigger_ms


@dataclass
class AppConfig:
    name: str = "sgstream"
    version: str = "0.1.0"


@dataclass
class PipelineConfig:
    clip_window_frames: int = 4
    top_k: int = 3
    guidance_mode: str = "query"
    embed_mode: str = "graph_text"
    context_mode: str = "timestamped_graphs"
    sampling_policy: str = "fixed"
    fps: float = 1.0
    max_context_frames: Optional[int] = None
    memory_max_entries: Optional[int] = None
    # Preset name from LATENCY_PRESETS or {sgg_ms, retrieval_ms, trigger_ms}
    latency_profile: Optional[Any] = DEFAULT_LATENCY_PROFILE

    def latency(self) -> Optional[LatencyProfile]:
        return resolve_latency_profile(self.latency_profile)


@dataclass
class BackendConfig:
    kind: str = "scripted"
    base_url: str = ""
    model: str = ""
    api_key_env: str = "SGSTREAM_API_KEY"
    timeout_sec: float = 60.0
    retries: int = 2
    backoff_sec: float = 1.0
    max_concurrency: int = 4
    min_interval_ms: int = 0
    temperature: float = 0.0
    max_tokens: int = 512
    proxy: str = ""


@dataclass
class EmbedderConfig:
    kind: str = "hashing"
    dim: int = 64
    model: str = ""


@dataclass
class PromptsConfig:
    dir: str = ""


@dataclass
class HarnessConfig:
    workers: int = 1


@dataclass
class LoggingConfig:
    level: str = "INFO"
    file: str = "./logs/sgstream.log"


@dataclass
class Config:
    app: AppConfig = field(default_factory=AppConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    prompts: PromptsConfig = field(default_factory=PromptsConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)


def default_config() -> Config:
    return Config()


def expand_env_vars(value: Any) -> Any:
    """Recursively expand environment variables in string values."""
    if isinstance(value, str):
        # Handle ${VAR} format
        pattern = re.compile(r'\$\{([^}]+)\}')
        def replacer(match):
            env_var = match.group(1)
            return os.environ.get(env_var, match.group(0))
        return pattern.sub(replacer, value)
    elif isinstance(value, dict):
        return {k: expand_env_vars(v) for k, v in value.items()}
    elif isinstance(value, list):
        return [expand_env_vars(item) for item in value]
    return value


def resolve_latency_profile(value: Any) -> Optional[LatencyProfile]:
    """
    Turn a preset name or mapping into a LatencyProfile.

    Raises:
        ConfigError: If the preset is unknown or the mapping is incomplete
    """
    if value is None or value == "":
        return None
    if isinstance(value, LatencyProfile):
        return value
    if isinstance(value, str):
        if value not in LATENCY_PRESETS:
            raise ConfigError(
                f"Unknown latency profile: {value}. "
                f"Known presets: {', '.join(LATENCY_PRESETS)}"
            )
        return LatencyProfile(*LATENCY_PRESETS[value])
    if isinstance(value, dict):
        try:
            profile = LatencyProfile(
                sgg_ms=float(value["sgg_ms"]),
                retrieval_ms=float(value["retrieval_ms"]),
                trigger_ms=float(value["trigger_ms"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(
                f"Latency profile mapping needs numeric sgg_ms, retrieval_ms, trigger_ms: {value}"
            ) from e
        if min(profile.sgg_ms, profile.retrieval_ms, profile.trigger_ms) < 0:
            raise ConfigError(f"Latency profile values must be >= 0: {value}")
        return profile
    raise ConfigError(f"Invalid latency profile: {value!r}")


def _check_choice(key: str, value: str, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(f"{key} must be one of {', '.join(choices)}, got: {value}")


def validate_pipeline(pipeline: PipelineConfig) -> None:
    """
    Validate pipeline settings.

    Raises:
        ConfigError: If validation fails
    """
    if pipeline.clip_window_frames < 1:
        raise ConfigError(f"pipeline.clip_window_frames must be >= 1, got: {pipeline.clip_window_frames}")
    if pipeline.top_k < 1:
        raise ConfigError(f"pipeline.top_k must be >= 1, got: {pipeline.top_k}")
    _check_choice("pipeline.guidance_mode", pipeline.guidance_mode, GUIDANCE_MODES)
    _check_choice("pipeline.embed_mode", pipeline.embed_mode, EMBED_MODES)
    _check_choice("pipeline.context_mode", pipeline.context_mode, CONTEXT_MODES)
    _check_choice("pipeline.sampling_policy", pipeline.sampling_policy, SAMPLING_POLICIES)
    if pipeline.sampling_policy == "fixed" and not pipeline.fps > 0:
        raise ConfigError(f"pipeline.fps must be > 0, got: {pipeline.fps}")
    if pipeline.max_context_frames is not None and pipeline.max_context_frames < 1:
        raise ConfigError(f"pipeline.max_context_frames must be >= 1, got: {pipeline.max_context_frames}")
    if pipeline.memory_max_entries is not None and pipeline.memory_max_entries < 1:
        raise ConfigError(f"pipeline.memory_max_entries must be >= 1, got: {pipeline.memory_max_entries}")
    resolve_latency_profile(pipeline.latency_profile)


def validate_backend(backend: BackendConfig, embedder: EmbedderConfig) -> None:
    """
    Validate backend and embedder settings.

    Raises:
        ConfigError: If validation fails
    """
    _check_choice("backend.kind", backend.kind, BACKEND_KINDS)
    _check_choice("embedder.kind", embedder.kind, EMBEDDER_KINDS)

    if backend.retries < 0:
        raise ConfigError(f"backend.retries must be >= 0, got: {backend.retries}")
    if not backend.timeout_sec > 0:
        raise ConfigError(f"backend.timeout_sec must be > 0, got: {backend.timeout_sec}")
    if backend.backoff_sec < 0:
        raise ConfigError(f"backend.backoff_sec must be >= 0, got: {backend.backoff_sec}")
    if backend.max_concurrency < 1:
        raise ConfigError(f"backend.max_concurrency must be >= 1, got: {backend.max_concurrency}")
    if embedder.dim < 1:
        raise ConfigError(f"embedder.dim must be >= 1, got: {embedder.dim}")

    if backend.kind == "remote":
        missing = []
        if not backend.base_url or backend.base_url.startswith("${"):
            missing.append("base_url")
        if not backend.model:
            missing.append("model")
        if missing:
            raise ConfigError(
                f"Remote backend requires: {', '.join('backend.' + m for m in missing)}"
            )
    if embedder.kind == "remote" and not embedder.model:
        raise ConfigError("embedder.model is required for the remote embedder")


def dict_to_dataclass(data: dict, dataclass_type: type) -> Any:
    """Convert a dictionary to a nested dataclass instance."""
    if data is None:
        return dataclass_type()
    if not isinstance(data, dict):
        raise ConfigError(f"Expected a mapping for {dataclass_type.__name__}, got: {type(data).__name__}")

    field_types = {f.name: f.type for f in dataclass_type.__dataclass_fields__.values()}
    kwargs = {}

    for key, value in data.items():
        if key in field_types:
            field_type = field_types[key]
            # Handle nested dataclasses
            if hasattr(field_type, '__dataclass_fields__'):
                kwargs[key] = dict_to_dataclass(value, field_type)
            else:
                kwargs[key] = value

    return dataclass_type(**kwargs)


def load_config(config_path: str | Path) -> Config:
    """
    Load configuration from a YAML file.

    Args:
        config_path: Path to the config.yml file

    Returns:
        Config instance (call validate_config before use)

    Raises:
        ConfigError: If the file is empty or malformed
        FileNotFoundError: If config file doesn't exist
    """
    config_path = Path(config_path)

    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, "r", encoding="utf-8") as f:
        try:
            raw_config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {config_path}: {e}") from e

    if not raw_config:
        raise ConfigError("Config file is empty")
    if not isinstance(raw_config, dict):
        raise ConfigError("Config file must contain a mapping at the top level")

    # Expand environment variables
    expanded_config = expand_env_vars(raw_config)

    try:
        return dict_to_dataclass(expanded_config, Config)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def validate_config(config: Config) -> None:
    """
    Run all validation checks on the configuration.

    Raises:
        ConfigError: If any validation fails
    """
    validate_pipeline(config.pipeline)
    validate_backend(config.backend, config.embedder)

    if config.harness.workers < 1:
        raise ConfigError(f"harness.workers must be >= 1, got: {config.harness.workers}")


def get_api_key(backend: BackendConfig) -> str:
    """Read the remote backend API key from the configured environment variable."""
    return os.environ.get(backend.api_key_env, "").strip()


def mask_secret(secret: str, visible_chars: int = 4) -> str:
    """Mask a secret string for safe logging."""
    if not secret or len(secret) <= visible_chars:
        return "***"
    return secret[:visible_chars] + "***"
