"""Tests for configuration loading and validation."""

from pathlib import Path

import pytest

from src.config import (
    LATENCY_PRESETS,
    BackendConfig,
    ConfigError,
    LatencyProfile,
    default_config,
    expand_env_vars,
    get_api_key,
    load_config,
    mask_secret,
    resolve_latency_profile,
    validate_config,
)

REPO_CONFIG = Path(__file__).parent.parent / "config.yml"


def write_yaml(tmp_path, text: str) -> Path:
    path = tmp_path / "config.yml"
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadConfig:
    def test_repo_config_is_valid(self):
        config = load_config(REPO_CONFIG)
        validate_config(config)
        assert config.pipeline.clip_window_frames == 4
        assert config.pipeline.top_k == 3
        assert config.pipeline.latency().total_ms == 825.0
        assert config.backend.kind == "scripted"
        assert config.embedder.dim == 64

    def test_partial_sections_keep_defaults(self, tmp_path):
        config = load_config(write_yaml(tmp_path, "pipeline:\n  top_k: 5\nharness:\n  workers: 2\n"))
        assert config.pipeline.top_k == 5
        assert config.pipeline.guidance_mode == "query"
        assert config.harness.workers == 2
        assert config.logging.level == "INFO"

    def test_unknown_keys_ignored(self, tmp_path):
        config = load_config(write_yaml(tmp_path, "pipeline:\n  top_k: 2\n  beam_width: 9\nextras:\n  a: 1\n"))
        assert config.pipeline.top_k == 2

    def test_env_expansion(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SGSTREAM_TEST_URL", "http://llm.local/v1")
        config = load_config(write_yaml(tmp_path, "backend:\n  base_url: ${SGSTREAM_TEST_URL}\n"))
        assert config.backend.base_url == "http://llm.local/v1"

    def test_unset_env_left_verbatim(self, monkeypatch):
        monkeypatch.delenv("SGSTREAM_UNSET", raising=False)
        assert expand_env_vars({"a": ["${SGSTREAM_UNSET}"]}) == {"a": ["${SGSTREAM_UNSET}"]}

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "missing.yml")

    @pytest.mark.parametrize("text", ["", "# only a comment\n", "- a\n- b\n", "pipeline: 5\n", "pipeline: [1\n"])
    def test_malformed_files(self, tmp_path, text):
        with pytest.raises(ConfigError):
            load_config(write_yaml(tmp_path, text))


class TestValidation:
    @pytest.mark.parametrize("section, key, value", [
        ("pipeline", "clip_window_frames", 0),
        ("pipeline", "top_k", 0),
        ("pipeline", "guidance_mode", "scene"),
        ("pipeline", "embed_mode", "image"),
        ("pipeline", "context_mode", "frames"),
        ("pipeline", "sampling_policy", "adaptive"),
        ("pipeline", "fps", 0.0),
        ("pipeline", "max_context_frames", 0),
        ("pipeline", "memory_max_entries", 0),
        ("pipeline", "latency_profile", "turbo"),
        ("backend", "kind", "local"),
        ("backend", "retries", -1),
        ("backend", "timeout_sec", 0),
        ("embedder", "kind", "clip"),
        ("embedder", "dim", 0),
        ("harness", "workers", 0),
    ])
    def test_invalid_values(self, section, key, value):
        config = default_config()
        setattr(getattr(config, section), key, value)
        with pytest.raises(ConfigError):
            validate_config(config)

    def test_defaults_are_valid(self):
        validate_config(default_config())

    def test_remote_backend_needs_url_and_model(self):
        config = default_config()
        config.backend.kind = "remote"
        config.backend.base_url = "${SGSTREAM_BASE_URL}"
        with pytest.raises(ConfigError, match="backend.base_url, backend.model"):
            validate_config(config)

    def test_remote_embedder_needs_model(self):
        config = default_config()
        config.embedder.kind = "remote"
        with pytest.raises(ConfigError, match="embedder.model"):
            validate_config(config)


class TestLatencyProfiles:
    @pytest.mark.parametrize("name, total", [
        ("embedding", 825.0),
        ("kv-cache", 473.0),
        ("baseline-embedding", 324.0),
        ("baseline-kv-cache", 182.0),
    ])
    def test_preset_totals(self, name, total):
        assert resolve_latency_profile(name).total_ms == total

    def test_mapping(self):
        profile = resolve_latency_profile({"sgg_ms": 100, "retrieval_ms": 5, "trigger_ms": "95"})
        assert profile == LatencyProfile(100.0, 5.0, 95.0)

    @pytest.mark.parametrize("value", [{"sgg_ms": 1}, {"sgg_ms": -1, "retrieval_ms": 0, "trigger_ms": 0}, 12])
    def test_invalid(self, value):
        with pytest.raises(ConfigError):
            resolve_latency_profile(value)

    def test_none_means_measured(self):
        assert resolve_latency_profile(None) is None
        assert resolve_latency_profile("") is None

    def test_presets_cover_four_configurations(self):
        assert len(LATENCY_PRESETS) == 4


class TestSecrets:
    def test_mask_secret(self):
        assert mask_secret("sk-abcdef123") == "sk-a***"
        assert mask_secret("abc") == "***"
        assert mask_secret("") == "***"

    def test_api_key_from_env(self, monkeypatch):
        monkeypatch.setenv("MY_LLM_KEY", "  secret-value \n")
        assert get_api_key(BackendConfig(api_key_env="MY_LLM_KEY")) == "secret-value"
        monkeypatch.delenv("MY_LLM_KEY")
        assert get_api_key(BackendConfig(api_key_env="MY_LLM_KEY")) == ""
