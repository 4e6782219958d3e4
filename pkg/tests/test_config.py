import pytest

from svkit.config import DEFAULT_CONFIG_TEXT, PipelineConfig, default_config, load_config, write_default_config
from svkit.errors import ConfigurationError


def test_default_config_text_loads(tmp_path):
    path = tmp_path / "config.ini"
    write_default_config(path)
    config = load_config(path)
    assert config.corpus.n_speakers == 100
    assert config.run.sources == ("gmm", "oracle", "tdnn")
    assert config.tv.rank == 20
    assert config.tv.update_sigma is True


def test_defaults_match_default_object(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text(DEFAULT_CONFIG_TEXT)
    assert load_config(path) == default_config()


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_unknown_option_rejected(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[ubm]\nn_compnents = 16\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_partial_override(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[corpus]\nn_speakers = 12\nactive_seconds = 20.0\n[tv]\nrank = 6\n")
    config = load_config(path)
    assert config.corpus.n_speakers == 12
    assert config.tv.rank == 6
    assert config.ubm.n_components == 64  # untouched default


def test_validate_rank_against_supervector():
    config = PipelineConfig()
    config.corpus.n_classes = 4
    config.corpus.feature_dim = 3
    config.tv.rank = 50
    with pytest.raises(ConfigurationError):
        config.validate()


def test_validate_truncation_budget():
    config = PipelineConfig()
    config.corpus.active_seconds = 8.0  # less than skip + keep
    with pytest.raises(ConfigurationError):
        config.validate()


def test_validate_source_names():
    config = PipelineConfig()
    config.run.sources = ("gmm", "mystery")
    with pytest.raises(ConfigurationError):
        config.validate()
