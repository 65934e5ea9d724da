from pathlib import Path

import pytest

from lung_screening_benchmark.config import SEED_ENV, THREADS_ENV, ConfigManager
from lung_screening_benchmark.main import create_engine
from lung_screening_benchmark.exceptions import InputValidationError
from lung_screening_benchmark.utils import format_duration, ordered_map, replicate_generators


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    monkeypatch.delenv(THREADS_ENV, raising=False)


class TestLoadConfig:
    def test_defaults_are_valid(self):
        config = ConfigManager.load_config()
        assert ConfigManager.validate_config(config) == (True, [])
        assert config['froc']['fp_rates'] == [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        assert config['matching']['criterion'] is None
        assert 'max_retries' not in config['classification']
        assert config['curation']['in_plane_extent'] == "max-size"

    def test_repository_file_matches_defaults(self):
        path = Path(__file__).parent.parent / "config.yaml"
        assert ConfigManager.load_config(str(path)) == ConfigManager.load_config()

    def test_yaml_merge(self, tmp_path):
        path = tmp_path / "custom.yaml"
        path.write_text("froc:\n  ci_level: 0.9\nprocessing:\n  seed: 11\n")
        config = ConfigManager.load_config(str(path))
        assert config['froc']['ci_level'] == 0.9
        assert config['froc']['max_retries'] == 100
        assert config['processing']['seed'] == 11

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ConfigManager.load_config(str(tmp_path / "absent.yaml"))

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "42")
        monkeypatch.setenv(THREADS_ENV, "4")
        config = ConfigManager.load_config()
        assert config['processing']['seed'] == 42
        assert config['processing']['max_workers'] == 4
        assert ConfigManager.load_config(use_env=False)['processing']['seed'] == 0

    def test_save_roundtrip(self, tmp_path):
        config = ConfigManager.load_config()
        path = str(tmp_path / "saved.yaml")
        assert ConfigManager.save_config(config, path)
        assert ConfigManager.load_config(path) == config


class TestValidation:
    @pytest.mark.parametrize("key,value,fragment", [
        ("preprocess.target_spacing", [0.7, 0.0, 1.25], "target_spacing"),
        ("preprocess.clip_lo", 600.0, "clip_lo"),
        ("classification.ci_method", "wald", "ci_method"),
        ("froc.ci_level", 1.0, "froc.ci_level"),
        ("curation.shares", [0.5, 0.5, 0.5], "sum to 1"),
        ("curation.slice_unit", "cm", "slice_unit"),
        ("processing.max_workers", 0, "max_workers"),
    ])
    def test_rejected(self, key, value, fragment):
        config = ConfigManager.load_config()
        ConfigManager.set_config_value(config, key, value)
        ok, errors = ConfigManager.validate_config(config)
        assert not ok
        assert any(fragment in e for e in errors)

    def test_engine_refuses_invalid_config(self):
        config = ConfigManager.load_config()
        config['processing']['max_workers'] = 0
        with pytest.raises(InputValidationError, match="max_workers"):
            create_engine(config=config)

    def test_dotted_access(self):
        config = ConfigManager.load_config()
        assert ConfigManager.get_config_value(config, "curation.neg_pos_ratio") == 3
        assert ConfigManager.get_config_value(config, "curation.missing", "x") == "x"
        ConfigManager.set_config_value(config, "new.section.value", 1)
        assert config['new']['section']['value'] == 1

    def test_engine_counts_runs(self, fixtures_dir):
        engine = create_engine(config=ConfigManager.load_config())
        assert engine.evaluate_classification(str(fixtures_dir / "scores.csv"))["success"]
        assert not engine.evaluate_classification(str(fixtures_dir / "absent.csv"))["success"]
        stats = engine.get_statistics()
        assert (stats["runs"], stats["failures"]) == (2, 1)


class TestUtils:
    def test_replicate_streams_depend_on_index_only(self):
        a = [g.integers(0, 1000) for g in replicate_generators(5, 4)]
        b = [g.integers(0, 1000) for g in replicate_generators(5, 8)][:4]
        assert a == b

    @pytest.mark.parametrize("workers", [1, 3])
    def test_ordered_map_keeps_order(self, workers):
        assert ordered_map(lambda x: x * x, list(range(20)), workers) == [
            x * x for x in range(20)]

    def test_format_duration(self):
        assert format_duration(5.0) == "5.0s"
        assert format_duration(150) == "2m 30s"
        assert format_duration(3720) == "1h 2m"
