"""
Configuration management for the benchmark engine
"""

import copy
import os
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"

SEED_ENV = "LSB_SEED"
THREADS_ENV = "LSB_THREADS"


class ConfigManager:
    """Manage configuration for benchmark runs"""

    DEFAULT_CONFIG = {
        "project": {
            "name": "lung_screening_benchmark",
            "output_dir": "./output",
            "log_dir": None
        },
        "matching": {
            "criterion": None,  # center-sphere | center-box | iou:<t>; required
            "probe_size_mm": 5.0
        },
        "froc": {
            "fp_rates": [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            "bootstrap_replicates": 1000,
            "ci_level": 0.95,
            "max_retries": 100
        },
        "classification": {
            "ci_method": "delong",
            "bootstrap_replicates": 2000,
            "ci_level": 0.95
        },
        "preprocess": {
            "target_spacing": [0.7, 0.7, 1.25],
            "clip_lo": -1000.0,
            "clip_hi": 500.0,
            "normalize": "per-volume-zscore",
            "epsilon_std": 1e-6,
            "patch_dims": [64, 64, 64]
        },
        "curation": {
            "min_2d_iou": 0.2,
            "max_slice_gap": 1,
            "slice_thickness_mm": 1.25,
            "slice_unit": "index",
            "z_origin_mm": 0.0,
            "in_plane_extent": "max-size",
            "neg_pos_ratio": 3,
            "strata": [0.0, 0.40, 0.70, 1.0],
            "shares": [1 / 3, 1 / 3, 1 / 3]
        },
        "processing": {
            "seed": 0,
            "max_workers": 1,
            "show_progress": False
        },
        "logging": {
            "level": "INFO",
            "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        }
    }

    VALID_NORMALIZE = ("per-volume-zscore", "none")
    VALID_CI_METHODS = ("delong", "bootstrap")
    VALID_SLICE_UNITS = ("index", "mm")
    VALID_EXTENT_RULES = ("union", "max-size")

    @classmethod
    def load_config(cls, config_path: Optional[str] = None,
                    use_env: bool = True) -> Dict[str, Any]:
        """Load configuration from file or use defaults

        Args:
            config_path: Path to a YAML or JSON configuration file
            use_env: Apply LSB_SEED / LSB_THREADS overrides (read via .env too)

        Returns:
            Configuration dictionary
        """
        config = copy.deepcopy(cls.DEFAULT_CONFIG)

        if config_path:
            if not os.path.exists(config_path):
                raise FileNotFoundError(f"Configuration file not found: {config_path}")

            with open(config_path, 'r', encoding='utf-8') as f:
                if config_path.endswith('.json'):
                    file_config = json.load(f)
                else:
                    file_config = yaml.safe_load(f)

            if file_config:
                config = cls._deep_merge(config, file_config)
            logger.info(f"Loaded configuration from {config_path}")

        if use_env:
            cls._apply_env_overrides(config)

        return config

    @classmethod
    def _deep_merge(cls, base: Dict, update: Dict) -> Dict:
        """Deep merge two dictionaries"""
        result = base.copy()

        for key, value in update.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = cls._deep_merge(result[key], value)
            else:
                result[key] = value

        return result

    @classmethod
    def _apply_env_overrides(cls, config: Dict):
        """Seed and thread count are the only environment-controlled values"""
        load_dotenv(override=False)

        seed = os.environ.get(SEED_ENV)
        if seed:
            config['processing']['seed'] = int(seed)
            logger.debug(f"Seed overridden from {SEED_ENV}: {seed}")

        threads = os.environ.get(THREADS_ENV)
        if threads:
            config['processing']['max_workers'] = int(threads)
            logger.debug(f"Thread count overridden from {THREADS_ENV}: {threads}")

    @classmethod
    def save_config(cls, config: Dict, config_path: str) -> bool:
        """Save configuration to a YAML or JSON file"""
        try:
            Path(config_path).parent.mkdir(parents=True, exist_ok=True)

            with open(config_path, 'w', encoding='utf-8') as f:
                if config_path.endswith('.json'):
                    json.dump(config, f, indent=2, sort_keys=True)
                else:
                    yaml.safe_dump(config, f, default_flow_style=False, sort_keys=True)

            logger.info(f"Configuration saved to {config_path}")
            return True

        except OSError as e:
            logger.error(f"Failed to save configuration: {e}")
            return False

    @classmethod
    def validate_config(cls, config: Dict) -> Tuple[bool, List[str]]:
        """Validate configuration

        Args:
            config: Configuration to validate

        Returns:
            Tuple of (is_valid, list_of_errors)
        """
        errors = []

        prep = config.get('preprocess', {})
        spacing = prep.get('target_spacing', [])
        if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
            errors.append(f"preprocess.target_spacing must be three positive values: {spacing}")
        if float(prep.get('clip_lo', 0)) >= float(prep.get('clip_hi', 0)):
            errors.append("preprocess.clip_lo must be below preprocess.clip_hi")
        if prep.get('normalize') not in cls.VALID_NORMALIZE:
            errors.append(f"Invalid preprocess.normalize: {prep.get('normalize')}")
        if float(prep.get('epsilon_std', 0)) <= 0:
            errors.append("preprocess.epsilon_std must be positive")
        dims = prep.get('patch_dims', [])
        if len(dims) != 3 or any(int(d) < 1 for d in dims):
            errors.append(f"preprocess.patch_dims must be three positive integers: {dims}")

        froc = config.get('froc', {})
        rates = froc.get('fp_rates', [])
        if not rates or any(float(r) <= 0 for r in rates):
            errors.append("froc.fp_rates must be a non-empty list of positive rates")
        if int(froc.get('bootstrap_replicates', 0)) < 1:
            errors.append("froc.bootstrap_replicates must be >= 1")

        cls_config = config.get('classification', {})
        if cls_config.get('ci_method') not in cls.VALID_CI_METHODS:
            errors.append(f"Invalid classification.ci_method: {cls_config.get('ci_method')}")
        if int(cls_config.get('bootstrap_replicates', 0)) < 1:
            errors.append("classification.bootstrap_replicates must be >= 1")
        for section in ('froc', 'classification'):
            level = float(config.get(section, {}).get('ci_level', 0))
            if not 0 < level < 1:
                errors.append(f"{section}.ci_level must be in (0, 1)")

        cur = config.get('curation', {})
        if not 0 < float(cur.get('min_2d_iou', 0)) <= 1:
            errors.append("curation.min_2d_iou must be in (0, 1]")
        if int(cur.get('max_slice_gap', -1)) < 0:
            errors.append("curation.max_slice_gap must be >= 0")
        if float(cur.get('slice_thickness_mm', 0)) <= 0:
            errors.append("curation.slice_thickness_mm must be positive")
        if cur.get('slice_unit') not in cls.VALID_SLICE_UNITS:
            errors.append(f"Unknown curation.slice_unit: {cur.get('slice_unit')}")
        if cur.get('in_plane_extent') not in cls.VALID_EXTENT_RULES:
            errors.append(f"Unknown curation.in_plane_extent: {cur.get('in_plane_extent')}")
        if float(cur.get('neg_pos_ratio', 0)) < 1:
            errors.append("curation.neg_pos_ratio must be >= 1")
        strata = cur.get('strata', [])
        shares = cur.get('shares', [])
        if len(strata) < 2 or strata[0] != 0 or strata[-1] != 1 or list(strata) != sorted(strata):
            errors.append(f"curation.strata must be increasing edges from 0 to 1: {strata}")
        elif len(shares) != len(strata) - 1:
            errors.append("curation.shares must have one entry per stratum")
        elif abs(sum(shares) - 1.0) > 1e-9:
            errors.append(f"curation.shares must sum to 1: {shares}")

        processing = config.get('processing', {})
        if int(processing.get('max_workers', 0)) < 1:
            errors.append("processing.max_workers must be >= 1")

        return len(errors) == 0, errors

    @classmethod
    def get_config_value(cls, config: Dict, key_path: str, default: Any = None) -> Any:
        """Get configuration value using dot notation

        Args:
            config: Configuration dictionary
            key_path: Dot notation path (e.g., "froc.fp_rates")
            default: Default value if key not found

        Returns:
            Configuration value
        """
        keys = key_path.split('.')
        current = config

        for key in keys:
            if isinstance(current, dict) and key in current:
                current = current[key]
            else:
                return default

        return current

    @classmethod
    def set_config_value(cls, config: Dict, key_path: str, value: Any):
        """Set configuration value using dot notation"""
        keys = key_path.split('.')
        current = config

        for key in keys[:-1]:
            if key not in current:
                current[key] = {}
            current = current[key]

        current[keys[-1]] = value


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """Load configuration from file or use defaults"""
    return ConfigManager.load_config(config_path)


__all__ = ['ConfigManager', 'load_config', 'SEED_ENV', 'THREADS_ENV']
