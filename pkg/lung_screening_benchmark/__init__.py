"""
Lung Screening Benchmark
Evaluate lung nodule detection and cancer classification outputs and curate
training data for them

Example usage:
    from lung_screening_benchmark import create_engine

    engine = create_engine()
    result = engine.evaluate_detection(
        candidates="candidates.csv",
        annotations="annotations.csv",
        scans="scans.csv",
        criterion="center-sphere"
    )
    print(result['report'].results['froc']['cpm'])
"""

# Core components
from .main import BenchmarkEngine, create_engine

# Configuration
from .config import TOOL_VERSION, ConfigManager, load_config

# Evaluation
from .detect_eval import (
    CPM_FP_RATES,
    FrocCurve,
    MatchResult,
    froc,
    froc_bootstrap,
    froc_by_subgroup,
    interpolate_sensitivity,
    match
)
from .classify_eval import AucEstimate, auc, bootstrap_auc_ci, delong_ci, roc_points, subgroup_report

# Curation
from .curation import (
    GroupingParams,
    PatchManifest,
    SwsConfig,
    aggregate_slices,
    derive_negatives,
    extract_patch,
    label_manifest,
    sws_sample
)

# Data
from .geometry import Box3, GridFrame, HitCriterion, Point3, Sphere
from .nifti_io import VolumeGrid, load_volume, read_volume, save_volume, write_volume
from .preprocess import PreprocessConfig, clip_normalize, resample

# Errors
from .exceptions import BenchmarkError, InputValidationError, InvariantViolation

# Version
__version__ = TOOL_VERSION
__license__ = "MIT"

# Public API
__all__ = [
    # Engine
    'BenchmarkEngine',
    'create_engine',

    # Configuration
    'ConfigManager',
    'load_config',

    # Detection
    'CPM_FP_RATES',
    'FrocCurve',
    'MatchResult',
    'match',
    'froc',
    'froc_bootstrap',
    'froc_by_subgroup',
    'interpolate_sensitivity',

    # Classification
    'AucEstimate',
    'auc',
    'delong_ci',
    'bootstrap_auc_ci',
    'roc_points',
    'subgroup_report',

    # Curation
    'GroupingParams',
    'SwsConfig',
    'PatchManifest',
    'aggregate_slices',
    'derive_negatives',
    'sws_sample',
    'label_manifest',
    'extract_patch',

    # Data
    'Point3',
    'Box3',
    'Sphere',
    'GridFrame',
    'HitCriterion',
    'VolumeGrid',
    'read_volume',
    'write_volume',
    'load_volume',
    'save_volume',
    'PreprocessConfig',
    'resample',
    'clip_normalize',

    # Errors
    'BenchmarkError',
    'InputValidationError',
    'InvariantViolation',

    # Metadata
    '__version__',
    '__license__'
]
