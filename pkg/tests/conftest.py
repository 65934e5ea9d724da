"""
Shared fixtures for the benchmark test suite
"""

from pathlib import Path

import numpy as np
import pytest

from lung_screening_benchmark.geometry import HitCriterion, HitMode, Point3, Sphere
from lung_screening_benchmark.nifti_io import VolumeGrid
from lung_screening_benchmark.tabular_io import Annotation, Candidate, ScoredRecord

FIXTURES = Path(__file__).parent / "fixtures"

# Operating points of the bundled detection fixture: (fp/scan, sensitivity)
FIXTURE_POINTS = [(0.0, 0.25), (0.0, 0.5), (0.25, 0.5), (1.0, 0.75), (2.0, 1.0)]
FIXTURE_SENSITIVITIES = [0.5, 0.5, 0.5 + 0.25 / 3, 0.75, 1.0, 1.0, 1.0]
FIXTURE_CPM = 16 / 21


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def sphere_criterion() -> HitCriterion:
    return HitCriterion(HitMode.CENTER_IN_SPHERE)


def lesion(scan_id: str, x=0.0, y=0.0, z=0.0, diameter=10.0, nodule_id=None) -> Annotation:
    return Annotation(scan_id, Sphere(Point3(x, y, z), diameter), nodule_id or f"{scan_id}#1")


def candidate(scan_id: str, x: float, probability: float, y=0.0, z=0.0) -> Candidate:
    return Candidate(scan_id, Point3(x, y, z), probability)


def scored(labels, scores, prefix="r"):
    return [ScoredRecord(f"{prefix}{i}", f"scan{i}", float(s), int(y))
            for i, (y, s) in enumerate(zip(labels, scores))]


@pytest.fixture
def fixture_scans():
    return ["s1", "s2", "s3", "s4"]


@pytest.fixture
def fixture_lesions(fixture_scans):
    return [lesion(s) for s in fixture_scans]


@pytest.fixture
def fixture_candidates():
    """TP 0.95, TP 0.9, FP 0.85, TP + 3 FP at 0.6, TP + 4 FP at 0.4"""
    return [
        candidate("s1", 0.0, 0.95),
        candidate("s2", 1.0, 0.9),
        candidate("s1", 50.0, 0.85),
        candidate("s3", 0.0, 0.6, y=1.0),
        candidate("s1", 60.0, 0.6),
        candidate("s2", 60.0, 0.6),
        candidate("s3", 60.0, 0.6),
        candidate("s4", 0.0, 0.4, z=1.0),
        candidate("s1", 70.0, 0.4),
        candidate("s2", 70.0, 0.4),
        candidate("s3", 70.0, 0.4),
        candidate("s4", 70.0, 0.4),
    ]


@pytest.fixture
def ramp_volume() -> VolumeGrid:
    """f(i, j, k) = i + 2j + 3k on the default target grid"""
    i, j, k = np.meshgrid(np.arange(24), np.arange(20), np.arange(16), indexing='ij')
    return VolumeGrid.from_array((i + 2 * j + 3 * k).astype(np.float64), (0.7, 0.7, 1.25))
