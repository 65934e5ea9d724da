"""
World/voxel coordinate transforms, 3D box arithmetic and candidate hit rules

All coordinates are world millimeters in (x, y, z) order.
"""

import math
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

from .exceptions import CriterionMismatchError, InputValidationError

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]

DEFAULT_PROBE_SIZE_MM = 5.0


def _require_finite(values: Sequence[float], what: str):
    for value in values:
        if not math.isfinite(value):
            raise InputValidationError(f"{what} must be finite, got {tuple(values)}")


@dataclass(frozen=True)
class Point3:
    """A point in world millimeters"""
    x: float
    y: float
    z: float

    def __post_init__(self):
        _require_finite((self.x, self.y, self.z), "Point3 coordinates")

    def as_tuple(self) -> Triple:
        return (self.x, self.y, self.z)

    def distance_to(self, other: 'Point3') -> float:
        return math.dist(self.as_tuple(), other.as_tuple())


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box given by its center and full extents in millimeters"""
    center: Point3
    size_x: float
    size_y: float
    size_z: float

    def __post_init__(self):
        sizes = (self.size_x, self.size_y, self.size_z)
        _require_finite(sizes, "Box3 sizes")
        if min(sizes) <= 0:
            raise InputValidationError(f"Box3 sizes must be positive, got {sizes}")

    @property
    def size(self) -> Triple:
        return (self.size_x, self.size_y, self.size_z)

    @property
    def lower(self) -> Triple:
        c = self.center
        return (c.x - self.size_x / 2, c.y - self.size_y / 2, c.z - self.size_z / 2)

    @property
    def upper(self) -> Triple:
        c = self.center
        return (c.x + self.size_x / 2, c.y + self.size_y / 2, c.z + self.size_z / 2)

    @property
    def volume(self) -> float:
        return _volume(self.lower, self.upper)

    @classmethod
    def from_bounds(cls, lower: Sequence[float], upper: Sequence[float]) -> 'Box3':
        """Build a box from its min and max corners"""
        center = Point3(*((lo + hi) / 2 for lo, hi in zip(lower, upper)))
        return cls(center, *(hi - lo for lo, hi in zip(lower, upper)))

    def contains(self, p: Point3) -> bool:
        """Closed-box containment"""
        return all(lo <= v <= hi for lo, v, hi in zip(self.lower, p.as_tuple(), self.upper))

    def contains_box(self, other: 'Box3', tol: float = 1e-9) -> bool:
        return all(
            lo - tol <= olo and ohi <= hi + tol
            for lo, hi, olo, ohi in zip(self.lower, self.upper, other.lower, other.upper)
        )


@dataclass(frozen=True)
class Sphere:
    """Center plus diameter annotation (LUNA16-style)"""
    center: Point3
    diameter: float

    def __post_init__(self):
        if not math.isfinite(self.diameter) or self.diameter <= 0:
            raise InputValidationError(f"Diameter must be positive, got {self.diameter}")

    def bounding_box(self) -> Box3:
        return Box3(self.center, self.diameter, self.diameter, self.diameter)


Geometry = Union[Box3, Sphere]


@dataclass(frozen=True)
class GridFrame:
    """Placement of a voxel grid in world space

    origin is the world position of the center of voxel (0, 0, 0).
    """
    origin: Point3
    spacing: Triple
    dims: Tuple[int, int, int]

    def __post_init__(self):
        if len(self.spacing) != 3 or len(self.dims) != 3:
            raise InputValidationError("GridFrame spacing and dims need three components")
        _require_finite(self.spacing, "Spacing")
        if min(self.spacing) <= 0:
            raise InputValidationError(f"Spacing must be positive, got {self.spacing}")
        if min(self.dims) < 1:
            raise InputValidationError(f"Dims must be >= 1, got {self.dims}")

    @property
    def extent_mm(self) -> Triple:
        return tuple(n * s for n, s in zip(self.dims, self.spacing))


class HitMode(Enum):
    """Rules deciding whether a candidate point detects an annotation"""
    CENTER_IN_BOX = "center-box"
    CENTER_IN_SPHERE = "center-sphere"
    IOU_THRESHOLD = "iou"


@dataclass(frozen=True)
class HitCriterion:
    """Hit rule plus its parameters

    threshold is set iff mode is IOU_THRESHOLD; probe_size_mm is the cube
    edge a point candidate is expanded to for IoU and overlap ranking.
    """
    mode: HitMode
    threshold: Optional[float] = None
    probe_size_mm: float = DEFAULT_PROBE_SIZE_MM

    def __post_init__(self):
        if self.mode is HitMode.IOU_THRESHOLD:
            if self.threshold is None or not 0 < self.threshold <= 1:
                raise InputValidationError(
                    f"IoU criterion needs a threshold in (0, 1], got {self.threshold}")
        elif self.threshold is not None:
            raise InputValidationError(f"Criterion {self.mode.value} takes no threshold")
        if self.probe_size_mm <= 0:
            raise InputValidationError("Probe size must be positive")

    @classmethod
    def parse(cls, text: str, probe_size_mm: float = DEFAULT_PROBE_SIZE_MM) -> 'HitCriterion':
        """Parse "center-sphere", "center-box" or "iou:<t>" """
        text = (text or "").strip()
        if text.startswith("iou:"):
            try:
                threshold = float(text[4:])
            except ValueError:
                raise InputValidationError(f"Invalid IoU threshold in criterion '{text}'")
            return cls(HitMode.IOU_THRESHOLD, threshold, probe_size_mm)
        for mode in (HitMode.CENTER_IN_BOX, HitMode.CENTER_IN_SPHERE):
            if text == mode.value:
                return cls(mode, None, probe_size_mm)
        raise InputValidationError(
            f"Unknown criterion '{text}' (expected center-sphere, center-box or iou:<t>)")

    def describe(self) -> str:
        if self.mode is HitMode.IOU_THRESHOLD:
            return f"iou:{self.threshold}"
        return self.mode.value

    def probe(self, c: Point3) -> Box3:
        p = self.probe_size_mm
        return Box3(c, p, p, p)


def world_to_voxel(p: Point3, frame: GridFrame) -> Triple:
    """Continuous voxel coordinates of a world point"""
    return tuple(
        (v - o) / s for v, o, s in zip(p.as_tuple(), frame.origin.as_tuple(), frame.spacing)
    )


def voxel_to_world(v: Sequence[float], frame: GridFrame) -> Point3:
    """World point of continuous voxel coordinates"""
    _require_finite(v, "Voxel coordinates")
    return Point3(*(o + i * s for i, o, s in zip(v, frame.origin.as_tuple(), frame.spacing)))


def _volume(lower: Triple, upper: Triple) -> float:
    return (upper[0] - lower[0]) * (upper[1] - lower[1]) * (upper[2] - lower[2])


def iou3(a: Box3, b: Box3) -> float:
    """Intersection over union of two axis-aligned boxes"""
    if a == b:
        return 1.0

    a_lo, a_hi, b_lo, b_hi = a.lower, a.upper, b.lower, b.upper
    overlap = []
    for i in range(3):
        width = min(a_hi[i], b_hi[i]) - max(a_lo[i], b_lo[i])
        if width <= 0:
            return 0.0
        overlap.append(width)

    inter = overlap[0] * overlap[1] * overlap[2]
    union = _volume(a_lo, a_hi) + _volume(b_lo, b_hi) - inter
    return min(1.0, max(0.0, inter / union))


def as_box(geometry: Geometry) -> Box3:
    """Box view of an annotation; spheres become their bounding cube"""
    if isinstance(geometry, Sphere):
        return geometry.bounding_box()
    return geometry


def hit(c: Point3, ann: Geometry, crit: HitCriterion) -> bool:
    """Does candidate point c detect annotation ann under crit"""
    if crit.mode is HitMode.CENTER_IN_SPHERE:
        if not isinstance(ann, Sphere):
            raise CriterionMismatchError(
                "center-sphere criterion requires center+diameter annotations")
        return c.distance_to(ann.center) < ann.diameter / 2

    box = as_box(ann)
    if crit.mode is HitMode.CENTER_IN_BOX:
        return box.contains(c)

    return iou3(crit.probe(c), box) >= crit.threshold


def overlap_score(c: Point3, ann: Geometry, crit: HitCriterion) -> float:
    """IoU of the candidate probe with the annotation box, used to rank hits"""
    return iou3(crit.probe(c), as_box(ann))


__all__ = [
    'Point3',
    'Box3',
    'Sphere',
    'Geometry',
    'GridFrame',
    'HitMode',
    'HitCriterion',
    'world_to_voxel',
    'voxel_to_world',
    'iou3',
    'as_box',
    'hit',
    'overlap_score',
    'DEFAULT_PROBE_SIZE_MM'
]
