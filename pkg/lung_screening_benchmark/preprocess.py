"""
Deterministic CT volume preprocessing

The fixed order is resample -> clip -> normalize.
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import InputValidationError
from .geometry import GridFrame
from .nifti_io import VolumeGrid

logger = logging.getLogger(__name__)

PIPELINE_ORDER = ("resample", "clip", "normalize")

# ceil() slack so that n * s / s never rounds up to n + 1
_DIMS_EPS = 1e-9


class NormalizeMode(Enum):
    ZSCORE = "per-volume-zscore"
    NONE = "none"


@dataclass(frozen=True)
class PreprocessConfig:
    """Resampling target and intensity window"""
    target_spacing: Tuple[float, float, float] = (0.7, 0.7, 1.25)
    clip_lo: float = -1000.0
    clip_hi: float = 500.0
    normalize: NormalizeMode = NormalizeMode.ZSCORE
    epsilon_std: float = 1e-6
    patch_dims: Tuple[int, int, int] = field(default=(64, 64, 64))

    def __post_init__(self):
        if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
            raise InputValidationError(f"Target spacing must be positive: {self.target_spacing}")
        if not self.clip_lo < self.clip_hi:
            raise InputValidationError(
                f"clip_lo ({self.clip_lo}) must be below clip_hi ({self.clip_hi})")
        if self.epsilon_std <= 0:
            raise InputValidationError("epsilon_std must be positive")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> 'PreprocessConfig':
        """Build from the 'preprocess' section of a loaded configuration"""
        section = config.get('preprocess', config)
        return cls(
            target_spacing=tuple(float(s) for s in section['target_spacing']),
            clip_lo=float(section['clip_lo']),
            clip_hi=float(section['clip_hi']),
            normalize=NormalizeMode(section['normalize']),
            epsilon_std=float(section['epsilon_std']),
            patch_dims=tuple(int(d) for d in section.get('patch_dims', (64, 64, 64)))
        )

    def echo(self) -> Dict[str, Any]:
        return {
            'order': list(PIPELINE_ORDER),
            'target_spacing': list(self.target_spacing),
            'clip_lo': self.clip_lo,
            'clip_hi': self.clip_hi,
            'normalize': self.normalize.value,
            'epsilon_std': self.epsilon_std,
            'patch_dims': list(self.patch_dims)
        }


def resampled_frame(frame: GridFrame, target_spacing: Sequence[float]) -> GridFrame:
    """Grid covering the same extent at the target spacing, same origin"""
    dims = tuple(
        max(1, math.ceil(extent / t - _DIMS_EPS))
        for extent, t in zip(frame.extent_mm, target_spacing)
    )
    return GridFrame(frame.origin, tuple(float(t) for t in target_spacing), dims)


def sample_block(v: VolumeGrid, out_frame: GridFrame, start: Sequence[int],
                 shape: Sequence[int]) -> np.ndarray:
    """Trilinear samples of v at out_frame voxels start .. start + shape

    Source positions are computed through world coordinates; positions
    outside the source grid take the nearest edge value.
    """
    axes = []
    for axis in range(3):
        idx = np.arange(start[axis], start[axis] + shape[axis], dtype=np.float64)
        world = out_frame.origin.as_tuple()[axis] + idx * out_frame.spacing[axis]
        src = (world - v.frame.origin.as_tuple()[axis]) / v.frame.spacing[axis]
        axes.append(src)

    coords = np.meshgrid(*axes, indexing='ij')
    return ndimage.map_coordinates(v.data, coords, order=1, mode='nearest', prefilter=False)


def resample(v: VolumeGrid, target_spacing: Sequence[float]) -> VolumeGrid:
    """Trilinear resampling onto a grid with the target spacing

    Args:
        v: Source volume
        target_spacing: Output spacing in mm (x, y, z)

    Returns:
        VolumeGrid whose dims are ceil(extent / target_spacing) per axis
    """
    out_frame = resampled_frame(v.frame, target_spacing)
    if out_frame.spacing == tuple(v.frame.spacing) and out_frame.dims == v.frame.dims:
        return VolumeGrid(out_frame, v.data.copy())

    data = sample_block(v, out_frame, (0, 0, 0), out_frame.dims)
    logger.debug(f"Resampled {v.frame.dims} @ {v.frame.spacing} -> "
                 f"{out_frame.dims} @ {out_frame.spacing}")
    return VolumeGrid(out_frame, data)


def clip_normalize_array(data: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    clipped = np.clip(data, cfg.clip_lo, cfg.clip_hi)
    if cfg.normalize is NormalizeMode.NONE:
        return clipped

    mean = clipped.mean()
    std = clipped.std()  # population std
    if std < cfg.epsilon_std:
        return np.zeros_like(clipped)
    return (clipped - mean) / std


def clip_normalize(v: VolumeGrid, cfg: PreprocessConfig) -> VolumeGrid:
    """Clamp to [clip_lo, clip_hi], then per-volume z-score (zeros if std < epsilon)"""
    return VolumeGrid(v.frame, clip_normalize_array(v.data, cfg))


def preprocess_volume(v: VolumeGrid, cfg: Optional[PreprocessConfig] = None) -> VolumeGrid:
    """Full pipeline on a whole volume"""
    cfg = cfg or PreprocessConfig()
    return clip_normalize(resample(v, cfg.target_spacing), cfg)


__all__ = [
    'NormalizeMode',
    'PreprocessConfig',
    'PIPELINE_ORDER',
    'resampled_frame',
    'sample_block',
    'resample',
    'clip_normalize',
    'clip_normalize_array',
    'preprocess_volume'
]
