"""
Dataset curation: 2D slice-box aggregation, false-positive negatives,
confidence-stratified candidate sampling and patch extraction
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import CurationError, InputValidationError
from .geometry import Box3, HitCriterion, Point3, hit, voxel_to_world, world_to_voxel
from .nifti_io import VolumeGrid, load_volume, save_volume
from .preprocess import PreprocessConfig, clip_normalize, resampled_frame, sample_block
from .tabular_io import (
    Annotation, Candidate, Label, PatchRow, SliceBox2D, SliceUnit,
    emit_patch_manifest, parse_patch_manifest
)
from .utils import ordered_map

logger = logging.getLogger(__name__)

NODULE = "nodule"
NON_NODULE = "non-nodule"
CANCER = "cancer"
NO_CANCER = "no-cancer"

_LABEL_CLASSES = {Label.MALIGNANT: CANCER, Label.BENIGN: NO_CANCER}


class ExtentRule(Enum):
    """How the in-plane size of an aggregated nodule is formed

    MAX_SIZE takes the largest single-slice width and height; UNION spans
    every slice box. Both are centred on the union midpoint.
    """
    MAX_SIZE = "max-size"
    UNION = "union"


# ---------------------------------------------------------------------------
# Slice-box aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupingParams:
    """Linking rule for per-slice boxes of one nodule"""
    min_2d_iou: float = 0.2
    max_slice_gap: int = 1
    slice_thickness_mm: float = 1.25
    slice_unit: SliceUnit = SliceUnit.INDEX
    z_origin_mm: float = 0.0
    in_plane_extent: ExtentRule = ExtentRule.MAX_SIZE

    def __post_init__(self):
        if not 0 < self.min_2d_iou <= 1:
            raise InputValidationError(f"min_2d_iou must be in (0, 1], got {self.min_2d_iou}")
        if self.max_slice_gap < 0:
            raise InputValidationError("max_slice_gap must be >= 0")
        if self.slice_thickness_mm <= 0:
            raise InputValidationError("slice_thickness_mm must be positive")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> 'GroupingParams':
        section = config.get('curation', config)
        return cls(
            min_2d_iou=float(section['min_2d_iou']),
            max_slice_gap=int(section['max_slice_gap']),
            slice_thickness_mm=float(section['slice_thickness_mm']),
            slice_unit=SliceUnit(section.get('slice_unit', 'index')),
            z_origin_mm=float(section.get('z_origin_mm', 0.0)),
            in_plane_extent=ExtentRule(section.get('in_plane_extent', 'max-size'))
        )

    def echo(self) -> Dict[str, Any]:
        return {
            'min_2d_iou': self.min_2d_iou,
            'max_slice_gap': self.max_slice_gap,
            'slice_thickness_mm': self.slice_thickness_mm,
            'slice_unit': self.slice_unit.value,
            'z_origin_mm': self.z_origin_mm,
            'in_plane_extent': self.in_plane_extent.value,
            'linking': "adjacent-slice 2D IoU with gap tolerance"
        }


def iou2d(a: SliceBox2D, b: SliceBox2D) -> float:
    """In-plane intersection over union"""
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.width * a.height + b.width * b.height - inter)


def _missing_slices(last: float, pos: float, params: GroupingParams) -> int:
    if params.slice_unit is SliceUnit.INDEX:
        return int(round(pos - last)) - 1
    return int(round((pos - last) / params.slice_thickness_mm)) - 1


def _box_key(b: SliceBox2D) -> Tuple:
    return (b.slice_position, b.x_min, b.y_min, b.x_max, b.y_max)


def _to_annotation(group: List[SliceBox2D], scan_id: str, k: int,
                   params: GroupingParams) -> Annotation:
    first = group[0].slice_position
    last = group[-1].slice_position
    x_lo = min(b.x_min for b in group)
    x_hi = max(b.x_max for b in group)
    y_lo = min(b.y_min for b in group)
    y_hi = max(b.y_max for b in group)

    if params.in_plane_extent is ExtentRule.UNION:
        width, height = x_hi - x_lo, y_hi - y_lo
    else:
        width = max(b.width for b in group)
        height = max(b.height for b in group)

    t = params.slice_thickness_mm
    if params.slice_unit is SliceUnit.INDEX:
        depth = (last - first + 1) * t
        z = params.z_origin_mm + (first + last) / 2 * t
    else:
        depth = last - first + t
        z = (first + last) / 2

    center = Point3((x_lo + x_hi) / 2, (y_lo + y_hi) / 2, z)
    return Annotation(scan_id, Box3(center, width, height, depth), f"{scan_id}_n{k}")


def aggregate_slices(boxes: Sequence[SliceBox2D], params: GroupingParams) -> List[Annotation]:
    """Link per-slice boxes into nodules and build one 3D box per nodule

    Boxes are visited in slice order; each joins the open nodule whose last
    box lies on an earlier slice within max_slice_gap and overlaps it in-plane
    by at least min_2d_iou (best overlap wins), otherwise it starts a new one.

    Args:
        boxes: Slice boxes of a single scan
        params: Linking rule and slice geometry

    Returns:
        Annotations with Box3 geometry, ids "<scan_id>_n<k>"
    """
    if not boxes:
        return []
    scan_ids = {b.scan_id for b in boxes}
    if len(scan_ids) > 1:
        raise CurationError(f"Slice boxes from mixed scans: {sorted(scan_ids)}")
    units = {b.unit for b in boxes}
    if units != {params.slice_unit}:
        raise CurationError(
            f"Slice unit mismatch: boxes use {sorted(u.value for u in units)}, "
            f"grouping expects {params.slice_unit.value}")

    groups: List[List[SliceBox2D]] = []
    for box in sorted(boxes, key=_box_key):
        best, best_iou = None, 0.0
        for group in groups:
            tail = group[-1]
            if tail.slice_position >= box.slice_position:
                continue
            if _missing_slices(tail.slice_position, box.slice_position, params) > params.max_slice_gap:
                continue
            overlap = iou2d(tail, box)
            if overlap >= params.min_2d_iou and overlap > best_iou:
                best, best_iou = group, overlap
        if best is None:
            groups.append([box])
        else:
            best.append(box)

    scan_id = scan_ids.pop()
    annotations = [_to_annotation(g, scan_id, k, params) for k, g in enumerate(groups, 1)]
    logger.info(f"{scan_id}: {len(boxes)} slice boxes aggregated into {len(annotations)} nodules")
    return annotations


def aggregate_all(boxes: Sequence[SliceBox2D], params: GroupingParams) -> List[Annotation]:
    """aggregate_slices applied scan by scan, scans in sorted order"""
    by_scan: Dict[str, List[SliceBox2D]] = {}
    for b in boxes:
        by_scan.setdefault(b.scan_id, []).append(b)
    annotations = []
    for scan_id in sorted(by_scan):
        annotations.extend(aggregate_slices(by_scan[scan_id], params))
    return annotations


# ---------------------------------------------------------------------------
# False-positive negatives
# ---------------------------------------------------------------------------

def _hits_any(c: Candidate, by_scan: Mapping[str, List[Annotation]], crit: HitCriterion) -> bool:
    return any(hit(c.location, a.geometry, crit) for a in by_scan.get(c.scan_id, []))


def _index(annotations: Sequence[Annotation]) -> Dict[str, List[Annotation]]:
    by_scan: Dict[str, List[Annotation]] = {}
    for a in annotations:
        by_scan.setdefault(a.scan_id, []).append(a)
    return by_scan


def derive_negatives(candidates: Sequence[Candidate], annotations: Sequence[Annotation],
                     crit: HitCriterion, top_k: Optional[int] = None,
                     threshold: Optional[float] = None) -> List[Candidate]:
    """Highest-confidence candidates that hit no annotation

    Ordered by (probability desc, scan_id, x, y, z); filtered by
    probability >= threshold and truncated to top_k when given.
    """
    if top_k is not None and top_k < 0:
        raise InputValidationError("top_k must be >= 0")
    by_scan = _index(annotations)
    negatives = sorted((c for c in candidates if not _hits_any(c, by_scan, crit)),
                       key=Candidate.sort_key)
    if threshold is not None:
        negatives = [c for c in negatives if c.probability >= threshold]
    if top_k is not None:
        negatives = negatives[:top_k]
    logger.info(f"Derived {len(negatives)} negatives from {len(candidates)} candidates")
    return negatives


# ---------------------------------------------------------------------------
# Stratified sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SwsConfig:
    """Negative:positive ratio and probability strata

    strata are bin edges; bins are half-open except the last, which is closed at 1.0.
    """
    neg_pos_ratio: int = 3
    strata: Tuple[float, ...] = (0.0, 0.40, 0.70, 1.0)
    shares: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0

    def __post_init__(self):
        if self.neg_pos_ratio < 1:
            raise InputValidationError("neg_pos_ratio must be >= 1")
        edges = list(self.strata)
        if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != 1.0:
            raise InputValidationError(f"Strata must run from 0 to 1, got {edges}")
        if any(hi <= lo for lo, hi in zip(edges, edges[1:])):
            raise InputValidationError(f"Strata edges must increase, got {edges}")
        if len(self.shares) != len(edges) - 1:
            raise InputValidationError("Need one share per stratum")
        if min(self.shares) < 0 or not math.isclose(sum(self.shares), 1.0, abs_tol=1e-9):
            raise InputValidationError(f"Shares must be non-negative and sum to 1, got {self.shares}")

    @classmethod
    def from_config(cls, config: Dict[str, Any], seed: int = 0) -> 'SwsConfig':
        section = config.get('curation', config)
        return cls(
            neg_pos_ratio=int(section['neg_pos_ratio']),
            strata=tuple(float(e) for e in section['strata']),
            shares=tuple(float(s) for s in section['shares']),
            seed=seed
        )

    @property
    def n_strata(self) -> int:
        return len(self.strata) - 1

    def stratum_of(self, p: float) -> int:
        for i in range(self.n_strata - 1):
            if p < self.strata[i + 1]:
                return i
        return self.n_strata - 1

    def labels(self) -> List[str]:
        labels = []
        for i in range(self.n_strata):
            closing = "]" if i == self.n_strata - 1 else ")"
            labels.append(f"[{self.strata[i]:.2f}, {self.strata[i + 1]:.2f}{closing}")
        return labels

    def quotas(self, total: int) -> List[int]:
        """Largest-remainder split of total; equal remainders favour lower strata"""
        raw = [share * total for share in self.shares]
        base = [int(math.floor(r + 1e-9)) for r in raw]
        order = sorted(range(self.n_strata), key=lambda i: (-(raw[i] - base[i]), i))
        for i in order[:max(0, total - sum(base))]:
            base[i] += 1
        return base

    def echo(self) -> Dict[str, Any]:
        return {
            'neg_pos_ratio': self.neg_pos_ratio,
            'strata': list(self.strata),
            'shares': list(self.shares),
            'seed': self.seed
        }


@dataclass
class PatchManifest:
    """Patch rows plus the sampling summary that produced them"""
    rows: List[PatchRow]
    summary: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        paths = [r.path for r in self.rows]
        if len(set(paths)) != len(paths):
            raise CurationError("Patch manifest paths must be unique")

    def count(self, patch_class: str) -> int:
        return sum(1 for r in self.rows if r.patch_class == patch_class)

    def to_csv(self) -> str:
        return emit_patch_manifest(self.rows)

    def save(self, path: Union[str, Path]) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding='utf-8')
        return str(path)

    @classmethod
    def load(cls, source) -> 'PatchManifest':
        return cls(parse_patch_manifest(source))


def _nearest_first(i: int, n: int) -> List[int]:
    return sorted((j for j in range(n) if j != i), key=lambda j: (abs(j - i), j))


def sws_sample(candidates: Sequence[Candidate], annotations: Sequence[Annotation],
               crit: HitCriterion, cfg: SwsConfig,
               patch_root: str = "patches") -> PatchManifest:
    """Nodule patches for every annotation plus stratified non-nodule patches

    Negatives are candidates hitting no annotation. The ratio x positives
    target is split across probability strata by cfg.shares; each stratum
    is sampled without replacement from a generator seeded with cfg.seed.
    Short strata are backfilled from the nearest strata and the deficit is
    recorded in the summary.

    Args:
        candidates: Detector candidates
        annotations: Reference lesions, all of which become positives
        crit: Hit criterion separating positives from negatives
        cfg: Sampling configuration
        patch_root: Directory prefix of the patch paths

    Returns:
        PatchManifest with positives first, then negatives by stratum
    """
    if not annotations:
        raise CurationError("Stratified sampling needs at least one annotation")
    if not candidates:
        raise CurationError("Stratified sampling needs a non-empty candidate set")

    by_scan = _index(annotations)
    pools: List[List[Candidate]] = [[] for _ in range(cfg.n_strata)]
    best_hit: Dict[Tuple[str, str], float] = {}
    for c in sorted(candidates, key=Candidate.sort_key):
        hits = [a for a in by_scan.get(c.scan_id, []) if hit(c.location, a.geometry, crit)]
        if not hits:
            pools[cfg.stratum_of(c.probability)].append(c)
            continue
        for a in hits:
            key = (a.scan_id, a.nodule_id)
            best_hit[key] = max(best_hit.get(key, c.probability), c.probability)

    if not any(pools):
        raise CurationError("No negative candidates available: every candidate hits an annotation")

    labels = cfg.labels()
    for label, pool in zip(labels, pools):
        if not pool:
            logger.warning(f"Stratum {label} has no negative candidates")

    target = cfg.neg_pos_ratio * len(annotations)
    quotas = cfg.quotas(target)
    rng = np.random.default_rng(cfg.seed)

    remaining = [list(pool) for pool in pools]
    chosen: List[List[Candidate]] = [[] for _ in range(cfg.n_strata)]

    def draw(source: int, k: int) -> List[Candidate]:
        pool = remaining[source]
        k = min(k, len(pool))
        if k == 0:
            return []
        picked = set(rng.choice(len(pool), size=k, replace=False).tolist())
        taken = [c for i, c in enumerate(pool) if i in picked]
        remaining[source] = [c for i, c in enumerate(pool) if i not in picked]
        return taken

    deficits = []
    for i in range(cfg.n_strata):
        chosen[i].extend(draw(i, quotas[i]))
        deficits.append(quotas[i] - len(chosen[i]))

    backfilled = [0] * cfg.n_strata
    for i in range(cfg.n_strata):
        if deficits[i] == 0:
            continue
        logger.warning(f"Stratum {labels[i]}: deficit of {deficits[i]} negatives "
                       f"({len(chosen[i])}/{quotas[i]}), backfilling from adjacent strata")
        need = deficits[i]
        for j in _nearest_first(i, cfg.n_strata):
            if need == 0:
                break
            extra = draw(j, need)
            chosen[j].extend(extra)
            backfilled[j] += len(extra)
            need -= len(extra)
        if need:
            logger.warning(f"Stratum {labels[i]}: {need} negatives could not be backfilled")

    rows = []
    for k, a in enumerate(annotations):
        rows.append(PatchRow(f"{patch_root}/{a.scan_id}/pos_{k:05d}.nii.gz", a.scan_id, a.center,
                             NODULE, best_hit.get((a.scan_id, a.nodule_id))))
    k = 0
    for stratum in chosen:
        for c in sorted(stratum, key=Candidate.sort_key):
            rows.append(PatchRow(f"{patch_root}/{c.scan_id}/neg_{k:05d}.nii.gz", c.scan_id,
                                 c.location, NON_NODULE, c.probability))
            k += 1

    summary = {
        'positives': len(annotations),
        'target_negatives': target,
        'negatives': k,
        'strata': labels,
        'available': [len(p) for p in pools],
        'quotas': quotas,
        'sampled': [len(s) for s in chosen],
        'deficits': deficits,
        'backfilled': backfilled,
        'config': cfg.echo()
    }
    logger.info(f"Sampled {len(annotations)} positives and {k} negatives "
                f"(per stratum {summary['sampled']})")
    return PatchManifest(rows, summary)


def label_manifest(annotations: Sequence[Annotation],
                   patch_root: str = "patches") -> PatchManifest:
    """cancer / no-cancer rows for annotations carrying a malignancy label"""
    rows = []
    skipped = 0
    for k, a in enumerate(annotations):
        if a.label is None:
            skipped += 1
            continue
        rows.append(PatchRow(f"{patch_root}/{a.scan_id}/lesion_{k:05d}.nii.gz", a.scan_id,
                             a.center, _LABEL_CLASSES[a.label]))
    if not rows:
        raise CurationError("No annotation carries a malignancy label")
    if skipped:
        logger.info(f"Skipped {skipped} annotations without a malignancy label")

    manifest = PatchManifest(rows)
    manifest.summary = {'cancer': manifest.count(CANCER), 'no-cancer': manifest.count(NO_CANCER),
                        'unlabeled': skipped}
    return manifest


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def crop_patch(volume: VolumeGrid, center: Point3, cfg: PreprocessConfig,
               patch_dims: Optional[Sequence[int]] = None) -> VolumeGrid:
    """Resampled, padded patch before clipping and normalization

    The patch is centered on the resampled voxel nearest to center, which
    sits at index patch_dims // 2. Voxels outside the volume hold clip_lo.
    """
    dims = tuple(int(d) for d in (patch_dims or cfg.patch_dims))
    full = resampled_frame(volume.frame, cfg.target_spacing)
    nearest = [int(math.floor(v + 0.5)) for v in world_to_voxel(center, full)]
    start = [n - d // 2 for n, d in zip(nearest, dims)]

    lo = [max(s, 0) for s in start]
    hi = [min(s + d, n) for s, d, n in zip(start, dims, full.dims)]
    if any(h <= l for l, h in zip(lo, hi)):
        raise CurationError(
            f"Patch at ({center.x}, {center.y}, {center.z}) has no voxel inside the volume")

    data = np.full(dims, cfg.clip_lo, dtype=np.float64)
    block = sample_block(volume, full, lo, [h - l for l, h in zip(lo, hi)])
    data[lo[0] - start[0]:hi[0] - start[0],
         lo[1] - start[1]:hi[1] - start[1],
         lo[2] - start[2]:hi[2] - start[2]] = block

    origin = voxel_to_world(start, full)
    return VolumeGrid.from_array(data, full.spacing, origin.as_tuple())


def extract_patch(volume: VolumeGrid, center: Point3, cfg: PreprocessConfig,
                  patch_dims: Optional[Sequence[int]] = None) -> VolumeGrid:
    """Fixed-size normalized patch around a world point, at the target spacing"""
    return clip_normalize(crop_patch(volume, center, cfg, patch_dims), cfg)


def export_patches(manifest: PatchManifest, volumes: Mapping[str, Union[str, Path, VolumeGrid]],
                   cfg: PreprocessConfig, out_dir: Union[str, Path],
                   max_workers: int = 1, show_progress: bool = False) -> List[str]:
    """Write every manifest row as a float32 .nii.gz under out_dir

    Args:
        manifest: Rows to extract; paths are relative to out_dir
        volumes: scan_id -> volume or path of a NIfTI file
        cfg: Preprocessing configuration
        out_dir: Destination directory
        max_workers: Threads extracting rows of the same scan
        show_progress: tqdm progress bar

    Returns:
        Written file paths in manifest order
    """
    missing = sorted({r.scan_id for r in manifest.rows} - set(volumes))
    if missing:
        raise CurationError(f"No volume provided for scans: {', '.join(missing)}")

    out_dir = Path(out_dir)
    written: Dict[int, str] = {}
    scans = sorted({r.scan_id for r in manifest.rows})
    for scan_id in scans:
        source = volumes[scan_id]
        volume = source if isinstance(source, VolumeGrid) else load_volume(source)
        indexed = [(i, r) for i, r in enumerate(manifest.rows) if r.scan_id == scan_id]

        def write(item):
            i, row = item
            patch = extract_patch(volume, row.center, cfg)
            return i, save_volume(patch, out_dir / row.path, 'float32', compress=True)

        for i, path in ordered_map(write, indexed, max_workers,
                                   description=f"Patches {scan_id}", show_progress=show_progress):
            written[i] = path

    logger.info(f"Wrote {len(written)} patches for {len(scans)} scans to {out_dir}")
    return [written[i] for i in sorted(written)]


__all__ = [
    'NODULE',
    'NON_NODULE',
    'CANCER',
    'NO_CANCER',
    'ExtentRule',
    'GroupingParams',
    'iou2d',
    'aggregate_slices',
    'aggregate_all',
    'derive_negatives',
    'SwsConfig',
    'PatchManifest',
    'sws_sample',
    'label_manifest',
    'crop_patch',
    'extract_patch',
    'export_patches'
]
