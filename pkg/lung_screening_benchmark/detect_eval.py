"""
Detection benchmark: candidate/lesion matching, FROC, CPM and bootstrap CIs

Operating thresholds are the distinct strictly positive candidate
probabilities; a candidate scored exactly 0 never counts as a detection.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import InputValidationError, InvariantViolation, UndefinedMetricError
from .geometry import HitCriterion, hit, overlap_score
from .tabular_io import MISSING, Annotation, Candidate, SubjectMeta
from .utils import ordered_map, replicate_generators

logger = logging.getLogger(__name__)

CPM_FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_BOOTSTRAP_REPLICATES = 1000
INTERPOLATION_RULE = "linear; (0,0)-scaled below first point; constant above last point"


class CandidateStatus(Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "ignored"


@dataclass(frozen=True)
class CandidateOutcome:
    candidate: Candidate
    status: CandidateStatus
    nodule_id: Optional[str] = None


@dataclass(frozen=True)
class LesionOutcome:
    scan_id: str
    nodule_id: str
    hit_score: Optional[float]  # None when missed


@dataclass
class MatchResult:
    """Per-lesion best scores and per-candidate statuses over a scan manifest"""
    lesions: List[LesionOutcome]
    candidates: List[CandidateOutcome]
    scans: List[str]
    criterion: str = ""

    @property
    def scan_count(self) -> int:
        return len(self.scans)

    def count(self, status: CandidateStatus) -> int:
        return sum(1 for c in self.candidates if c.status is status)

    def per_scan(self) -> Dict[str, 'ScanTally']:
        """Scores grouped by scan, in manifest order"""
        tallies = {scan_id: ScanTally() for scan_id in self.scans}
        for lesion in self.lesions:
            tallies[lesion.scan_id].hit_scores.append(lesion.hit_score)
        for outcome in self.candidates:
            tally = tallies[outcome.candidate.scan_id]
            if outcome.status is CandidateStatus.TP:
                tally.tp_probabilities.append(outcome.candidate.probability)
            elif outcome.status is CandidateStatus.FP:
                tally.fp_probabilities.append(outcome.candidate.probability)
        return tallies

    def restrict(self, scan_ids: Sequence[str]) -> 'MatchResult':
        """Sub-result over a subset of the manifest"""
        keep = set(scan_ids)
        return MatchResult(
            lesions=[x for x in self.lesions if x.scan_id in keep],
            candidates=[c for c in self.candidates if c.candidate.scan_id in keep],
            scans=[s for s in self.scans if s in keep],
            criterion=self.criterion
        )


@dataclass
class ScanTally:
    hit_scores: List[Optional[float]] = field(default_factory=list)
    tp_probabilities: List[float] = field(default_factory=list)
    fp_probabilities: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    fp_per_scan: float
    sensitivity: float


@dataclass
class FrocCurve:
    """Operating points in descending-threshold order plus fixed-rate summary"""
    points: List[FrocPoint]
    fp_rates: Tuple[float, ...]
    sensitivities: List[float]
    cpm: float
    n_annotations: int
    n_scans: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'cpm': self.cpm,
            'fp_rates': list(self.fp_rates),
            'sensitivities': list(self.sensitivities),
            'n_annotations': self.n_annotations,
            'n_scans': self.n_scans,
            'points': [
                {'threshold': p.threshold, 'fp_per_scan': p.fp_per_scan,
                 'sensitivity': p.sensitivity}
                for p in self.points
            ]
        }


@dataclass
class FrocBootstrap:
    """Percentile CIs of fixed-rate sensitivities and CPM over scan resamples"""
    n_resamples: int
    n_effective: int
    seed: int
    level: float
    rate_ci: List[Tuple[float, float]]
    cpm_ci: Tuple[float, float]
    method: str = "percentile"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'method': self.method,
            'n_resamples': self.n_resamples,
            'n_effective': self.n_effective,
            'seed': self.seed,
            'level': self.level,
            'rate_ci': [list(ci) for ci in self.rate_ci],
            'cpm_ci': list(self.cpm_ci)
        }


@dataclass
class SubgroupFroc:
    group: str
    n_scans: int
    n_annotations: int
    curve: Optional[FrocCurve]
    status: str = "ok"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'group': self.group,
            'n_scans': self.n_scans,
            'n_annotations': self.n_annotations,
            'status': self.status,
            'cpm': self.curve.cpm if self.curve else None,
            'sensitivities': list(self.curve.sensitivities) if self.curve else None
        }


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def _by_scan(items, key) -> Dict[str, list]:
    grouped = defaultdict(list)
    for item in items:
        grouped[key(item)].append(item)
    return grouped


def _check_manifest(manifest: Sequence[str], scan_ids, what: str):
    known = set(manifest)
    for scan_id in scan_ids:
        if scan_id not in known:
            raise InputValidationError(f"{what} scan_id '{scan_id}' is not in the scan manifest")


def _assign(c: Candidate, lesions: Sequence[Annotation],
            crit: HitCriterion) -> Optional[Annotation]:
    """Greatest overlap, then nearest center, then smallest nodule_id"""
    hits = [a for a in lesions if hit(c.location, a.geometry, crit)]
    if not hits:
        return None
    return min(hits, key=lambda a: (-overlap_score(c.location, a.geometry, crit),
                                    c.location.distance_to(a.center), a.nodule_id))


def match(candidates: Sequence[Candidate], annotations: Sequence[Annotation],
          exclusions: Sequence[Annotation], manifest: Sequence[str],
          crit: HitCriterion) -> MatchResult:
    """Label each candidate TP, FP or ignored and score each lesion

    Args:
        candidates: Detector outputs
        annotations: Reference lesions
        exclusions: Entries whose non-lesion hits are ignored
        manifest: Scan ids forming the FP-per-scan denominator
        crit: Hit criterion used for lesions and exclusions alike

    Returns:
        MatchResult
    """
    if len(set(manifest)) != len(manifest):
        raise InputValidationError("Scan manifest contains duplicate scan ids")
    _check_manifest(manifest, {c.scan_id for c in candidates}, "Candidate")
    _check_manifest(manifest, {a.scan_id for a in annotations}, "Annotation")

    known = set(manifest)
    outside = {e.scan_id for e in exclusions} - known
    if outside:
        logger.debug(f"Ignoring exclusions for {len(outside)} scans outside the manifest")

    lesions_by_scan = _by_scan(annotations, lambda a: a.scan_id)
    exclusions_by_scan = _by_scan(exclusions, lambda e: e.scan_id)

    outcomes = []
    best: Dict[Tuple[str, str], float] = {}
    for c in candidates:
        target = _assign(c, lesions_by_scan.get(c.scan_id, []), crit)
        if target is not None:
            key = (target.scan_id, target.nodule_id)
            best[key] = max(best.get(key, c.probability), c.probability)
            outcomes.append(CandidateOutcome(c, CandidateStatus.TP, target.nodule_id))
        elif any(hit(c.location, e.geometry, crit) for e in exclusions_by_scan.get(c.scan_id, [])):
            outcomes.append(CandidateOutcome(c, CandidateStatus.IGNORED))
        else:
            outcomes.append(CandidateOutcome(c, CandidateStatus.FP))

    lesions = [LesionOutcome(a.scan_id, a.nodule_id, best.get((a.scan_id, a.nodule_id)))
               for a in annotations]

    result = MatchResult(lesions, outcomes, list(manifest), crit.describe())
    logger.info(
        f"Matched {len(candidates)} candidates on {result.scan_count} scans: "
        f"{result.count(CandidateStatus.TP)} TP, {result.count(CandidateStatus.FP)} FP, "
        f"{result.count(CandidateStatus.IGNORED)} ignored; "
        f"{sum(1 for x in lesions if x.hit_score is not None)}/{len(lesions)} lesions hit"
    )
    return result


# ---------------------------------------------------------------------------
# FROC
# ---------------------------------------------------------------------------

def interpolate_sensitivity(points: Sequence[FrocPoint], f: float) -> float:
    """Sensitivity at a target FP-per-scan rate

    Linear between bracketing operating points; below the first point the
    line from (0, 0) is used; above the last point the last sensitivity holds.
    Points sharing an fp_per_scan value count once, with the highest sensitivity.
    """
    xs: List[float] = []
    ys: List[float] = []
    for p in points:
        if xs and p.fp_per_scan == xs[-1]:
            ys[-1] = max(ys[-1], p.sensitivity)
        else:
            xs.append(p.fp_per_scan)
            ys.append(p.sensitivity)

    if not xs:
        return 0.0
    if f < xs[0]:
        return ys[0] * f / xs[0]
    if f >= xs[-1]:
        return ys[-1]

    for i in range(len(xs) - 1):
        x0, x1 = xs[i], xs[i + 1]
        if x0 <= f < x1:
            y0, y1 = ys[i], ys[i + 1]
            if f == x0:
                return y0
            return y0 + (y1 - y0) * (f - x0) / (x1 - x0)

    raise InvariantViolation(f"No bracketing interval for fp rate {f}")


def froc_from_scores(hit_scores: Sequence[Optional[float]], tp_probabilities: Sequence[float],
                     fp_probabilities: Sequence[float], n_scans: int,
                     fp_rates: Sequence[float] = CPM_FP_RATES) -> FrocCurve:
    """FROC from flat score lists; shared by froc and the bootstrap"""
    n_annotations = len(hit_scores)
    if n_annotations < 1:
        raise UndefinedMetricError("FROC is undefined without annotations")
    if n_scans < 1:
        raise UndefinedMetricError("FROC is undefined without scans")

    hits = np.sort(np.array([s for s in hit_scores if s is not None], dtype=np.float64))
    fps = np.sort(np.asarray(fp_probabilities, dtype=np.float64))
    pool = np.concatenate([hits, fps, np.asarray(tp_probabilities, dtype=np.float64)])
    thresholds = np.unique(pool[pool > 0])[::-1]

    n_hit = len(hits) - np.searchsorted(hits, thresholds, side='left')
    n_fp = len(fps) - np.searchsorted(fps, thresholds, side='left')

    points = [
        FrocPoint(float(t), int(k_fp) / n_scans, int(k_hit) / n_annotations)
        for t, k_hit, k_fp in zip(thresholds, n_hit, n_fp)
    ]

    sensitivities = [interpolate_sensitivity(points, f) for f in fp_rates]
    cpm = sum(sensitivities) / len(sensitivities)
    return FrocCurve(points, tuple(fp_rates), sensitivities, cpm, n_annotations, n_scans)


def froc(m: MatchResult, fp_rates: Sequence[float] = CPM_FP_RATES) -> FrocCurve:
    """FROC curve, fixed-rate sensitivities and CPM of a match result"""
    tp = [o.candidate.probability for o in m.candidates if o.status is CandidateStatus.TP]
    fp = [o.candidate.probability for o in m.candidates if o.status is CandidateStatus.FP]
    curve = froc_from_scores([x.hit_score for x in m.lesions], tp, fp, m.scan_count, fp_rates)
    _check_curve(curve)
    return curve


def _check_curve(curve: FrocCurve):
    previous = None
    for p in curve.points:
        if not 0.0 <= p.sensitivity <= 1.0:
            raise InvariantViolation(f"Sensitivity {p.sensitivity} outside [0, 1]")
        if previous and (p.fp_per_scan < previous.fp_per_scan
                         or p.sensitivity < previous.sensitivity):
            raise InvariantViolation("FROC operating points are not monotone")
        previous = p
    if not 0.0 <= curve.cpm <= 1.0:
        raise InvariantViolation(f"CPM {curve.cpm} outside [0, 1]")


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def froc_bootstrap(m: MatchResult, n_resamples: int = DEFAULT_BOOTSTRAP_REPLICATES,
                   seed: int = 0, fp_rates: Sequence[float] = CPM_FP_RATES,
                   level: float = 0.95, max_retries: int = 100, max_workers: int = 1,
                   show_progress: bool = False) -> FrocBootstrap:
    """Scan-level bootstrap CIs for the fixed-rate sensitivities and CPM

    Each replicate draws scans with replacement from its own generator
    derived from (seed, replicate index); draws without any annotation are
    redrawn up to max_retries times and the replicate is dropped after that.

    Args:
        m: Match result over the full manifest
        n_resamples: Number of replicates
        seed: Root seed
        fp_rates: Fixed FP-per-scan rates
        level: Confidence level of the percentile interval
        max_retries: Redraws allowed per replicate
        max_workers: Worker threads
        show_progress: tqdm progress bar

    Returns:
        FrocBootstrap
    """
    if n_resamples < 1:
        raise InputValidationError("n_resamples must be >= 1")
    if m.scan_count < 1:
        raise UndefinedMetricError("Bootstrap needs at least one scan")

    tallies = list(m.per_scan().values())
    n_ann = np.array([len(t.hit_scores) for t in tallies])
    if n_ann.sum() == 0:
        raise UndefinedMetricError("FROC bootstrap is undefined without annotations")
    generators = replicate_generators(seed, n_resamples)
    n_scans = len(tallies)

    def replicate(r: int) -> Optional[List[float]]:
        gen = generators[r]
        for _ in range(max_retries + 1):
            idx = gen.integers(0, n_scans, size=n_scans)
            if n_ann[idx].sum() > 0:
                break
        else:
            return None
        hit_scores, tp, fp = [], [], []
        for i in idx:
            hit_scores.extend(tallies[i].hit_scores)
            tp.extend(tallies[i].tp_probabilities)
            fp.extend(tallies[i].fp_probabilities)
        curve = froc_from_scores(hit_scores, tp, fp, n_scans, fp_rates)
        return curve.sensitivities + [curve.cpm]

    results = ordered_map(replicate, list(range(n_resamples)), max_workers,
                          description="FROC bootstrap", show_progress=show_progress)
    kept = [r for r in results if r is not None]
    skipped = n_resamples - len(kept)
    if skipped:
        logger.warning(f"{skipped} bootstrap replicates had no annotations after "
                       f"{max_retries} redraws and were dropped")
    if not kept:
        raise UndefinedMetricError("Every bootstrap replicate lacked annotations")

    values = np.array(kept)
    tail = (1.0 - level) / 2 * 100
    lo = np.percentile(values, tail, axis=0)
    hi = np.percentile(values, 100 - tail, axis=0)
    bounds = [(float(a), float(b)) for a, b in zip(lo, hi)]
    return FrocBootstrap(n_resamples, len(kept), seed, level, bounds[:-1], bounds[-1])


# ---------------------------------------------------------------------------
# Subgroups
# ---------------------------------------------------------------------------

def froc_by_subgroup(m: MatchResult, meta: Sequence[SubjectMeta], group_by: str,
                     fp_rates: Sequence[float] = CPM_FP_RATES) -> List[SubgroupFroc]:
    """CPM per attribute value, each over its own scans; "(missing)" included"""
    if not any(group_by in record.attributes for record in meta):
        raise InputValidationError(f"Unknown subgroup attribute '{group_by}'")

    by_scan = {record.scan_id: record for record in meta}
    groups: Dict[str, List[str]] = defaultdict(list)
    for scan_id in m.scans:
        record = by_scan.get(scan_id)
        groups[record.group_value(group_by) if record else MISSING].append(scan_id)

    rows = []
    for group in sorted(groups):
        sub = m.restrict(groups[group])
        if not sub.lesions:
            logger.info(f"Subgroup {group_by}={group}: no annotations, reported as insufficient")
            rows.append(SubgroupFroc(group, sub.scan_count, 0, None, "insufficient"))
            continue
        rows.append(SubgroupFroc(group, sub.scan_count, len(sub.lesions), froc(sub, fp_rates)))
    return rows


__all__ = [
    'CPM_FP_RATES',
    'INTERPOLATION_RULE',
    'CandidateStatus',
    'CandidateOutcome',
    'LesionOutcome',
    'MatchResult',
    'FrocPoint',
    'FrocCurve',
    'FrocBootstrap',
    'SubgroupFroc',
    'match',
    'froc',
    'froc_from_scores',
    'interpolate_sensitivity',
    'froc_bootstrap',
    'froc_by_subgroup'
]
