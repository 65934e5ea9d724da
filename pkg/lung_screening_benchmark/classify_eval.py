"""
Classification benchmark: ROC/AUC, DeLong and bootstrap confidence intervals,
subgroup tables
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .exceptions import InputValidationError, UndefinedMetricError
from .tabular_io import MISSING, ScoredRecord, SubjectMeta
from .utils import ordered_map, replicate_generators

logger = logging.getLogger(__name__)

DEFAULT_BOOTSTRAP_REPLICATES = 2000
OVERALL = "(all)"


class CiMethod(Enum):
    DELONG = "delong"
    BOOTSTRAP = "bootstrap"


@dataclass(frozen=True)
class AucEstimate:
    """Point estimate with its confidence interval and the method that produced it"""
    auc: float
    ci_low: float
    ci_high: float
    method: str
    n_pos: int
    n_neg: int
    level: float = 0.95
    note: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'auc': self.auc,
            'ci_low': self.ci_low,
            'ci_high': self.ci_high,
            'method': self.method,
            'level': self.level,
            'n_pos': self.n_pos,
            'n_neg': self.n_neg,
            'note': self.note
        }


@dataclass(frozen=True)
class SubgroupRow:
    group: str
    n_records: int
    estimate: Optional[AucEstimate]
    status: str = "ok"

    def to_dict(self) -> Dict[str, Any]:
        row = {'group': self.group, 'n_records': self.n_records, 'status': self.status}
        row.update(self.estimate.to_dict() if self.estimate else {'auc': None})
        return row


def _split(records: Sequence[ScoredRecord]) -> Tuple[np.ndarray, np.ndarray]:
    pos = np.array([r.score for r in records if r.label == 1], dtype=np.float64)
    neg = np.array([r.score for r in records if r.label == 0], dtype=np.float64)
    return pos, neg


def _auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney AUC via midranks"""
    m, n = len(pos), len(neg)
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    return float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))


def auc(records: Sequence[ScoredRecord]) -> float:
    """Probability that a random positive outscores a random negative, ties counting half"""
    pos, neg = _split(records)
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError(
            f"undefined AUC: need both classes, got {len(pos)} positive and {len(neg)} negative")
    return _auc_from_scores(pos, neg)


def roc_points(records: Sequence[ScoredRecord]) -> List[Tuple[float, float]]:
    """Empirical ROC as (fpr, tpr) pairs from (0, 0) to (1, 1)

    Tied scores form a single step, so the trapezoidal area equals auc().
    """
    pos, neg = _split(records)
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("undefined AUC: ROC needs both classes")

    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    points = [(0.0, 0.0)]
    for t in np.unique(np.concatenate([pos, neg]))[::-1]:
        tp = len(pos_sorted) - np.searchsorted(pos_sorted, t, side='left')
        fp = len(neg_sorted) - np.searchsorted(neg_sorted, t, side='left')
        points.append((int(fp) / len(neg), int(tp) / len(pos)))
    return points


def _structural_components(pos: np.ndarray, neg: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-positive V10 and per-negative V01 from midranks"""
    m, n = len(pos), len(neg)
    ranks_all = stats.rankdata(np.concatenate([pos, neg]))
    v10 = (ranks_all[:m] - stats.rankdata(pos)) / n
    v01 = 1.0 - (ranks_all[m:] - stats.rankdata(neg)) / m
    return v10, v01


def delong_ci(records: Sequence[ScoredRecord], level: float = 0.95) -> AucEstimate:
    """Normal-approximation CI around the AUC using the DeLong variance

    Args:
        records: Scored samples with at least two of each class
        level: Two-sided confidence level

    Returns:
        AucEstimate clamped to [0, 1]; a zero variance gives a point interval
    """
    pos, neg = _split(records)
    m, n = len(pos), len(neg)
    if m == 0 or n == 0:
        raise UndefinedMetricError(
            f"undefined AUC: need both classes, got {m} positive and {n} negative")
    if m < 2 or n < 2:
        raise UndefinedMetricError(
            f"DeLong variance needs at least 2 positives and 2 negatives, got {m} and {n}")

    value = _auc_from_scores(pos, neg)
    v10, v01 = _structural_components(pos, neg)
    variance = float(np.var(v10, ddof=1) / m + np.var(v01, ddof=1) / n)
    variance = max(variance, 0.0)

    if variance == 0.0:
        return AucEstimate(value, value, value, CiMethod.DELONG.value, m, n, level,
                           note="degenerate variance")

    z = stats.norm.ppf(1.0 - (1.0 - level) / 2.0)
    half = z * np.sqrt(variance)
    return AucEstimate(value, float(max(0.0, value - half)), float(min(1.0, value + half)),
                       CiMethod.DELONG.value, m, n, level)


def bootstrap_auc_ci(records: Sequence[ScoredRecord],
                     n_resamples: int = DEFAULT_BOOTSTRAP_REPLICATES, seed: int = 0,
                     level: float = 0.95, max_workers: int = 1,
                     show_progress: bool = False) -> AucEstimate:
    """Percentile CI over class-stratified resamples

    Positives and negatives are resampled separately so every replicate keeps
    the original class counts; replicate r draws from its own generator
    spawned from seed, so results do not depend on max_workers.
    """
    if n_resamples < 1:
        raise InputValidationError("n_resamples must be >= 1")
    pos, neg = _split(records)
    m, n = len(pos), len(neg)
    if m == 0 or n == 0:
        raise UndefinedMetricError(
            f"undefined AUC: need both classes, got {m} positive and {n} negative")

    value = _auc_from_scores(pos, neg)
    generators = replicate_generators(seed, n_resamples)

    def replicate(r: int) -> float:
        gen = generators[r]
        return _auc_from_scores(pos[gen.integers(0, m, size=m)], neg[gen.integers(0, n, size=n)])

    values = np.array(ordered_map(replicate, list(range(n_resamples)), max_workers,
                                  description="AUC bootstrap", show_progress=show_progress))
    tail = (1.0 - level) / 2 * 100
    low, high = np.percentile(values, [tail, 100 - tail])
    note = None if n_resamples > 1 else "single replicate"
    return AucEstimate(value, float(low), float(high), CiMethod.BOOTSTRAP.value, m, n, level,
                       note=note)


def parse_ci_method(text: str) -> Tuple[CiMethod, Optional[int]]:
    """Parse "delong" or "bootstrap[:N]" """
    text = (text or "").strip()
    if text == CiMethod.DELONG.value:
        return CiMethod.DELONG, None
    if text == CiMethod.BOOTSTRAP.value:
        return CiMethod.BOOTSTRAP, DEFAULT_BOOTSTRAP_REPLICATES
    if text.startswith("bootstrap:"):
        try:
            n = int(text.split(":", 1)[1])
        except ValueError:
            raise InputValidationError(f"Invalid replicate count in CI method '{text}'")
        if n < 1:
            raise InputValidationError("Bootstrap replicate count must be >= 1")
        return CiMethod.BOOTSTRAP, n
    raise InputValidationError(f"Unknown CI method '{text}' (expected delong or bootstrap:N)")


def estimate(records: Sequence[ScoredRecord], method: CiMethod = CiMethod.DELONG,
             n_resamples: int = DEFAULT_BOOTSTRAP_REPLICATES, seed: int = 0,
             level: float = 0.95, max_workers: int = 1) -> AucEstimate:
    if method is CiMethod.DELONG:
        return delong_ci(records, level)
    return bootstrap_auc_ci(records, n_resamples, seed, level, max_workers)


def _sufficient(records: Sequence[ScoredRecord], method: CiMethod) -> bool:
    n_pos = sum(1 for r in records if r.label == 1)
    n_neg = len(records) - n_pos
    minimum = 2 if method is CiMethod.DELONG else 1
    return n_pos >= minimum and n_neg >= minimum


def subgroup_report(records: Sequence[ScoredRecord], meta: Sequence[SubjectMeta],
                    group_by: str, method: CiMethod = CiMethod.DELONG,
                    n_resamples: int = DEFAULT_BOOTSTRAP_REPLICATES, seed: int = 0,
                    level: float = 0.95, max_workers: int = 1) -> List[SubgroupRow]:
    """Overall row followed by one row per attribute value

    Records join meta on scan_id; unmatched records and empty values fall in
    "(missing)". Groups too small for the CI method are kept as insufficient rows.
    """
    if not any(group_by in record.attributes for record in meta):
        raise InputValidationError(f"Unknown subgroup attribute '{group_by}'")

    by_scan = {record.scan_id: record for record in meta}
    groups: Dict[str, List[ScoredRecord]] = defaultdict(list)
    for record in records:
        subject = by_scan.get(record.scan_id)
        groups[subject.group_value(group_by) if subject else MISSING].append(record)

    rows = []
    for group, members in [(OVERALL, list(records))] + sorted(groups.items()):
        if not _sufficient(members, method):
            logger.info(f"Subgroup {group_by}={group}: too few records of one class "
                        f"for {method.value}, reported as insufficient")
            rows.append(SubgroupRow(group, len(members), None, "insufficient"))
            continue
        rows.append(SubgroupRow(group, len(members),
                                estimate(members, method, n_resamples, seed, level, max_workers)))
    return rows


__all__ = [
    'CiMethod',
    'AucEstimate',
    'SubgroupRow',
    'OVERALL',
    'auc',
    'roc_points',
    'delong_ci',
    'bootstrap_auc_ci',
    'parse_ci_method',
    'estimate',
    'subgroup_report'
]
