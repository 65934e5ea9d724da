import numpy as np
import pytest

from conftest import FIXTURE_CPM, FIXTURE_POINTS, FIXTURE_SENSITIVITIES, candidate, lesion
from lung_screening_benchmark.detect_eval import (
    CPM_FP_RATES, CandidateStatus, FrocPoint, froc, froc_bootstrap, froc_by_subgroup,
    interpolate_sensitivity, match
)
from lung_screening_benchmark.exceptions import InputValidationError, UndefinedMetricError
from lung_screening_benchmark.geometry import Box3, HitCriterion, HitMode, Point3
from lung_screening_benchmark.tabular_io import Annotation, SubjectMeta


def brute_force_froc(lesion_hits, fp_probs, n_scans):
    """Reference FROC: enumerate thresholds, count naively, interpolate"""
    thresholds = sorted({p for p in list(lesion_hits) + list(fp_probs)
                         if p is not None and p > 0}, reverse=True)
    points = []
    for t in thresholds:
        sens = sum(1 for h in lesion_hits if h is not None and h >= t) / len(lesion_hits)
        fpr = sum(1 for p in fp_probs if p >= t) / n_scans
        if points and points[-1][0] == fpr:
            points[-1] = (fpr, max(points[-1][1], sens))
        else:
            points.append((fpr, sens))

    def at(f):
        if not points:
            return 0.0
        if f < points[0][0]:
            return points[0][1] * f / points[0][0]
        if f >= points[-1][0]:
            return points[-1][1]
        for (x0, y0), (x1, y1) in zip(points, points[1:]):
            if x0 <= f < x1:
                return y0 + (y1 - y0) * (f - x0) / (x1 - x0)

    sens = [at(f) for f in CPM_FP_RATES]
    return sens, sum(sens) / len(sens)


def random_instance(rng):
    """Lesions 100 mm apart so a candidate can hit at most one"""
    n_scans = int(rng.integers(1, 21))
    scans = [f"scan{i:02d}" for i in range(n_scans)]
    n_lesions = int(rng.integers(1, 11))
    lesions = []
    for k in range(n_lesions):
        scan = scans[int(rng.integers(0, n_scans))]
        lesions.append(lesion(scan, x=100.0 * k, diameter=10.0, nodule_id=f"n{k}"))

    cands = []
    for _ in range(int(rng.integers(0, 51))):
        p = float(np.round(rng.uniform(0, 1), 2))
        if rng.uniform() < 0.4:
            target = lesions[int(rng.integers(0, n_lesions))]
            cands.append(candidate(target.scan_id, target.center.x + rng.uniform(-4, 4), p))
        else:
            scan = scans[int(rng.integers(0, n_scans))]
            cands.append(candidate(scan, 50.0 + 100.0 * int(rng.integers(0, 10)), p))
    return scans, lesions, cands


def naive_scores(scans, lesions, cands):
    hits = []
    for a in lesions:
        probs = [c.probability for c in cands
                 if c.scan_id == a.scan_id and c.location.distance_to(a.center) < 5.0]
        hits.append(max(probs) if probs else None)
    fps = [c.probability for c in cands
           if not any(c.scan_id == a.scan_id and c.location.distance_to(a.center) < 5.0
                      for a in lesions)]
    return hits, fps


class TestMatch:
    def test_perfect_detector(self, sphere_criterion):
        m = match([candidate("s1", 0.0, 0.9)], [lesion("s1")], [], ["s1"], sphere_criterion)
        assert m.lesions[0].hit_score == 0.9
        assert m.count(CandidateStatus.FP) == 0

    def test_lesion_free_scan(self, sphere_criterion):
        cands = [candidate("s2", 10.0 * i, 0.5) for i in range(3)]
        m = match(cands, [lesion("s1")], [], ["s1", "s2"], sphere_criterion)
        assert m.count(CandidateStatus.FP) == 3

    def test_exclusion_is_ignored(self, sphere_criterion):
        excl = [lesion("s1", x=40.0, diameter=6.0, nodule_id="e1")]
        m = match([candidate("s1", 40.0, 0.8)], [lesion("s1")], excl, ["s1"], sphere_criterion)
        assert m.candidates[0].status is CandidateStatus.IGNORED
        assert m.count(CandidateStatus.FP) == 0
        assert m.lesions[0].hit_score is None

    def test_lesion_hit_beats_exclusion(self, sphere_criterion):
        excl = [lesion("s1", nodule_id="e1")]
        m = match([candidate("s1", 0.0, 0.7)], [lesion("s1")], excl, ["s1"], sphere_criterion)
        assert m.candidates[0].status is CandidateStatus.TP

    def test_multiple_candidates_on_one_lesion(self, sphere_criterion):
        cands = [candidate("s1", 0.0, 0.3), candidate("s1", 1.0, 0.8), candidate("s1", 2.0, 0.5)]
        m = match(cands, [lesion("s1")], [], ["s1"], sphere_criterion)
        assert m.count(CandidateStatus.TP) == 3
        assert m.lesions[0].hit_score == 0.8

    def test_assignment_prefers_overlap_then_distance_then_id(self):
        crit = HitCriterion(HitMode.CENTER_IN_BOX)
        big = Annotation("s1", Box3(Point3(0, 0, 0), 40, 40, 40), "b")
        small = Annotation("s1", Box3(Point3(2, 0, 0), 6, 6, 6), "a")
        m = match([candidate("s1", 2.0, 0.9)], [big, small], [], ["s1"], crit)
        assert m.candidates[0].nodule_id == "a"

        twin_a = Annotation("s1", Box3(Point3(0, 0, 0), 10, 10, 10), "z")
        twin_b = Annotation("s1", Box3(Point3(0, 0, 0), 10, 10, 10), "y")
        m = match([candidate("s1", 0.0, 0.9)], [twin_a, twin_b], [], ["s1"], crit)
        assert m.candidates[0].nodule_id == "y"

    def test_scan_outside_manifest(self, sphere_criterion):
        with pytest.raises(InputValidationError, match="not in the scan manifest"):
            match([candidate("s9", 0.0, 0.5)], [], [], ["s1"], sphere_criterion)
        with pytest.raises(InputValidationError):
            match([], [lesion("s9")], [], ["s1"], sphere_criterion)

    def test_duplicate_manifest(self, sphere_criterion):
        with pytest.raises(InputValidationError):
            match([], [], [], ["s1", "s1"], sphere_criterion)

    def test_every_candidate_has_one_status(self, fixture_candidates, fixture_lesions,
                                            fixture_scans, sphere_criterion):
        m = match(fixture_candidates, fixture_lesions, [], fixture_scans, sphere_criterion)
        assert len(m.candidates) == len(fixture_candidates)
        assert m.count(CandidateStatus.TP) == 4
        assert m.count(CandidateStatus.FP) == 8


class TestFroc:
    def test_fixture(self, fixture_candidates, fixture_lesions, fixture_scans,
                     sphere_criterion):
        m = match(fixture_candidates, fixture_lesions, [], fixture_scans, sphere_criterion)
        curve = froc(m)
        assert [(p.fp_per_scan, p.sensitivity) for p in curve.points] == FIXTURE_POINTS
        assert curve.sensitivities == pytest.approx(FIXTURE_SENSITIVITIES, abs=1e-12)
        assert curve.cpm == pytest.approx(FIXTURE_CPM, abs=1e-12)
        assert round(curve.sensitivities[2], 4) == 0.5833
        assert (curve.n_annotations, curve.n_scans) == (4, 4)

    def test_perfect_detector(self, sphere_criterion):
        scans = ["a", "b", "c"]
        m = match([candidate(s, 0.0, 1.0) for s in scans], [lesion(s) for s in scans], [],
                  scans, sphere_criterion)
        curve = froc(m)
        assert curve.sensitivities == [1.0] * 7
        assert curve.cpm == 1.0

    def test_zero_candidates(self, sphere_criterion):
        m = match([], [lesion("s1")], [], ["s1", "s2"], sphere_criterion)
        curve = froc(m)
        assert curve.sensitivities == [0.0] * 7
        assert curve.cpm == 0.0

    def test_zero_annotations(self, sphere_criterion):
        m = match([candidate("s1", 0.0, 0.5)], [], [], ["s1"], sphere_criterion)
        with pytest.raises(UndefinedMetricError):
            froc(m)

    def test_cpm_is_mean_of_rates(self, fixture_candidates, fixture_lesions, fixture_scans,
                                  sphere_criterion):
        curve = froc(match(fixture_candidates, fixture_lesions, [], fixture_scans,
                           sphere_criterion))
        assert len(curve.sensitivities) == len(CPM_FP_RATES)
        assert curve.cpm == sum(curve.sensitivities) / 7

    def test_matches_brute_force(self, sphere_criterion):
        rng = np.random.default_rng(2024)
        for _ in range(500):
            scans, lesions, cands = random_instance(rng)
            curve = froc(match(cands, lesions, [], scans, sphere_criterion))
            hits, fps = naive_scores(scans, lesions, cands)
            sens, cpm = brute_force_froc(hits, fps, len(scans))
            assert curve.sensitivities == pytest.approx(sens, abs=1e-12)
            assert curve.cpm == pytest.approx(cpm, abs=1e-12)
            assert curve.cpm == sum(curve.sensitivities) / len(curve.sensitivities)

    def test_monotone(self, sphere_criterion):
        rng = np.random.default_rng(7)
        for _ in range(100):
            scans, lesions, cands = random_instance(rng)
            points = froc(match(cands, lesions, [], scans, sphere_criterion)).points
            for a, b in zip(points, points[1:]):
                assert a.threshold > b.threshold
                assert a.fp_per_scan <= b.fp_per_scan
                assert a.sensitivity <= b.sensitivity

    def test_zero_probability_candidate_changes_nothing(self, fixture_candidates,
                                                        fixture_lesions, fixture_scans,
                                                        sphere_criterion):
        base = froc(match(fixture_candidates, fixture_lesions, [], fixture_scans,
                          sphere_criterion))
        extra = fixture_candidates + [candidate("s2", 90.0, 0.0), candidate("s3", 0.0, 0.0)]
        more = froc(match(extra, fixture_lesions, [], fixture_scans, sphere_criterion))
        assert more.sensitivities == base.sensitivities

    def test_exclusion_changes_neither_axis(self, fixture_candidates, fixture_lesions,
                                            fixture_scans, sphere_criterion):
        base = froc(match(fixture_candidates, fixture_lesions, [], fixture_scans,
                          sphere_criterion))
        excl = [lesion("s2", x=-40.0, diameter=6.0, nodule_id="e1")]
        extra = fixture_candidates + [candidate("s2", -40.0, 0.99)]
        curve = froc(match(extra, fixture_lesions, excl, fixture_scans, sphere_criterion))
        assert curve.points == base.points
        assert curve.sensitivities == base.sensitivities

    def test_scan_relabeling(self, fixture_candidates, fixture_lesions, fixture_scans,
                             sphere_criterion):
        rename = {"s1": "x9", "s2": "a0", "s3": "m5", "s4": "b2"}
        cands = [candidate(rename[c.scan_id], c.location.x, c.probability,
                           c.location.y, c.location.z) for c in fixture_candidates]
        lesions = [lesion(rename[a.scan_id]) for a in fixture_lesions]
        a = froc(match(fixture_candidates, fixture_lesions, [], fixture_scans, sphere_criterion))
        b = froc(match(cands, lesions, [], [rename[s] for s in fixture_scans], sphere_criterion))
        assert a.points == b.points
        assert a.sensitivities == b.sensitivities


class TestInterpolation:
    POINTS = [FrocPoint(0.9, 0.25, 0.5), FrocPoint(0.5, 1.0, 0.75), FrocPoint(0.1, 2.0, 1.0)]

    def test_at_node(self):
        assert interpolate_sensitivity(self.POINTS, 1.0) == 0.75

    def test_between(self):
        assert interpolate_sensitivity(self.POINTS, 0.5) == pytest.approx(0.5 + 0.25 / 3)

    def test_constant_above(self):
        assert interpolate_sensitivity(self.POINTS, 8.0) == 1.0

    def test_scaled_below(self):
        assert interpolate_sensitivity(self.POINTS, 0.125) == pytest.approx(0.25)

    def test_empty(self):
        assert interpolate_sensitivity([], 1.0) == 0.0


class TestBootstrap:
    @pytest.fixture
    def fixture_match(self, fixture_candidates, fixture_lesions, fixture_scans,
                      sphere_criterion):
        return match(fixture_candidates, fixture_lesions, [], fixture_scans, sphere_criterion)

    def test_single_replicate(self, fixture_match):
        boot = froc_bootstrap(fixture_match, n_resamples=1, seed=5)
        assert boot.n_effective == 1
        for lo, hi in boot.rate_ci:
            assert lo == hi
        assert boot.cpm_ci[0] == boot.cpm_ci[1]

    def test_perfect_detector(self, sphere_criterion):
        scans = [f"s{i}" for i in range(6)]
        m = match([candidate(s, 0.0, 0.9) for s in scans], [lesion(s) for s in scans], [],
                  scans, sphere_criterion)
        boot = froc_bootstrap(m, n_resamples=50, seed=1)
        assert boot.rate_ci == [(1.0, 1.0)] * 7
        assert boot.cpm_ci == (1.0, 1.0)

    def test_independent_of_workers(self, fixture_match):
        serial = froc_bootstrap(fixture_match, n_resamples=64, seed=3, max_workers=1)
        parallel = froc_bootstrap(fixture_match, n_resamples=64, seed=3, max_workers=4)
        assert serial.to_dict() == parallel.to_dict()

    def test_seed_reproducible(self, fixture_match):
        a = froc_bootstrap(fixture_match, n_resamples=40, seed=11)
        b = froc_bootstrap(fixture_match, n_resamples=40, seed=11)
        assert a.to_dict() == b.to_dict()

    def test_redraws_and_drops(self, sphere_criterion, caplog):
        scans = [f"s{i}" for i in range(30)]
        m = match([candidate("s0", 0.0, 0.9)], [lesion("s0")], [], scans, sphere_criterion)
        boot = froc_bootstrap(m, n_resamples=20, seed=0, max_retries=0)
        assert boot.n_effective < 20
        assert "dropped" in caplog.text

    def test_two_seeds_contain_point(self, sphere_criterion):
        rng = np.random.default_rng(99)
        scans = [f"scan{i:02d}" for i in range(50)]
        lesions, cands = [], []
        for i, s in enumerate(scans):
            if i % 2 == 0:
                lesions.append(lesion(s))
                if rng.uniform() < 0.7:
                    cands.append(candidate(s, 1.0, float(rng.uniform(0.3, 1.0))))
            for _ in range(int(rng.integers(0, 4))):
                cands.append(candidate(s, 60.0 + 10 * len(cands), float(rng.uniform(0, 0.8))))
        m = match(cands, lesions, [], scans, sphere_criterion)
        cpm = froc(m).cpm
        a = froc_bootstrap(m, n_resamples=500, seed=1)
        b = froc_bootstrap(m, n_resamples=500, seed=2)
        assert a.cpm_ci != b.cpm_ci
        for boot in (a, b):
            assert boot.cpm_ci[0] <= cpm <= boot.cpm_ci[1]

    def test_invalid_count(self, fixture_match):
        with pytest.raises(InputValidationError):
            froc_bootstrap(fixture_match, n_resamples=0)


class TestSubgroups:
    def test_gender(self, fixture_candidates, fixture_lesions, fixture_scans,
                    sphere_criterion):
        m = match(fixture_candidates, fixture_lesions, [], fixture_scans, sphere_criterion)
        meta = [SubjectMeta("s1", {"gender": "F"}), SubjectMeta("s2", {"gender": "M"}),
                SubjectMeta("s3", {"gender": "F"}), SubjectMeta("s4", {"gender": "M"})]
        rows = froc_by_subgroup(m, meta, "gender")
        assert [r.group for r in rows] == ["F", "M"]
        assert rows[0].n_scans == 2
        assert rows[0].curve.cpm == pytest.approx(0.75, abs=1e-12)

    def test_missing_and_insufficient(self, sphere_criterion):
        m = match([candidate("s2", 50.0, 0.4)], [lesion("s1")], [], ["s1", "s2"],
                  sphere_criterion)
        rows = froc_by_subgroup(m, [SubjectMeta("s2", {"site": "B"})], "site")
        assert [(r.group, r.status) for r in rows] == [("(missing)", "ok"), ("B", "insufficient")]
        assert rows[1].to_dict()["cpm"] is None

    def test_unknown_attribute(self, fixture_candidates, fixture_lesions, fixture_scans,
                               sphere_criterion):
        m = match(fixture_candidates, fixture_lesions, [], fixture_scans, sphere_criterion)
        with pytest.raises(InputValidationError):
            froc_by_subgroup(m, [SubjectMeta("s1", {"gender": "F"})], "race")
