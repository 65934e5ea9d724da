import itertools

import numpy as np
import pytest

from conftest import scored
from lung_screening_benchmark.classify_eval import (
    OVERALL, CiMethod, auc, bootstrap_auc_ci, delong_ci, estimate, parse_ci_method,
    roc_points, subgroup_report
)
from lung_screening_benchmark.exceptions import InputValidationError, UndefinedMetricError
from lung_screening_benchmark.tabular_io import SubjectMeta

DELONG_FIXTURE = scored((1, 0, 1, 0), (0.8, 0.7, 0.6, 0.5))


def pair_count_auc(records):
    pos = [r.score for r in records if r.label == 1]
    neg = [r.score for r in records if r.label == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def trapezoid(points):
    return sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(points, points[1:]))


def gaussian_shift(n_pos, n_neg, shift, seed):
    rng = np.random.default_rng(seed)
    raw = np.concatenate([rng.normal(shift, 1.0, n_pos), rng.normal(0.0, 1.0, n_neg)])
    scores = 1.0 / (1.0 + np.exp(-raw))
    return scored([1] * n_pos + [0] * n_neg, scores)


class TestAuc:
    def test_perfect_separation(self):
        assert auc(scored((0, 1), (0.1, 0.9))) == 1.0

    def test_all_ties(self):
        assert auc(scored((0, 1, 1, 0, 1), [0.4] * 5)) == 0.5

    def test_fixture(self):
        assert auc(DELONG_FIXTURE) == 0.75

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError, match="undefined AUC"):
            auc(scored((1, 1, 1), (0.2, 0.5, 0.9)))

    def test_pair_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(2, 13))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = np.round(rng.uniform(0, 1, size=n), 1)
            records = scored(labels, scores)
            assert auc(records) == pair_count_auc(records)

    def test_label_flip(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = np.round(rng.uniform(0, 1, size=n), 2)
            flipped = scored(1 - labels, scores)
            assert auc(scored(labels, scores)) + auc(flipped) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("transform", [
        lambda s: s ** 3,
        np.exp,
        lambda s: np.log1p(s) * 10.0 - 4.0,
    ])
    def test_monotone_transform(self, transform):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        scores = rng.uniform(0.01, 0.99, size=40)
        a = scored(labels, scores)
        b = scored(labels, transform(scores))
        assert auc(a) == auc(b)
        assert delong_ci(a) == delong_ci(b)

    def test_roc_area_equals_auc(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            labels = rng.integers(0, 2, size=20)
            labels[0], labels[1] = 0, 1
            records = scored(labels, np.round(rng.uniform(0, 1, size=20), 1))
            points = roc_points(records)
            assert points[0] == (0.0, 0.0)
            assert points[-1] == (1.0, 1.0)
            assert trapezoid(points) == pytest.approx(auc(records), abs=1e-12)


class TestDelong:
    def test_fixture(self):
        est = delong_ci(DELONG_FIXTURE)
        # V10 = (1, 0.5), V01 = (0.5, 1): variance 0.125/2 + 0.125/2
        half = 1.959963984540054 * np.sqrt(0.125)
        assert est.auc == 0.75
        assert est.ci_low == pytest.approx(0.75 - half, abs=1e-9)
        assert est.ci_high == 1.0
        assert (est.n_pos, est.n_neg, est.method) == (2, 2, "delong")

    def test_perfect_separation_is_degenerate(self):
        est = delong_ci(scored((0, 0, 1, 1), (0.1, 0.2, 0.8, 0.9)))
        assert (est.auc, est.ci_low, est.ci_high) == (1.0, 1.0, 1.0)
        assert est.note == "degenerate variance"

    def test_needs_two_per_class(self):
        with pytest.raises(UndefinedMetricError):
            delong_ci(scored((0, 1, 1), (0.1, 0.5, 0.9)))

    def test_contains_point_estimate(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            labels = rng.integers(0, 2, size=25)
            labels[:2], labels[2:4] = 0, 1
            est = delong_ci(scored(labels, rng.uniform(0, 1, size=25)))
            assert 0.0 <= est.ci_low <= est.auc <= est.ci_high <= 1.0


class TestBootstrap:
    def test_single_replicate(self):
        est = bootstrap_auc_ci(DELONG_FIXTURE, n_resamples=1, seed=0)
        assert est.ci_low == est.ci_high
        assert est.note == "single replicate"

    def test_perfect_separation(self):
        est = bootstrap_auc_ci(scored((0, 0, 1, 1), (0.1, 0.2, 0.8, 0.9)), n_resamples=200)
        assert (est.ci_low, est.ci_high) == (1.0, 1.0)

    def test_reproducible_and_schedule_independent(self):
        records = gaussian_shift(40, 60, 1.0, seed=5)
        a = bootstrap_auc_ci(records, 2000, seed=7, max_workers=1)
        b = bootstrap_auc_ci(records, 2000, seed=7, max_workers=4)
        assert a == b

    def test_agrees_with_delong(self):
        records = gaussian_shift(100, 100, 1.0, seed=6)
        d = delong_ci(records)
        b = bootstrap_auc_ci(records, 2000, seed=0)
        assert b.ci_low <= d.ci_high and d.ci_low <= b.ci_high
        width_d, width_b = d.ci_high - d.ci_low, b.ci_high - b.ci_low
        assert abs(width_b - width_d) / width_d < 0.25


class TestCiMethod:
    @pytest.mark.parametrize("text,expected", [
        ("delong", (CiMethod.DELONG, None)),
        ("bootstrap", (CiMethod.BOOTSTRAP, 2000)),
        ("bootstrap:500", (CiMethod.BOOTSTRAP, 500)),
    ])
    def test_parse(self, text, expected):
        assert parse_ci_method(text) == expected

    @pytest.mark.parametrize("text", ["", "wald", "bootstrap:x", "bootstrap:0"])
    def test_rejected(self, text):
        with pytest.raises(InputValidationError):
            parse_ci_method(text)

    def test_estimate_dispatch(self):
        assert estimate(DELONG_FIXTURE).method == "delong"
        assert estimate(DELONG_FIXTURE, CiMethod.BOOTSTRAP, 10).method == "bootstrap"


class TestSubgroups:
    def test_one_group_matches_overall(self):
        meta = [SubjectMeta(r.scan_id, {"gender": "F"}) for r in DELONG_FIXTURE]
        rows = subgroup_report(DELONG_FIXTURE, meta, "gender")
        assert [r.group for r in rows] == [OVERALL, "F"]
        assert rows[0].estimate == rows[1].estimate == delong_ci(DELONG_FIXTURE)

    def test_perfect_and_random_groups(self):
        perfect = scored((1, 1, 0, 0), (0.9, 0.8, 0.2, 0.1), prefix="a")
        random = scored((1, 1, 1, 1, 0, 0, 0, 0), (0.1, 0.4, 0.6, 0.9, 0.2, 0.3, 0.7, 0.8),
                        prefix="b")
        perfect = [type(r)(r.record_id, f"A{i}", r.score, r.label) for i, r in enumerate(perfect)]
        random = [type(r)(r.record_id, f"B{i}", r.score, r.label) for i, r in enumerate(random)]
        meta = ([SubjectMeta(r.scan_id, {"site": "A"}) for r in perfect]
                + [SubjectMeta(r.scan_id, {"site": "B"}) for r in random])
        rows = subgroup_report(perfect + random, meta, "site")
        by_group = {r.group: r for r in rows}
        assert by_group["A"].estimate.auc == 1.0
        assert by_group["B"].estimate.auc == 0.5
        assert by_group["A"].estimate.ci_low == 1.0

    def test_single_class_group_is_insufficient(self):
        records = DELONG_FIXTURE + scored((1, 1), (0.3, 0.4), prefix="x")
        records = records[:4] + [type(r)(r.record_id, f"pos{i}", r.score, r.label)
                                 for i, r in enumerate(records[4:])]
        meta = ([SubjectMeta(r.scan_id, {"race": "A"}) for r in records[:4]]
                + [SubjectMeta(r.scan_id, {"race": "B"}) for r in records[4:]])
        rows = subgroup_report(records, meta, "race")
        assert [(r.group, r.status) for r in rows] == [
            (OVERALL, "ok"), ("A", "ok"), ("B", "insufficient")]
        assert rows[2].to_dict()["auc"] is None

    def test_records_without_meta_are_missing(self):
        meta = [SubjectMeta("scan0", {"gender": "F"})]
        rows = subgroup_report(DELONG_FIXTURE, meta, "gender", CiMethod.BOOTSTRAP, 20)
        assert [r.group for r in rows] == [OVERALL, "(missing)", "F"]
        assert rows[2].status == "insufficient"

    def test_unknown_attribute(self):
        with pytest.raises(InputValidationError):
            subgroup_report(DELONG_FIXTURE, [SubjectMeta("scan0", {"gender": "F"})], "race")
