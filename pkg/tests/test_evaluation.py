import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magmine.evaluation import (
    EvalReport,
    UndefinedMetricError,
    average_precision,
    evaluate_frames,
    evaluate_scores,
    roc_auc,
)
from magmine.feature_store import AnnotationSpan, VideoRecord


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def brute_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, acc = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i] == 1:
            hits += 1
            acc += hits / rank
    return acc / hits


labelled = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
))


class TestMetrics:
    @given(labelled)
    def test_auc_matches_pairwise(self, case):
        s, y = case
        if 0 < sum(y) < len(y):
            assert roc_auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)

    @given(labelled)
    def test_ap_matches_brute_force(self, case):
        s, y = case
        if sum(y):
            assert average_precision(s, y) == pytest.approx(brute_ap(s, y), abs=1e-12)

    @pytest.mark.parametrize("s, y, auc", [
        ([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.75),
        ([1, 1, 1, 1], [0, 1, 0, 1], 0.5),
        ([0.9, 0.1], [1, 0], 1.0),
        ([0.9, 0.1], [0, 1], 0.0),
    ])
    def test_auc_values(self, s, y, auc):
        assert roc_auc(s, y) == auc

    def test_ap_values(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
        # tie: earlier index ranks first
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0

    @pytest.mark.parametrize("fn, y", [(roc_auc, [1, 1]), (roc_auc, [0, 0]), (average_precision, [0, 0])])
    def test_undefined(self, fn, y):
        with pytest.raises(UndefinedMetricError):
            fn([0.1, 0.2], y)

    def test_shape_and_label_checks(self):
        with pytest.raises(ValueError):
            roc_auc([0.1], [0, 1])
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [0, 2])


class TestReports:
    def test_evaluate_scores_frame_level(self):
        recs = [VideoRecord("a", 1, 40, "a.fvec", [AnnotationSpan(16, 40)], 16),
                VideoRecord("n", 0, 32, "n.fvec", [], 16)]
        rep = evaluate_scores(recs, {"a": np.array([0.1, 0.9]), "n": np.array([0.2, 0.3])})
        assert rep.num_frames == 72 and rep.num_positive_frames == 24
        assert rep.frame_auc == 1.0 and rep.frame_map == 1.0
        assert rep.per_video_auc == {"a": 1.0}

    def test_no_positive_frames(self):
        recs = [VideoRecord("n", 0, 32, "n.fvec", [], 16)]
        with pytest.raises(UndefinedMetricError):
            evaluate_scores(recs, {"n": np.array([0.2, 0.3])})

    def test_csv_and_json(self, tmp_path):
        rep = EvalReport(0.75, 0.5, num_frames=10, num_positive_frames=3)
        assert rep.to_csv().splitlines()[:3] == ["metric,value", "frame_auc,0.75", "frame_map,0.5"]
        rep.write(tmp_path / "r.json")
        assert '"frame_auc": 0.75' in (tmp_path / "r.json").read_text()

    def test_callable_scorer(self, tiny_corpus):
        _, m = tiny_corpus
        rep = evaluate_frames(m, "test", lambda x: -np.zeros(x.shape[0]))
        assert rep.frame_auc == 0.5
