import json

import numpy as np
import pytest

from crossvideo.errors import ValidationError
from crossvideo.evaluation import (
    MetricsReport,
    Segment,
    ablation_rows,
    data_efficiency_rows,
    edit_score,
    evaluate,
    framewise_accuracy,
    levenshtein,
    mean_iou,
    segment_counts,
    segmental_f1,
    to_segments,
)
from oracles import f1_exhaustive, levenshtein_dp, runs


def fuzz_labeling(rng, L, max_segments=6, classes=3):
    k = int(rng.integers(1, min(max_segments, L) + 1))
    cuts = sorted(rng.choice(np.arange(1, L), k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0, *cuts, L]
    out, prev = np.zeros(L, int), -1
    for i in range(k):
        c = int(rng.integers(classes))
        while c == prev:
            c = int(rng.integers(classes))
        out[bounds[i] : bounds[i + 1]] = prev = c
    return out


def test_to_segments_examples():
    assert to_segments([0, 0, 1, 1, 1]) == [Segment(0, 0, 2), Segment(1, 2, 5)]
    assert to_segments([3]) == [Segment(3, 0, 1)]
    assert len(to_segments([0, 1, 0])) == 3
    with pytest.raises(ValidationError):
        to_segments([])


def test_segments_tile_the_sequence():
    rng = np.random.default_rng(0)
    for _ in range(200):
        labels = fuzz_labeling(rng, int(rng.integers(1, 30)))
        segs = to_segments(labels)
        assert segs[0].start == 0 and segs[-1].end == len(labels)
        assert all(a.end == b.start and a.label != b.label for a, b in zip(segs, segs[1:]))
        assert all(s.start < s.end for s in segs)


def test_accuracy_examples():
    assert framewise_accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert framewise_accuracy([0, 0], [1, 1]) == 0.0
    assert framewise_accuracy([0, 1, 1, 1], [0, 1, 1, 0]) == 75.0
    with pytest.raises(ValidationError):
        framewise_accuracy([0, 1], [0])


def test_edit_examples():
    assert edit_score([0, 0, 1], [0, 1, 1]) == 100.0
    assert edit_score([0, 0, 1, 1], [0, 1, 2, 2]) == pytest.approx(100 * (1 - 1 / 3), abs=1e-3)
    assert edit_score([0, 0, 1, 1], [0, 1, 2, 2]) == pytest.approx(66.667, abs=1e-3)
    assert edit_score([4, 4], [5, 5]) == 0.0
    with pytest.raises(ValidationError):
        edit_score([], [])


def test_f1_worked_example():
    gt = [0] * 10
    pred = [0] * 6 + [1] * 4
    assert segment_counts(pred, gt, 0.5) == (1, 1, 0)
    assert segmental_f1(pred, gt, 0.5) == pytest.approx(66.667, abs=1e-3)
    assert segmental_f1(pred, gt, 0.10) == pytest.approx(66.667, abs=1e-3)
    for t in (0.1, 0.25, 0.5):
        assert segmental_f1(gt, gt, t) == 100.0


def test_greedy_rule_is_available():
    # the second A prediction's best gt segment is taken; only the optimal matcher reroutes it
    gt = [0] * 10 + [1] * 2 + [0] * 10
    pred = [0] * 3 + [1] * 2 + [0] * 9 + [1] * 8
    assert segment_counts(pred, gt, 0.1, "greedy") == (1, 3, 2)
    assert segment_counts(pred, gt, 0.1) == (2, 2, 1)
    assert segmental_f1(pred, gt, 0.1) == pytest.approx(f1_exhaustive(pred, gt, 0.1))
    with pytest.raises(ValidationError):
        segment_counts(pred, gt, 0.1, "hungarian")


def test_miou_examples():
    assert mean_iou([0, 1, 1], [0, 1, 1]) == 100.0
    assert mean_iou([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(25.0)
    # class 2 appears in neither labeling
    assert mean_iou([0, 0, 0, 0], [0, 0, 1, 1], class_count=3) == pytest.approx(25.0)
    assert mean_iou([0, 0, 0, 0], [0, 0, 1, 1], class_count=3, skip_empty=False) == pytest.approx(100 / 6)


def test_fuzzed_metrics_against_oracles():
    rng = np.random.default_rng(1)
    for case in range(1000):
        L = int(rng.integers(1, 25))
        pred, gt = fuzz_labeling(rng, L), fuzz_labeling(rng, L)
        p = [s[0] for s in runs(list(pred))]
        g = [s[0] for s in runs(list(gt))]
        assert levenshtein(p, g) == levenshtein_dp(p, g)
        assert edit_score(pred, gt) == 100.0 * (1 - levenshtein_dp(p, g) / max(len(p), len(g)))
        prev = -1.0
        for t in (0.5, 0.25, 0.10):
            f1 = segmental_f1(pred, gt, t)
            assert f1 == f1_exhaustive(pred, gt, t), (case, t, pred, gt)
            assert 0.0 <= f1 <= 100.0
            assert f1 >= prev  # lower threshold never hurts
            prev = f1
        acc = framewise_accuracy(pred, gt)
        assert acc == framewise_accuracy(gt, pred)
        assert 0.0 <= acc <= 100.0
        assert 0.0 <= edit_score(pred, gt) <= 100.0
        assert 0.0 <= mean_iou(pred, gt) <= 100.0


class _Oracle:
    def __init__(self, task="action"):
        self.task = task

    def predict(self, sample):
        return sample.labels if self.task == "action" else sample.point_labels


class _Constant:
    def predict(self, sample):
        return np.zeros_like(sample.labels)


def test_evaluate_oracle_and_constant(tiny):
    report = evaluate(_Oracle(), tiny["test"])
    assert report.accuracy == 100.0 and report.edit == 100.0
    assert report.f1 == {"10": 100.0, "25": 100.0, "50": 100.0}
    sem = evaluate(_Oracle("semantic"), tiny["test"], task="semantic")
    assert sem.miou == 100.0
    const = evaluate(_Constant(), tiny["test"])
    labels = np.concatenate([s.labels for s in tiny["test"]])
    assert const.accuracy == pytest.approx(100 * np.mean(labels == 0))


def test_constant_on_balanced_two_class_set():
    class S:
        def __init__(self, labels):
            self.labels = np.array(labels)
            self.sequence_id = "s"

    data = [S([0, 0, 1, 1]), S([1, 1, 0, 0])]
    assert evaluate(_Constant(), data).accuracy == 50.0


def test_report_round_trip(tmp_path):
    r = MetricsReport("action", 80.0, 75.0, {"10": 1.0, "25": 2.0, "50": 3.0}, None, {"a": 1}, 3)
    r.save(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert set(data) == {"task", "accuracy", "edit", "f1", "miou", "config_echo", "seed"}
    assert MetricsReport.from_json((tmp_path / "r.json").read_text()) == r


def test_sweep_row_builders():
    rows = data_efficiency_rows((0.1, 0.2, 0.4, 0.8), seeds=(0, 1))
    assert sorted({r.fraction for r in rows}) == [0.1, 0.2, 0.4, 0.8]
    for f in (0.1, 0.2, 0.4, 0.8):
        assert {r.init for r in rows if r.fraction == f} == {"scratch", "pretrained"}
    abl = ablation_rows([("cross_video", "cross_frame"), "intra_frame"], seeds=(0,))
    assert [r.id for r in abl] == ["full-s0", "no-cross_video+cross_frame-s0", "no-intra_frame-s0", "scratch-s0"]
    assert abl[1].toggles == {"cross_video": False, "cross_frame": False}
    assert len({r.id for r in abl}) == len(abl)
