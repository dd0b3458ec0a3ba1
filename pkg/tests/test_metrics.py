import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amlnet.metrics import ConfusionMatrix, metric_rows, write_metrics_csv


def test_identical_masks_fill_diagonal():
    m = np.random.default_rng(0).integers(0, 3, (6, 6))
    cm = ConfusionMatrix(3).accumulate(m, m)
    assert np.array_equal(cm.counts, np.diag(np.bincount(m.ravel(), minlength=3)))
    for c in range(3):
        assert cm.iou(c) == cm.precision(c) == cm.recall(c) == 1.0


def test_empty_masks_leave_counts():
    cm = ConfusionMatrix(3)
    cm.accumulate(np.zeros((0, 0), dtype=int), np.zeros((0, 0), dtype=int))
    assert cm.total == 0 and not cm.counts.any()


def test_double_loop_oracle():
    rng = np.random.default_rng(1)
    pred, gt = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
    ref = np.zeros((4, 4), dtype=np.int64)
    for y in range(8):
        for x in range(8):
            ref[gt[y, x], pred[y, x]] += 1
    cm = ConfusionMatrix(4).accumulate(pred, gt)
    assert np.array_equal(cm.counts, ref)
    assert cm.total == 64


def test_hand_counted_half_prediction():
    gt = np.ones((2, 2), dtype=int)
    pred = np.array([[1, 1], [0, 0]])
    cm = ConfusionMatrix(2).accumulate(pred, gt)
    assert cm.iou(1) == 0.5 and cm.recall(1) == 0.5 and cm.precision(1) == 1.0
    assert cm.iou(0) == 0.0
    assert cm.precision(0) == 0.0 and cm.recall(0) is None


def test_disjoint_prediction_iou_zero():
    cm = ConfusionMatrix(2).accumulate(np.zeros((3, 3), int), np.ones((3, 3), int))
    assert cm.iou(1) == 0.0 and cm.iou(0) == 0.0


def test_absent_class_excluded_from_mean():
    m = np.array([[0, 1], [1, 0]])
    cm = ConfusionMatrix(3).accumulate(m, m)
    assert not cm.present(2) and cm.iou(2) == 1.0
    assert cm.mean_iou() == 1.0
    pred = np.array([[0, 0], [1, 0]])
    cm = ConfusionMatrix(3).accumulate(pred, m)
    assert cm.mean_iou() == pytest.approx((2 / 3 + 1 / 2) / 2)


def test_label_and_shape_errors():
    with pytest.raises(ValueError, match="shape"):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError, match=r"\(1, 0\)"):
        ConfusionMatrix(2).accumulate(np.array([[0, 0], [2, 0]]), np.zeros((2, 2), int))


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (5, 5), elements=st.integers(0, 2)),
       arrays(np.int64, (5, 5), elements=st.integers(0, 2)))
def test_iou_bounded_by_precision_and_recall(pred, gt):
    cm = ConfusionMatrix(3).accumulate(pred, gt)
    for c in range(3):
        if not cm.present(c):
            continue
        p = cm.precision(c)
        r = cm.recall(c)
        bound = min(v for v in (p, r) if v is not None)
        assert 0 <= cm.iou(c) <= bound <= 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(arrays(np.int64, (3, 3), elements=st.integers(0, 2)),
                          arrays(np.int64, (3, 3), elements=st.integers(0, 2))),
                min_size=1, max_size=5), st.randoms())
def test_accumulation_order_independent(pairs, rnd):
    a = ConfusionMatrix(3)
    for p, g in pairs:
        a.accumulate(p, g)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    b = ConfusionMatrix(3)
    for p, g in shuffled:
        b.accumulate(p, g)
    assert np.array_equal(a.counts, b.counts)


def test_merge_equals_joint_accumulation():
    rng = np.random.default_rng(2)
    p1, g1, p2, g2 = (rng.integers(0, 3, (4, 4)) for _ in range(4))
    joint = ConfusionMatrix(3).accumulate(p1, g1).accumulate(p2, g2)
    merged = ConfusionMatrix(3).accumulate(p1, g1).merge(ConfusionMatrix(3).accumulate(p2, g2))
    assert np.array_equal(joint.counts, merged.counts)


def test_metric_rows_and_csv(tmp_path):
    gt = np.ones((2, 2), dtype=int)
    a = ConfusionMatrix(3).accumulate(np.array([[1, 1], [0, 0]]), gt)
    b = ConfusionMatrix(3).accumulate(gt, gt)
    rows = metric_rows([a, b], ["bg", "cyto", "nuc"])
    assert [r["class"] for r in rows] == ["bg", "cyto", "nuc", "mean"]
    assert rows[1]["iou_mean"] == "0.750000" and rows[1]["iou_std"] == "0.250000"
    assert rows[2]["precision"] == "n/a"
    write_metrics_csv(tmp_path / "m.csv", rows, "d1g3st")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# config_digest=d1g3st"
    assert lines[1] == "class,iou_mean,iou_std,precision,recall"
    assert len(lines) == 6
