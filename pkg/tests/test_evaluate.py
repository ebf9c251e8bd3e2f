import numpy as np
import pytest

from tubedet.evaluate import (
    NoGroundTruth,
    average_precision,
    corloc,
    evaluate,
    format_table,
    format_tsv,
    match_detections,
    temporal_variation,
    tubelet_detections,
)
from tubedet.geometry import BoundingBox, iou
from tubedet.tubelets import Tubelet, TubeletBox

from conftest import brute_force_ap, det, gt, random_box


def _instance(rng):
    n_frames = int(rng.integers(1, 4))
    gts = [gt("v", int(rng.integers(0, n_frames)), random_box(rng, 40, 40, 4).to_list(), instance=k)
           for k in range(int(rng.integers(1, 11)))]
    dets = []
    for _ in range(int(rng.integers(0, 21))):
        frame = int(rng.integers(0, n_frames))
        score = float(rng.integers(0, 5)) if rng.random() < 0.3 else float(rng.normal())
        if rng.random() < 0.5 and gts:
            g = gts[int(rng.integers(0, len(gts)))]
            b = g.box.shifted(float(rng.normal(0, 3)), float(rng.normal(0, 3)))
            dets.append(det("v", g.frame, b.to_list(), score))
        else:
            dets.append(det("v", frame, random_box(rng, 40, 40, 4).to_list(), score))
    return dets, gts


def test_ap_matches_brute_force(rng):
    for _ in range(500):
        dets, gts = _instance(rng)
        assert abs(average_precision(dets, gts) - brute_force_ap(dets, gts)) <= 1e-12


def test_ap_hand_cases():
    g = [gt("v", 0, (0, 0, 10, 10))]
    assert average_precision([det("v", 0, (0, 0, 10, 10), 1.0)], g) == 1.0
    two = [det("v", 0, (50, 50, 60, 60), 0.9), det("v", 0, (0, 0, 10, 10), 0.4)]
    assert average_precision(two, g) == 0.5
    assert average_precision([], g) == 0.0
    with pytest.raises(NoGroundTruth):
        average_precision(two, [])


def test_matching_prefers_highest_iou_then_gt_order():
    gts = [gt("v", 0, (0, 0, 10, 10), instance=0), gt("v", 0, (1, 0, 11, 10), instance=1)]
    order, tp = match_detections([det("v", 0, (1, 0, 11, 10), 1.0), det("v", 0, (1, 0, 11, 10), 0.5)], gts)
    assert list(tp) == [True, True]
    # equal overlap with both: the first gt is taken first
    same = [gt("v", 0, (0, 0, 10, 10), instance=0), gt("v", 0, (0, 0, 10, 10), instance=1)]
    _, tp = match_detections([det("v", 0, (0, 0, 10, 10), 1.0)], same)
    assert list(tp) == [True]


def test_ap_properties(rng):
    for _ in range(200):
        dets, gts = _instance(rng)
        ap = average_precision(dets, gts)
        assert 0.0 <= ap <= 1.0
        transformed = [d.__class__(d.video_id, d.frame, d.class_id, float(np.tanh(3 * d.score) + 7), d.box) for d in dets]
        assert average_precision(transformed, gts) == ap
        low = min([d.score for d in dets], default=0.0) - 1
        fp = det("v", 99, (0, 0, 1, 1), low)
        assert average_precision(dets + [fp], gts) <= ap
        # a top-scored hit on a gt no detection could reach leaves every other match as it was
        high = max([d.score for d in dets], default=0.0) + 1
        for g in gts:
            reachable = any(d.frame == g.frame and iou(d.box, g.box) >= 0.5 for d in dets)
            twins = sum(1 for o in gts if o.frame == g.frame and o.box == g.box)
            if not reachable and twins == 1:
                tp = det(g.video_id, g.frame, g.box.to_list(), high)
                assert average_precision(dets + [tp], gts) >= ap
                break


def test_corloc_fixture():
    gts = [gt("v", f, (0, 0, 10, 10)) for f in range(3)]
    dets = [
        det("v", 0, (0, 0, 10, 10), 0.9), det("v", 0, (50, 50, 60, 60), 0.1),
        det("v", 1, (50, 50, 60, 60), 0.9), det("v", 1, (0, 0, 10, 10), 0.1),
        det("v", 2, (1, 0, 11, 10), 0.3),
    ]
    assert corloc(dets, gts, 0) == pytest.approx(2 / 3, abs=0)
    assert corloc([det("v", f, (0, 0, 10, 10), 1.0) for f in range(3)], gts, 0) == 1.0
    assert corloc([det("v", f, (40, 40, 50, 50), 1.0) for f in range(3)], gts, 0) == 0.0
    # only the top box matters
    shuffled = [d.__class__(d.video_id, d.frame, d.class_id, d.score if d.score > 0.5 else -3.0, d.box) for d in dets]
    assert corloc(shuffled, gts, 0) == corloc(dets, gts, 0)
    with pytest.raises(NoGroundTruth):
        corloc(dets, gts, 1)


def test_corloc_needs_strict_overlap():
    half = [det("v", 0, (0, 0, 10, 5), 1.0)]
    assert corloc(half, [gt("v", 0, (0, 0, 10, 10))], 0) == 0.0


def test_temporal_variation():
    assert temporal_variation([0.3, 0.3, 0.3]) == 0.0
    assert temporal_variation([0, 1, 0, 1, 0]) == 1.0
    with pytest.raises(ValueError):
        temporal_variation([1.0])


def test_evaluate_report_and_tables():
    gts = [gt("v", 0, (0, 0, 10, 10), class_id=0), gt("v", 0, (20, 20, 30, 30), class_id=1)]
    dets = [det("v", 0, (0, 0, 10, 10), 1.0, class_id=0), det("v", 0, (0, 0, 10, 10), 1.0, class_id=1)]
    report = evaluate(dets, gts, ["cat", "dog", "eel"], method="m")
    assert [c.ap for c in report.classes] == [1.0, 0.0, None]
    assert report.mean_ap == 0.5 and report.mean_corloc == 0.5
    assert (report.classes[1].tp, report.classes[1].fp, report.classes[1].n_gt) == (0, 1, 1)
    table = format_table([report], 0.5)
    assert table.splitlines()[0] == "# AP interpolation: all-points monotone envelope (VOC2010); IoU threshold 0.5"
    assert table.splitlines()[2].split() == ["m", "1.0000", "0.0000", "-", "0.5000", "0.5000"]
    assert format_tsv([report]).splitlines()[0].split("\t") == ["method", "cat", "dog", "eel", "mean_ap", "mean_corloc"]
    assert report.records()[-1] == {"type": "summary", "method": "m", "mean_ap": 0.5, "mean_corloc": 0.5,
                                    "interpolation": report.interpolation}
    with pytest.raises(NoGroundTruth):
        evaluate(dets, [], ["cat"])


def test_tubelet_detections_scores():
    box = BoundingBox(0, 0, 5, 5)
    t = Tubelet("v", 0, 0, [TubeletBox(0, box, 0.0, 1.0, 0.0, 0.8), TubeletBox(1, box, 2.0, 1.0, 0.1, 0.4)])
    assert [d.score for d in tubelet_detections([t])] == [0.0, 2.0]
    assert [d.score for d in tubelet_detections([t], "tcn")] == [0.8, 0.4]
    fused = tubelet_detections([t], "tcn", fuse=True)
    assert fused[0].score == pytest.approx(0.4)
    with pytest.raises(ValueError):
        tubelet_detections([Tubelet("v", 0, 0, [TubeletBox(0, box, 0.0, 1.0)])], "tcn")
    with pytest.raises(ValueError):
        tubelet_detections([t], "other")
