import numpy as np
import pytest

from tubedet.geometry import BoundingBox, Detection, iou
from tubedet.oracles import DetectorOracle, SimConfig, simulate_world
from tubedet.perturb import (
    OriginalScheme,
    PerturbConfig,
    RandomScheme,
    max_pool,
    original_replacement_candidates,
    parse_scheme,
    perturb_and_pool,
    perturb_offsets,
    random_perturb,
    scheme_candidates,
)
from tubedet.tubelets import ProposalConfig, Tubelet, TubeletBox, propose_tubelets

from conftest import random_box


class TableOracle(DetectorOracle):
    def __init__(self, table):
        self.table = table

    def score_boxes(self, video_id, frame, class_id, boxes):
        return [self.table.get(b, -5.0) for b in boxes]


def test_parse_scheme():
    assert parse_scheme("R(20,0.2)") == RandomScheme(20, 0.2)
    assert parse_scheme(" o( 0.5 ) ") == OriginalScheme(0.5)
    assert str(RandomScheme(20, 0.2)) == "R(20,0.2)" and str(OriginalScheme(0.5)) == "O(0.5)"
    for bad in ("R(20)", "O(0.5,1)", "X(1)", "R(0,0.2)", "O(1.5)", "R(5,-1)"):
        with pytest.raises(ValueError):
            parse_scheme(bad)


def test_zero_ratio_gives_copies():
    b = BoundingBox(5, 5, 20, 30)
    assert random_perturb(b, 0.0, 7, 100, 100, np.random.default_rng(0)) == [b] * 7


def test_offsets_bounded_and_centred():
    rng = np.random.default_rng(9)
    off = perturb_offsets(rng, 40.0, 10.0, 0.25, 20000)
    assert np.all(np.abs(off[:, [0, 2]]) <= 10.0) and np.all(np.abs(off[:, [1, 3]]) <= 2.5)
    # four independent coordinates: near-zero correlation between corners
    corr = np.corrcoef(off.T)
    assert np.all(np.abs(corr[np.triu_indices(4, 1)]) < 0.03)


def test_random_perturb_clamps_and_redraws():
    rng = np.random.default_rng(0)
    b = BoundingBox(0, 0, 4, 4)
    out = random_perturb(b, 1.0, 200, 10, 10, rng)
    assert 0 < len(out) <= 200
    for s in out:
        assert 0 <= s.x1 < s.x2 <= 10 and 0 <= s.y1 < s.y2 <= 10


def test_original_candidates_match_brute_force(rng):
    for _ in range(50):
        tb = random_box(rng, 100, 100, 5)
        dets = [Detection("v", 0, 0, 0.0, random_box(rng, 100, 100, 5)) for _ in range(30)]
        t = float(rng.uniform(0, 1))
        assert original_replacement_candidates(tb, dets, t) == [d.box for d in dets if iou(tb, d.box) >= t]
    exact = BoundingBox(1, 1, 9, 9)
    dets = [Detection("v", 0, 0, 0.0, exact), Detection("v", 0, 0, 0.0, exact.shifted(0.1, 0))]
    assert original_replacement_candidates(exact, dets, 1.0) == [exact]


def _one_box_tubelet(box, score):
    return Tubelet("v", 0, 0, [TubeletBox(0, box, score, 1.0, 0.0)])


def test_max_pool_hand_cases():
    orig, other = BoundingBox(0, 0, 10, 10), BoundingBox(1, 1, 11, 11)
    oracle = TableOracle({orig: 0.2, other: 0.5})
    pooled = max_pool(_one_box_tubelet(orig, 0.2), [[other]], oracle)
    assert pooled.boxes[0].box == other and pooled.boxes[0].det_score == 0.5
    oracle = TableOracle({orig: 0.7, other: 0.5})
    assert max_pool(_one_box_tubelet(orig, 0.7), [[other]], oracle).boxes[0].box == orig
    # ties: the original wins, then the earliest candidate
    third = BoundingBox(2, 2, 12, 12)
    oracle = TableOracle({orig: 0.5, other: 0.5, third: 0.5})
    assert max_pool(_one_box_tubelet(orig, 0.5), [[other, third]], oracle).boxes[0].box == orig
    oracle = TableOracle({orig: 0.1, other: 0.5, third: 0.5})
    assert max_pool(_one_box_tubelet(orig, 0.1), [[other, third]], oracle).boxes[0].box == other
    with pytest.raises(ValueError):
        max_pool(_one_box_tubelet(orig, 0.1), [], oracle)


@pytest.fixture(scope="module")
def pooled_world():
    w = simulate_world(SimConfig(seed=2, videos=2, frames=25, classes=2))
    det, tracker = w.detector(), w.gt_tracker()
    dets, tubelets = [], []
    for v in w.videos:
        for c in range(2):
            vd = []
            for f in range(v.frame_count):
                boxes = w.proposals[(v.video_id, f)]
                vd += [Detection(v.video_id, f, c, s, b) for b, s in zip(boxes, det.score_boxes(v.video_id, f, c, boxes))]
            dets += vd
            tubelets += propose_tubelets(v, c, vd, tracker, ProposalConfig(), det)
    return w, det, dets, tubelets


def test_pooling_preserves_structure_and_dominates(pooled_world):
    w, det, dets, tubelets = pooled_world
    videos = {v.video_id: v for v in w.videos}
    cfg = PerturbConfig(combine="candidates", seed=4)
    pooled = perturb_and_pool(tubelets, cfg, videos, dets, det)
    assert len(pooled) == 3 * len(tubelets)
    for i, t in enumerate(tubelets):
        r, o, both = pooled[3 * i: 3 * i + 3]
        assert (r.scheme, o.scheme, both.scheme) == ("R(20,0.2)", "O(0.5)", "R(20,0.2)+O(0.5)")
        for p in (r, o, both):
            assert [tb.frame for tb in p.boxes] == [tb.frame for tb in t.boxes]
            assert (p.anchor_frame, p.class_id, p.video_id) == (t.anchor_frame, t.class_id, t.video_id)
            assert [tb.track_score for tb in p.boxes] == [tb.track_score for tb in t.boxes]
            assert [tb.anchor_offset_norm for tb in p.boxes] == [tb.anchor_offset_norm for tb in t.boxes]
            assert all(a.det_score >= b.det_score for a, b in zip(p.boxes, t.boxes))
        for a, b, c in zip(both.boxes, r.boxes, o.boxes):
            assert a.det_score >= max(b.det_score, c.det_score)
    assert cfg.rescoring_input(pooled) == pooled[2::3]


def test_tubelet_union_mode(pooled_world):
    w, det, dets, tubelets = pooled_world
    videos = {v.video_id: v for v in w.videos}
    cfg = PerturbConfig(combine="tubelets")
    pooled = perturb_and_pool(tubelets, cfg, videos, dets, det)
    assert len(pooled) == 2 * len(tubelets)
    assert cfg.rescoring_input(pooled) == pooled


def test_pooling_is_deterministic_and_order_free(pooled_world):
    w, det, dets, tubelets = pooled_world
    videos = {v.video_id: v for v in w.videos}
    cfg = PerturbConfig(seed=11)
    a = perturb_and_pool(tubelets, cfg, videos, dets, det)
    b = perturb_and_pool(tubelets[::-1], cfg, videos, dets, det)
    n = len(cfg.schemes)
    regrouped = [b[(len(tubelets) - 1 - i) * n + k] for i in range(len(tubelets)) for k in range(n)]
    assert a == regrouped


def test_candidates_include_every_scheme(pooled_world):
    w, det, dets, tubelets = pooled_world
    t = tubelets[0]
    v = next(v for v in w.videos if v.video_id == t.video_id)
    by_frame = {}
    for d in dets:
        if d.video_id == t.video_id and d.class_id == t.class_id:
            by_frame.setdefault(d.frame, []).append(d)
    r = scheme_candidates(t, [RandomScheme(5, 0.1)], v, by_frame, 0)
    o = scheme_candidates(t, [OriginalScheme(0.5)], v, by_frame, 0)
    both = scheme_candidates(t, [RandomScheme(5, 0.1), OriginalScheme(0.5)], v, by_frame, 0)
    assert all(x == y + z for x, y, z in zip(both, r, o))
