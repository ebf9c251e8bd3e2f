import numpy as np
import pytest

from tubedet.geometry import BoundingBox, Detection, GroundTruthObject, iou

_CRITERIA = {}
_NOTES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    key = (number, text)
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        passed = rep.outcome == "passed"
        _CRITERIA[key] = _CRITERIA.get(key, True) and passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, text), passed in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {text}")
        for note in _NOTES.get(number, []):
            terminalreporter.write_line(f"              {note}")


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion of the running test, shown in the summary."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _NOTES.setdefault(marker.args[0], []).append(text)
    return add


# -- helpers -----------------------------------------------------------------

def random_box(rng, width=100.0, height=100.0, min_size=1.0):
    x1 = rng.uniform(0, width - min_size)
    y1 = rng.uniform(0, height - min_size)
    x2 = rng.uniform(x1 + min_size, width)
    y2 = rng.uniform(y1 + min_size, height)
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def random_detections(rng, n, video="v", frame=0, class_id=0, width=60.0, tie_scores=False):
    out = []
    for _ in range(n):
        score = float(rng.integers(0, 4)) if tie_scores else float(rng.normal())
        out.append(Detection(video, frame, class_id, score, random_box(rng, width, width)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gt(video, frame, box, class_id=0, instance=0):
    return GroundTruthObject(video, frame, class_id, instance, BoundingBox(*box))


def det(video, frame, box, score, class_id=0):
    return Detection(video, frame, class_id, score, BoundingBox(*box))


# -- independent references ---------------------------------------------------

def naive_nms(dets, thresh):
    """Quadratic greedy reference: pick the best remaining, drop its overlaps, repeat."""
    remaining = list(range(len(dets)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if dets[i].score > dets[best].score:
                best = i
        keep.append(dets[best])
        remaining = [i for i in remaining if i != best and iou(dets[i].box, dets[best].box) < thresh]
    return keep


def brute_force_ap(dets, gts, thresh=0.5):
    """Average precision enumerated rank by rank with plain loops.

    At every rank where recall rises, the precision used is the best precision
    reached at that rank or any later one.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].video_id, dets[i].frame, i))
    used = set()
    hits = []
    for i in order:
        d = dets[i]
        best, best_iou = None, None
        for j, g in enumerate(gts):
            if j in used or g.video_id != d.video_id or g.frame != d.frame:
                continue
            o = iou(d.box, g.box)
            if o >= thresh and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is not None:
            used.add(best)
        hits.append(best is not None)
    precisions = [sum(hits[:k + 1]) / (k + 1) for k in range(len(hits))]
    ap = 0.0
    for k, hit in enumerate(hits):
        if hit:
            ap += max(precisions[k:]) / len(gts)
    return ap
