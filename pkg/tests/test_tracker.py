from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wstrack.localizer import Bbox, Detection
from wstrack.tracker import Tracker, TrackerConfig, iou


def det(tool, x, y, w=10, h=10, conf=0.9):
    return Detection(tool, Bbox(x, y, w, h), conf)


def test_iou_examples():
    assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
    assert iou((0, 0, 2, 2), (5, 5, 2, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 2, 2), exact=True) == Fraction(1, 3)
    # touching edges do not overlap
    assert iou((0, 0, 2, 2), (2, 0, 2, 2)) == 0.0


def test_config_validation():
    for bad in ({"iou_gate": 0.0}, {"iou_gate": 1.5}, {"mode": "kalman"}, {"max_misses": -1}):
        with pytest.raises(ValueError):
            TrackerConfig(**bad)


def test_gate_satisfied_extends():
    t = Tracker()
    (a,), _ = t.step(0, [det(0, 0, 0, 10, 10)])
    # shift by one column: IoU 90 / 110 > 0.8
    (b,), ev = t.step(1, [det(0, 1, 0, 10, 10)])
    assert a == b and ev == [("extend", a, 1)]


def test_gate_failure_discards_then_dies():
    t = Tracker()
    (a,), _ = t.step(0, [det(0, 0, 0, 10, 10)])
    # IoU 0.3 with the live track
    far = det(0, 0, 0, 10, 3)
    assert abs(iou(far.box, Bbox(0, 0, 10, 10)) - 0.3) < 1e-12
    ids, ev = t.step(1, [far])
    assert ids == [-1]
    assert ("death", a, 1) in ev and ("discard", -1, 1) in ev
    assert t.tracks[0].death_frame == 0
    # the class is free again, so the next detection births a new id
    (c,), ev = t.step(2, [far])
    assert c != a and ev == [("birth", c, 2)]


def test_nearest_centre_wins():
    t = Tracker(TrackerConfig(iou_gate=0.01))
    t.step(0, [det(0, 5, 5, 10, 10)])  # centre (10, 10)
    near = det(0, 7, 5, 10, 10)  # centre (12, 10)
    far = Detection(0, Bbox(0, 0, 60, 60), 0.99)  # centre (30, 30), still overlaps
    ids, _ = t.step(1, [far, near])
    assert ids[1] == 1 and ids[0] == -1


def test_identical_centres_break_ties_by_confidence_then_pixel_order():
    t = Tracker(TrackerConfig(iou_gate=0.1))
    t.step(0, [det(2, 10, 10)])
    ids, _ = t.step(1, [det(2, 10, 10, conf=0.6), det(2, 10, 10, conf=0.8)])
    assert ids == [-1, 1]
    # birth picks the more confident detection, then the lower pixel order
    t2 = Tracker()
    ids, _ = t2.step(0, [det(1, 30, 5, conf=0.5), det(1, 10, 5, conf=0.5), det(1, 40, 40, conf=0.4)])
    assert ids == [-1, 1, -1]


def test_classes_are_independent():
    t = Tracker()
    ids, _ = t.step(0, [det(0, 0, 0), det(1, 0, 0)])
    assert sorted(ids) == [1, 2]
    ids2, _ = t.step(1, [det(1, 0, 0)])
    assert ids2 == [ids[1]]
    assert not any(tr.status == "alive" and tr.tool == 0 for tr in t.live.values())


def test_continuity_mode_ignores_iou_but_not_gaps():
    t = Tracker(TrackerConfig(mode="convlstm_continuity"))
    (a,), _ = t.step(0, [det(4, 0, 0)])
    (b,), _ = t.step(1, [det(4, 100, 100)])
    assert a == b
    t.step(2, [])
    (c,), _ = t.step(3, [det(4, 100, 100)])
    assert c != a


def test_frames_must_increase():
    t = Tracker()
    t.step(3, [])
    with pytest.raises(ValueError):
        t.step(3, [])


def test_finish_closes_live_tracks():
    t = Tracker()
    t.step(0, [det(0, 0, 0)])
    t.step(1, [det(0, 0, 0)])
    (tr,) = t.finish()
    assert tr.status == "dead" and (tr.birth_frame, tr.death_frame) == (0, 1)


boxes = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 20), st.integers(1, 20))
frames = st.lists(st.lists(st.tuples(st.integers(0, 2), boxes), max_size=4), min_size=1, max_size=12)


@given(frames, st.sampled_from(["baseline_iou", "convlstm_continuity"]), st.sampled_from([0.3, 0.5]))
def test_tracker_invariants(seq, mode, gate):
    t = Tracker(TrackerConfig(iou_gate=gate, mode=mode))
    seen_ids = set()
    for f, dets in enumerate(seq):
        ds = [Detection(c, Bbox(*b), 0.5 + 0.01 * i) for i, (c, b) in enumerate(dets)]
        ids, _ = t.step(f, ds)
        assigned = [i for i in ids if i != -1]
        # one detection per track and at most one track per class
        assert len(assigned) == len(set(assigned))
        assert len({ds[k].tool for k, i in enumerate(ids) if i != -1}) == len(assigned)
        seen_ids |= set(assigned)
    tracks = t.finish()
    assert {tr.id for tr in tracks} == seen_ids
    for tr in tracks:
        fs = sorted(tr.boxes)
        assert tr.birth_frame == fs[0] <= tr.death_frame == fs[-1]
        assert fs == list(range(fs[0], fs[-1] + 1))
        if mode == "baseline_iou":
            for a, b in zip(fs, fs[1:]):
                assert iou(tr.boxes[a], tr.boxes[b]) >= gate
