import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dnt.config import apply_overrides
from dnt.features import InputError
from dnt.synthetic import make_sequence
from dnt.tracking import (
    MemoryEntry,
    MotionModel,
    TargetState,
    Tracker,
    TrackerMemory,
    candidate_confidence,
    candidate_confidences,
    detect_anomaly,
    fuse_and_select,
    iou,
    sample_candidates,
    scale_weight,
    select_best_tracked,
    track_sequence,
)


def _loop_confidence(v, rect):
    x, y, w, h = rect
    total = 0.0
    for i in range(v.shape[0]):
        for j in range(v.shape[1]):
            cov_x = max(0.0, min(x + w, j + 1) - max(x, j))
            cov_y = max(0.0, min(y + h, i + 1) - max(y, i))
            total += v[i, j] * cov_x * cov_y
    return total


# ---------------------------------------------------------------- state and sampling


def test_target_state_rect():
    s = TargetState.from_rect((10, 20, 30, 40))
    assert (s.x, s.y, s.sigma) == (25, 40, 1.0)
    assert s.rect == (10, 20, 30, 40)
    s2 = s.with_xys(25, 40, 2.0)
    assert s2.rect == (-5, 0, 60, 80) and s2.area == 4800
    with pytest.raises(InputError):
        TargetState.from_rect((0, 0, 0, 5))


def test_zero_motion_gives_copies():
    prev = TargetState(50, 60, 1.3, 20, 10)
    c = sample_candidates(prev, MotionModel(0, 0, 0), 7, np.random.default_rng(0))
    assert np.array_equal(c, np.tile([50, 60, 1.3], (7, 1)))


def test_sample_mean_statistics():
    prev = TargetState(50, 60, 1.0, 20, 10)
    m = MotionModel(10, 10, 0.01)
    c = sample_candidates(prev, m, 100_000, np.random.default_rng(3))
    se = m.std / np.sqrt(len(c))
    assert np.all(np.abs(c.mean(axis=0) - [50, 60, 1.0]) < 3 * se)


def test_sampling_seeded_and_clamped():
    prev = TargetState(0, 0, 1.0, 5, 5)
    a = sample_candidates(prev, MotionModel(1, 1, 4.0), 500, np.random.default_rng(9))
    b = sample_candidates(prev, MotionModel(1, 1, 4.0), 500, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert a[:, 2].min() == 0.5 and a[:, 2].max() == 2.0


# ---------------------------------------------------------------- confidence


def test_confidence_whole_map_and_empty():
    v = np.ones((6, 9))
    assert candidate_confidence(v, (0, 0, 9, 6)) == 54
    assert candidate_confidence(v, (-3, -3, 20, 20)) == 54
    assert candidate_confidence(v, (20, 0, 3, 3)) == 0
    assert candidate_confidence(v, (2, 2, 0, 0)) == 0


def test_confidence_loop_oracle(rng):
    for _ in range(50):
        v = rng.uniform(size=(7, 5))
        rect = (rng.uniform(-2, 6), rng.uniform(-2, 8), rng.uniform(0, 6), rng.uniform(0, 6))
        assert candidate_confidence(v, rect) == pytest.approx(_loop_confidence(v, rect), abs=1e-12)


def test_vectorized_matches_single(rng):
    v = rng.uniform(size=(10, 12))
    rects = np.column_stack([rng.uniform(-2, 10, 30), rng.uniform(-2, 8, 30), rng.uniform(0, 5, (30, 2))])
    batch = candidate_confidences(v, rects)
    np.testing.assert_allclose(batch, [candidate_confidence(v, r) for r in rects], atol=1e-12)


@given(arrays(np.float64, (5, 6), elements=st.floats(0, 1)),
       st.floats(-3, 8), st.floats(-3, 8), st.floats(0, 8), st.floats(0, 8))
def test_confidence_bounded_by_area(v, x, y, w, h):
    c = candidate_confidence(v, (x, y, w, h))
    assert -1e-12 <= c <= w * h + 1e-9


def test_scale_weight_examples():
    assert scale_weight(3.0, 4.0, 4.0) == 3.0
    assert scale_weight(3.0, 8.0, 4.0) == 6.0
    assert scale_weight(2.5, 0.4, 1.0) == pytest.approx(1.0)


@given(st.floats(0.1, 10), arrays(np.float64, 8, elements=st.floats(0, 5)),
       arrays(np.float64, 8, elements=st.floats(0.1, 5)))
def test_scale_weight_homogeneous(alpha, C, areas):
    np.testing.assert_allclose(scale_weight(alpha * C, areas, 2.0), alpha * scale_weight(C, areas, 2.0),
                               rtol=1e-14, atol=1e-300)


# ---------------------------------------------------------------- fusion and anomalies


def test_fuse_extremes_and_oracle(rng):
    s1, s2 = rng.uniform(size=20), rng.uniform(size=20)
    assert fuse_and_select(s1, s2, 1.0)[0] == int(np.argmax(s1))
    assert fuse_and_select(s1, s2, 0.0)[0] == int(np.argmax(s2))
    fused = [0.4 * a + 0.6 * b for a, b in zip(s1, s2)]
    best = max(range(20), key=lambda i: (fused[i], -i))
    idx, val = fuse_and_select(s1, s2, 0.4)
    assert idx == best and val == pytest.approx(fused[best])


def test_fuse_tie_breaks_low():
    assert fuse_and_select(np.array([1.0, 3.0, 3.0]), np.array([1.0, 3.0, 3.0]), 0.4)[0] == 1


def _memory(mu, n=3):
    return TrackerMemory(mu_C=mu, n_conf=n)


def test_literal_anomaly_examples():
    assert detect_anomaly(_memory(0.3), 0.3, 1.0, 0.45, "literal")
    assert not detect_anomaly(_memory(1.0), 0.1, 1.0, 0.45, "literal")
    assert detect_anomaly(_memory(0.5), 0.9, 1.0, 0.45, "literal")
    assert detect_anomaly(_memory(0.5), 1.8, 2.0, 0.45, "literal")


def test_first_frame_never_anomalous():
    for mode in ("literal", "deviation", "relative"):
        assert not detect_anomaly(TrackerMemory(), 0.0, 1.0, 0.45, mode)


def test_other_anomaly_modes():
    assert detect_anomaly(_memory(1.0), 0.1, 1.0, 0.45, "deviation")
    assert detect_anomaly(_memory(0.1), 0.9, 1.0, 0.45, "deviation")
    assert not detect_anomaly(_memory(0.5), 0.4, 1.0, 0.45, "deviation")
    assert detect_anomaly(_memory(0.1), 0.04, 1.0, 0.45, "relative")
    assert not detect_anomaly(_memory(0.1), 0.07, 1.0, 0.45, "relative")
    assert not detect_anomaly(_memory(0.1), 0.5, 1.0, 0.45, "relative")
    with pytest.raises(ValueError):
        detect_anomaly(_memory(0.1), 0.5, 1.0, 0.45, "bogus")


def _entry(conf, i):
    return MemoryEntry({}, conf, {}, i)


def test_memory_buffer_and_mean(rng):
    m = TrackerMemory(K=3)
    vals = rng.uniform(size=8)
    for i, v in enumerate(vals):
        m.push(_entry(v, i))
        m.record_confidence(v)
        assert len(m.buffer) <= 3
    assert [e.frame_index for e in m.buffer] == [5, 6, 7]
    assert m.mu_C == pytest.approx(vals.mean())


def test_select_best_tracked(rng):
    m = TrackerMemory(K=10)
    m.first = _entry(0.0, 1)
    assert select_best_tracked(m) is m.first
    for i in range(5):
        m.push(_entry(float(i), i))
    assert select_best_tracked(m).frame_index == 4
    m2 = TrackerMemory(K=10)
    confs = rng.uniform(size=10)
    for i, c in enumerate(confs):
        m2.push(_entry(c, i))
    best = 0
    for i in range(10):
        if confs[i] > confs[best]:
            best = i
    assert select_best_tracked(m2).frame_index == best
    with pytest.raises(InputError):
        select_best_tracked(TrackerMemory())


def test_iou_cases():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1
    assert iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0
    assert iou((0, 0, 1, 1), (0.5, 0, 1, 1)) == pytest.approx(1 / 3)


# ---------------------------------------------------------------- tracker


def test_step_requires_init(fast_cfg, backbone):
    with pytest.raises(InputError):
        Tracker(fast_cfg, backbone).step(np.zeros((50, 50, 3)))


def test_static_target_zero_motion(fast_cfg, backbone):
    cfg = apply_overrides(fast_cfg, {"tracker.motion_var": "0, 0, 0"})
    seq = make_sequence(n_frames=12, static=True, occlusion=None, scale_range=(100, 200))
    reports = list(track_sequence(seq.frames, seq.rects[0], cfg, backbone))
    for rep, gt in zip(reports, seq.rects):
        assert iou(rep.rect, gt) == pytest.approx(1.0)
    periodic = [r.frame_index for r in reports if "periodic" in r.updates]
    assert periodic == [10]


def test_anomalous_frames_freeze_and_skip_buffer(fast_cfg, backbone):
    # the literal test with a large threshold flags every frame after the first
    cfg = apply_overrides(fast_cfg, {"tracker.anomaly_mode": "literal", "tracker.theta": "100"})
    seq = make_sequence(n_frames=5, occlusion=None)
    tracker = Tracker(cfg, backbone).init(seq.frames[0], seq.rects[0])
    for frame in seq.frames[1:]:
        rep = tracker.step(frame)
        assert rep.anomaly and rep.updates == ["stochastic"]
        assert rep.rect == tuple(seq.rects[0])
    assert len(tracker.memory.buffer) == 0
    assert tracker.memory.n_conf == 1


def test_buffer_bounded(fast_cfg, backbone):
    cfg = apply_overrides(fast_cfg, {"tracker.K": "3", "tracker.period": "0"})
    seq = make_sequence(n_frames=6, occlusion=None)
    tracker = Tracker(cfg, backbone).init(seq.frames[0], seq.rects[0])
    for frame in seq.frames[1:]:
        tracker.step(frame)
        assert len(tracker.memory.buffer) <= 3


def test_track_sequence_outputs(tmp_path, fast_cfg, backbone):
    seq = make_sequence(n_frames=4, occlusion=None)
    out, side, dbg = tmp_path / "r.txt", tmp_path / "r.jsonl", tmp_path / "maps"
    reports = list(track_sequence(seq.frames, seq.rects[0], fast_cfg, backbone, out, side, dbg))
    lines = out.read_text().splitlines()
    assert len(lines) == 4
    rects = np.array([[float(v) for v in ln.split(",")] for ln in lines])
    assert np.all(rects[:, 2:] > 0)
    np.testing.assert_allclose(rects[0], seq.rects[0])
    records = [json.loads(ln) for ln in side.read_text().splitlines()]
    assert [r["frame_index"] for r in records] == [1, 2, 3, 4]
    assert records[0]["updates"] == ["init"]
    assert {"C_star", "anomaly", "confidence", "mu_C"} <= set(records[1])
    assert len(list(dbg.glob("*_v.png"))) == 8
    assert len(reports) == 4


def test_tracker_deterministic(fast_cfg, backbone):
    seq = make_sequence(n_frames=4, occlusion=None, seed=5)
    runs = [[r.rect for r in track_sequence(seq.frames, seq.rects[0], fast_cfg, backbone)] for _ in range(2)]
    assert runs[0] == runs[1]
