import numpy as np

from dnt import bench, selftest
from dnt.synthetic import make_sequence, write_otb


def test_sequence_matches_scenario():
    seq = make_sequence()
    assert len(seq.frames) == 50 and seq.rects.shape == (50, 4)
    centers = seq.rects[:, :2] + seq.rects[:, 2:] / 2
    assert np.abs(np.diff(centers, axis=0)).max() <= 5
    assert seq.rects[-1, 2] / seq.rects[0, 2] == 48 / 40
    assert seq.occluded.sum() == 5 and np.flatnonzero(seq.occluded).tolist() == [28, 29, 30, 31, 32]
    assert all(f.min() >= 0 and f.max() <= 1 for f in seq.frames)


def test_occluder_hides_target():
    seq = make_sequence()
    x, y, w, h = seq.rects[30].astype(int)
    region = seq.frames[30][y:y + h, x:x + w]
    assert np.allclose(region, (0.35, 0.38, 0.42))


def test_seeded():
    a, b = make_sequence(n_frames=3, seed=4), make_sequence(n_frames=3, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


def test_static_sequence():
    seq = make_sequence(n_frames=4, static=True, occlusion=None, scale_range=(100, 200))
    assert np.all(seq.rects == seq.rects[0])


def test_otb_round_trip(tmp_path):
    seq = make_sequence(n_frames=3, occlusion=None)
    root = write_otb(seq, tmp_path)
    loaded = bench.load_sequence(root)
    assert len(loaded) == 3 and loaded.attributes == ["SV"]
    np.testing.assert_array_equal(loaded.rects, seq.rects)
    np.testing.assert_allclose(next(loaded.frames()), seq.frames[0], atol=1 / 255)


def test_selftest_driver(monkeypatch):
    run = selftest.TrackingRun(np.zeros((3, 4)), np.array([1.0, 0.9, 0.0]), np.array([False, False, True]),
                               np.array([False, False, True]), 1.0)
    monkeypatch.setattr(selftest, "synthetic_tracking", lambda: run)
    checks = selftest.run_all(quick=True)
    assert [c.name for c in checks] == ["ICA-R recovery", "gradient check", "synthetic tracking"]
    assert all(c.passed for c in checks), [c.line() for c in checks]
    assert checks[0].line().startswith("[PASS]")
