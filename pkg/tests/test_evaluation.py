import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genlmk.errors import AlignError, ShapeError, ShortTrackError
from genlmk.evaluation import LandmarkTrack, landmark_error, moving_average, temporal_jitter


def track(points, frames=None):
    points = np.asarray(points, dtype=np.float64)
    return LandmarkTrack(np.arange(len(points)) if frames is None else frames, points)


def test_error_identity_and_shift():
    rng = np.random.default_rng(0)
    gt = track(rng.uniform(0, 64, (5, 4, 2)))
    assert landmark_error(gt, gt)["mean_px"] == 0.0
    shifted = track(gt.points + np.array([3.0, 4.0]))
    err = landmark_error(shifted, gt, image_width=64)
    assert err["mean_px"] == pytest.approx(5.0, abs=1e-12)
    assert err["median_px"] == pytest.approx(5.0, abs=1e-12)
    assert err["mean_norm"] == pytest.approx(5.0 / 64, abs=1e-12)
    np.testing.assert_allclose(err["per_landmark_px"], 5.0)


def test_error_mixed_points():
    gt = track([[[0.0, 0.0], [10.0, 10.0]]])
    pred = track([[[0.0, 0.0], [13.0, 14.0]]])
    assert landmark_error(pred, gt)["mean_px"] == pytest.approx(2.5, abs=1e-12)


def test_error_validation():
    a = track(np.zeros((3, 4, 2)))
    with pytest.raises(ShapeError):
        landmark_error(a, track(np.zeros((3, 5, 2))))
    with pytest.raises(AlignError):
        landmark_error(a, track(np.zeros((3, 4, 2)), frames=[0, 1, 3]))
    with pytest.raises(AlignError):
        track(np.zeros((3, 4, 2)), frames=[0, 2, 2])


def test_track_jsonl_round_trip(tmp_path):
    a = track(np.random.default_rng(1).uniform(0, 32, (4, 3, 2)), frames=[0, 2, 5, 9])
    a.to_jsonl(tmp_path / "t.jsonl")
    b = LandmarkTrack.from_jsonl(tmp_path / "t.jsonl")
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.points, b.points)


def test_jitter_examples():
    static = track(np.ones((5, 3, 2)) * 7.0)
    j = temporal_jitter(static)
    assert j["raw_px"] == 0.0 and j["detrended_px"] == 0.0
    linear = track(np.arange(10)[:, None, None] * np.array([1.0, 0.0]) + np.zeros((10, 3, 2)))
    j = temporal_jitter(linear)
    assert j["raw_px"] == pytest.approx(1.0, abs=1e-12)
    assert j["detrended_px"] == pytest.approx(0.0, abs=1e-12)
    alternating = track((np.arange(20) % 2)[:, None, None] * np.array([0.0, 2.0]) + np.zeros((20, 1, 2)))
    j = temporal_jitter(alternating)
    assert j["raw_px"] == pytest.approx(2.0, abs=1e-12)
    assert j["detrended_px"] > 1.0


def test_jitter_short_track():
    with pytest.raises(ShortTrackError):
        temporal_jitter(track(np.zeros((1, 3, 2))))


def test_moving_average_preserves_linear_motion():
    t = np.arange(7, dtype=np.float64)
    pts = np.stack([2 * t + 1, -t], axis=-1)[:, None, :]
    np.testing.assert_allclose(moving_average(pts), pts, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40))
def test_jitter_translation_invariant_and_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 3, (n, 4, 2))
    a = temporal_jitter(track(pts))
    b = temporal_jitter(track(pts + rng.normal(0, 50, 2)))
    assert a["raw_px"] >= 0 and a["detrended_px"] >= 0
    assert b["raw_px"] == pytest.approx(a["raw_px"], rel=1e-9, abs=1e-9)
    assert b["detrended_px"] == pytest.approx(a["detrended_px"], rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 20))
def test_error_symmetric_and_triangle(seed, n):
    rng = np.random.default_rng(seed)
    a, b, c = (track(rng.normal(0, 10, (n, 3, 2))) for _ in range(3))
    ab = landmark_error(a, b)["mean_px"]
    assert ab == pytest.approx(landmark_error(b, a)["mean_px"], rel=1e-12)
    assert ab <= landmark_error(a, c)["mean_px"] + landmark_error(c, b)["mean_px"] + 1e-9


@pytest.fixture(scope="module")
def untrained(tmp_path_factory):
    from genlmk.data import SynthConfig, synth_generate
    from genlmk.template import load_template
    from genlmk.training import TrainConfig, TrainState, save_checkpoint

    root = tmp_path_factory.mktemp("evalck")
    synth_generate(SynthConfig(n_frames=5, resolution=32, seed=2), root / "data")
    synth_generate(SynthConfig(resolution=32, seed=3, motion="static", n_sequence_frames=6), root / "static")
    cfg = TrainConfig.from_dict({
        "data_dir": str(root / "data"), "resolution": [32, 32],
        "gan": {"ngf": 4, "n_res_blocks": 1, "ndf": 4},
        "deformation": {"conv_channels": [4, 4, 8, 8], "fc_hidden": [8, 8]},
    })
    ck = save_checkpoint(TrainState(cfg, load_template(root / "data" / "template.json")), root / "ck")
    return root, ck


def test_untrained_baseline_is_template_to_gt_distance(untrained):
    from genlmk.data import read_gt, synthetic_template
    from genlmk.evaluation import run_eval

    root, ck = untrained
    report = run_eval(ck, root / "data")
    _, gt = read_gt(root / "data" / "gt" / "landmarks.jsonl")
    # direct evaluation: canonical template in pixels against every GT frame
    direct = np.mean([np.mean(np.hypot(*(synthetic_template().points * 32 - g).T)) for g in gt])
    assert report["error"]["mean_px"] == pytest.approx(direct, rel=1e-12)
    assert report["error"]["mean_px"] > 0
    assert report["n_frames"] == 5 and "jitter" not in report


def test_static_sequence_detrended_equals_raw(untrained):
    from genlmk.evaluation import run_eval

    root, ck = untrained
    report = run_eval(ck, root / "static")
    assert report["jitter"]["detrended_px"] == report["jitter"]["raw_px"] == 0.0
    assert report["gt_jitter"]["raw_px"] == 0.0


def test_run_eval_json_is_deterministic(untrained, tmp_path):
    from genlmk.evaluation import run_eval

    root, ck = untrained
    run_eval(ck, root / "static", tmp_path / "a.json")
    run_eval(ck, root / "static", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
