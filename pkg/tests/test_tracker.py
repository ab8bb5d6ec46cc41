import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scenes import constant_velocity_scene
from stin.geometry import Box
from stin.tracker import (
    INITIAL_COVARIANCE,
    MEASUREMENT_NOISE,
    NULL,
    OBJECT_ROLE,
    PROCESS_NOISE,
    SUBJECT,
    KalmanState,
    SortTracker,
    TrackerParams,
    Tracklet,
    assemble_tracklets,
    assign,
    candidate_configurations,
    identity_switches,
    kalman_predict,
    kalman_update,
    matching_cost,
    track_video,
    tracklets_from_tracks,
)


def brute_force_min(cost):
    """Exhaustive minimum over all matchings of size min(n, m)."""
    n, m = cost.shape
    if n <= m:
        return min(math.fsum(cost[r, c] for r, c in enumerate(p)) for p in itertools.permutations(range(m), n))
    return min(math.fsum(cost[r, c] for c, r in enumerate(p)) for p in itertools.permutations(range(n), m))


def state(pos=10.0, vel=2.0):
    mean = np.array([pos, 5.0, 100.0, 1.0, vel, 0.0, 0.0, 0.0])
    return KalmanState(mean, INITIAL_COVARIANCE.copy())


# -- Kalman ---------------------------------------------------------------------


def test_predict_linear_motion():
    assert kalman_predict(state(10.0, 2.0)).mean[0] == 12.0


def test_predict_zero_velocity_grows_covariance_by_q():
    s = state(10.0, 0.0)
    s.covariance = np.diag([1.0, 1, 1, 1, 0, 0, 0, 0])
    nxt = kalman_predict(s)
    assert nxt.mean[0] == 10.0
    assert np.array_equal(nxt.covariance, s.covariance + PROCESS_NOISE)


def test_two_predicts_match_doubled_step():
    s = state(3.0, 1.5)
    twice = kalman_predict(kalman_predict(s, process_noise=np.zeros((8, 8))), process_noise=np.zeros((8, 8)))
    once = kalman_predict(s, dt=2.0, process_noise=np.zeros((8, 8)))
    assert np.allclose(twice.mean, once.mean, atol=1e-12)
    assert np.allclose(twice.covariance, once.covariance, atol=1e-9)


def test_update_with_predicted_measurement_leaves_mean():
    s = state()
    out = kalman_update(s, s.mean[:4])
    assert np.allclose(out.mean, s.mean, atol=1e-9)


def test_update_exact_measurement_limit():
    s = state()
    z = np.array([20.0, 7.0, 120.0, 1.2])
    out = kalman_update(s, z, measurement_noise=1e-12 * np.eye(4))
    assert np.allclose(out.mean[:4], z, atol=1e-6)


def test_update_scalar_gain_by_hand():
    # diagonal prior: each measured coordinate is an independent scalar filter
    s = state(10.0, 0.0)
    z = np.array([21.0, 5.0, 100.0, 1.0])
    out = kalman_update(s, z)
    gain = 10.0 / (10.0 + 1.0)
    assert out.mean[0] == pytest.approx(10.0 + gain * 11.0, abs=1e-12)
    assert out.covariance[0, 0] == pytest.approx((1 - gain) * 10.0, abs=1e-12)
    assert out.mean[4] == 0.0


def test_update_regularizes_singular_innovation():
    s = KalmanState(np.zeros(8), np.zeros((8, 8)))
    out = kalman_update(s, np.ones(4), measurement_noise=np.zeros((4, 4)))
    assert np.all(np.isfinite(out.mean))


def test_posterior_covariance_shrinks_in_measured_subspace():
    s = kalman_predict(state())
    out = kalman_update(s, np.array([12.0, 5.0, 100.0, 1.0]))
    diff = s.covariance[:4, :4] - out.covariance[:4, :4]
    assert np.min(np.linalg.eigvalsh(diff)) >= -1e-9


def test_covariance_symmetric_over_1000_cycles():
    rng = np.random.default_rng(0)
    s = state()
    for _ in range(1000):
        s = kalman_predict(s)
        s = kalman_update(s, s.mean[:4] + rng.normal(0, 1, 4) * [1, 1, 5, 0.01])
        assert np.max(np.abs(s.covariance - s.covariance.T)) <= 1e-9


# -- assignment -----------------------------------------------------------------


def test_assign_examples():
    assert sorted(assign([[1, 2], [2, 1]])) == [(0, 0), (1, 1)]
    assert assign([[5]]) == [(0, 0)]
    assert assign(np.zeros((0, 3))) == []


def test_assign_6x6_against_720_permutations():
    cost = np.random.default_rng(7).uniform(size=(6, 6))
    pairs = assign(cost)
    assert len(pairs) == 6
    assert matching_cost(cost, pairs) == brute_force_min(cost)


def test_assign_lexicographic_tie_break():
    assert assign(np.zeros((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    assert assign([[1, 1], [1, 1], [0, 0]]) == [(0, 0), (2, 1)]


@settings(max_examples=300, deadline=None)
@given(
    st.integers(0, 7).flatmap(
        lambda n: st.integers(0, 7).flatmap(
            lambda m: arrays(np.float64, (n, m), elements=st.integers(0, 9).map(float))
            if min(n, m) <= 7 else st.nothing()
        )
    )
)
def test_assign_matches_brute_force(cost):
    pairs = assign(cost)
    n, m = cost.shape
    assert len(pairs) == min(n, m)
    assert len({r for r, _ in pairs}) == len({c for _, c in pairs}) == len(pairs)
    if min(n, m) and max(n, m) <= 7:
        assert matching_cost(cost, pairs) == brute_force_min(cost)


def test_assign_rejects_non_finite():
    with pytest.raises(ValueError):
        assign([[np.inf, 1.0]])


# -- tracking -------------------------------------------------------------------


def static_frames(n_frames=10):
    a = Box(10, 10, 50, 50, instance_id="a", score=0.9)
    b = Box(200, 100, 260, 180, instance_id="b", score=0.9)
    return [[a, b] for _ in range(n_frames)]


def test_static_scene_two_tracks_no_switches():
    tracks = track_video(static_frames())
    assert len(tracks) == 2
    assert identity_switches(tracks) == 0


def test_dropout_track_survives_with_max_age():
    frames = static_frames()
    frames[4] = [frames[4][1]]
    tracks = track_video(frames, TrackerParams(max_age=3))
    assert len(tracks) == 2
    assert identity_switches(tracks) == 0
    a = [t for t in tracks if t.history[0].instance_id == "a"][0]
    assert a.history[4] is None and a.history[5] is not None


def test_low_score_detections_never_start_tracks():
    frames = [[Box(0, 0, 10, 10, score=0.2)] for _ in range(5)]
    assert track_video(frames) == []


def test_categories_never_match_across():
    hand = Box(10, 10, 50, 50, category="hand", score=1.0)
    obj = Box(10, 10, 50, 50, category="object", score=1.0)
    tracks = track_video([[hand], [obj]])
    assert len(tracks) == 2


@pytest.mark.parametrize("seed", range(10))
def test_constant_velocity_scene(seed):
    frames, truth = constant_velocity_scene(seed)
    tracker = SortTracker()
    for f, dets in enumerate(frames):
        if f >= 5:
            for t in tracker.tracks:
                pred = kalman_predict(t.state).mean
                k = int(t.history[0].instance_id[1:])
                gt = truth[k][f]
                assert abs(pred[0] - (gt.x1 + gt.x2) / 2) < 1e-6
                assert abs(pred[1] - (gt.y1 + gt.y2) / 2) < 1e-6
        tracker.step(dets)
    tracks = tracker.all_tracks()
    assert identity_switches(tracks) == 0
    assert len(tracklets_from_tracks(tracks, len(frames))) == len(truth)


def test_track_video_is_deterministic():
    frames, _ = constant_velocity_scene(3)
    a = [(t.id, t.history) for t in track_video(frames)]
    b = [(t.id, t.history) for t in track_video(frames)]
    assert a == b


# -- tracklet assembly ----------------------------------------------------------


def tl(role, tid, present, score=1.0, n=4):
    boxes = [Box(0, 0, 1, 1) if k < present else None for k in range(n)]
    return Tracklet(role, tid, boxes, score * present)


def test_assemble_pads_with_null():
    slots, overflow = assemble_tracklets([tl(SUBJECT, "h", 4), tl(OBJECT_ROLE, "a", 4), tl(OBJECT_ROLE, "b", 2)], 4)
    assert [s.role for s in slots] == [SUBJECT, OBJECT_ROLE, OBJECT_ROLE, NULL]
    assert overflow == []
    assert all(b is None for b in slots[3].boxes) and len(slots[3].boxes) == 4


def test_assemble_ranks_overflow_by_score_times_coverage():
    objs = [tl(OBJECT_ROLE, f"o{k}", present=k % 4 + 1, score=0.5 + 0.1 * k) for k in range(6)]
    slots, overflow = assemble_tracklets([tl(SUBJECT, "h", 4)] + objs, 4)
    key = {t.track_id: t.score_sum * t.coverage for t in objs}
    expected = sorted(key, key=lambda k: -key[k])
    assert [s.track_id for s in slots[1:]] == expected[:3]
    assert [t.track_id for t in overflow] == expected[3:]


def test_assemble_empty_video():
    slots, overflow = assemble_tracklets([], 4, n_frames=6)
    assert [s.role for s in slots] == [NULL] * 4 and overflow == []


def test_candidate_configurations_keep_hands_and_dedupe():
    hand = tl(SUBJECT, "h", 4)
    objs = [tl(OBJECT_ROLE, f"o{k}", 4, score=1.0 - 0.1 * k) for k in range(5)]
    slots, overflow = assemble_tracklets([hand] + objs, 4)
    configs = candidate_configurations(slots, overflow, max_configs=100)
    assert configs[0] == slots
    assert len(configs) == math.comb(5, 3)
    assert all(hand in c for c in configs)
    assert len({tuple(sorted(id(t) for t in c)) for c in configs}) == len(configs)
    assert candidate_configurations(slots, [], 8) == [slots]
