"""SORT-style multi-object tracking and tracklet assembly.

Each track carries a constant-velocity Kalman filter over
``(cx, cy, area, aspect)`` plus the velocities of those four quantities. The
aspect velocity is pinned to zero (its transition, process noise and prior
variance are all zero), so only seven state dimensions ever move.
Per frame, predicted boxes are associated to detections with Kuhn-Munkres on
an ``1 - IoU`` cost.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import HAND, OBJECT, Box, Quad, encode, iou

SUBJECT = "subject"
OBJECT_ROLE = "object"
NULL = "null"
ROLES = (SUBJECT, OBJECT_ROLE, NULL)

# SORT noise magnitudes (measurement R, process Q, initial P) in the 8-D layout
# [cx, cy, s, r, vcx, vcy, vs, vr]. vr is frozen, hence its zeros.
MEASUREMENT_NOISE = np.diag([1.0, 1.0, 10.0, 10.0])
PROCESS_NOISE = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4, 0.0])
INITIAL_COVARIANCE = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4, 0.0])
SINGULAR_JITTER = 1e-9

_H = np.hstack([np.eye(4), np.zeros((4, 4))])


def _transition(dt: float = 1.0) -> np.ndarray:
    f = np.eye(8)
    f[0, 4] = f[1, 5] = f[2, 6] = dt
    return f


@dataclass
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def from_box(cls, box: Box, covariance: np.ndarray = INITIAL_COVARIANCE) -> "KalmanState":
        mean = np.zeros(8)
        mean[:4] = box_to_measurement(box)
        return cls(mean, covariance.copy())

    def to_box(self, category: str = OBJECT) -> Box:
        return measurement_to_box(self.mean[:4], category)


def box_to_measurement(box: Box) -> np.ndarray:
    w = box.x2 - box.x1
    h = box.y2 - box.y1
    return np.array([box.x1 + w / 2.0, box.y1 + h / 2.0, w * h, w / h if h > 0 else 0.0])


def measurement_to_box(z: np.ndarray, category: str = OBJECT) -> Box:
    cx, cy, s, r = (float(v) for v in z[:4])
    s = max(s, 0.0)
    r = max(r, 0.0)
    w = math.sqrt(s * r)
    h = s / w if w > 0 else 0.0
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, category=category)


def kalman_predict(state: KalmanState, dt: float = 1.0, process_noise: np.ndarray = PROCESS_NOISE) -> KalmanState:
    mean = state.mean.copy()
    if mean[2] + dt * mean[6] <= 0:
        mean[6] = 0.0
    f = _transition(dt)
    mean = f @ mean
    cov = f @ state.covariance @ f.T + process_noise
    return KalmanState(mean, 0.5 * (cov + cov.T))


def kalman_update(
    state: KalmanState,
    measurement,
    measurement_noise: np.ndarray = MEASUREMENT_NOISE,
) -> KalmanState:
    """Standard Kalman correction, Joseph-form covariance.

    ``measurement`` is a :class:`Box` or a ``(cx, cy, area, aspect)`` vector.
    """
    z = box_to_measurement(measurement) if isinstance(measurement, Box) else np.asarray(measurement, float)
    p = state.covariance
    innovation = z - _H @ state.mean
    s = _H @ p @ _H.T + measurement_noise
    try:
        s_inv = np.linalg.inv(s)
    except np.linalg.LinAlgError:
        s_inv = np.linalg.inv(s + SINGULAR_JITTER * np.eye(4))
    if not np.all(np.isfinite(s_inv)):
        s_inv = np.linalg.inv(s + SINGULAR_JITTER * np.eye(4))
    gain = p @ _H.T @ s_inv
    mean = state.mean + gain @ innovation
    a = np.eye(8) - gain @ _H
    cov = a @ p @ a.T + gain @ measurement_noise @ gain.T
    return KalmanState(mean, 0.5 * (cov + cov.T))


def _two_point_state(first: np.ndarray, second: np.ndarray, gap: int) -> KalmanState:
    # Second hit of a track: velocity from the two measurements instead of a
    # zero-velocity prior, so noiseless constant motion is followed exactly.
    mean = np.zeros(8)
    mean[:4] = second
    mean[4:7] = (second[:3] - first[:3]) / max(gap, 1)
    return KalmanState(mean, INITIAL_COVARIANCE.copy())


# -- assignment -------------------------------------------------------------


def _hungarian(cost: np.ndarray) -> list[int]:
    """Shortest-augmenting-path Kuhn-Munkres for ``n <= m``; returns a column per row."""
    n, m = cost.shape
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match = [0] * (m + 1)  # match[col] = row (1-based), 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = [0] * n
    for j in range(1, m + 1):
        if match[j]:
            cols[match[j] - 1] = j - 1
    return cols


def _optimal_pairs(cost: np.ndarray) -> list[tuple[int, int]]:
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if n <= m:
        return [(r, c) for r, c in enumerate(_hungarian(cost))]
    return sorted((r, c) for c, r in enumerate(_hungarian(cost.T)))


def matching_cost(cost: np.ndarray, pairs: Iterable[tuple[int, int]]) -> float:
    return math.fsum(float(cost[r, c]) for r, c in pairs)


def assign(cost) -> list[tuple[int, int]]:
    """Minimum-cost matching of size ``min(n, m)``.

    Among optimal matchings the one whose row-sorted pair sequence is
    lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    target = matching_cost(cost, _optimal_pairs(cost))
    tol = 1e-12 * max(1.0, abs(target))
    size = min(n, m)

    chosen: list[tuple[int, int]] = []
    free_cols = list(range(m))
    for r in range(n):
        need = size - len(chosen)
        if need == 0:
            break
        rows_after = list(range(r + 1, n))
        for c in free_cols:
            rest_cols = [k for k in free_cols if k != c]
            if min(len(rows_after), len(rest_cols)) < need - 1:
                continue
            sub = cost[np.ix_(rows_after, rest_cols)]
            completion = [(rows_after[a], rest_cols[b]) for a, b in _optimal_pairs(sub)]
            total = matching_cost(cost, chosen + [(r, c)] + completion)
            if total <= target + tol:
                chosen.append((r, c))
                free_cols = rest_cols
                break
    return chosen


# -- tracking -----------------------------------------------------------------


@dataclass
class TrackerParams:
    iou_min: float = 0.3
    max_age: int = 1
    min_hits: int = 1
    score_threshold: float = 0.5


@dataclass
class Track:
    id: int
    state: KalmanState
    category: str
    birth_frame: int
    hits: int = 1
    hit_streak: int = 1
    age_since_update: int = 0
    history: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    last_measurement: Optional[np.ndarray] = None
    last_frame: int = 0

    def predicted_box(self) -> Box:
        return self.state.to_box(self.category)


class SortTracker:
    """Online tracker for a single video; feed it one frame of detections at a time."""

    def __init__(self, params: Optional[TrackerParams] = None):
        self.params = params or TrackerParams()
        self.tracks: list[Track] = []
        self.finished: list[Track] = []
        self.frame = 0
        self._next_id = 0

    def step(self, detections: Sequence[Box]):
        """Advance one frame; returns ``[(track_id, detection_index)]`` for matched pairs."""
        p = self.params
        keep = [k for k, d in enumerate(detections) if d.score is None or d.score >= p.score_threshold]
        dets = [detections[k] for k in keep]

        for t in self.tracks:
            t.state = kalman_predict(t.state)
            t.age_since_update += 1
        predicted = [t.predicted_box() for t in self.tracks]

        matches = []
        matched_tracks, matched_dets = set(), set()
        if self.tracks and dets:
            cost = np.ones((len(self.tracks), len(dets)))
            for a, (t, pb) in enumerate(zip(self.tracks, predicted)):
                for b, d in enumerate(dets):
                    if d.category == t.category:
                        cost[a, b] = 1.0 - iou(pb, d)
            for a, b in assign(cost):
                if 1.0 - cost[a, b] < p.iou_min:
                    continue
                matched_tracks.add(a)
                matched_dets.add(b)
                matches.append((a, b))

        for a, t in enumerate(self.tracks):
            if a not in matched_tracks:
                t.history.append(None)
                t.scores.append(0.0)
                t.hit_streak = 0
        out = []
        for a, b in matches:
            t, d = self.tracks[a], dets[b]
            z = box_to_measurement(d)
            if t.hits == 1:
                t.state = _two_point_state(t.last_measurement, z, self.frame - t.last_frame)
            else:
                t.state = kalman_update(t.state, z)
            t.last_measurement, t.last_frame = z, self.frame
            t.hits += 1
            t.hit_streak += 1
            t.age_since_update = 0
            t.history.append(d)
            t.scores.append(1.0 if d.score is None else d.score)
            out.append((t.id, keep[b]))
        for b, d in enumerate(dets):
            if b in matched_dets:
                continue
            t = Track(self._next_id, KalmanState.from_box(d), d.category, self.frame)
            t.last_measurement, t.last_frame = box_to_measurement(d), self.frame
            t.history.append(d)
            t.scores.append(1.0 if d.score is None else d.score)
            self._next_id += 1
            self.tracks.append(t)
            out.append((t.id, keep[b]))

        alive = []
        for t in self.tracks:
            (self.finished if t.age_since_update > p.max_age else alive).append(t)
        self.tracks = alive
        self.frame += 1
        return out

    def all_tracks(self) -> list[Track]:
        """Confirmed tracks (``hits >= min_hits``), finished and alive, by id."""
        tracks = self.finished + self.tracks
        return sorted((t for t in tracks if t.hits >= self.params.min_hits), key=lambda t: t.id)


def track_video(frames: Sequence[Sequence[Box]], params: Optional[TrackerParams] = None) -> list[Track]:
    tracker = SortTracker(params)
    for dets in frames:
        tracker.step(dets)
    return tracker.all_tracks()


def identity_switches(tracks: Sequence[Track]) -> int:
    """Times a ground-truth ``instance_id`` changes the track it is assigned to."""
    owner: dict[str, list[tuple[int, int]]] = {}
    for t in tracks:
        for k, box in enumerate(t.history):
            if box is not None and box.instance_id is not None:
                owner.setdefault(box.instance_id, []).append((t.birth_frame + k, t.id))
    switches = 0
    for seq in owner.values():
        ids = [tid for _, tid in sorted(seq)]
        switches += sum(1 for a, b in zip(ids, ids[1:]) if a != b)
    return switches


# -- tracklets ----------------------------------------------------------------


@dataclass
class Tracklet:
    role: str
    track_id: Optional[str]
    boxes: list  # one Optional[Box] per video frame
    score_sum: float = 0.0

    @property
    def coverage(self) -> float:
        if not self.boxes:
            return 0.0
        return sum(b is not None for b in self.boxes) / len(self.boxes)

    @property
    def rank_key(self) -> float:
        return self.score_sum * self.coverage

    def quads(self, frame_indices: Sequence[int], width: float, height: float) -> list[Quad]:
        return [encode(self.boxes[k], width, height) for k in frame_indices]


def null_tracklet(n_frames: int) -> Tracklet:
    return Tracklet(NULL, None, [None] * n_frames)


def tracklets_from_tracks(tracks: Sequence[Track], n_frames: int) -> list[Tracklet]:
    out = []
    for t in tracks:
        boxes = [None] * n_frames
        score = 0.0
        for k, (box, s) in enumerate(zip(t.history, t.scores)):
            if box is not None and t.birth_frame + k < n_frames:
                boxes[t.birth_frame + k] = box
                score += s
        out.append(Tracklet(SUBJECT if t.category == HAND else OBJECT_ROLE, str(t.id), boxes, score))
    return out


def tracklets_from_instances(frames: Sequence[Sequence[Box]]) -> list[Tracklet]:
    """Group annotated boxes into tracklets by ``instance_id``."""
    n = len(frames)
    groups: dict[str, Tracklet] = {}
    for k, boxes in enumerate(frames):
        for j, b in enumerate(boxes):
            key = b.instance_id if b.instance_id is not None else f"_{k}_{j}"
            tl = groups.get(key)
            if tl is None:
                tl = groups[key] = Tracklet(SUBJECT if b.category == HAND else OBJECT_ROLE, key, [None] * n)
            if tl.boxes[k] is None:
                tl.boxes[k] = b
                tl.score_sum += 1.0 if b.score is None else b.score
    return [groups[k] for k in sorted(groups)]


def _ranked(tracklets: Iterable[Tracklet]) -> list[Tracklet]:
    return sorted(tracklets, key=lambda t: (-t.rank_key, str(t.track_id)))


def assemble_tracklets(tracklets: Sequence[Tracklet], n_slots: int, n_frames: Optional[int] = None):
    """Pick ``n_slots`` tracklets: every hand first, then objects by ``score_sum * coverage``.

    Returns ``(slots, overflow)``; empty slots are filled with null tracklets.
    """
    if n_frames is None:
        n_frames = len(tracklets[0].boxes) if tracklets else 0
    hands = _ranked(t for t in tracklets if t.role == SUBJECT)
    objects = _ranked(t for t in tracklets if t.role != SUBJECT)
    ordered = hands + objects
    slots = ordered[:n_slots]
    overflow = ordered[n_slots:]
    slots += [null_tracklet(n_frames) for _ in range(n_slots - len(slots))]
    return slots, overflow


def candidate_configurations(slots: Sequence[Tracklet], overflow: Sequence[Tracklet], max_configs: int, rng=None):
    """Alternative slot sets for configuration search; hand tracklets never leave.

    The first configuration is always ``slots``. Duplicates are removed.
    """
    pool = [t for t in slots if t.role != NULL] + list(overflow)
    fixed = [t for t in pool if t.role == SUBJECT]
    free = [t for t in pool if t.role != SUBJECT]
    n = len(slots)
    k = max(0, n - len(fixed))
    if not overflow:
        return [list(slots)]
    combos = list(itertools.combinations(range(len(free)), min(k, len(free))))
    if rng is not None and len(combos) > max_configs:
        order = rng.permutation(len(combos))
        combos = [combos[i] for i in order]
    configs, seen = [], set()
    base = tuple(sorted(id(t) for t in slots))
    seen.add(base)
    configs.append(list(slots))
    for combo in combos:
        if len(configs) >= max_configs:
            break
        chosen = fixed[:n] + [free[i] for i in combo]
        key = tuple(sorted(id(t) for t in chosen))
        if key in seen:
            continue
        seen.add(key)
        n_frames = len(chosen[0].boxes) if chosen else 0
        configs.append(chosen + [null_tracklet(n_frames) for _ in range(n - len(chosen))])
    return configs
