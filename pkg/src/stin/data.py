"""Turning annotated or tracked videos into fixed-slot model input."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import encode
from .model import ROLE_INDEX
from .tracker import NULL, SUBJECT, Tracklet, assemble_tracklets, tracklets_from_instances


def frame_indices(n_video_frames: int, n_samples: int, offsets=None) -> np.ndarray:
    """``n_samples`` frame indices from equal-width segments.

    Without ``offsets`` each index sits at its segment center (single center
    clip); otherwise ``offsets`` (in ``[0, 1)``, one per segment) place it
    inside its segment.
    """
    if n_video_frames < 1:
        raise ValueError("video has no frames")
    offsets = 0.5 if offsets is None else np.asarray(offsets, dtype=float)
    idx = np.floor((np.arange(n_samples) + offsets) * n_video_frames / n_samples).astype(np.int64)
    return np.clip(idx, 0, n_video_frames - 1)


@dataclass
class VideoSet:
    """Model input for ``n`` videos, each with all of its frames.

    ``quads[k]`` is ``(F_k, N, 4)``; ``roles`` is ``(n, N)`` role codes.
    """

    quads: list
    roles: np.ndarray
    appearance: Optional[np.ndarray] = None
    nouns: Optional[list] = None
    video_ids: list = field(default_factory=list)
    tracklets: Optional[list] = None  # per video: (slots, overflow) for configuration search
    frame_size: Optional[list] = None  # per video (width, height)

    def __post_init__(self):
        self.roles = np.asarray(self.roles, dtype=np.int64)
        if len(self.quads) != len(self.roles):
            raise ValueError(f"{len(self.quads)} quad arrays but {len(self.roles)} role rows")
        if not self.video_ids:
            self.video_ids = [str(k) for k in range(len(self.quads))]

    def __len__(self):
        return len(self.quads)

    @property
    def n_objects(self) -> int:
        return self.roles.shape[1] if len(self.roles) else 0

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            idx = [int(idx)]
        elif isinstance(idx, slice):
            idx = list(range(len(self)))[idx]
        idx = [int(i) for i in np.asarray(idx).reshape(-1)]

        def pick(seq):
            return None if seq is None else [seq[i] for i in idx]

        return VideoSet(
            quads=[self.quads[i] for i in idx],
            roles=self.roles[idx] if idx else np.zeros((0, self.n_objects), np.int64),
            appearance=None if self.appearance is None else self.appearance[idx],
            nouns=pick(self.nouns),
            video_ids=[self.video_ids[i] for i in idx],
            tracklets=pick(self.tracklets),
            frame_size=pick(self.frame_size),
        )


def slot_arrays(slots: Sequence[Tracklet], width: float, height: float):
    n_frames = len(slots[0].boxes)
    quads = np.zeros((n_frames, len(slots), 4))
    for i, tl in enumerate(slots):
        for k, box in enumerate(tl.boxes):
            if box is not None:
                quads[k, i] = encode(box, width, height)
    roles = [ROLE_INDEX[tl.role] for tl in slots]
    return quads, roles


def from_annotations(videos, n_objects: int = 4, tracklets: Optional[dict] = None) -> VideoSet:
    """Build a :class:`VideoSet` from annotated videos.

    Ground-truth boxes are linked by ``instance_id``; pass ``tracklets``
    (video_id -> list of Tracklet) to use tracker output instead.
    """
    quads, roles, kept, sizes = [], [], [], []
    for v in videos:
        cands = tracklets[v.video_id] if tracklets is not None else tracklets_from_instances(v.frames)
        slots, extra = assemble_tracklets(cands, n_objects, len(v.frames))
        q, r = slot_arrays(slots, v.width, v.height)
        quads.append(q)
        roles.append(r)
        kept.append((slots, extra))
        sizes.append((v.width, v.height))
    return VideoSet(
        quads=quads,
        roles=np.array(roles, dtype=np.int64).reshape(len(quads), n_objects),
        nouns=[v.nouns[0] for v in videos],
        video_ids=[v.video_id for v in videos],
        tracklets=kept,
        frame_size=sizes,
    )


def infer_roles(quads: np.ndarray) -> np.ndarray:
    """Role codes for a bare ``(n, F, N, 4)`` array: slot 0 is the subject,
    all-zero slots are null, everything else is an object."""
    n, _, slots, _ = quads.shape
    roles = np.full((n, slots), ROLE_INDEX["object"], dtype=np.int64)
    roles[:, 0] = ROLE_INDEX[SUBJECT]
    empty = ~np.any(quads != 0, axis=(1, 3))
    roles[empty] = ROLE_INDEX[NULL]
    return roles


def check_video_set(X, n_objects: Optional[int] = None) -> VideoSet:
    """Coerce estimator input into a :class:`VideoSet`.

    Accepts a ``VideoSet``, a ``(n, F, N, 4)`` array of quads, or a sequence of
    :class:`~stin.model.VideoSample`.
    """
    from .model import VideoSample

    if isinstance(X, VideoSet):
        vs = X
    elif isinstance(X, np.ndarray) or (isinstance(X, (list, tuple)) and X and not isinstance(X[0], VideoSample)):
        arr = np.asarray(X, dtype=float)
        if arr.ndim != 4 or arr.shape[3] != 4:
            raise ValueError(f"expected quads of shape (n_videos, n_frames, n_objects, 4), got {arr.shape}")
        vs = VideoSet(quads=list(arr), roles=infer_roles(arr))
    elif isinstance(X, (list, tuple)):
        appearance = None
        if X and X[0].appearance is not None:
            appearance = np.stack([np.asarray(s.appearance, float) for s in X])
        vs = VideoSet(
            quads=[s.quads for s in X],
            roles=np.array([[ROLE_INDEX[r] for r in s.roles] for s in X], dtype=np.int64),
            appearance=appearance,
        )
    else:
        raise TypeError(f"unsupported input type {type(X).__name__}")
    if len(vs) == 0:
        raise ValueError("empty input: need at least one video")
    for q in vs.quads:
        if q.ndim != 3 or q.shape[2] != 4:
            raise ValueError(f"per-video quads must be (F, N, 4), got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ValueError("quads contain non-finite values")
    if n_objects is not None and vs.n_objects != n_objects:
        raise ValueError(f"input has {vs.n_objects} object slots, model expects {n_objects}")
    return vs
