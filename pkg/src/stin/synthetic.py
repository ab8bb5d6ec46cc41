"""Synthetic hand/object box trajectories for desk-scale experiments.

Every video shows a hand box acting on one object box; the verb decides the
relative motion, the noun decides the object's size and where it starts.
Nouns come in two families (``a*`` small objects low-left, ``b*`` larger ones
high-right) so a model that memorises nouns has something to latch on to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import HAND, OBJECT, Box
from .splits import AnnotatedVideo

# verb -> super class. Verbs in REVERSED replay another verb's program backwards.
VERB_SUPER_CLASS = {
    "move_toward": "approach",
    "move_away": "approach",
    "move_up": "vertical",
    "move_down": "vertical",
    "put_into": "containment",
    "take_out": "containment",
    "move_left": "horizontal",
    "move_right": "horizontal",
    "circle_around": "circle_around",
    "pass_over": "pass_over",
    "shake": "shake",
    "turn_over": "turn_over",
}
REVERSED = {"move_away": "move_toward", "take_out": "put_into"}
BASIC_VERBS = ("move_toward", "move_away", "move_up", "move_down", "put_into", "take_out")
ALL_VERBS = tuple(VERB_SUPER_CLASS)


@dataclass
class SynthSpec:
    verbs: tuple = BASIC_VERBS
    nouns_per_group: tuple = (4, 4)
    frames: int = 16
    videos_per_pair: int = 50
    noise: float = 1.0
    distractor_prob: float = 0.3
    width: float = 320.0
    height: float = 240.0
    seed: int = 0

    def __post_init__(self):
        unknown = [v for v in self.verbs if v not in VERB_SUPER_CLASS]
        if unknown:
            raise ValueError(f"unknown synthetic verbs {unknown}; choose from {list(VERB_SUPER_CLASS)}")
        if self.frames < 2:
            raise ValueError("need at least 2 frames")

    @property
    def nouns(self) -> list[str]:
        na, nb = self.nouns_per_group
        return [f"a{i}" for i in range(na)] + [f"b{i}" for i in range(nb)]


def _noun_geometry(noun: str, spec: SynthSpec):
    """Deterministic base size and start center of a noun's object box."""
    family, idx = noun[0], int(noun[1:])
    phase = (idx * 0.618034) % 1.0
    if family == "a":
        w, h = 34 + 14 * phase, 30 + 18 * ((phase * 3) % 1.0)
        cx, cy = spec.width * (0.30 + 0.12 * phase), spec.height * (0.60 + 0.08 * phase)
    else:
        w, h = 56 + 20 * phase, 48 + 24 * ((phase * 3) % 1.0)
        cx, cy = spec.width * (0.62 + 0.12 * phase), spec.height * (0.40 + 0.08 * phase)
    return w, h, cx, cy


def _program(verb: str, u: np.ndarray, rng: np.random.Generator, obj, hand_size):
    """Per-frame (hand cx, cy, w, h) and (object cx, cy, w, h) arrays."""
    ow, oh, ocx, ocy = obj
    hw, hh = hand_size
    n = len(u)
    angle = rng.uniform(0, 2 * math.pi)
    dist = rng.uniform(2.2, 2.8) * max(ow, oh)
    span = rng.uniform(0.7, 1.0)
    ux, uy = math.cos(angle), math.sin(angle)
    adj = 0.5 * (ow + hw) + 4.0
    o = np.tile([ocx, ocy, ow, oh], (n, 1)).astype(float)
    h = np.tile([ocx + adj, ocy, hw, hh], (n, 1)).astype(float)

    if verb == "move_toward":
        d = dist + (adj - dist) * u
        h[:, 0], h[:, 1] = ocx + ux * d, ocy + uy * d
    elif verb in ("move_up", "move_down", "move_left", "move_right"):
        delta = span * 60.0 * u
        axis, sign = {"move_up": (1, -1), "move_down": (1, 1), "move_left": (0, -1), "move_right": (0, 1)}[verb]
        o[:, axis] += sign * delta
        h[:, 0], h[:, 1] = o[:, 0] + ux * adj, o[:, 1] + uy * adj
    elif verb == "put_into":
        d = dist * (1.0 - u)
        h[:, 0], h[:, 1] = ocx + ux * d, ocy + uy * d
        h[:, 2] = hw * (1.0 - 0.5 * u)
        h[:, 3] = hh * (1.0 - 0.5 * u)
    elif verb == "circle_around":
        theta = angle + 2 * math.pi * span * u
        r = 0.5 * dist + adj * 0.5
        h[:, 0], h[:, 1] = ocx + r * np.cos(theta), ocy + r * np.sin(theta)
    elif verb == "pass_over":
        h[:, 0] = ocx + (u - 0.5) * 2 * dist
        h[:, 1] = ocy - 0.5 * oh - 0.5 * hh - 6.0
    elif verb == "shake":
        o[:, 0] += 12.0 * np.sin(2 * math.pi * 2 * u)
        h[:, 0], h[:, 1] = o[:, 0] + ux * adj, o[:, 1] + uy * adj
    elif verb == "turn_over":
        mix = 0.5 - 0.5 * np.cos(math.pi * u)
        o[:, 2] = ow + (oh - ow) * mix
        o[:, 3] = oh + (ow - oh) * mix
        h[:, 0], h[:, 1] = ocx + ux * adj, ocy + uy * adj
    else:  # pragma: no cover - guarded by SynthSpec
        raise ValueError(verb)
    return h, o


def _boxes(track: np.ndarray, category: str, iid: str, spec: SynthSpec) -> list[Box]:
    out = []
    for cx, cy, w, h in track.tolist():
        w, h = max(w, 2.0), max(h, 2.0)
        b = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, category, iid, 1.0)
        out.append(b.clamp(spec.width, spec.height))
    return out


def render_video(verb: str, noun: str, rep: int, spec: SynthSpec) -> AnnotatedVideo:
    # The stream depends on (seed, noun, rep) only, so a verb and its
    # reversal consume identical random draws.
    rng = np.random.default_rng([spec.seed, spec.nouns.index(noun), rep])
    ow, oh, ocx, ocy = _noun_geometry(noun, spec)
    ow *= rng.uniform(0.9, 1.1)
    oh *= rng.uniform(0.9, 1.1)
    ocx += rng.uniform(-12, 12)
    ocy += rng.uniform(-12, 12)
    hand_size = (rng.uniform(36, 46), rng.uniform(36, 46))
    u = np.linspace(0.0, 1.0, spec.frames)
    program = REVERSED.get(verb, verb)
    hand, obj = _program(program, u, rng, (ow, oh, ocx, ocy), hand_size)
    # bounded jitter keeps per-frame motion direction intact
    hand = hand + rng.uniform(-spec.noise, spec.noise, hand.shape) * [1, 1, 0.5, 0.5]
    obj = obj + rng.uniform(-spec.noise, spec.noise, obj.shape) * [1, 1, 0.5, 0.5]
    distractor = None
    if rng.uniform() < spec.distractor_prob:
        dx = rng.uniform(0.1, 0.9) * spec.width
        dy = rng.uniform(0.1, 0.9) * spec.height
        dw, dh = rng.uniform(20, 60), rng.uniform(20, 60)
        distractor = np.tile([dx, dy, dw, dh], (spec.frames, 1))
    if verb in REVERSED:
        hand, obj = hand[::-1], obj[::-1]

    tracks = [_boxes(hand, HAND, "hand", spec), _boxes(obj, OBJECT, "object", spec)]
    if distractor is not None:
        tracks.append(_boxes(distractor, OBJECT, "distractor", spec))
    frames = [[t[k] for t in tracks] for k in range(spec.frames)]
    return AnnotatedVideo(
        video_id=f"{verb}-{noun}-{rep:04d}",
        verb_template=verb,
        nouns=[noun],
        width=spec.width,
        height=spec.height,
        frames=frames,
        super_class=VERB_SUPER_CLASS[verb],
    )


def generate_synthetic(spec: SynthSpec) -> list[AnnotatedVideo]:
    videos = [
        render_video(verb, noun, rep, spec)
        for verb in spec.verbs
        for noun in spec.nouns
        for rep in range(spec.videos_per_pair)
    ]
    return sorted(videos, key=lambda v: v.video_id)
