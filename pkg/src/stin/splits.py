"""Annotation ingestion and dataset split generators.

All files are JSONL. The first line of every file written here is a header
record ``{"schema": ..., "version": ...}``; readers accept files without it.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import CATEGORIES, Box

ANNOTATION_SCHEMA = "stin-annotations"
SPLIT_SCHEMA = "stin-split"
SCHEMA_VERSION = 1


class AnnotationError(ValueError):
    def __init__(self, video_id, field_name, message):
        self.video_id = video_id
        self.field = field_name
        super().__init__(f"video {video_id!r}: field {field_name!r}: {message}")


class SplitError(ValueError):
    pass


@dataclass
class AnnotatedVideo:
    video_id: str
    verb_template: str
    nouns: list
    width: float
    height: float
    frames: list  # list[list[Box]]
    super_class: Optional[str] = None

    @property
    def group_key(self) -> str:
        return self.super_class if self.super_class is not None else self.verb_template

    def to_record(self) -> dict:
        rec = {
            "video_id": self.video_id,
            "verb_template": self.verb_template,
            "nouns": list(self.nouns),
            "width": self.width,
            "height": self.height,
            "frames": [{"boxes": [_box_record(b) for b in boxes]} for boxes in self.frames],
        }
        if self.super_class is not None:
            rec["super_class"] = self.super_class
        return rec


def _box_record(b: Box) -> dict:
    rec = {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "category": b.category}
    if b.instance_id is not None:
        rec["instance_id"] = b.instance_id
    if b.score is not None:
        rec["score"] = b.score
    return rec


def _require(rec, key, kinds, vid):
    if key not in rec:
        raise AnnotationError(vid, key, "missing")
    if not isinstance(rec[key], kinds) or isinstance(rec[key], bool):
        raise AnnotationError(vid, key, f"wrong type {type(rec[key]).__name__}")
    return rec[key]


def parse_box(rec: dict, vid, width, height) -> Box:
    for key in ("x1", "y1", "x2", "y2"):
        _require(rec, key, (int, float), vid)
    category = rec.get("category", "object")
    if category not in CATEGORIES:
        raise AnnotationError(vid, "category", f"unknown category {category!r}")
    score = rec.get("score")
    if score is not None and not (isinstance(score, (int, float)) and 0.0 <= score <= 1.0):
        raise AnnotationError(vid, "score", f"must be in [0, 1], got {score!r}")
    x1, y1, x2, y2 = (float(rec[k]) for k in ("x1", "y1", "x2", "y2"))
    x1, x2 = min(x1, x2), max(x1, x2)
    y1, y2 = min(y1, y2), max(y1, y2)
    iid = rec.get("instance_id")
    box = Box(x1, y1, x2, y2, category, None if iid is None else str(iid), None if score is None else float(score))
    return box.clamp(width, height)


def parse_video(rec: dict) -> AnnotatedVideo:
    if not isinstance(rec, dict):
        raise AnnotationError(None, "record", "not a JSON object")
    vid = rec.get("video_id")
    if not isinstance(vid, (str, int)) or isinstance(vid, bool):
        raise AnnotationError(vid, "video_id", "missing or not a string")
    vid = str(vid)
    verb = _require(rec, "verb_template", str, vid)
    nouns = _require(rec, "nouns", list, vid)
    if not nouns or not all(isinstance(n, str) for n in nouns):
        raise AnnotationError(vid, "nouns", "must be a non-empty list of strings")
    width = float(_require(rec, "width", (int, float), vid))
    height = float(_require(rec, "height", (int, float), vid))
    if width <= 0 or height <= 0:
        raise AnnotationError(vid, "width", "frame dimensions must be positive")
    frames_raw = _require(rec, "frames", list, vid)
    if not frames_raw:
        raise AnnotationError(vid, "frames", "needs at least one frame")
    frames = []
    for fr in frames_raw:
        if not isinstance(fr, dict) or not isinstance(fr.get("boxes"), list):
            raise AnnotationError(vid, "frames", "each frame must be {boxes: [...]}")
        try:
            frames.append([parse_box(b, vid, width, height) for b in fr["boxes"]])
        except AnnotationError:
            raise
        except (TypeError, ValueError) as exc:
            raise AnnotationError(vid, "boxes", str(exc)) from exc
    sc = rec.get("super_class")
    if sc is not None and not isinstance(sc, str):
        raise AnnotationError(vid, "super_class", "must be a string")
    return AnnotatedVideo(vid, verb, list(nouns), width, height, frames, sc)


def read_jsonl(path, schema: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(None, f"line {lineno}", f"invalid JSON: {exc}") from exc
            if isinstance(rec, dict) and "schema" in rec and "version" in rec and len(rec) == 2:
                if rec["schema"] != schema:
                    raise AnnotationError(None, "schema", f"expected {schema!r}, got {rec['schema']!r}")
                if rec["version"] != SCHEMA_VERSION:
                    raise AnnotationError(None, "version", f"unsupported version {rec['version']!r}")
                continue
            records.append(rec)
    return records


def write_jsonl(path, schema: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": schema, "version": SCHEMA_VERSION}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_annotations(path) -> list[AnnotatedVideo]:
    videos = [parse_video(r) for r in read_jsonl(path, ANNOTATION_SCHEMA)]
    return sorted(videos, key=lambda v: v.video_id)


def save_annotations(path, videos: Sequence[AnnotatedVideo]) -> None:
    write_jsonl(path, ANNOTATION_SCHEMA, (v.to_record() for v in sorted(videos, key=lambda v: v.video_id)))


# -- splits ------------------------------------------------------------------


@dataclass
class SplitSpec:
    kind: str
    seed: int
    train_ids: list
    val_ids: list
    verb_group_of: dict = field(default_factory=dict)
    object_group_of: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise SplitError(f"train and val share {len(overlap)} videos, e.g. {sorted(overlap)[0]!r}")

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class FewShotSpec:
    seed: int
    k: int
    base_classes: list
    novel_classes: list
    base_train: list
    base_val: list
    novel_train: list
    novel_val: list
    kind: str = "fewshot"
    stats: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return asdict(self)


def save_split(path, spec) -> None:
    write_jsonl(path, SPLIT_SCHEMA, [spec.to_record()])


def load_split(path):
    records = read_jsonl(path, SPLIT_SCHEMA)
    if len(records) != 1:
        raise AnnotationError(None, "split", f"expected exactly one split record, found {len(records)}")
    rec = records[0]
    if rec.get("kind") == "fewshot":
        return FewShotSpec(**rec)
    return SplitSpec(**rec)


def frequent_objects(videos: Sequence[AnnotatedVideo], threshold: int = 100) -> set:
    """Nouns appearing in strictly more than ``threshold`` videos."""
    counts = Counter()
    for v in videos:
        counts.update(set(v.nouns))
    return {n for n, c in counts.items() if c > threshold}


def _halve(items, rng):
    items = sorted(items)
    order = rng.permutation(len(items))
    cut = (len(items) + 1) // 2
    return [items[i] for i in order[:cut]], [items[i] for i in order[cut:]]


def make_compositional(videos: Sequence[AnnotatedVideo], seed: int, threshold: int = 100) -> SplitSpec:
    """Train on 1A + 2B, validate on 1B + 2A.

    Frequent nouns are halved into groups A/B and verb super-classes into
    groups 1/2. Videos mixing A and B nouns, or having no frequent noun, are
    left out and counted in ``stats``.
    """
    rng = np.random.default_rng(seed)
    freq = frequent_objects(videos, threshold)
    verbs = {v.verb_template: v.group_key for v in videos}
    if len(verbs) < 2:
        raise SplitError(f"need at least 2 verbs, found {len(verbs)}")
    if len(freq) < 2:
        raise SplitError(f"need at least 2 frequent nouns (> {threshold} videos), found {len(freq)}")
    keys = sorted(set(verbs.values()))
    if len(keys) < 2:
        raise SplitError(f"super-class {keys[0]!r} covers every verb; verb group 2 would be empty")

    group_a, group_b = _halve(freq, rng)
    keys_1, _ = _halve(keys, rng)
    object_group_of = {n: "A" for n in group_a} | {n: "B" for n in group_b}
    verb_group_of = {verb: 1 if key in keys_1 else 2 for verb, key in sorted(verbs.items())}
    object_group_of = dict(sorted(object_group_of.items()))

    train, val = [], []
    mixed = rare = 0
    for v in sorted(videos, key=lambda v: v.video_id):
        groups = {object_group_of[n] for n in v.nouns if n in object_group_of}
        if not groups:
            rare += 1
            continue
        if len(groups) > 1:
            mixed += 1
            continue
        pair = (verb_group_of[v.verb_template], groups.pop())
        (train if pair in {(1, "A"), (2, "B")} else val).append(v.video_id)

    spec = SplitSpec(
        "compositional",
        seed,
        train,
        val,
        verb_group_of,
        object_group_of,
        {"excluded_mixed_groups": mixed, "excluded_no_frequent_noun": rare, "frequent_threshold": threshold},
    )
    by_id = {v.video_id: v for v in videos}
    shared = verb_noun_pairs(by_id, train, freq) & verb_noun_pairs(by_id, val, freq)
    if shared:
        raise SplitError(f"verb-noun combinations leak between train and val: {sorted(shared)[:3]}")
    return spec


def verb_noun_pairs(by_id: dict, ids: Iterable[str], nouns: Optional[set] = None) -> set:
    pairs = set()
    for vid in ids:
        v = by_id[vid]
        for n in v.nouns:
            if nouns is None or n in nouns:
                pairs.add((v.verb_template, n))
    return pairs


def make_shuffled(candidate_ids: Sequence[str], train_size: int, seed: int) -> SplitSpec:
    """Random re-partition of ``candidate_ids`` keeping ``train_size`` videos for training."""
    ids = sorted(candidate_ids)
    if not 0 <= train_size <= len(ids):
        raise SplitError(f"train size {train_size} exceeds the {len(ids)} candidate videos")
    order = np.random.default_rng(seed).permutation(len(ids))
    train = sorted(ids[i] for i in order[:train_size])
    val = sorted(ids[i] for i in order[train_size:])
    return SplitSpec("shuffled", seed, train, val)


def shuffled_like(reference: SplitSpec, seed: int) -> SplitSpec:
    """Shuffled counterpart of a compositional split: same videos, same train size."""
    spec = make_shuffled(reference.train_ids + reference.val_ids, len(reference.train_ids), seed)
    spec.verb_group_of = dict(reference.verb_group_of)
    spec.object_group_of = dict(reference.object_group_of)
    return spec


def make_oneclass(videos: Sequence[AnnotatedVideo], noun: str = "box") -> SplitSpec:
    train = sorted(v.video_id for v in videos if noun in v.nouns)
    if not train:
        raise SplitError(f"unknown noun {noun!r}: no video contains it")
    val = sorted(v.video_id for v in videos if noun not in v.nouns)
    if not val:
        raise SplitError(f"every video contains {noun!r}; validation set would be empty")
    return SplitSpec("oneclass", 0, train, val, stats={"noun": noun})


def make_fewshot(
    videos: Sequence[AnnotatedVideo],
    k: int,
    seed: int,
    n_base: Optional[int] = None,
    base_val_fraction: float = 0.1,
) -> FewShotSpec:
    """Base/novel class split with ``k`` training videos per novel class.

    Novel-train videos are chosen greedily to introduce as few new nouns as
    possible; novel videos sharing a noun with novel-train are dropped from
    novel-val (counted in ``stats``).
    """
    if k < 1:
        raise SplitError(f"k must be positive, got {k}")
    rng = np.random.default_rng(seed)
    classes = sorted({v.verb_template for v in videos})
    if len(classes) < 2:
        raise SplitError("need at least 2 classes")
    n_base = (len(classes) + 1) // 2 if n_base is None else n_base
    order = rng.permutation(len(classes))
    base = sorted(classes[i] for i in order[:n_base])
    novel = sorted(classes[i] for i in order[n_base:])

    ordered = sorted(videos, key=lambda v: v.video_id)
    base_ids = [v.video_id for v in ordered if v.verb_template in base]
    perm = rng.permutation(len(base_ids))
    n_val = int(round(base_val_fraction * len(base_ids)))
    base_val = sorted(base_ids[i] for i in perm[:n_val])
    base_train = sorted(base_ids[i] for i in perm[n_val:])

    novel_videos = [v for v in ordered if v.verb_template in novel]
    by_class = {c: [v for v in novel_videos if v.verb_template == c] for c in novel}
    for c in novel:
        if len(by_class[c]) < k:
            raise SplitError(f"novel class {c!r} has {len(by_class[c])} videos, fewer than k={k}")

    noun_videos = Counter()
    for v in novel_videos:
        noun_videos.update(set(v.nouns))
    train_nouns: set = set()
    chosen: set = set()
    novel_train = []
    for c in novel:
        pool = by_class[c]
        pool = [pool[i] for i in rng.permutation(len(pool))]
        picked = []
        for _ in range(k):
            best, best_cost = None, math.inf
            for v in pool:
                if v.video_id in chosen:
                    continue
                cost = sum(noun_videos[n] for n in set(v.nouns) - train_nouns)
                if cost < best_cost:
                    best, best_cost = v, cost
            chosen.add(best.video_id)
            train_nouns.update(best.nouns)
            picked.append(best.video_id)
        novel_train.extend(sorted(picked))

    novel_val, dropped = [], 0
    for v in novel_videos:
        if v.video_id in chosen:
            continue
        if train_nouns & set(v.nouns):
            dropped += 1
            continue
        novel_val.append(v.video_id)
    val_classes = {v.verb_template for v in novel_videos if v.video_id in set(novel_val)}
    for c in novel:
        if c not in val_classes:
            raise SplitError(f"novel class {c!r}: every validation video shares a noun with the k-shot set")
    return FewShotSpec(
        seed, k, base, novel, base_train, base_val, novel_train, novel_val,
        stats={"dropped_noun_overlap": dropped},
    )
