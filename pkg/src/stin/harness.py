"""Command implementations behind the ``stin`` CLI.

Each ``cmd_*`` takes a resolved config dict and an output directory, writes
its artifacts there and returns a small result dict.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import numkit as nk
from .config import estimator_params, save_config
from .data import from_annotations
from .estimator import STINClassifier
from .geometry import Box
from .gradcheck import THRESHOLD, run_gradcheck
from .metrics import summarize
from .splits import (
    AnnotationError,
    FewShotSpec,
    SplitError,
    load_annotations,
    load_split,
    make_compositional,
    make_fewshot,
    make_oneclass,
    read_jsonl,
    save_annotations,
    save_split,
    shuffled_like,
    write_jsonl,
)
from .synthetic import ALL_VERBS, BASIC_VERBS, SynthSpec, generate_synthetic
from .tracker import (
    NULL,
    TrackerParams,
    Tracklet,
    assemble_tracklets,
    track_video,
    tracklets_from_tracks,
)

logger = logging.getLogger(__name__)

TRACKLET_SCHEMA = "stin-tracklets"
THREADS_ENV = "STIN_NUM_THREADS"
CHECKPOINT = "checkpoint.ckpt"


class DataError(ValueError):
    pass


class GradcheckFailure(ArithmeticError):
    pass


class NumericalFailure(ArithmeticError):
    pass


def _need(cfg, key):
    path = cfg["data"][key]
    if path is None:
        raise DataError(f"missing required input: data.{key}")
    if not Path(path).exists():
        raise DataError(f"{key} file not found: {path}")
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out(cfg, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    return out


# -- tracklet files -------------------------------------------------------------


def tracklet_record(video_id, slots, overflow) -> dict:
    def boxes(tl):
        return [None if b is None else [b.x1, b.y1, b.x2, b.y2] for b in tl.boxes]

    return {
        "video_id": video_id,
        "tracklets": [
            {"role": tl.role, "track_id": tl.track_id, "boxes": boxes(tl), "score_sum": tl.score_sum}
            for tl in list(slots) + list(overflow)
        ],
    }


def load_tracklets(path) -> dict:
    """``video_id -> [Tracklet]`` with null slots dropped."""
    out = {}
    for rec in read_jsonl(path, TRACKLET_SCHEMA):
        try:
            vid = str(rec["video_id"])
            items = []
            for t in rec["tracklets"]:
                if t["role"] == NULL:
                    continue
                cat = "hand" if t["role"] == "subject" else "object"
                boxes = [None if b is None else Box(*map(float, b), category=cat) for b in t["boxes"]]
                items.append(Tracklet(t["role"], t.get("track_id"), boxes, float(t.get("score_sum", 0.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(rec.get("video_id") if isinstance(rec, dict) else None, "tracklets", str(exc)) from exc
        out[vid] = items
    return out


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg, out) -> dict:
    out = _prepare_out(cfg, out)
    s = cfg["synth"]
    verbs = {"basic": BASIC_VERBS, "all": ALL_VERBS}.get(s["verbs"], s["verbs"])
    spec = SynthSpec(
        verbs=tuple(verbs),
        nouns_per_group=tuple(s["nouns_per_group"]),
        frames=s["frames"],
        videos_per_pair=s["videos_per_pair"],
        noise=s["noise"],
        distractor_prob=s["distractor_prob"],
        seed=cfg["seed"],
    )
    videos = generate_synthetic(spec)
    save_annotations(out / "annotations.jsonl", videos)
    return {"videos": len(videos), "path": str(out / "annotations.jsonl")}


def cmd_split(cfg, out) -> dict:
    out = _prepare_out(cfg, out)
    videos = load_annotations(_need(cfg, "annotations"))
    s, seed = cfg["split"], cfg["seed"]
    kind = s["kind"]
    if kind == "compositional":
        spec = make_compositional(videos, seed, s["threshold"])
    elif kind == "shuffled":
        spec = shuffled_like(make_compositional(videos, seed, s["threshold"]), seed)
    elif kind == "fewshot":
        spec = make_fewshot(videos, s["k"], seed)
    elif kind == "oneclass":
        spec = make_oneclass(videos, s["noun"])
    else:
        raise DataError(f"unknown split kind {kind!r}")
    save_split(out / "split.jsonl", spec)
    if isinstance(spec, FewShotSpec):
        return {"kind": kind, "base_train": len(spec.base_train), "novel_train": len(spec.novel_train),
                "novel_val": len(spec.novel_val)}
    return {"kind": kind, "train": len(spec.train_ids), "val": len(spec.val_ids)}


def cmd_track(cfg, out) -> dict:
    out = _prepare_out(cfg, out)
    videos = load_annotations(_need(cfg, "detections"))
    params = TrackerParams(**cfg["tracker"])
    n_slots = cfg["model"]["n_objects"]
    records = []
    for v in videos:
        tracks = track_video(v.frames, params)
        slots, overflow = assemble_tracklets(tracklets_from_tracks(tracks, len(v.frames)), n_slots, len(v.frames))
        records.append(tracklet_record(v.video_id, slots, overflow))
    write_jsonl(out / "tracklets.jsonl", TRACKLET_SCHEMA, records)
    return {"videos": len(records), "path": str(out / "tracklets.jsonl")}


def _dataset(cfg, ids, by_id, tracklets, n_objects):
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"split references unknown video {missing[0]!r}")
    videos = [by_id[i] for i in ids]
    X = from_annotations(videos, n_objects, tracklets)
    return X, np.array([v.verb_template for v in videos])


def _load_inputs(cfg):
    videos = load_annotations(_need(cfg, "annotations"))
    split = load_split(_need(cfg, "split"))
    tracklets = load_tracklets(cfg["data"]["tracklets"]) if cfg["data"]["tracklets"] else None
    return {v.video_id: v for v in videos}, split, tracklets


def _num_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise DataError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def evaluate(est: STINClassifier, X, y, max_configs: int = 0):
    """Per-video probabilities and the metrics summary on labelled videos."""
    unknown = sorted(set(y.tolist()) - set(est.classes_.tolist()))
    if unknown:
        raise DataError(
            f"class mismatch: checkpoint has {len(est.classes_)} classes, labels include unseen {unknown[:3]}"
        )
    chunks = [np.arange(s, min(s + 256, len(X))) for s in range(0, len(X), 256)]
    with ThreadPoolExecutor(max_workers=_num_threads()) as pool:
        parts = list(pool.map(lambda rows: est.predict_proba(X[rows]), chunks))
    proba = np.concatenate(parts)
    labels = est._encode_labels(y)
    metrics = summarize(proba, labels, est.classes_.tolist())
    if max_configs:
        pred, _ = est.predict_with_search(X, max_configs)
        metrics["top1_config_search"] = float(np.mean(pred == y))
    return proba, metrics


def _write_predictions(path, X, y, proba, classes):
    with open(path, "w", encoding="utf-8") as fh:
        for vid, label, p in zip(X.video_ids, y.tolist(), proba):
            k = int(np.argmax(p))
            fh.write(json.dumps({"video_id": vid, "pred": classes[k], "prob": float(p[k]), "label": label},
                                sort_keys=True) + "\n")


def cmd_train(cfg, out, resume=None) -> dict:
    out = _prepare_out(cfg, out)
    by_id, split, tracklets = _load_inputs(cfg)
    if isinstance(split, FewShotSpec):
        train_ids, val_ids = split.base_train, split.base_val
    else:
        train_ids, val_ids = split.train_ids, split.val_ids
    n_objects = cfg["model"]["n_objects"]
    X, y = _dataset(cfg, train_ids, by_id, tracklets, n_objects)

    if resume is not None:
        est = STINClassifier.load(resume)
        est.set_params(warm_start=True, epochs=cfg["optimizer"]["epochs"])
    else:
        est = STINClassifier(**estimator_params(cfg))

    def checkpoint(e, epoch):
        e.save(out / CHECKPOINT, extra={"split_kind": getattr(split, "kind", None)})

    try:
        est.fit(X, y, callback=checkpoint)
    except FloatingPointError as exc:
        raise NumericalFailure(str(exc)) from exc
    metrics = {"epochs": est.epoch_, "loss_curve": est.loss_curve_, "train_videos": len(X)}
    if val_ids:
        Xv, yv = _dataset(cfg, val_ids, by_id, tracklets, n_objects)
        proba, metrics["val"] = evaluate(est, Xv, yv, cfg["search"]["max_configs"])
        _write_predictions(out / "predictions.jsonl", Xv, yv, proba, est.classes_.tolist())
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_eval(cfg, out) -> dict:
    out = _prepare_out(cfg, out)
    est = STINClassifier.load(_need(cfg, "checkpoint"))
    by_id, split, tracklets = _load_inputs(cfg)
    val_ids = split.novel_val if isinstance(split, FewShotSpec) and est.checkpoint_extra_.get("fewshot") else (
        split.base_val if isinstance(split, FewShotSpec) else split.val_ids
    )
    X, y = _dataset(cfg, val_ids, by_id, tracklets, est.n_objects)
    proba, metrics = evaluate(est, X, y, cfg["search"]["max_configs"])
    _write_predictions(out / "predictions.jsonl", X, y, proba, est.classes_.tolist())
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_fewshot(cfg, out) -> dict:
    out = _prepare_out(cfg, out)
    est = STINClassifier.load(_need(cfg, "checkpoint"))
    by_id, split, tracklets = _load_inputs(cfg)
    if not isinstance(split, FewShotSpec):
        raise DataError("fewshot needs a few-shot split file")
    X, y = _dataset(cfg, split.novel_train, by_id, tracklets, est.n_objects)
    try:
        est.finetune_classifier(X, y, epochs=cfg["fewshot"]["epochs"], lr=cfg["fewshot"]["lr"])
    except FloatingPointError as exc:
        raise NumericalFailure(str(exc)) from exc
    est.save(out / CHECKPOINT, extra={"fewshot": True, "k": split.k})
    Xv, yv = _dataset(cfg, split.novel_val, by_id, tracklets, est.n_objects)
    proba, val = evaluate(est, Xv, yv, cfg["search"]["max_configs"])
    _write_predictions(out / "predictions.jsonl", Xv, yv, proba, est.classes_.tolist())
    metrics = {"k": split.k, "novel_classes": len(est.classes_), "chance": 1.0 / len(est.classes_),
               "loss_curve": est.loss_curve_, "novel_val": val}
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_gradcheck(cfg=None, out=None) -> dict:
    rows = run_gradcheck()
    width = max(len(name) for name, _ in rows)
    for name, err in rows:
        flag = "ok" if err < THRESHOLD else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {flag}")
    report = {name: err for name, err in rows}
    if out is not None:
        out = _prepare_out(cfg, out)
        _write_json(out / "gradcheck.json", report)
    bad = [name for name, err in rows if not err < THRESHOLD]
    if bad:
        raise GradcheckFailure(f"gradient check above {THRESHOLD:g} for: {', '.join(bad)}")
    return report


DATA_ERRORS = (DataError, AnnotationError, SplitError, FileNotFoundError, nk.DimensionError)
