"""scikit-learn style classifier wrapping the interaction network."""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numkit as nk
from .data import VideoSet, check_video_set, frame_indices, slot_arrays
from .model import (
    STREAM_CONFIG_SEARCH,
    STREAM_FEWSHOT_INIT,
    STREAM_SAMPLING,
    STREAM_SHUFFLE,
    Batch,
    ModelConfig,
    classifier_params,
    forward,
    init_params,
    stream,
)
from .tracker import candidate_configurations

logger = logging.getLogger(__name__)

UNKNOWN_NOUN = "<unk>"


class NumericalError(FloatingPointError):
    pass


class FrozenParamDrift(RuntimeError):
    pass


class STINClassifier(ClassifierMixin, BaseEstimator):
    """Action classifier over object box trajectories.

    Parameters
    ----------
    n_objects, n_frames : int
        Object slots per frame and frames sampled per video.
    d, d_e : int
        Feature width and identity-embedding width.
    aggregator : {"average", "nonlocal"}
        How tracklet features are combined before the classifier.
    use_identity_embeddings : bool
        Concatenate learnable subject/object/null embeddings to box features.
    nonlocal_blocks : int
        Number of attention blocks when ``aggregator="nonlocal"``.
    appearance_dim : int or None
        Width of externally computed appearance vectors fused before the
        classifier; ``None`` disables fusion.
    encoder : {"coords", "noun"}
        ``"noun"`` swaps box coordinates for a per-noun embedding (a baseline
        that can only memorise objects).
    lr, momentum, weight_decay, epochs, lr_drops, drop_factor, batch_size
        SGD schedule; the learning rate is divided by ``drop_factor`` at each
        epoch listed in ``lr_drops``.
    random_state : int
        Master seed; init, shuffling, frame sampling and configuration search
        draw from separate streams derived from it.
    warm_start : bool
        Continue from ``epoch_`` instead of re-initialising on ``fit``.
    """

    def __init__(
        self,
        n_objects=4,
        n_frames=8,
        d=512,
        d_e=512,
        aggregator="average",
        use_identity_embeddings=True,
        nonlocal_blocks=3,
        appearance_dim=None,
        encoder="coords",
        lr=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        epochs=50,
        lr_drops=(35, 45),
        drop_factor=10.0,
        batch_size=32,
        random_state=0,
        warm_start=False,
    ):
        self.n_objects = n_objects
        self.n_frames = n_frames
        self.d = d
        self.d_e = d_e
        self.aggregator = aggregator
        self.use_identity_embeddings = use_identity_embeddings
        self.nonlocal_blocks = nonlocal_blocks
        self.appearance_dim = appearance_dim
        self.encoder = encoder
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.lr_drops = lr_drops
        self.drop_factor = drop_factor
        self.batch_size = batch_size
        self.random_state = random_state
        self.warm_start = warm_start

    # -- helpers -----------------------------------------------------------

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        drops = sum(1 for e in self.lr_drops if epoch >= e)
        return self.lr / (self.drop_factor**drops)

    def _model_config(self, num_classes: int, num_nouns: int = 0) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes,
            n_objects=self.n_objects,
            n_frames=self.n_frames,
            d=self.d,
            d_e=self.d_e,
            aggregator=self.aggregator,
            use_identity_embeddings=self.use_identity_embeddings,
            nonlocal_blocks=self.nonlocal_blocks,
            appearance_dim=self.appearance_dim,
            encoder=self.encoder,
            num_nouns=num_nouns,
        )

    def _noun_codes(self, X: VideoSet) -> Optional[np.ndarray]:
        if self.encoder != "noun":
            return None
        if X.nouns is None:
            raise ValueError("encoder='noun' needs per-video nouns in the input")
        lookup = {n: i for i, n in enumerate(self.nouns_)}
        return np.array([lookup.get(n, 0) for n in X.nouns], dtype=np.int64)

    def _batch(self, X: VideoSet, rows, offsets=None, nouns=None, labels=None) -> Batch:
        quads = np.stack(
            [
                X.quads[k][frame_indices(X.quads[k].shape[0], self.n_frames, None if offsets is None else offsets[k])]
                for k in rows
            ]
        )
        return Batch(
            quads=quads,
            roles=X.roles[rows],
            labels=None if labels is None else labels[rows],
            appearance=None if X.appearance is None else X.appearance[rows],
            nouns=None if nouns is None else nouns[rows],
        )

    def _encode_labels(self, y) -> np.ndarray:
        y = np.asarray(y)
        lookup = {c: i for i, c in enumerate(self.classes_.tolist())}
        try:
            return np.array([lookup[v] for v in y.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} not among the fitted classes") from None

    def _run_epochs(self, X: VideoSet, y_idx: np.ndarray, trainable, lr_fn, epochs, callback):
        params = self.params_
        nouns = self._noun_codes(X)
        n = len(X)
        all_params = list(params.values())
        for epoch in range(self.epoch_, epochs):
            lr = lr_fn(epoch)
            order = stream(self.random_state, STREAM_SHUFFLE, epoch).permutation(n)
            offsets = stream(self.random_state, STREAM_SAMPLING, epoch).uniform(0.0, 1.0, (n, self.n_frames))
            total = 0.0
            for start in range(0, n, self.batch_size):
                rows = order[start : start + self.batch_size]
                batch = self._batch(X, rows, offsets, nouns, y_idx)
                nk.zero_grad(all_params)
                tape = nk.Tape()
                loss = nk.softmax_cross_entropy(forward(tape, batch, params, self.config_), batch.labels)
                value = float(loss.value)
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
                tape.backward(loss)
                nk.sgd_step(trainable, lr, self.momentum, self.weight_decay)
                total += value * len(rows)
            self.loss_curve_.append(total / n)
            self.epoch_ = epoch + 1
            logger.info("epoch %d lr %.6g loss %.6f", epoch, lr, self.loss_curve_[-1])
            if callback is not None:
                callback(self, epoch)

    # -- sklearn API ------------------------------------------------------------

    def fit(self, X, y, callback: Optional[Callable] = None):
        """Train on videos ``X`` with labels ``y``.

        ``callback(estimator, epoch)`` runs after every epoch (used for
        per-epoch checkpoints).
        """
        X = check_video_set(X, self.n_objects)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} videos but {len(y)} labels")
        resume = self.warm_start and hasattr(self, "params_")
        if not resume:
            self.classes_ = np.unique(y)
            if self.encoder == "noun":
                if X.nouns is None:
                    raise ValueError("encoder='noun' needs per-video nouns in the input")
                self.nouns_ = [UNKNOWN_NOUN] + sorted(set(X.nouns))
            self.config_ = self._model_config(len(self.classes_), len(getattr(self, "nouns_", [])))
            self.params_ = init_params(self.config_, self.random_state)
            self.epoch_ = 0
            self.loss_curve_ = []
        y_idx = self._encode_labels(y)
        self._run_epochs(X, y_idx, list(self.params_.values()), self.lr_at, self.epochs, callback)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Logits from the single center clip of each video."""
        check_is_fitted(self, "params_")
        X = check_video_set(X, self.n_objects)
        nouns = self._noun_codes(X)
        out = []
        for start in range(0, len(X), 256):
            rows = np.arange(start, min(start + 256, len(X)))
            out.append(forward(nk.Tape(), self._batch(X, rows, nouns=nouns), self.params_, self.config_).value)
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        return nk.softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_with_search(self, X: VideoSet, max_configs: int = 8) -> tuple[np.ndarray, np.ndarray]:
        """Predict with configuration search over overflow tracklets.

        For each video up to ``max_configs`` slot sets are scored; the class of
        the most confident one wins. Returns ``(labels, confidences)``.
        """
        check_is_fitted(self, "params_")
        X = check_video_set(X, self.n_objects)
        if X.tracklets is None or X.frame_size is None:
            proba = self.predict_proba(X)
            return self.classes_[proba.argmax(1)], proba.max(1)
        # videos without overflow keep their batched plain prediction
        proba = self.predict_proba(X)
        labels, conf = self.classes_[proba.argmax(1)], proba.max(1)
        rng = stream(self.random_state, STREAM_CONFIG_SEARCH)
        for k in range(len(X)):
            slots, overflow = X.tracklets[k]
            if not overflow:
                continue
            configs = candidate_configurations(slots, overflow, max_configs, rng)
            width, height = X.frame_size[k]
            arrays = [slot_arrays(c, width, height) for c in configs]
            sub = VideoSet(
                quads=[q for q, _ in arrays],
                roles=np.array([r for _, r in arrays]),
                appearance=None if X.appearance is None else np.repeat(X.appearance[k : k + 1], len(arrays), 0),
                nouns=None if X.nouns is None else [X.nouns[k]] * len(arrays),
            )
            sub_proba = self.predict_proba(sub)
            best = int(np.argmax(sub_proba.max(axis=1)))
            labels[k] = self.classes_[int(np.argmax(sub_proba[best]))]
            conf[k] = float(sub_proba[best].max())
        return labels, conf

    # -- few-shot ---------------------------------------------------------------

    def finetune_classifier(self, X, y, epochs: int = 50, lr: float = 0.01, callback=None):
        """Replace the classifier for new classes and train only that layer.

        Every other parameter is checked byte-for-byte afterwards;
        :class:`FrozenParamDrift` is raised if any changed.
        """
        check_is_fitted(self, "params_")
        X = check_video_set(X, self.n_objects)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        self.config_ = self._model_config(len(self.classes_), self.config_.num_nouns)
        head = classifier_params(self.config_, stream(self.random_state, STREAM_FEWSHOT_INIT))
        for p in head:
            self.params_[p.name] = p
        frozen = {name: p.value.tobytes() for name, p in self.params_.items() if not name.startswith("classifier.")}
        self.epoch_ = 0
        self.loss_curve_ = []
        self._run_epochs(X, self._encode_labels(y), head, lambda _: lr, epochs, callback)
        drifted = [n for n, blob in frozen.items() if self.params_[n].value.tobytes() != blob]
        if drifted:
            raise FrozenParamDrift(f"frozen parameters changed during fine-tuning: {drifted}")
        return self

    # -- persistence ------------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> None:
        check_is_fitted(self, "params_")
        tensors = {}
        for name, p in self.params_.items():
            tensors[f"param/{name}"] = p.value
            tensors[f"momentum/{name}"] = p.momentum_buf
        meta = {
            "format": "stin-classifier",
            "estimator": _jsonable(self.get_params()),
            "model": self.config_.to_dict(),
            "classes": self.classes_.tolist(),
            "nouns": getattr(self, "nouns_", None),
            "epoch": self.epoch_,
            "loss_curve": list(self.loss_curve_),
            "extra": extra or {},
        }
        nk.save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "STINClassifier":
        tensors, meta = nk.load_checkpoint(path)
        if meta.get("format") != "stin-classifier":
            raise ValueError(f"{path}: not a classifier checkpoint")
        params = dict(meta["estimator"])
        params["lr_drops"] = tuple(params["lr_drops"])
        est = cls(**params)
        est.config_ = ModelConfig(**meta["model"])
        est.classes_ = np.array(meta["classes"])
        if meta.get("nouns") is not None:
            est.nouns_ = list(meta["nouns"])
        fresh = init_params(est.config_, est.random_state)
        for name, p in fresh.items():
            p.value = tensors[f"param/{name}"].copy()
            p.momentum_buf = tensors[f"momentum/{name}"].copy()
            p.grad = np.zeros_like(p.value)
        est.params_ = fresh
        est.epoch_ = int(meta["epoch"])
        est.loss_curve_ = list(meta["loss_curve"])
        est.checkpoint_extra_ = meta.get("extra", {})
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out

