"""Spatial-temporal interaction network over object box trajectories.

Shapes inside the forward pass: ``B`` videos, ``T`` frames, ``N`` object
slots, feature width ``d``. Rows are laid out video-major, then frame, then
slot, so ``(B*T*N, d)`` reshapes to ``(B, T, N, d)`` without copies.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import numkit as nk
from .tracker import NULL, OBJECT_ROLE, SUBJECT

ROLE_INDEX = {SUBJECT: 0, OBJECT_ROLE: 1, NULL: 2}
AGGREGATORS = ("average", "nonlocal")
ENCODERS = ("coords", "noun")

# independent RNG streams derived from the master seed
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_SAMPLING = 2
STREAM_CONFIG_SEARCH = 3
STREAM_FEWSHOT_INIT = 4


@dataclass
class ModelConfig:
    num_classes: int
    n_objects: int = 4
    n_frames: int = 8
    d: int = 512
    d_e: int = 512
    aggregator: str = "average"
    use_identity_embeddings: bool = True
    nonlocal_blocks: int = 3
    appearance_dim: Optional[int] = None
    encoder: str = "coords"
    num_nouns: int = 0

    def __post_init__(self):
        if self.n_objects < 2:
            raise ValueError(f"n_objects must be >= 2, got {self.n_objects}")
        if self.n_frames < 2:
            raise ValueError(f"n_frames must be >= 2, got {self.n_frames}")
        if self.d <= 0 or self.d_e <= 0:
            raise ValueError("feature widths must be positive")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.encoder == "noun" and self.num_nouns < 1:
            raise ValueError("noun encoder needs num_nouns >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VideoSample:
    quads: np.ndarray  # (T, N, 4)
    roles: Sequence[str]
    label: int = 0
    appearance: Optional[np.ndarray] = None
    noun_index: int = 0

    def __post_init__(self):
        self.quads = np.asarray(self.quads, dtype=float)
        if self.quads.ndim != 3 or self.quads.shape[2] != 4:
            raise ValueError(f"quads must be (T, N, 4), got {self.quads.shape}")
        if len(self.roles) != self.quads.shape[1]:
            raise ValueError(f"{len(self.roles)} roles for {self.quads.shape[1]} slots")
        for i, role in enumerate(self.roles):
            if role not in ROLE_INDEX:
                raise ValueError(f"unknown role {role!r}")
            if role == NULL and np.any(self.quads[:, i] != 0):
                raise ValueError(f"null slot {i} carries non-zero quads")


@dataclass
class Batch:
    quads: np.ndarray  # (B, T, N, 4)
    roles: np.ndarray  # (B, N) role codes
    labels: Optional[np.ndarray] = None
    appearance: Optional[np.ndarray] = None
    nouns: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.quads.shape[0]


def stack_samples(samples: Sequence[VideoSample]) -> Batch:
    appearance = None
    if any(s.appearance is not None for s in samples):
        if not all(s.appearance is not None for s in samples):
            raise ValueError("appearance features must be given for all samples or none")
        appearance = np.stack([np.asarray(s.appearance, float) for s in samples])
    return Batch(
        quads=np.stack([s.quads for s in samples]),
        roles=np.array([[ROLE_INDEX[r] for r in s.roles] for s in samples], dtype=np.int64),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        appearance=appearance,
        nouns=np.array([s.noun_index for s in samples], dtype=np.int64),
    )


def stream(seed: int, stream_id: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream_id, *counters])


# -- parameters ----------------------------------------------------------------


def _linear_params(rng, name, fan_in, fan_out, zero=False):
    w = np.zeros((fan_in, fan_out)) if zero else nk.uniform_init(rng, fan_in, (fan_in, fan_out))
    return [nk.Param(f"{name}.w", w), nk.Param(f"{name}.b", np.zeros((1, fan_out)))]


def classifier_params(config: ModelConfig, rng) -> list[nk.Param]:
    width = config.d + (config.appearance_dim or 0)
    return _linear_params(rng, "classifier", width, config.num_classes)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, nk.Param]:
    """Fresh parameters, keyed by name, in a stable order."""
    rng = stream(seed, STREAM_INIT)
    d, de = config.d, config.d_e
    params = []
    if config.encoder == "coords":
        params += _linear_params(rng, "coord.l1", 4, d)
        params += _linear_params(rng, "coord.l2", d, d)
    else:
        params.append(nk.Param("noun.table", rng.normal(0.0, 1.0, (config.num_nouns, d))))
    if config.use_identity_embeddings:
        params.append(nk.Param("identity.table", rng.normal(0.0, 1.0, (3, de))))
        params += _linear_params(rng, "fuse", d + de, d)
    params += _linear_params(rng, "spatial", 2 * d, d)
    params += _linear_params(rng, "temporal.l1", config.n_frames * d, d)
    params += _linear_params(rng, "temporal.l2", d, d)
    if config.aggregator == "nonlocal":
        for k in range(config.nonlocal_blocks):
            for part in ("theta", "phi", "psi"):
                params += _linear_params(rng, f"nonlocal.{k}.{part}", d, d)
            params += _linear_params(rng, f"nonlocal.{k}.out", d, d, zero=True)
        params += _linear_params(rng, "nonlocal.proj", d, d)
    params += classifier_params(config, rng)
    return {p.name: p for p in params}


# -- network pieces -------------------------------------------------------------


def encode_objects(tape: nk.Tape, batch: Batch, params: dict, config: ModelConfig) -> nk.Node:
    """Per-object features, ``(B*T*N, d)``."""
    b, t, n, _ = batch.quads.shape
    if config.encoder == "coords":
        x = tape.constant(batch.quads.reshape(b * t * n, 4))
        x = nk.relu(nk.linear(x, params["coord.l1.w"], params["coord.l1.b"]))
        x = nk.relu(nk.linear(x, params["coord.l2.w"], params["coord.l2.b"]))
    else:
        rows = np.repeat(np.asarray(batch.nouns, dtype=np.int64), t * n)
        x = nk.relu(nk.take_rows(tape.watch(params["noun.table"]), rows))
    if not config.use_identity_embeddings:
        return x
    roles = np.broadcast_to(batch.roles[:, None, :], (b, t, n)).reshape(-1)
    emb = nk.take_rows(tape.watch(params["identity.table"]), roles)
    return nk.relu(nk.linear(nk.concat_cols([x, emb]), params["fuse.w"], params["fuse.b"]))


def spatial_interaction(x: nk.Node, n_objects: int, params: dict) -> nk.Node:
    """``relu(W_f [x_i, mean_{j != i} x_j])`` within every frame."""
    rows, d = x.shape
    others = nk.mean_others(nk.reshape(x, (rows // n_objects, n_objects, d)))
    joint = nk.concat_cols([x, nk.reshape(others, (rows, d))])
    return nk.relu(nk.linear(joint, params["spatial.w"], params["spatial.b"]))


def temporal_interaction(x: nk.Node, n_frames: int, n_objects: int, params: dict) -> nk.Node:
    """Concatenate each slot's features over time and run the 2-layer MLP; ``(B*N, d)``."""
    rows, d = x.shape
    if rows % (n_frames * n_objects):
        raise nk.DimensionError(f"{rows} rows is not a multiple of T*N = {n_frames * n_objects}")
    b = rows // (n_frames * n_objects)
    seq = nk.reshape(nk.permute(nk.reshape(x, (b, n_frames, n_objects, d)), (0, 2, 1, 3)), (b * n_objects, n_frames * d))
    h = nk.relu(nk.linear(seq, params["temporal.l1.w"], params["temporal.l1.b"]))
    return nk.linear(h, params["temporal.l2.w"], params["temporal.l2.b"])


def aggregate_average(g: nk.Node, n_objects: int) -> nk.Node:
    rows, d = g.shape
    return nk.slot_mean(nk.reshape(g, (rows // n_objects, n_objects, d)))


def aggregate_nonlocal(g: nk.Node, n_objects: int, params: dict, blocks: int) -> nk.Node:
    """Residual self-attention blocks over the slot set, 1x1 projection, then the mean."""
    rows, d = g.shape
    sets = (rows // n_objects, n_objects, d)
    y = g
    for k in range(blocks):
        q, key, v = (
            nk.reshape(nk.linear(y, params[f"nonlocal.{k}.{part}.w"], params[f"nonlocal.{k}.{part}.b"]), sets)
            for part in ("theta", "phi", "psi")
        )
        att = nk.reshape(nk.attention(q, key, v), (rows, d))
        y = nk.add(y, nk.linear(att, params[f"nonlocal.{k}.out.w"], params[f"nonlocal.{k}.out.b"]))
    y = nk.linear(y, params["nonlocal.proj.w"], params["nonlocal.proj.b"])
    return nk.slot_mean(nk.reshape(y, sets))


def forward(tape: nk.Tape, batch: Batch, params: dict, config: ModelConfig) -> nk.Node:
    """Class logits, ``(B, C)``."""
    b, t, n, _ = batch.quads.shape
    if t != config.n_frames or n != config.n_objects:
        raise nk.DimensionError(f"batch has T={t}, N={n}; model expects T={config.n_frames}, N={config.n_objects}")
    x = encode_objects(tape, batch, params, config)
    x = spatial_interaction(x, n, params)
    g = temporal_interaction(x, t, n, params)
    if config.aggregator == "average":
        h = aggregate_average(g, n)
    else:
        h = aggregate_nonlocal(g, n, params, config.nonlocal_blocks)
    if batch.appearance is not None:
        if not config.appearance_dim:
            raise ValueError("appearance features given but the model has no fusion head")
        if batch.appearance.shape != (b, config.appearance_dim):
            raise nk.DimensionError(
                f"appearance shape {batch.appearance.shape}, expected {(b, config.appearance_dim)}"
            )
        h = nk.concat_cols([h, tape.constant(batch.appearance)])
    elif config.appearance_dim:
        raise ValueError("model has a fusion head but no appearance features were given")
    return nk.linear(h, params["classifier.w"], params["classifier.b"])


def logits(batch: Batch, params: dict, config: ModelConfig) -> np.ndarray:
    return forward(nk.Tape(), batch, params, config).value


def predict_proba(batch: Batch, params: dict, config: ModelConfig) -> np.ndarray:
    return nk.softmax(logits(batch, params, config))


def predict_with_config_search(configurations: Sequence[VideoSample], params: dict, config: ModelConfig):
    """Most confident of several slot configurations of one video.

    Returns ``(class_index, confidence, configuration_index)``; ties keep the
    earliest configuration.
    """
    if not configurations:
        raise ValueError("need at least one configuration")
    probs = predict_proba(stack_samples(configurations), params, config)
    conf = probs.max(axis=1)
    best = int(np.argmax(conf))
    return int(np.argmax(probs[best])), float(conf[best]), best
