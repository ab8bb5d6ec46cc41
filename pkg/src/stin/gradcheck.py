"""Finite-difference checks for every primitive and the assembled network."""

from __future__ import annotations

import numpy as np

from . import numkit as nk
from .model import Batch, ModelConfig, forward, init_params

THRESHOLD = 1e-4


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _case(build, params, rng):
    """Wrap ``build(tape) -> node`` into a scalar loss with fixed random weights."""
    weights = {}

    def fwd():
        tape = nk.Tape()
        out = build(tape)
        if out.value.size == 1:
            return tape, out
        if "w" not in weights:
            weights["w"] = rng.normal(size=out.value.shape)
        return tape, nk.weighted_sum(out, weights["w"])

    return fwd, params


def primitive_cases(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    P = lambda name, *shape: nk.Param(name, rng.normal(size=shape))  # noqa: E731
    cases = {}

    w, b, x = P("w", 3, 2), P("b", 1, 2), P("x", 4, 3)
    cases["linear"] = _case(lambda t: nk.linear(t.watch(x), w, b), [x, w, b], rng)

    r = nk.Param("r", _away_from_zero(rng, (3, 4)))
    cases["relu"] = _case(lambda t: nk.relu(t.watch(r)), [r], rng)

    a1, a2, a3 = P("a1", 2, 1), P("a2", 2, 3), P("a3", 2, 2)
    cases["concat_cols"] = _case(lambda t: nk.concat_cols([t.watch(a1), a2, a3]), [a1, a2, a3], rng)

    m1, m2, m3 = P("m1", 2, 3), P("m2", 2, 3), P("m3", 2, 3)
    cases["mean_rows"] = _case(lambda t: nk.mean_rows([t.watch(m1), m2, m3]), [m1, m2, m3], rng)

    s = P("s", 6, 3)
    cases["mean_others"] = _case(lambda t: nk.mean_others(nk.reshape(t.watch(s), (2, 3, 3))), [s], rng)
    cases["slot_mean"] = _case(lambda t: nk.slot_mean(nk.reshape(t.watch(s), (2, 3, 3))), [s], rng)

    q, k, v = P("q", 8, 3), P("k", 8, 3), P("v", 8, 3)

    def att(t):
        shape = (2, 4, 3)
        return nk.attention(nk.reshape(t.watch(q), shape), nk.reshape(t.watch(k), shape), nk.reshape(t.watch(v), shape))

    cases["attention"] = _case(att, [q, k, v], rng)

    e1, e2 = P("e1", 3, 2), P("e2", 3, 2)
    cases["add"] = _case(lambda t: nk.add(t.watch(e1), e2), [e1, e2], rng)

    pm = P("pm", 6, 4)
    cases["permute"] = _case(lambda t: nk.permute(nk.reshape(t.watch(pm), (2, 3, 4)), (0, 2, 1)), [pm], rng)
    cases["reshape"] = _case(lambda t: nk.reshape(t.watch(pm), (4, 6)), [pm], rng)

    table = P("table", 3, 4)
    idx = np.array([0, 2, 2, 1, 0])
    cases["take_rows"] = _case(lambda t: nk.take_rows(t.watch(table), idx), [table], rng)

    lg = P("logits", 4, 3)
    targets = np.array([0, 2, 1, 2])
    cases["softmax_cross_entropy"] = _case(lambda t: nk.softmax_cross_entropy(t.watch(lg), targets), [lg], rng)
    return cases


def model_case(aggregator: str = "average", seed: int = 0):
    """Full network, T=2, N=2, d=4, C=3, all weights randomised (including zero-init ones)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_classes=3, n_objects=2, n_frames=2, d=4, d_e=4, aggregator=aggregator, nonlocal_blocks=2)
    params = init_params(cfg, seed)
    for p in params.values():
        p.value[...] = rng.normal(0.0, 0.5, p.value.shape)
    quads = rng.uniform(0.05, 0.95, (3, 2, 2, 4))
    quads[1, :, 1] = 0.0
    batch = Batch(quads=quads, roles=np.array([[0, 1], [0, 2], [1, 1]]), labels=np.array([0, 2, 1]))

    def fwd():
        tape = nk.Tape()
        return tape, nk.softmax_cross_entropy(forward(tape, batch, params, cfg), batch.labels)

    return fwd, list(params.values())


def run_gradcheck(epsilon: float = 1e-6, seed: int = 0) -> list[tuple[str, float]]:
    rows = []
    for name, (fwd, params) in primitive_cases(seed).items():
        rows.append((name, nk.check_gradients(fwd, params, epsilon)))
    for agg in ("average", "nonlocal"):
        fwd, params = model_case(agg, seed)
        rows.append((f"stin[{agg}]", nk.check_gradients(fwd, params, epsilon)))
    return rows
