import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stin import numkit as nk
from stin.gradcheck import model_case, run_gradcheck
from stin.model import (
    Batch,
    ModelConfig,
    VideoSample,
    aggregate_average,
    aggregate_nonlocal,
    encode_objects,
    forward,
    init_params,
    logits,
    predict_proba,
    predict_with_config_search,
    spatial_interaction,
    stack_samples,
    temporal_interaction,
)


def set_params(params, **values):
    for name, v in values.items():
        params[name].value[...] = v


def random_batch(rng, b=3, t=8, n=4, roles=(0, 1, 1, 2)):
    q = rng.uniform(0.05, 0.95, (b, t, n, 4))
    roles = np.tile(roles, (b, 1))
    q.transpose(0, 2, 1, 3)[roles == 2] = 0.0
    return Batch(q, roles, labels=rng.integers(0, 3, b))


# -- object encoder ---------------------------------------------------------------


def test_zero_weights_give_zero_features():
    cfg = ModelConfig(num_classes=3, d=8, d_e=8)
    params = init_params(cfg)
    for p in params.values():
        p.value[...] = 0.0
    x = encode_objects(nk.Tape(), random_batch(np.random.default_rng(0)), params, cfg)
    assert np.all(x.value == 0.0)


def test_identical_slots_identical_features():
    cfg = ModelConfig(num_classes=3, d=8, d_e=8)
    params = init_params(cfg, 3)
    q = np.random.default_rng(1).uniform(size=(1, 8, 4, 4))
    q[:, :, 2] = q[:, :, 1]
    x = encode_objects(nk.Tape(), Batch(q, np.array([[0, 1, 1, 1]])), params, cfg).value.reshape(8, 4, 8)
    assert np.array_equal(x[:, 1], x[:, 2])


def test_encoder_d1_by_hand():
    cfg = ModelConfig(num_classes=2, n_objects=2, n_frames=2, d=1, d_e=1)
    params = init_params(cfg)
    set_params(
        params,
        **{
            "coord.l1.w": [[1.0], [2.0], [0.0], [-1.0]],
            "coord.l1.b": [[0.5]],
            "coord.l2.w": [[3.0]],
            "coord.l2.b": [[0.0]],
            "identity.table": [[1.0], [-2.0], [0.0]],
            "fuse.w": [[1.0], [1.0]],
            "fuse.b": [[0.0]],
        },
    )
    q = np.zeros((1, 2, 2, 4))
    q[0, 0, 0] = [0.2, 0.4, 0.5, 0.1]
    q[0, 0, 1] = [0.3, 0.1, 0.2, 0.2]
    x = encode_objects(nk.Tape(), Batch(q, np.array([[0, 1]])), params, cfg).value
    # subject: relu(3*relu(0.2+0.8-0.1+0.5)) + 1 = 3*1.4 + 1
    assert x[0, 0] == pytest.approx(5.2, abs=1e-12)
    # object: 3*relu(0.3+0.2-0.2+0.5) - 2 = 0.4
    assert x[1, 0] == pytest.approx(0.4, abs=1e-12)


def test_without_identity_embeddings_no_identity_params():
    cfg = ModelConfig(num_classes=3, d=8, d_e=8, use_identity_embeddings=False)
    params = init_params(cfg)
    assert "identity.table" not in params and "fuse.w" not in params
    out = logits(random_batch(np.random.default_rng(2)), params, cfg)
    assert out.shape == (3, 3) and np.all(np.isfinite(out))


def test_identity_table_shape():
    params = init_params(ModelConfig(num_classes=3, d=8, d_e=5))
    assert params["identity.table"].shape == (3, 5)


# -- spatial ------------------------------------------------------------------------


def test_spatial_by_hand():
    params = {"spatial.w": nk.Param("w", [[1.0], [1.0]]), "spatial.b": nk.Param("b", [[0.0]])}
    t = nk.Tape()
    out = spatial_interaction(t.constant([[1.0], [3.0]]), 2, params)
    assert out.value.tolist() == [[4.0], [4.0]]


def spatial_params(d, rng, zero=False):
    w = np.zeros((2 * d, d)) if zero else rng.normal(size=(2 * d, d))
    return {"spatial.w": nk.Param("w", w), "spatial.b": nk.Param("b", rng.normal(size=(1, d)))}


def test_spatial_equal_inputs_equal_outputs_and_zero_weights():
    rng = np.random.default_rng(0)
    params = spatial_params(5, rng)
    v = rng.normal(size=(1, 5))
    out = spatial_interaction(nk.Tape().constant(np.repeat(v, 4, axis=0)), 4, params).value
    assert all(np.array_equal(out[0], out[i]) for i in range(4))
    params = spatial_params(5, rng, zero=True)
    params["spatial.b"].value[...] = 0.0
    assert np.all(spatial_interaction(nk.Tape().constant(rng.normal(size=(4, 5))), 4, params).value == 0.0)


def test_spatial_rejects_single_object():
    with pytest.raises(nk.DimensionError):
        nk.mean_others(nk.Tape().constant(np.ones((1, 1, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_spatial_other_object_permutation_exact(seed, n):
    rng = np.random.default_rng(seed)
    d = 7
    params = spatial_params(d, rng)
    x = rng.normal(size=(n, d))
    base = spatial_interaction(nk.Tape().constant(x), n, params).value
    i = int(rng.integers(n))
    others = [j for j in range(n) if j != i]
    perm = list(range(n))
    for j, k in zip(others, rng.permutation(others)):
        perm[j] = k
    moved = spatial_interaction(nk.Tape().constant(x[perm]), n, params).value
    assert np.array_equal(moved[i], base[i])


# -- temporal -----------------------------------------------------------------------


def test_temporal_by_hand():
    params = {
        "temporal.l1.w": nk.Param("a", [[1.0], [1.0]]),
        "temporal.l1.b": nk.Param("b", [[0.0]]),
        "temporal.l2.w": nk.Param("c", [[1.0]]),
        "temporal.l2.b": nk.Param("d", [[0.0]]),
    }
    # rows ordered frame-major: (t=0, slot 0), (t=1, slot 0) for N=1
    out = temporal_interaction(nk.Tape().constant([[1.0], [2.0]]), 2, 1, params)
    assert out.value.tolist() == [[3.0]]
    out = temporal_interaction(nk.Tape().constant([[0.0], [0.0]]), 2, 1, params)
    assert out.value.tolist() == [[0.0]]


def test_temporal_is_order_sensitive():
    rng = np.random.default_rng(5)
    d, t = 3, 4
    params = {
        "temporal.l1.w": nk.Param("a", rng.normal(size=(t * d, d))),
        "temporal.l1.b": nk.Param("b", np.zeros((1, d))),
        "temporal.l2.w": nk.Param("c", rng.normal(size=(d, d))),
        "temporal.l2.b": nk.Param("d", np.zeros((1, d))),
    }
    x = rng.normal(size=(t, d))
    fwd = temporal_interaction(nk.Tape().constant(x), t, 1, params).value
    rev = temporal_interaction(nk.Tape().constant(x[::-1].copy()), t, 1, params).value
    assert not np.array_equal(fwd, rev)


def test_temporal_wrong_count():
    params = {"temporal.l1.w": None}
    with pytest.raises(nk.DimensionError):
        temporal_interaction(nk.Tape().constant(np.ones((3, 2))), 2, 1, params)


# -- aggregation --------------------------------------------------------------------


def test_average_examples():
    t = nk.Tape()
    assert aggregate_average(t.constant([[1.0], [3.0]]), 2).value.tolist() == [[2.0]]
    v = np.array([[0.3, -1.2, 7.0]])
    assert np.array_equal(aggregate_average(t.constant(np.repeat(v, 5, axis=0)), 5).value, v)


def nonlocal_params(d, blocks, rng):
    cfg = ModelConfig(num_classes=2, d=d, d_e=d, aggregator="nonlocal", nonlocal_blocks=blocks)
    params = init_params(cfg, int(rng.integers(1000)))
    for p in params.values():
        if p.name.startswith("nonlocal.") and ".out." not in p.name:
            p.value[...] = rng.normal(0, 0.5, p.value.shape)
    return params


def test_nonlocal_zero_init_reduces_to_projected_average():
    rng = np.random.default_rng(0)
    d, n = 6, 4
    params = nonlocal_params(d, 3, rng)
    assert all(np.all(params[f"nonlocal.{k}.out.w"].value == 0) for k in range(3))
    g = rng.normal(size=(2 * n, d))
    t = nk.Tape()
    got = aggregate_nonlocal(t.constant(g), n, params, 3).value
    proj = nk.linear(t.constant(g), params["nonlocal.proj.w"], params["nonlocal.proj.b"])
    assert np.array_equal(got, aggregate_average(proj, n).value)


def test_nonlocal_single_slot_by_hand():
    rng = np.random.default_rng(1)
    d = 3
    params = nonlocal_params(d, 1, rng)
    params["nonlocal.0.out.w"].value[...] = rng.normal(size=(d, d))
    g = rng.normal(size=(1, d))
    got = aggregate_nonlocal(nk.Tape().constant(g), 1, params, 1).value

    def lin(x, name):
        return x @ params[f"{name}.w"].value + params[f"{name}.b"].value

    # one slot: attention weight is 1, so the block adds out(psi(g))
    y = g + lin(lin(g, "nonlocal.0.psi"), "nonlocal.0.out")
    assert np.allclose(got, lin(y, "nonlocal.proj"), atol=1e-12)


@pytest.mark.parametrize("aggregator", ["average", "nonlocal"])
@pytest.mark.parametrize("seed", range(5))
def test_same_role_slot_permutation_exact(aggregator, seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_classes=4, d=16, d_e=16, aggregator=aggregator)
    params = init_params(cfg, seed)
    for p in params.values():
        if ".out." in p.name:
            p.value[...] = rng.normal(0, 0.3, p.value.shape)
    batch = random_batch(rng, b=5, roles=(0, 1, 1, 1))
    perm = [0] + list(1 + rng.permutation(3))
    swapped = Batch(batch.quads[:, :, perm], batch.roles[:, perm])
    assert np.array_equal(logits(batch, params, cfg), logits(swapped, params, cfg))


# -- full forward -------------------------------------------------------------------


def test_zero_classifier_gives_uniform_probabilities():
    cfg = ModelConfig(num_classes=5, d=8, d_e=8)
    params = init_params(cfg)
    params["classifier.w"].value[...] = 0.0
    proba = predict_proba(random_batch(np.random.default_rng(0)), params, cfg)
    assert np.allclose(proba, 0.2, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_classes=7, d=8, d_e=8, aggregator="nonlocal", nonlocal_blocks=1)
    params = init_params(cfg, seed)
    params["classifier.w"].value *= rng.uniform(1, 50)
    proba = predict_proba(random_batch(rng), params, cfg)
    assert np.all(np.isfinite(proba))
    assert np.max(np.abs(proba.sum(axis=1) - 1.0)) <= 1e-12


def test_single_example_memorization():
    cfg = ModelConfig(num_classes=3, d=16, d_e=16)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    batch = random_batch(rng, b=1)
    batch.labels = np.array([2])
    for _ in range(200):
        nk.zero_grad(params.values())
        tape = nk.Tape()
        loss = nk.softmax_cross_entropy(forward(tape, batch, params, cfg), batch.labels)
        tape.backward(loss)
        nk.sgd_step(params.values(), 0.01, 0.9)
    tape = nk.Tape()
    assert float(nk.softmax_cross_entropy(forward(tape, batch, params, cfg), batch.labels).value) < 0.01


def test_appearance_fusion_head():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(num_classes=3, d=8, d_e=8, appearance_dim=5)
    params = init_params(cfg)
    assert params["classifier.w"].shape == (13, 3)
    batch = random_batch(rng)
    with pytest.raises(ValueError, match="no appearance"):
        logits(batch, params, cfg)
    batch.appearance = rng.normal(size=(3, 5))
    assert logits(batch, params, cfg).shape == (3, 3)

    plain = ModelConfig(num_classes=3, d=8, d_e=8)
    with pytest.raises(ValueError, match="no fusion head"):
        logits(batch, init_params(plain), plain)


def test_batch_shape_checked():
    cfg = ModelConfig(num_classes=3, d=4, d_e=4)
    with pytest.raises(nk.DimensionError):
        logits(random_batch(np.random.default_rng(0), t=6), init_params(cfg), cfg)


def test_config_validation():
    for bad in (dict(n_objects=1), dict(n_frames=1), dict(d=0), dict(num_classes=1), dict(aggregator="max")):
        with pytest.raises(ValueError):
            ModelConfig(**{"num_classes": 3, **bad})


def test_video_sample_null_slots_must_be_zero():
    q = np.ones((2, 2, 4))
    with pytest.raises(ValueError):
        VideoSample(q, ["subject", "null"])


def test_init_is_seeded():
    cfg = ModelConfig(num_classes=3, d=4, d_e=4)
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    assert all(np.array_equal(a[k].value, b[k].value) for k in a)
    assert not np.array_equal(a["coord.l1.w"].value, c["coord.l1.w"].value)
    assert np.all(a["coord.l1.b"].value == 0.0)


# -- configuration search -----------------------------------------------------------


def sample(rng, roles=("subject", "object", "object", "object"), label=0):
    q = rng.uniform(0.05, 0.95, (8, 4, 4))
    for i, r in enumerate(roles):
        if r == "null":
            q[:, i] = 0.0
    return VideoSample(q, list(roles), label)


def test_config_search_single_config_is_plain_forward():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(num_classes=4, d=8, d_e=8)
    params = init_params(cfg, 1)
    s = sample(rng)
    cls, conf, idx = predict_with_config_search([s], params, cfg)
    proba = predict_proba(stack_samples([s]), params, cfg)[0]
    assert (cls, conf, idx) == (int(np.argmax(proba)), float(proba.max()), 0)


def test_config_search_duplicates_do_not_matter():
    rng = np.random.default_rng(1)
    cfg = ModelConfig(num_classes=4, d=8, d_e=8)
    params = init_params(cfg, 1)
    a, b = sample(rng), sample(rng)
    r1 = predict_with_config_search([a, b], params, cfg)
    r2 = predict_with_config_search([a, b, a, b, b], params, cfg)
    assert r1[:2] == r2[:2]


def test_config_search_returns_most_confident():
    rng = np.random.default_rng(2)
    cfg = ModelConfig(num_classes=4, d=8, d_e=8)
    params = init_params(cfg, 3)
    configs = [sample(rng) for _ in range(6)]
    proba = predict_proba(stack_samples(configs), params, cfg)
    best = int(np.argmax(proba.max(axis=1)))
    cls, conf, idx = predict_with_config_search(configs, params, cfg)
    assert idx == best and cls == int(np.argmax(proba[best])) and conf == proba[best].max()


# -- gradients ------------------------------------------------------------------------


@pytest.mark.parametrize("aggregator", ["average", "nonlocal"])
def test_full_model_gradcheck(aggregator):
    fwd, params = model_case(aggregator, seed=3)
    assert nk.check_gradients(fwd, params, 1e-6) < 1e-4


def test_gradcheck_report_has_one_row_per_primitive():
    names = [n for n, _ in run_gradcheck()]
    for prim in ("linear", "relu", "concat_cols", "mean_rows", "softmax_cross_entropy", "attention"):
        assert prim in names
    assert len(names) == len(set(names))
