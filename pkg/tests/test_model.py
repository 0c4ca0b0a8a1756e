import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropattn.dataset import make_batch
from cropattn.errors import ShapeMismatch
from cropattn.model import (
    Checkpoint,
    ModelConfig,
    attend,
    encoder_layer,
    focal_loss_and_grad,
    forward,
    init_params,
    load_checkpoint,
    loss_gradients,
    multi_head,
    project_qkv,
    save_checkpoint,
    scaled_dot_attention,
)

from oracles import max_relative_error, numeric_grads, random_params, random_parcels


# -- projections and attention ------------------------------------------------

def test_project_qkv_identity_and_zero():
    x = np.arange(6.0).reshape(3, 2)
    q, k, v = project_qkv(x, np.eye(2), np.eye(2), np.eye(2))
    for m in (q, k, v):
        np.testing.assert_array_equal(m, x)
    q, k, v = project_qkv(np.zeros((3, 2)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)))
    assert not (q.any() or k.any() or v.any())


def test_project_qkv_hand_product():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    tq = np.array([[0.5, -1.0], [2.0, 0.0]])
    q, _, _ = project_qkv(x, tq, np.eye(2), np.eye(2))
    # [1*0.5 + 2*2, 1*-1 + 0], [3*0.5 + 4*2, -3]
    np.testing.assert_array_equal(q, [[4.5, -1.0], [9.5, -3.0]])
    with pytest.raises(ShapeMismatch):
        project_qkv(x, np.eye(3), np.eye(3), np.eye(3))
    with pytest.raises(ShapeMismatch):
        project_qkv(x, np.ones((2, 3)), np.ones((2, 2)), np.eye(2))


def test_attention_uniform_and_single():
    a = scaled_dot_attention(np.zeros((3, 2)), np.zeros((3, 2)))
    np.testing.assert_allclose(a, np.full((3, 3), 1 / 3))
    a = scaled_dot_attention(np.ones((3, 2)), np.ones((3, 2)), [True, False, False])
    assert a[0, 0] == 1.0
    assert np.count_nonzero(a) == 1


def test_attention_identity_diagonal():
    a = scaled_dot_attention(np.eye(2), np.eye(2))
    e = math.exp(1 / math.sqrt(2))
    assert a[0, 0] == pytest.approx(e / (e + 1), abs=1e-15)
    assert a[1, 1] == pytest.approx(0.6698, abs=1e-4)


def test_attention_mask_shape_checked():
    with pytest.raises(ShapeMismatch):
        scaled_dot_attention(np.zeros((3, 2)), np.zeros((3, 2)), [True, True])
    with pytest.raises(ShapeMismatch):
        scaled_dot_attention(np.zeros((3, 2)), np.zeros((3, 3)))


def test_attend():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(attend(np.eye(2), v), v)
    np.testing.assert_allclose(attend(np.full((2, 2), 0.5), np.array([[2.0, 4.0], [0.0, 8.0]])), [[1, 6], [1, 6]])
    np.testing.assert_allclose(attend([[0.2, 0.8], [0.4, 0.6]], v), [[0.2, 0.8], [0.4, 0.6]])
    with pytest.raises(ShapeMismatch):
        attend(np.eye(3), v)


@given(st.integers(1, 10), st.integers(0, 10), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_attention_rows_stochastic(t, pad, heads, seed):
    rng = np.random.default_rng(seed)
    d = 8
    x = rng.normal(size=(t + pad, d)) * 3
    mask = np.array([True] * t + [False] * pad)
    thetas = [rng.normal(size=(heads, d // heads, 3)) for _ in range(2)]
    _, a = multi_head(x, thetas[0], thetas[1], rng.normal(size=(heads, d // heads, d // heads)), mask)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a[:, :t, :t].sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(a[:, t:, :] == 0) and np.all(a[:, :, t:] == 0)


def test_multi_head_single_head_is_plain_pipeline():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    tq, tk, tv = (rng.normal(size=(1, 4, 4)) for _ in range(3))
    h, a = multi_head(x, tq, tk, tv)
    q, k, v = project_qkv(x, tq[0], tk[0], tv[0])
    a1 = scaled_dot_attention(q, k)
    np.testing.assert_allclose(a[0], a1, atol=1e-15)
    np.testing.assert_allclose(h, attend(a1, v), atol=1e-15)


def test_multi_head_blocks_are_independent():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    tq, tk, tv = (rng.normal(size=(2, 3, 3)) for _ in range(3))
    h, _ = multi_head(x, tq, tk, tv)
    left, _ = multi_head(x[:, :3], tq[:1], tk[:1], tv[:1])
    right, _ = multi_head(x[:, 3:], tq[1:], tk[1:], tv[1:])
    np.testing.assert_allclose(h, np.hstack([left, right]), atol=1e-14)


# -- encoder layer ------------------------------------------------------------

def zero_layer(d, ff):
    return {"query": np.zeros((1, d, d)), "key": np.zeros((1, d, d)), "value": np.zeros((1, d, d)),
            "norm1.gain": np.zeros(d), "norm1.bias": np.zeros(d),
            "ff.weight1": np.zeros((d, ff)), "ff.bias1": np.zeros(ff),
            "ff.weight2": np.zeros((ff, d)), "ff.bias2": np.zeros(d),
            "norm2.gain": np.zeros(d), "norm2.bias": np.zeros(d)}


def test_encoder_layer_degenerate_and_shape():
    out, _ = encoder_layer(np.zeros((3, 4)), zero_layer(4, 8))
    assert np.all(np.isfinite(out)) and out.shape == (3, 4)


def test_encoder_layer_residual_wired_and_padding_zero():
    cfg = ModelConfig(model_dim=4, num_heads=2, feed_forward_dim=6)
    lp = {k[len("layer0."):]: v for k, v in random_params(cfg, 3).items() if k.startswith("layer0.")}
    x = np.random.default_rng(0).normal(size=(2, 5, 4))
    mask = np.array([[True] * 5, [True] * 3 + [False] * 2])
    with_res, _ = encoder_layer(x, lp, mask)
    without, _ = encoder_layer(x, lp, mask, residual=False)
    assert with_res.shape == x.shape
    assert np.abs(with_res - without).max() > 1e-3
    assert np.all(with_res[1, 3:] == 0)


# -- full forward -------------------------------------------------------------

def test_single_slot_pool_equals_slot():
    cfg = ModelConfig(model_dim=4, num_classes=2, t_max=3)
    params = random_params(cfg, 0)
    batch = make_batch(random_parcels([1]), 3, ["a", "b"])
    cache = {}
    from cropattn.model import _forward
    out = _forward(batch, params, cfg, cache=cache)
    e = batch.inputs @ params["embed.weight"] + params["embed.bias"]
    e = (e - e.mean(-1, keepdims=True)) / np.sqrt(e.var(-1, keepdims=True) + 1e-5)
    e = e * params["embed.norm.gain"] + params["embed.norm.bias"]
    x_final = encoder_layer(
        (e + np.array([math.sin(batch.days[0, 0]), math.cos(batch.days[0, 0]),
                     math.sin(batch.days[0, 0] / 100), math.cos(batch.days[0, 0] / 100)]))
        * batch.validity_mask[..., None],
        {k[7:]: v for k, v in params.items() if k.startswith("layer0.")}, batch.validity_mask)[0]
    np.testing.assert_allclose(out.pooled[0], x_final[0, 0], atol=1e-12)


def test_duplicate_and_permuted_batch():
    cfg = ModelConfig(model_dim=8, num_heads=2, num_classes=2, t_max=6)
    params = random_params(cfg, 1)
    parcels = random_parcels([3, 6, 4], seed=2)
    out = forward(make_batch(parcels + parcels[:1], 6, ["a", "b"]), params, cfg)
    np.testing.assert_array_equal(out.logits[0], out.logits[3])
    perm = [2, 0, 1]
    out2 = forward(make_batch([parcels[i] for i in perm], 6, ["a", "b"]), params, cfg)
    np.testing.assert_allclose(out2.logits, out.logits[perm], atol=1e-12)


def test_forward_deterministic():
    cfg = ModelConfig(model_dim=8, num_classes=3, t_max=5)
    params = random_params(cfg, 1)
    batch = make_batch(random_parcels([5, 2]), 5, ["a", "b"])
    assert forward(batch, params, cfg).logits.tobytes() == forward(batch, params, cfg).logits.tobytes()


def test_padding_invariance():
    cfg = ModelConfig(model_dim=8, num_heads=2, num_layers=2, num_classes=3, t_max=12)
    params = random_params(cfg, 5)
    parcels = random_parcels([4, 7, 2], seed=9)
    short = forward(make_batch(parcels, 7, ["a", "b"]), params, cfg)
    long = forward(make_batch(parcels, 12, ["a", "b"]), params, cfg)
    assert np.abs(short.logits - long.logits).max() < 1e-12
    np.testing.assert_allclose(long.attention[..., :7, :7], short.attention, atol=1e-12)


def test_batch_shape_mismatch():
    cfg = ModelConfig(model_dim=4, t_max=3, input_dim=5)
    batch = make_batch(random_parcels([2]), 3, ["a", "b"])
    with pytest.raises(ShapeMismatch):
        forward(batch, init_params(cfg), cfg)


@pytest.mark.parametrize("kw", [dict(model_dim=6, num_heads=4), dict(model_dim=5), dict(num_layers=0),
                                dict(model_dim=8, num_heads=2, value_dim=3)])
def test_config_invariants(kw):
    with pytest.raises(ShapeMismatch):
        ModelConfig(**kw)


def test_config_defaults():
    cfg = ModelConfig(model_dim=8, num_heads=2)
    assert (cfg.key_dim, cfg.value_dim, cfg.feed_forward_dim) == (4, 4, 32)


def scalar_forward(inputs, days, params, n_classes):
    """Straight-line re-implementation for a 1-layer, 1-head model on one parcel."""
    d = len(params["embed.bias"])
    t = len(inputs)

    def matvec(row, w):
        return [sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))]

    def norm(row, gain, bias):
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        return [(r - mu) / math.sqrt(var + 1e-5) * g + b for r, g, b in zip(row, gain, bias)]

    W = params["embed.weight"].tolist()
    x = []
    for row, day in zip(inputs, days):
        e = [a + b for a, b in zip(matvec(row, W), params["embed.bias"])]
        if "embed.norm.gain" in params:
            e = norm(e, params["embed.norm.gain"], params["embed.norm.bias"])
        for i in range(0, d, 2):
            e[i] += math.sin(day / 10000 ** (i / d))
            e[i + 1] += math.cos(day / 10000 ** (i / d))
        x.append(e)
    tq, tk, tv = (params[f"layer0.{n}"][0].tolist() for n in ("query", "key", "value"))
    q = [matvec(r, tq) for r in x]
    k = [matvec(r, tk) for r in x]
    v = [matvec(r, tv) for r in x]
    dk = len(q[0])
    out = []
    for i in range(t):
        s = [sum(a * b for a, b in zip(q[i], k[j])) / math.sqrt(dk) for j in range(t)]
        m = max(s)
        w = [math.exp(z - m) for z in s]
        w = [z / sum(w) for z in w]
        h = [sum(w[j] * v[j][c] for j in range(t)) for c in range(d)]
        x1 = norm([a + b for a, b in zip(x[i], h)], params["layer0.norm1.gain"], params["layer0.norm1.bias"])
        hid = [max(0.0, a + b) for a, b in zip(matvec(x1, params["layer0.ff.weight1"].tolist()),
                                                params["layer0.ff.bias1"])]
        ff = [a + b for a, b in zip(matvec(hid, params["layer0.ff.weight2"].tolist()), params["layer0.ff.bias2"])]
        out.append(norm([a + b for a, b in zip(x1, ff)], params["layer0.norm2.gain"], params["layer0.norm2.bias"]))
    pooled = [max(out[i][c] for i in range(t)) for c in range(d)]
    return [a + b for a, b in zip(matvec(pooled, params["classifier.weight"].tolist()), params["classifier.bias"])]


@pytest.mark.parametrize("embed_norm", [True, False])
def test_forward_matches_scalar_reference(embed_norm):
    cfg = ModelConfig(model_dim=4, num_classes=3, t_max=4, feed_forward_dim=5, embed_norm=embed_norm)
    params = random_params(cfg, 7)
    parcels = random_parcels([2, 1], seed=4)
    out = forward(make_batch(parcels, 4, ["a", "b"]), params, cfg)
    for i, p in enumerate(parcels):
        ref = scalar_forward(p.bands.tolist(), p.days_of_year.tolist(), params, 3)
        np.testing.assert_allclose(out.logits[i], ref, rtol=0, atol=1e-12)


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    cfg = ModelConfig(model_dim=4, num_classes=2, t_max=3, feed_forward_dim=6)
    params = random_params(cfg, seed)
    batch = make_batch(random_parcels([3, 2], seed=seed), 3, ["a", "b"])
    _, grads, _ = loss_gradients(batch, params, cfg, 2.0)
    assert max_relative_error(grads, numeric_grads(batch, params, cfg, 2.0)) < 1e-4


def test_gradients_two_layers_two_heads():
    cfg = ModelConfig(model_dim=8, num_heads=2, num_layers=2, num_classes=3, t_max=4, feed_forward_dim=5)
    params = random_params(cfg, 11)
    batch = make_batch(random_parcels([4, 2, 3], seed=1, crops=("a", "b", "c")), 4, ["a", "b", "c"])
    _, grads, _ = loss_gradients(batch, params, cfg, 0.5)
    assert max_relative_error(grads, numeric_grads(batch, params, cfg, 0.5)) < 1e-4


def test_gradients_without_input_norm():
    cfg = ModelConfig(model_dim=4, num_classes=2, t_max=3, feed_forward_dim=6, embed_norm=False)
    params = random_params(cfg, 3)
    assert "embed.norm.gain" not in params
    batch = make_batch(random_parcels([3, 2], seed=3), 3, ["a", "b"])
    _, grads, _ = loss_gradients(batch, params, cfg, 2.0)
    assert max_relative_error(grads, numeric_grads(batch, params, cfg, 2.0)) < 1e-4


def test_classifier_bias_gradient_closed_form():
    cfg = ModelConfig(model_dim=4, num_classes=3, t_max=3)
    params = random_params(cfg, 2)
    batch = make_batch(random_parcels([3, 2, 1], seed=3, crops=("a", "b", "c")), 3, ["a", "b", "c"])
    _, grads, out = loss_gradients(batch, params, cfg, 0.0)
    p = np.exp(out.logits - out.logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expected = (p - np.eye(3)[batch.labels]).mean(axis=0)
    np.testing.assert_allclose(grads["classifier.bias"], expected, atol=1e-14)


def test_constant_loss_gives_zero_gradient():
    # with zero value projections the query/key parameters cannot influence anything
    cfg = ModelConfig(model_dim=4, num_classes=2, t_max=3)
    params = random_params(cfg, 2)
    params["layer0.value"][:] = 0.0
    batch = make_batch(random_parcels([3, 2]), 3, ["a", "b"])
    _, grads, _ = loss_gradients(batch, params, cfg)
    assert not grads["layer0.query"].any() and not grads["layer0.key"].any()


def test_focal_gradient_at_certainty_is_finite():
    loss, grad, _ = focal_loss_and_grad(np.array([[800.0, 0.0]]), [0], 2.0)
    assert loss == 0.0 and np.all(np.isfinite(grad))


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = ModelConfig(model_dim=8, num_heads=2, num_classes=3, t_max=7)
    params = random_params(cfg, 4)
    ck = Checkpoint(cfg, ["a", "b", "c"], params, {"note": "x"})
    path = save_checkpoint(ck, tmp_path / "ck.json")
    back = load_checkpoint(path)
    assert back.config == cfg and back.class_vocabulary == ["a", "b", "c"] and back.metadata == {"note": "x"}
    for name in params:
        assert back.params[name].tobytes() == params[name].tobytes()
    save_checkpoint(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")
