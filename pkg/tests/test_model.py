import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attmil import ndcore as nd
from attmil.model import (
    AttentionMIL,
    FlatMLP,
    MeanPoolMIL,
    StaleTraceError,
    attention_weights,
    bag_scores,
    embed_instances,
    instance_scores,
    load_checkpoint,
    parameter_census,
    save_checkpoint,
)
from oracles import fd_check_model


def _zero_embedding(model):
    for k in model.params:
        if k.startswith("embed"):
            model.params[k][...] = 0.0
            if k.endswith("gamma"):
                model.params[k][...] = 1.0


def test_embed_zero_network_is_skip():
    m = AttentionMIL(3, dim=8)
    _zero_embedding(m)
    for i in (1, 2, 3):
        m.buffers[f"embed{i}.running_var"][...] = 1.0 - 1e-5  # var + eps == 1
    x = np.random.default_rng(0).random((2, 4, 8))
    h, _ = embed_instances(m, x, "eval", None)
    np.testing.assert_allclose(h, x, rtol=0, atol=1e-15)


def test_embed_shape_and_dim_check():
    m = AttentionMIL(3, dim=8)
    h, _ = embed_instances(m, np.zeros((2, 5, 8)), "train", nd.make_rng(0))
    assert h.shape == (2, 5, 8)
    with pytest.raises(ValueError, match="dim"):
        embed_instances(m, np.zeros((2, 5, 6)), "eval", None)
    with pytest.raises(ValueError):
        embed_instances(m, np.zeros((1, 1, 8)), "train", nd.make_rng(0))


def test_instance_scores():
    params = {"score.w": np.zeros((8, 3)), "score.b": np.zeros(3)}
    h = np.random.default_rng(1).normal(size=(2, 4, 8))
    np.testing.assert_array_equal(instance_scores(params, h), 0.5)
    params = {"score.w": np.random.default_rng(2).normal(size=(8, 3)), "score.b": np.ones(3)}
    f = instance_scores(params, h)
    assert f.shape == (2, 4, 3) and np.all((f > 0) & (f < 1))


def test_attention_weights_examples():
    h = np.random.default_rng(3).normal(size=(2, 5, 4))
    zero = {"attn.w": np.zeros((4, 2)), "attn.b": np.zeros(2)}
    np.testing.assert_allclose(attention_weights(zero, h), 0.2, rtol=0, atol=1e-15)
    one = attention_weights({"attn.w": np.ones((4, 2)), "attn.b": np.zeros(2)}, h[:, :1])
    np.testing.assert_array_equal(one, 1.0)
    # pre-sigmoid activations 0 and +1000
    h2 = np.array([[[0.0], [1000.0]]])
    w = attention_weights({"attn.w": np.ones((1, 1)), "attn.b": np.zeros(1)}, h2)
    np.testing.assert_allclose(w[0, :, 0], [1 / 3, 2 / 3], rtol=0, atol=1e-9)


def test_attention_all_saturated_negative_stays_valid():
    h = np.full((1, 3, 1), -2000.0)
    w = attention_weights({"attn.w": np.ones((1, 1)), "attn.b": np.zeros(1)}, h)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_bag_scores_examples():
    f = np.random.default_rng(4).random((2, 4, 3))
    np.testing.assert_allclose(bag_scores(f, np.full_like(f, 0.25)), f.mean(axis=1), rtol=1e-15)
    onehot = np.zeros_like(f)
    onehot[:, 2] = 1.0
    np.testing.assert_array_equal(bag_scores(f, onehot), f[:, 2])
    S = bag_scores(np.array([[[0.2], [0.6]]]), np.array([[[0.25], [0.75]]]))
    assert S[0, 0] == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError, match="sum"):
        bag_scores(f, np.full_like(f, 0.3))


def test_openmic_shapes():
    m = AttentionMIL(20)
    out = m.forward(np.random.default_rng(0).random((3, 10, 128)), "eval")
    assert out.S.shape == (3, 20) and out.w.shape == (3, 10, 20)


def test_att_with_zero_head_equals_fct():
    rng = np.random.default_rng(5)
    att, fct = AttentionMIL(3, dim=16, seed=2), MeanPoolMIL(3, dim=16, seed=2)
    att.params["attn.w"][...] = 0
    att.params["attn.b"][...] = 0
    for k in fct.params:
        fct.params[k][...] = att.params[k]
    x = rng.random((4, 5, 16))
    for mode in ("train", "eval"):
        a = att.forward(x, mode, nd.make_rng(9)).S
        b = fct.forward(x, mode, nd.make_rng(9)).S
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 9))
def test_permutation_invariance(seed, r):
    rng = np.random.default_rng(seed)
    m = AttentionMIL(3, dim=8, seed=seed)
    for k in m.buffers:
        m.buffers[k] = rng.random(8) + (0.5 if "var" in k else 0.0)
    x = rng.random((3, r, 8))
    perm = rng.permutation(r)
    a = m.forward(x, "eval")
    b = m.forward(x[:, perm], "eval")
    np.testing.assert_allclose(a.S, b.S, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.w[:, perm], b.w, rtol=0, atol=1e-12)


def test_arbitrary_bag_length_at_inference():
    m = AttentionMIL(2, dim=8)
    for r in (1, 3, 25):
        out = m.forward(np.random.default_rng(r).random((2, r, 8)), "eval")
        np.testing.assert_allclose(out.w.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("cls", [AttentionMIL, MeanPoolMIL])
@pytest.mark.parametrize("seed", range(3))
def test_embedding_models_fd(cls, seed):
    rng = np.random.default_rng(seed)
    m = cls(3, dim=16, seed=seed)
    x = rng.random((4, 5, 16))
    worst, checked = fd_check_model(m, x, rng.normal(size=(4, 3)), seed, 6, rng)
    assert checked >= 6 * len(m.params) // 2
    assert worst < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_fc_fd(seed):
    rng = np.random.default_rng(seed)
    m = FlatMLP(3, bag_size=5, dim=4, hidden=(8, 8), seed=seed)
    worst, _ = fd_check_model(m, rng.random((4, 5, 4)), rng.normal(size=(4, 3)), seed, 10, rng)
    assert worst < 1e-4


def test_zero_grad_S_gives_zero_grads():
    m = AttentionMIL(3, dim=8)
    out = m.forward(np.random.default_rng(0).random((2, 4, 8)), "train", nd.make_rng(0))
    for g in m.backward(out.trace, np.zeros((2, 3))).values():
        np.testing.assert_array_equal(g, 0.0)


def test_attention_grad_nonzero_when_scores_differ():
    rng = np.random.default_rng(7)
    m = AttentionMIL(3, dim=8, dropout=0.0)
    out = m.forward(rng.random((2, 4, 8)), "train", None)
    assert np.ptp(out.f, axis=1).min() > 0
    grads = m.backward(out.trace, rng.normal(size=(2, 3)))
    assert np.all(np.abs(grads["attn.w"]).sum(axis=0) > 0)


def test_backward_rejects_stale_or_eval_trace():
    m = AttentionMIL(3, dim=8)
    x = np.random.default_rng(0).random((2, 4, 8))
    out = m.forward(x, "train", nd.make_rng(0))
    m.mark_updated()
    with pytest.raises(StaleTraceError):
        m.backward(out.trace, np.ones((2, 3)))
    assert m.forward(x, "eval").trace is None
    with pytest.raises(ValueError):
        m.backward(None, np.ones((2, 3)))


def test_census():
    att, fct = AttentionMIL(20), MeanPoolMIL(20)
    assert att.census() == 3 * (128 * 128 + 128 + 256) + 2 * (128 * 20 + 20) == 55464
    assert fct.census() == att.census() - (128 * 20 + 20)
    assert parameter_census({}) == 0
    fc = FlatMLP(20)
    assert fc.census() == 1280 * 512 + 512 + 512 * 512 + 512 + 512 * 20 + 20


def test_running_stats_not_counted():
    m = AttentionMIL(4, dim=8)
    assert m.census() == parameter_census(m.params)
    assert not any("running" in k for k in m.params)


@pytest.mark.parametrize("kind", ["att", "fc_t", "fc"])
def test_checkpoint_round_trip(tmp_path, kind):
    from attmil.model import build_model, round_to_f32

    m = build_model(kind, 3, 4, 8, seed=1, fc_hidden=(6,))
    m.forward(np.random.default_rng(0).random((3, 4, 8)), "train", nd.make_rng(0))
    round_to_f32(m)
    save_checkpoint(m, tmp_path / "a", epoch=3, val_loss=0.25, seed=1)
    back, manifest = load_checkpoint(tmp_path / "a")
    assert manifest["architecture"] == kind and manifest["census"] == m.census()
    for store, other in ((m.params, back.params), (m.buffers, back.buffers)):
        assert store.keys() == other.keys()
        for k in store:
            np.testing.assert_array_equal(store[k], other[k])
    save_checkpoint(back, tmp_path / "b", epoch=3, val_loss=0.25, seed=1)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
