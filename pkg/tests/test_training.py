import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attmil import ndcore as nd
from attmil.dataio import SynthSpec, generate_synthetic
from attmil.training import (
    AdamState,
    LossConfig,
    TrainConfig,
    adam_step,
    ensure_val_split,
    partial_bce,
    run_seeds,
    train,
)
from oracles import fd_gradient, mean_bce, rel_error


def test_partial_bce_single_label():
    loss, _ = partial_bce(np.array([[0.5, 0.9]]), np.array([[1, 0]]), np.array([[True, False]]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_g_normalization():
    assert LossConfig().g(np.array(5 / 20)) == pytest.approx(4.0, abs=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_all_observed_equals_mean_bce(seed, b, n_labels):
    rng = np.random.default_rng(seed)
    S = rng.uniform(0.01, 0.99, size=(b, n_labels))
    y = rng.integers(0, 2, size=(b, n_labels))
    loss, _ = partial_bce(S, y, np.ones_like(y, dtype=bool))
    assert abs(loss - mean_bce(S, y)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_partial_bce_grad_fd(seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(0.05, 0.95, size=(4, 5))
    y = rng.integers(0, 2, size=(4, 5))
    mask = rng.random((4, 5)) < 0.6
    mask[0] = False
    mask[1, 0] = True
    cfg = LossConfig(alpha=1.3, beta=0.2, gamma=-0.5)
    _, grad = partial_bce(S, y, mask, cfg)
    num = fd_gradient(lambda s: partial_bce(s, y, mask, cfg)[0], S)
    assert max(rel_error(a, n) for a, n in zip(grad.ravel(), num.ravel())) < 1e-6


def test_zero_observed_bag_contributes_nothing():
    rng = np.random.default_rng(0)
    S = rng.uniform(0.1, 0.9, size=(3, 4))
    y = rng.integers(0, 2, size=(3, 4))
    mask = np.ones((3, 4), bool)
    base, _ = partial_bce(S, y, mask)
    mask2 = np.vstack([mask, np.zeros((1, 4), bool)])
    loss, grad = partial_bce(np.vstack([S, rng.random((1, 4))]), np.vstack([y, np.ones((1, 4))]), mask2)
    assert loss == pytest.approx(base, abs=1e-15)
    np.testing.assert_array_equal(grad[3], 0.0)
    with pytest.raises(ValueError):
        partial_bce(S, y, np.zeros((3, 4), bool))


@given(st.integers(0, 2**31), st.integers(1, 10))
def test_loss_invariant_to_extra_unobserved_labels(seed, extra):
    rng = np.random.default_rng(seed)
    n_obs = rng.integers(1, 5)
    q = rng.uniform(0.05, 0.95, size=(1, n_obs))
    y = rng.integers(0, 2, size=(1, n_obs))
    small, _ = partial_bce(q, y, np.ones_like(y, bool))
    big_q = np.hstack([q, rng.uniform(0.05, 0.95, size=(1, extra))])
    big_y = np.hstack([y, rng.integers(0, 2, size=(1, extra))])
    big_m = np.hstack([np.ones_like(y, bool), np.zeros((1, extra), bool)])
    large, _ = partial_bce(big_q, big_y, big_m)
    assert large == pytest.approx(small, rel=1e-12)


def test_adam_zero_grad_first_step():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(AdamState(lr=0.1), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


@given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=5))
def test_adam_first_step_is_signed_lr(grads):
    g = np.array(grads)
    p = {"w": np.zeros_like(g)}
    lr = 1e-3
    adam_step(AdamState(lr=lr), p, {"w": g})
    np.testing.assert_allclose(p["w"], -lr * np.sign(g), rtol=0, atol=lr * 1e-4)


def test_adam_matches_scalar_recurrence():
    # minimize (x - 3)^2 from x = 0
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x_ref, m, v = 0.0, 0.0, 0.0
    ref = []
    for t in range(1, 6):
        g = 2.0 * (x_ref - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x_ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        ref.append(x_ref)
    state = AdamState(lr=lr)
    p = {"x": np.array([0.0])}
    for t in range(5):
        adam_step(state, p, {"x": 2.0 * (p["x"] - 3.0)})
        assert abs(p["x"][0] - ref[t]) < 1e-10


def test_adam_rejects_nonfinite():
    with pytest.raises(nd.NumericalError):
        adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.array([1.0, np.nan])})


def test_train_config_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"epochs": 3, "lr": 0.01, "gamma": -0.5, "fc_hidden": [4]}')
    cfg = TrainConfig.from_json(path)
    assert cfg.epochs == 3 and cfg.loss.gamma == -0.5 and cfg.fc_hidden == (4,)
    assert cfg.batch_size == 128
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1})


def test_openmic_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr, cfg.epochs, cfg.dropout, cfg.val_fraction) == (128, 5e-4, 250, 0.6, 0.15)
    assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma) == (1.0, 0.0, -1.0)


def test_overfit_tiny_set():
    ds, _ = generate_synthetic(SynthSpec(n_bags=20, observe_rate=1.0, test_fraction=0.0, seed=2))
    cfg = TrainConfig(epochs=200, lr=1e-2, dropout=0.0)
    result = train("att", ensure_val_split(ds, cfg), cfg)
    assert result.history[-1][1] < 0.05


@pytest.fixture(scope="module")
def tiny_ds():
    ds, _ = generate_synthetic(SynthSpec(n_bags=120, seed=6))
    return ensure_val_split(ds, TrainConfig())


@pytest.mark.parametrize("kind", ["att", "fc_t", "fc"])
def test_train_history_and_best_checkpoint(tmp_path, tiny_ds, kind):
    cfg = TrainConfig(epochs=6, batch_size=32, lr=3e-3, seed=1, checkpoint_dir=str(tmp_path), fc_hidden=(16,))
    result = train(kind, tiny_ds, cfg)
    vals = [h[2] for h in result.history]
    assert [h[0] for h in result.history] == list(range(1, 7))
    assert result.best_val_loss == min(vals)
    assert result.best_epoch == vals.index(min(vals)) + 1
    assert (tmp_path / "manifest.json").exists()


def test_train_requires_val(small_synth):
    ds, _ = small_synth
    with pytest.raises(ValueError, match="val"):
        train("att", ds, TrainConfig(epochs=1))


def test_train_deterministic(tiny_ds):
    cfg = TrainConfig(epochs=3, batch_size=32, seed=4)
    a, b = train("att", tiny_ds, cfg), train("att", tiny_ds, cfg)
    assert a.history_csv() == b.history_csv()
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()


def test_run_seeds(tiny_ds):
    cfg = TrainConfig(epochs=2, batch_size=32)
    single = run_seeds("att", tiny_ds, cfg, [3])
    direct = train("att", tiny_ds, dataclasses.replace(cfg, seed=3))
    assert single[0].history == direct.history
    seq = run_seeds("fc_t", tiny_ds, cfg, [2, 1])
    par = run_seeds("fc_t", tiny_ds, cfg, [1, 2], workers=2)
    assert [r.config.seed for r in seq] == [1, 2]
    for a, b in zip(seq, par):
        assert a.history == b.history
        for k in a.model.params:
            np.testing.assert_array_equal(a.model.params[k], b.model.params[k])
    with pytest.raises(ValueError, match="duplicate"):
        run_seeds("att", tiny_ds, cfg, [1, 1])


def test_ten_seed_protocol(tmp_path, tiny_ds):
    results = run_seeds("fc_t", tiny_ds, TrainConfig(epochs=1, batch_size=64), range(1, 11),
                        checkpoint_root=tmp_path)
    assert [r.config.seed for r in results] == list(range(1, 11))
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(f"seed_{s}" for s in range(1, 11))
