import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from factorcd import tensornet as tn


def _dense(n_in, n_out, seed=0, dtype=np.float64):
    return tn.Dense(n_in, n_out, np.random.default_rng(seed), "d", dtype)


def test_zero_dense_gives_zero_output():
    layer = _dense(3, 2)
    layer.W.value[...] = 0.0
    assert np.all(layer.forward(np.ones((4, 3))) == 0.0)


def test_identity_dense_passes_input():
    layer = _dense(3, 3)
    layer.W.value[...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(layer.forward(x), x)


def test_forward_returns_all_activations_and_checks_dims():
    stack = tn.mlp([4, 5, 3], np.random.default_rng(0), "m", dtype=np.float64)
    acts = tn.forward(stack, np.zeros((2, 4)))
    assert len(acts) == len(stack.layers) + 1 and acts[-1].shape == (2, 3)
    with pytest.raises(ValueError):
        tn.forward(stack, np.zeros((2, 5)))


def test_softmax_symmetry():
    assert np.allclose(tn.softmax(np.zeros((1, 2))), [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(z):
    assert np.allclose(tn.softmax(z).sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(tn.softmax(z.astype(np.float32)).sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(tn.log_softmax(z), np.log(tn.softmax(z)))


def test_focal_values():
    post = np.array([[0.5, 0.5]])
    assert math.isclose(tn.focal_cross_entropy(post, [0], 2.0)[0], 0.25 * math.log(2), rel_tol=1e-12)
    assert math.isclose(tn.focal_cross_entropy(post, [0], 2.0)[0], 0.17329, abs_tol=1e-5)
    assert math.isclose(tn.focal_cross_entropy(post, [0], 0.0)[0], 0.69315, abs_tol=1e-5)
    assert tn.focal_cross_entropy(np.array([[1.0, 0.0]]), [0], 2.0)[0] == 0.0
    with pytest.raises(IndexError):
        tn.focal_cross_entropy(post, [2], 2.0)


def test_dropout_identity_in_eval_and_scaled_in_train():
    d = tn.Dropout(0.1, np.random.default_rng(0))
    x = np.ones((2000, 10))
    assert d.forward(x, train=False) is x
    y = d.forward(x, train=True)
    assert set(np.unique(y)) <= {0.0, 1 / 0.9}
    assert abs(y.mean() - 1.0) < 0.02


@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_gradient_check_mlp_with_focal_loss(gamma):
    rng = np.random.default_rng(5)
    emb = tn.Embedding(6, 3, rng, "e", np.float64)
    stack = tn.mlp([3 + 4, 8, 5], rng, "m", dtype=np.float64)
    x = rng.normal(size=(9, 4))
    idx = rng.integers(0, 4, 9)  # rows 4 and 5 unused
    y = rng.integers(0, 5, 9)

    def loss_fn():
        emb.table.zero_grad()
        for p in stack.params():
            p.zero_grad()
        h = np.concatenate([emb.forward(idx), x], axis=1)
        logits = stack.forward(h)
        loss, g = tn.focal_cross_entropy(tn.softmax(logits), y, gamma)
        gin = stack.backward(g)
        emb.backward(gin[:, :3])
        return loss

    params = [emb.table, *stack.params()]
    assert tn.gradient_check(params, loss_fn, eps=1e-5, n_coords=30) < 1e-4
    assert np.all(emb.table.grad[4:] == 0.0)


def test_gradient_check_dropout_with_fixed_mask():
    layer = _dense(4, 3, seed=2)
    drop = tn.Dropout(0.5, None)
    x = np.random.default_rng(0).normal(size=(5, 4))
    y = np.array([0, 1, 2, 1, 0])

    def loss_fn():
        layer.W.zero_grad()
        layer.b.zero_grad()
        drop.rng = np.random.default_rng(9)  # same mask every call
        z = drop.forward(layer.forward(x), train=True)
        loss, g = tn.focal_cross_entropy(tn.softmax(z), y, 2.0)
        layer.backward(drop.backward(g))
        return loss

    assert tn.gradient_check(layer.params(), loss_fn, eps=1e-5) < 1e-4


def test_adam_zero_gradient_no_l2_is_noop():
    p = tn.Parameter("w", np.array([1.0, -2.0]))
    state = tn.OptimizerState(l2=0.0)
    tn.adam_step([p], state)
    assert np.array_equal(p.value, [1.0, -2.0])


def test_nadam_hand_step():
    # step 1, g = 1: m = 0.1, v = 0.001, v_hat = 1
    # m_hat = 0.9 * 0.1 / (1 - 0.81) + 0.1 * 1 / (1 - 0.9) = 0.473684... + 1
    p = tn.Parameter("w", np.array([1.0]))
    p.grad[...] = 1.0
    state = tn.OptimizerState(lr=5e-4, l2=0.0)
    tn.adam_step([p], state)
    m_hat = 0.09 / 0.19 + 1.0
    assert math.isclose(p.value[0], 1.0 - 5e-4 * m_hat / (1.0 + 1e-8), rel_tol=0, abs_tol=1e-15)
    assert p.value[0] < 1.0


def test_plain_adam_first_step_is_lr():
    p = tn.Parameter("w", np.array([0.0]))
    p.grad[...] = 3.0
    tn.adam_step([p], tn.OptimizerState(lr=1e-3, l2=0.0, nesterov=False))
    assert math.isclose(p.value[0], -1e-3, rel_tol=1e-6)


def test_adam_noise_is_seeded():
    out = []
    for _ in range(2):
        p = tn.Parameter("w", np.zeros(4))
        state = tn.OptimizerState(noise_variance=0.3, seed=3)
        for _ in range(3):
            tn.adam_step([p], state)
        out.append(p.value.copy())
    assert np.array_equal(out[0], out[1]) and np.any(out[0] != 0)


def test_adam_rejects_non_finite_gradient():
    p = tn.Parameter("layer.W", np.zeros(2))
    p.grad[0] = np.nan
    with pytest.raises(FloatingPointError, match="layer.W"):
        tn.adam_step([p], tn.OptimizerState())


def test_newbob():
    s = tn.NewbobState()
    tn.newbob_update(s, 0.3)
    assert s.lr == 5e-4
    tn.newbob_update(s, 0.3)
    assert math.isclose(s.lr, 4.4721e-4, rel_tol=1e-4)
    s = tn.NewbobState(lr=5e-6, initial=5e-4, best=0.1)
    tn.newbob_update(s, 0.2)
    assert s.lr == 5e-6


def test_overfit_loss_non_increasing():
    rng = np.random.default_rng(0)
    stack = tn.mlp([6, 16, 4], rng, "toy", dtype=np.float64)
    x = rng.normal(size=(10, 6))
    y = rng.integers(0, 4, 10)
    state = tn.OptimizerState(lr=1e-3, l2=0.0)
    losses = []
    for _ in range(200):
        for p in stack.params():
            p.zero_grad()
        loss, g = tn.focal_cross_entropy(tn.softmax(stack.forward(x, train=True)), y, 2.0)
        stack.backward(g)
        tn.adam_step(stack.params(), state)
        losses.append(loss)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.5 * losses[0]


def test_checkpoint_round_trip(tmp_path):
    arrays = {"b": np.arange(3.0), "a": np.eye(2, dtype=np.float32)}
    tn.save_checkpoint(tmp_path / "c.npz", arrays, {"stage": "mono", "epoch": 2, "lr": 5e-4})
    back, meta = tn.load_checkpoint(tmp_path / "c.npz")
    assert meta["epoch"] == 2 and list(back) == ["a", "b"]
    assert np.array_equal(back["a"], arrays["a"]) and back["a"].dtype == np.float32
