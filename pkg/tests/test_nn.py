import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codex_ensemble import nn
from codex_ensemble.errors import EmptyDataset, ShapeMismatch
from codex_ensemble.metrics import micro_f1


def loss_of(model, X, T, loss, masks_from=None):
    """Loss with the dropout masks of a recorded forward pass (None: inference)."""
    a = X
    for layer, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        if layer < len(model.weights) - 1:
            a = np.maximum(z, 0.0)
            if masks_from is not None and masks_from[layer] is not None:
                a = a * masks_from[layer]
        else:
            a = nn.sigmoid(z) if model.spec.output_activation == "sigmoid" else z
    return nn.LOSSES[loss](a, T)


def fd_gradients(model, X, T, loss, masks, h=1e-5):
    grads = []
    for p in model.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss_of(model, X, T, loss, masks)
            p[i] = old - h
            down = loss_of(model, X, T, loss, masks)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def check_gradients(spec, seed, loss, n=3, training=True):
    rng = np.random.default_rng(seed)
    model = nn.init_mlp(spec, seed, dtype=np.float64)
    # random biases keep pre-activations off the ReLU kink at exactly 0
    for b in model.biases:
        b[:] = rng.normal(scale=0.5, size=b.shape)
    X = rng.normal(size=(n, spec.input_dim))
    if loss == "bce":
        T = (rng.random((n, spec.output_dim)) < 0.5).astype(float)
    else:
        T = rng.normal(size=(n, spec.output_dim))
    out, cache = nn.forward(model, X, training=training, dropout_seed=seed)
    gW, gb = nn.backward(model, cache, T, loss)
    analytic = [g for pair in zip(gW, gb) for g in pair]
    numeric = fd_gradients(model, X, T, loss, cache.masks)
    return max(rel_error(a, b) for a, b in zip(analytic, numeric))


def test_gradients_5_7_4():
    spec = nn.NetworkSpec(5, (7,), 4, (0.3,))
    assert check_gradients(spec, 0, "bce") <= 1e-4
    spec = nn.NetworkSpec(5, (7,), 4, (0.3,), output_activation="identity")
    assert check_gradients(spec, 1, "mse") <= 1e-4


@settings(max_examples=20, deadline=None)
@given(st.data())
def test_gradients_random_specs(data):
    hidden = tuple(data.draw(st.lists(st.integers(1, 16), min_size=0, max_size=3)))
    rates = tuple(data.draw(st.lists(st.sampled_from([0.0, 0.25, 0.5]), min_size=len(hidden), max_size=len(hidden))))
    act, loss = data.draw(st.sampled_from([("sigmoid", "bce"), ("identity", "mse"), ("sigmoid", "mse")]))
    spec = nn.NetworkSpec(data.draw(st.integers(1, 16)), hidden, data.draw(st.integers(1, 16)), rates, act)
    assert check_gradients(spec, data.draw(st.integers(0, 10_000)), loss) <= 1e-4


def test_zero_input_bias_gradient():
    spec = nn.NetworkSpec(3, (), 2, (), "identity")
    model = nn.init_mlp(spec, 0, dtype=np.float64)
    model.biases[0][:] = [0.5, -2.0]
    X = np.zeros((4, 3))
    _, cache = nn.forward(model, X)
    gW, gb = nn.backward(model, cache, np.zeros((4, 2)), "mse")
    # L = mean_j b_j^2 over identical rows -> dL/db_j = 2 b_j / n_out
    np.testing.assert_allclose(gb[0], [0.5, -2.0])
    assert np.all(gW[0] == 0)


def test_duplicated_sample_same_gradient():
    spec = nn.NetworkSpec(4, (6,), 3)
    model = nn.init_mlp(spec, 2, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(1, 4))
    t = np.array([[1.0, 0.0, 1.0]])
    g1 = nn.backward(model, nn.forward(model, x)[1], t)
    g2 = nn.backward(model, nn.forward(model, np.vstack([x, x]))[1], np.vstack([t, t]))
    for a, b in zip(g1[0] + g1[1], g2[0] + g2[1]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_init_shapes_bounds_and_determinism():
    spec = nn.NetworkSpec(10, (5,), 3, (0.3,))
    m1, m2 = nn.init_mlp(spec, 42), nn.init_mlp(spec, 42)
    assert [w.shape for w in m1.weights] == [(5, 10), (3, 5)]
    assert [b.shape for b in m1.biases] == [(5,), (3,)]
    for a, b in zip(m1.params(), m2.params()):
        assert np.array_equal(a, b)
    big = nn.init_mlp(nn.NetworkSpec(300, (200,), 100), 3)
    for w in big.weights:
        fan_out, fan_in = w.shape
        assert np.abs(w).max() <= np.float32(np.sqrt(6 / (fan_in + fan_out)))
    assert all(np.all(b == 0) for b in big.biases)


def test_forward_modes():
    spec = nn.NetworkSpec(6, (8,), 3, (0.3,))
    model = nn.init_mlp(spec, 0)
    X = np.random.default_rng(0).normal(size=(5, 6))
    a = nn.forward(model, X, training=False, dropout_seed=1)[0]
    b = nn.forward(model, X, training=False, dropout_seed=2)[0]
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))
    no_drop = nn.init_mlp(nn.NetworkSpec(6, (8,), 3, (0.0,)), 0)
    assert np.array_equal(nn.forward(no_drop, X, training=True, dropout_seed=5)[0],
                          nn.forward(no_drop, X, training=False)[0])
    with pytest.raises(ShapeMismatch):
        nn.forward(model, np.zeros((2, 5)))


def test_dropout_expectation_matches_inference():
    spec = nn.NetworkSpec(4, (6,), 2, (0.3,))
    model = nn.init_mlp(spec, 1, dtype=np.float64)
    x = np.array([[0.5, -1.0, 2.0, 0.3]])
    X = np.repeat(x, 20000, axis=0)
    _, cache = nn.forward(model, X, training=True, dropout_seed=0)
    hidden_train = cache.inputs[1].mean(axis=0)
    _, inf_cache = nn.forward(model, x, training=False)
    hidden_inf = inf_cache.inputs[1][0]
    active = hidden_inf > 1e-6
    assert np.all(np.abs(hidden_train[active] - hidden_inf[active]) <= 0.02 * hidden_inf[active])
    assert np.all(hidden_train[~active] == 0)


def test_losses():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert nn.bce_loss(t, t) <= 1.2e-7
    assert nn.bce_loss(np.full((2, 2), 0.5), t) == pytest.approx(np.log(2), abs=1e-12)
    assert nn.bce_loss([[0.0]], [[1.0]]) == pytest.approx(-np.log(1e-7))
    assert nn.mse_loss([1, 2], [1, 2]) == 0.0
    assert nn.mse_loss([0], [1]) == 1.0
    assert nn.mse_loss([1, 3], [0, 0]) == 5.0
    with pytest.raises(ShapeMismatch):
        nn.mse_loss([1, 2], [1])


def test_adam_first_step_magnitude_and_zero_grad():
    spec = nn.NetworkSpec(3, (), 2, ())
    cfg = nn.TrainConfig(learning_rate=1e-2)
    model = nn.init_mlp(spec, 0, dtype=np.float64)
    before = [p.copy() for p in model.params()]
    g = ([np.array([[0.3, -2.0, 1e-3], [5.0, -0.1, 0.7]])], [np.array([0.2, -0.4])])
    nn.adam_step(model, g, nn.AdamState.for_model(model), cfg)
    flat = [g[0][0], g[1][0]]
    for p0, p1, gg in zip(before, model.params(), flat):
        expected = -cfg.learning_rate * gg / (np.abs(gg) + cfg.epsilon)
        np.testing.assert_allclose(p1 - p0, expected, rtol=1e-6)
    state = nn.AdamState.for_model(model)
    snap = [p.copy() for p in model.params()]
    zero = ([np.zeros((2, 3))], [np.zeros(2)])
    for _ in range(5):
        nn.adam_step(model, zero, state, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(snap, model.params()))
    assert state.step == 5


def separable_toy(n=100, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    X += np.sign(X) * 0.3
    Y = (X > 0).astype(float)
    return X, Y


def test_train_separable_toy():
    X, Y = separable_toy(100, 0)
    Xd, Yd = separable_toy(100, 1)
    model = nn.init_mlp(nn.NetworkSpec(2, (8,), 2, (0.0,)), 0)
    cfg = nn.TrainConfig(batch_size=16, learning_rate=0.05, max_epochs=50, patience=50)
    best, hist = nn.train(model, X, Y, Xd, Yd, cfg)
    assert micro_f1(best.predict(Xd), Yd) >= 0.95
    assert len(hist["epochs"]) <= 50


def test_train_patience_zero_stops_after_one_epoch():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(64, 3))
    model = nn.init_mlp(nn.NetworkSpec(3, (4,), 1), 0)
    cfg = nn.TrainConfig(batch_size=64, learning_rate=0.05, max_epochs=20, patience=0)
    best, hist = nn.train(model, X, np.ones((64, 1)), X, np.zeros((64, 1)), cfg)
    assert len(hist["epochs"]) == 1
    assert all(np.array_equal(a, b) for a, b in zip(best.params(), model.params()))


def test_convex_loss_strictly_decreases():
    X, Y = separable_toy(200, 3)
    model = nn.init_mlp(nn.NetworkSpec(2, (), 2, ()), 0, dtype=np.float64)
    cfg = nn.TrainConfig(batch_size=200, learning_rate=1e-3, max_epochs=40)
    _, hist = nn.train(model, X, Y, config=cfg)
    losses = [e["train_loss"] for e in hist["epochs"]]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_deterministic_and_empty():
    X, Y = separable_toy(120, 4)
    spec = nn.NetworkSpec(2, (8,), 2, (0.3,))
    cfg = nn.TrainConfig(batch_size=32, max_epochs=5, seed=9)
    a, _ = nn.train(nn.init_mlp(spec, 0), X, Y, X, Y, cfg)
    b, _ = nn.train(nn.init_mlp(spec, 0), X, Y, X, Y, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    with pytest.raises(EmptyDataset):
        nn.train(nn.init_mlp(spec, 0), np.zeros((0, 2)), np.zeros((0, 2)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_save_load_bit_exact(tmp_path, dtype):
    spec = nn.NetworkSpec(7, (5, 4), 3, (0.3, 0.25), "identity")
    model = nn.init_mlp(spec, 11, dtype=dtype)
    for b in model.biases:
        b[:] = np.random.default_rng(0).normal(size=b.shape)
    path = tmp_path / "m.nn"
    nn.save_model(model, path, {"config_hash": "abc"})
    loaded, meta = nn.load_model(path)
    assert meta == {"config_hash": "abc"}
    assert loaded.spec == spec
    for a, b in zip(model.params(), loaded.params()):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    nn.save_model(loaded, tmp_path / "again.nn", {"config_hash": "abc"})
    assert (tmp_path / "again.nn").read_bytes() == path.read_bytes()
