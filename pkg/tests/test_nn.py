import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hipode.nn import (
    AdamState,
    LossTrace,
    Mlp,
    NonFiniteError,
    adam_step,
    backward,
    forward,
    load_checkpoint,
    max_relative_error,
    numerical_gradient,
    save_checkpoint,
)


def loop_forward(model, x):
    """Reference forward pass with explicit Python loops."""
    h = list(x)
    n_layers = len(model.weights)
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        out = []
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, j]
            if layer < n_layers - 1:
                acc = max(acc, 0.0) if model.hidden_activation == "relu" else np.tanh(acc)
            elif model.output_activation == "tanh":
                acc = np.tanh(acc)
            out.append(acc)
        h = out
    return np.array(h)


def test_zero_net_outputs_zero():
    model = Mlp([3, 5, 2], [np.zeros((3, 5)), np.zeros((5, 2))], [np.zeros(5), np.zeros(2)])
    assert np.array_equal(forward(model, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_layer():
    model = Mlp([3, 3], [np.eye(3)], [np.zeros(3)])
    x = np.array([[0.5, -1.5, 2.0]])
    assert np.array_equal(model.forward(x), x)


@pytest.mark.parametrize("hidden,out", [("relu", "identity"), ("tanh", "tanh"), ("relu", "tanh")])
def test_forward_matches_loop_oracle(hidden, out):
    rng = np.random.default_rng(3)
    model = Mlp.init([3, 4, 2], rng, hidden, out)
    for x in rng.normal(size=(5, 3)):
        np.testing.assert_allclose(model.forward(x), loop_forward(model, x), rtol=1e-12, atol=1e-14)


def test_frozen_3_4_2_output():
    # loop-oracle value for this seed, frozen
    model = Mlp.init([3, 4, 2], np.random.default_rng(0))
    x = np.array([0.1, -0.2, 0.3])
    expected = loop_forward(model, x)
    np.testing.assert_allclose(model.forward(x), expected, rtol=1e-12)
    np.testing.assert_allclose(expected, [0.11015059985081768, -0.21250470712623504], atol=1e-12)


def test_init_bounds():
    model = Mlp.init([16, 8, 1], np.random.default_rng(0))
    assert np.all(np.abs(model.weights[0]) <= 0.25)
    assert np.all(np.abs(model.weights[1]) <= 1 / np.sqrt(8))
    assert all(p.dtype == np.float64 for p in model.parameters())


def test_zero_output_grad_gives_zero_grads(rng):
    model = Mlp.init([3, 4, 2], rng)
    grads, gin = backward(model, rng.normal(size=(6, 3)), np.zeros((6, 2)))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gin == 0)


def test_linear_layer_weight_grad_equals_input():
    model = Mlp.init([3, 1], np.random.default_rng(1))
    x = np.array([[0.2, -0.7, 1.1]])
    grads, _ = backward(model, x, np.ones((1, 1)))
    np.testing.assert_allclose(grads[0][:, 0], x[0])
    np.testing.assert_allclose(grads[1], [1.0])


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("hidden,out", [("relu", "identity"), ("tanh", "tanh")])
def test_backward_matches_finite_differences(seed, hidden, out):
    rng = np.random.default_rng(seed)
    model = Mlp.init([3, 5, 4, 2], rng, hidden, out)
    x = rng.normal(size=(4, 3))
    upstream = rng.normal(size=(4, 2))
    loss = lambda: float(np.sum(model.forward(x) * upstream))  # noqa: E731
    analytic, _ = backward(model, x, upstream)
    numeric = numerical_gradient(loss, model.parameters())
    assert max_relative_error(analytic, numeric) < 1e-4


def test_input_grad_matches_finite_differences(rng):
    model = Mlp.init([3, 6, 2], rng, "tanh")
    x = rng.normal(size=(2, 3))
    upstream = rng.normal(size=(2, 2))
    _, analytic = backward(model, x, upstream)
    numeric = numerical_gradient(lambda: float(np.sum(model.forward(x) * upstream)), [x])
    assert max_relative_error([analytic], numeric) < 1e-4


def test_adam_first_step_moves_by_lr():
    model = Mlp.init([2, 3, 1], np.random.default_rng(0))
    before = [p.copy() for p in model.parameters()]
    state = AdamState.for_model(model, 1e-3)
    adam_step(model, [np.ones_like(p) for p in model.parameters()], state)
    for b, p in zip(before, model.parameters()):
        # m_hat = v_hat = 1, so the step is lr / (1 + eps)
        np.testing.assert_allclose(b - p, 1e-3 / (1 + 1e-8), rtol=1e-9)
    assert state.step_count == 1


def test_adam_zero_grad_leaves_params():
    model = Mlp.init([2, 3, 1], np.random.default_rng(0))
    before = [p.copy() for p in model.parameters()]
    state = AdamState.for_model(model)
    adam_step(model, [np.zeros_like(p) for p in model.parameters()], state)
    assert all(np.array_equal(b, p) for b, p in zip(before, model.parameters()))
    assert state.step_count == 1


def test_adam_two_identical_steps():
    model = Mlp.init([2, 1], np.random.default_rng(0))
    state = AdamState.for_model(model, 1e-2)
    g = [np.full_like(p, 0.3) for p in model.parameters()]
    p0 = model.weights[0].copy()
    adam_step(model, g, state)
    p1 = model.weights[0].copy()
    adam_step(model, g, state)
    first, second = np.abs(p0 - p1), np.abs(p1 - model.weights[0])
    # with a constant gradient both bias-corrected moments equal g, so steps are equal
    assert np.all(second <= first + 1e-12)
    np.testing.assert_allclose(second, first, rtol=1e-6)


def test_adam_refuses_non_finite():
    model = Mlp.init([2, 1], np.random.default_rng(0))
    grads = [np.full_like(p, np.nan) for p in model.parameters()]
    with pytest.raises(NonFiniteError):
        adam_step(model, grads, AdamState.for_model(model))


def test_checkpoint_round_trip(tmp_path, rng):
    a = Mlp.init([3, 4, 2], rng, "tanh", "tanh")
    b = Mlp.init([2, 1], rng)
    save_checkpoint(tmp_path / "m.npz", {"a": a, "b": b}, {"note": "x"})
    nets, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta == {"note": "x"}
    x = rng.normal(size=(5, 3))
    assert np.array_equal(nets["a"].forward(x), a.forward(x))
    assert nets["a"].output_activation == "tanh"


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", w=np.zeros(3))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")


def test_shape_mismatch_rejected(rng):
    model = Mlp.init([3, 2], rng)
    with pytest.raises(ValueError):
        model.forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        Mlp([3, 2], [np.zeros((2, 3))], [np.zeros(2)])


def test_loss_trace_raises_on_divergence():
    trace = LossTrace()
    trace.append(1.0)
    with pytest.raises(NonFiniteError):
        trace.append(float("inf"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_soft_update_interpolates(seed, tau):
    rng = np.random.default_rng(seed)
    a, b = Mlp.init([2, 3, 1], rng), Mlp.init([2, 3, 1], rng)
    expected = [(1 - tau) * p + tau * q for p, q in zip(a.parameters(), b.parameters())]
    a.soft_update_(b, tau)
    for e, p in zip(expected, a.parameters()):
        np.testing.assert_allclose(p, e, rtol=1e-12, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_batch_forward_equals_rowwise(seed, rows):
    rng = np.random.default_rng(seed)
    model = Mlp.init([2, 4, 3], rng)
    x = rng.normal(size=(rows, 2))
    batch = model.forward(x)
    for i in range(rows):
        np.testing.assert_allclose(batch[i], model.forward(x[i]), rtol=1e-12)
