import numpy as np
import pytest

from src.network import NetSpec, ShapeError, Weights, backward, forward, jacobian


def _random_net(rng, widths=(3, 5, 4, 2)):
    spec = NetSpec(widths)
    return spec, Weights.initialize(spec, rng)


def test_netspec_rejects_too_few_or_empty_layers():
    with pytest.raises(ShapeError):
        NetSpec((3,))
    with pytest.raises(ShapeError):
        NetSpec((3, 0, 2))


def test_with_hidden_defaults_to_two_layers_of_at_least_16():
    assert NetSpec.with_hidden(3, 2).layer_widths == (3, 16, 16, 2)
    assert NetSpec.with_hidden(5, 2).layer_widths == (5, 20, 20, 2)
    assert NetSpec.with_hidden(5, 2, hidden=()).layer_widths == (5, 2)


def test_forward_keeps_single_and_batch_shapes():
    spec, w = _random_net(np.random.default_rng(0))
    single, _ = forward(spec, w, np.ones(3))
    batch, _ = forward(spec, w, np.ones((7, 3)))

    assert single.shape == (2,)
    assert batch.shape == (7, 2)
    np.testing.assert_allclose(batch[0], single)


def test_forward_rejects_wrong_input_width():
    spec, w = _random_net(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(spec, w, np.ones(4))


def test_last_layer_is_linear():
    spec = NetSpec((2, 3, 1))
    w = Weights((np.zeros((3, 2)), np.full((1, 3), 1.0)), (np.full(3, 10.0), np.array([0.5])))
    out, _ = forward(spec, w, np.zeros(2))
    # hidden units saturate at tanh(10); the output is their plain sum plus bias
    assert out[0] == pytest.approx(3 * np.tanh(10.0) + 0.5)


def test_flat_round_trip_and_wrong_size():
    spec, w = _random_net(np.random.default_rng(1))
    restored = Weights.from_flat(spec, w.flat())
    np.testing.assert_array_equal(restored.flat(), w.flat())
    with pytest.raises(ShapeError):
        Weights.from_flat(spec, w.flat()[:-1])


def test_backward_matches_finite_differences_on_100_random_cases():
    rng = np.random.default_rng(42)
    eps = 1e-6
    for _ in range(100):
        spec, w = _random_net(rng)
        x = rng.normal(size=(2, 3))
        c = rng.normal(size=(2, 2))

        def loss(weights, inputs):
            out, _ = forward(spec, weights, inputs)
            return float((c * out).sum())

        _, trace = forward(spec, w, x)
        grad_w, grad_x = backward(spec, w, trace, c)

        flat = w.flat()
        numeric_w = np.zeros_like(flat)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += eps
            minus[i] -= eps
            numeric_w[i] = (loss(Weights.from_flat(spec, plus), x) - loss(Weights.from_flat(spec, minus), x)) / (2 * eps)
        np.testing.assert_allclose(grad_w.flat(), numeric_w, rtol=1e-4, atol=1e-7)

        numeric_x = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus, minus = x.copy(), x.copy()
            plus[idx] += eps
            minus[idx] -= eps
            numeric_x[idx] = (loss(w, plus) - loss(w, minus)) / (2 * eps)
        np.testing.assert_allclose(grad_x, numeric_x, rtol=1e-4, atol=1e-7)


def test_backward_without_weights_returns_only_input_gradient():
    spec, w = _random_net(np.random.default_rng(2))
    _, trace = forward(spec, w, np.ones(3))
    grad_w, grad_x = backward(spec, w, trace, np.ones(2), need_weights=False)
    assert grad_w is None
    assert grad_x.shape == (3,)


def test_backward_rejects_trace_from_other_network():
    rng = np.random.default_rng(3)
    spec, w = _random_net(rng)
    other_spec, other_w = _random_net(rng, (3, 6, 2))
    _, trace = forward(other_spec, other_w, np.ones(3))
    with pytest.raises(ShapeError):
        backward(spec, w, trace, np.ones(2))


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    spec, w = _random_net(rng)
    x = rng.normal(size=3)
    eps = 1e-6

    jac = jacobian(spec, w, x, [0, 1], [0, 2])

    numeric = np.zeros((2, 2))
    for col, j in enumerate([0, 2]):
        plus, minus = x.copy(), x.copy()
        plus[j] += eps
        minus[j] -= eps
        numeric[:, col] = (forward(spec, w, plus)[0] - forward(spec, w, minus)[0]) / (2 * eps)
    np.testing.assert_allclose(jac, numeric, rtol=1e-4, atol=1e-8)


def test_jacobian_rejects_out_of_range_channels():
    spec, w = _random_net(np.random.default_rng(5))
    with pytest.raises(ShapeError):
        jacobian(spec, w, np.zeros(3), [2], [0])
    with pytest.raises(ShapeError):
        jacobian(spec, w, np.zeros(3), [0], [])
