import math

import numpy as np
import pytest

from app.services.tensor_autodiff import (
    Adam,
    AdamConfig,
    AdamState,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    adam_step,
    add,
    backward,
    concat,
    conv2d,
    cross_entropy,
    flatten,
    gradient_check,
    linear,
    maxpool2,
    mean_all,
    mul,
    precision,
    relu,
    scale,
    softmax,
    split,
    sum_all,
    take_rows,
    tanh,
)

TOL = 1e-5


def _param(shape, seed, name, low=-1.0, high=1.0):
    rng = np.random.default_rng(seed)
    return Parameter(rng.uniform(low, high, size=shape), name=name)


def test_add_mul_scale_gradients():
    with precision(np.float64):
        a, b = _param((3, 4), 0, "a"), _param((3, 4), 1, "b")
        loss = lambda: sum_all(mul(add(a.value, b.value), scale(b.value, 0.5)))  # noqa: E731
        assert gradient_check(loss, [a, b]) < TOL


def test_linear_gradients():
    with precision(np.float64):
        x, w, b = _param((5, 3), 0, "x"), _param((3, 4), 1, "w"), _param((4,), 2, "b")
        loss = lambda: sum_all(tanh(linear(x.value, w.value, b.value)))  # noqa: E731
        assert gradient_check(loss, [x, w, b]) < TOL


def test_conv2d_gradients():
    with precision(np.float64):
        x = _param((2, 2, 6, 6), 0, "x")
        k = _param((3, 2, 3, 3), 1, "k")
        b = _param((3,), 2, "b")
        loss = lambda: sum_all(tanh(conv2d(x.value, k.value, b.value)))  # noqa: E731
        assert gradient_check(loss, [x, k, b]) < TOL


def test_conv2d_literal_outputs():
    with precision(np.float64):
        ones = conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 5, 5))), Tensor(np.zeros(1)))
        np.testing.assert_allclose(ones.data, [[[[25.0]]]])

        x = np.arange(36, dtype=np.float64).reshape(1, 1, 6, 6)
        delta = np.zeros((1, 1, 5, 5))
        delta[0, 0, 2, 2] = 1.0
        crop = conv2d(Tensor(x), Tensor(delta), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(crop.data[0, 0], x[0, 0, 2:4, 2:4])

        biased = conv2d(Tensor(x), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.array([0.5, -1.5])))
        assert biased.shape == (1, 2, 4, 4)
        np.testing.assert_array_equal(biased.data[0, 0], np.full((4, 4), 0.5))
        np.testing.assert_array_equal(biased.data[0, 1], np.full((4, 4), -1.5))


def test_conv2d_shape_checks():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((3, 1, 3, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((3, 2, 5, 5))), Tensor(np.zeros(3)))


def test_maxpool_gradients_with_separated_values():
    with precision(np.float64):
        # a permutation keeps every window's maximum at least 1 apart from its runner-up
        values = np.random.default_rng(0).permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4).astype(np.float64)
        x = Parameter(values, name="x")
        loss = lambda: sum_all(mul(maxpool2(x.value), maxpool2(x.value)))  # noqa: E731
        assert gradient_check(loss, [x]) < TOL


def test_maxpool_ties_route_to_first_element():
    x = Parameter(np.ones((1, 1, 2, 2)), name="x")
    with Tape() as tape:
        loss = sum_all(maxpool2(x.value))
    backward(loss, tape)
    np.testing.assert_array_equal(x.gradient[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_rejects_odd_sizes():
    with pytest.raises(ShapeError):
        maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_relu_gradient_away_from_kink():
    with precision(np.float64):
        values = np.array([[-2.0, -0.5, 0.7], [1.3, -1.1, 2.2]])
        x = Parameter(values, name="x")
        loss = lambda: sum_all(mul(relu(x.value), x.value))  # noqa: E731
        assert gradient_check(loss, [x]) < TOL


def test_take_rows_accumulates_repeated_indices():
    x = Parameter(np.arange(6.0).reshape(3, 2), name="x")
    with Tape() as tape:
        loss = sum_all(take_rows(x.value, [0, 2, 0]))
    backward(loss, tape)
    np.testing.assert_array_equal(x.gradient, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_concat_split_and_flatten_gradients():
    with precision(np.float64):
        a, b = _param((3, 2), 0, "a"), _param((3, 4), 1, "b")

        def loss():
            left, right = split(concat(a.value, b.value), 3)
            return add(sum_all(mul(left, left)), sum_all(tanh(right)))

        assert gradient_check(loss, [a, b]) < TOL
        c = _param((2, 1, 2, 2), 2, "c")
        assert gradient_check(lambda: sum_all(mul(flatten(c.value), flatten(c.value))), [c]) < TOL


def test_softmax_cross_entropy_gradients_through_logits():
    with precision(np.float64):
        z = _param((4, 5), 0, "z", -2, 2)
        labels = np.array([0, 3, 4, 1])
        assert gradient_check(lambda: cross_entropy(softmax(z.value), labels), [z]) < TOL


def test_cross_entropy_on_supplied_probabilities():
    with precision(np.float64):
        p = Parameter(np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]), name="p")
        labels = [1, 0]
        loss = cross_entropy(p.value, labels)
        assert loss.item() == pytest.approx(-(math.log(0.5) + math.log(0.6)) / 2)
        assert gradient_check(lambda: cross_entropy(p.value, labels), [p]) < TOL


def test_softmax_of_zeros_is_uniform():
    p = softmax(Tensor(np.zeros((3, 4))))
    np.testing.assert_allclose(p.data, np.full((3, 4), 0.25), rtol=1e-6)


def test_cross_entropy_of_zero_logits_is_log_k():
    loss = cross_entropy(softmax(Tensor(np.zeros((3, 4)))), [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4), rel=1e-6)


def test_cross_entropy_rejects_bad_labels():
    p = softmax(Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        cross_entropy(p, [0, 3])
    with pytest.raises(ShapeError):
        cross_entropy(p, [0])


def test_backward_twice_on_same_tape_fails():
    w = Parameter(np.ones(3), name="w")
    with Tape() as tape:
        loss = sum_all(mul(w.value, w.value))
    backward(loss, tape)
    with pytest.raises(TapeError):
        backward(loss, tape)


def test_backward_needs_scalar_loss():
    w = Parameter(np.ones(3), name="w")
    with Tape() as tape:
        out = mul(w.value, w.value)
    with pytest.raises(TapeError):
        backward(out, tape)


def test_unreached_parameters_get_zero_gradient():
    w = Parameter(np.ones(2), name="w")
    unused = Parameter(np.ones(2), name="unused")
    unused.gradient = np.full(2, 7.0)
    with Tape() as tape:
        loss = mean_all(mul(w.value, w.value))
    backward(loss, tape, [w, unused])
    np.testing.assert_array_equal(unused.gradient, np.zeros(2))
    np.testing.assert_allclose(w.gradient, [1.0, 1.0])


def test_no_recording_without_active_tape():
    w = Parameter(np.ones(2), name="w")
    out = mul(w.value, w.value)
    with Tape() as tape:
        pass
    assert len(tape) == 0
    assert out.data.tolist() == [1.0, 1.0]


def test_frozen_parameters_are_not_recorded():
    w = Parameter(np.ones(2), name="w", trainable=False)
    v = Parameter(np.ones(2), name="v")
    with Tape() as tape:
        loss = sum_all(mul(w.value, v.value))
    backward(loss, tape)
    assert list(tape.parameters.values()) == [v]


def test_adam_first_step_moves_by_learning_rate():
    cfg = AdamConfig(lr=0.1)
    p = Parameter(np.array([1.0, -2.0, 3.0]), name="p")
    p.gradient = np.array([0.5, -4.0, 0.0])
    states = {}
    adam_step([p], states, cfg)
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.value.data, [0.9, -1.9, 3.0], rtol=1e-6)
    assert states["p"].t == 1


def test_adam_constant_gradient_moves_lr_per_step():
    cfg = AdamConfig(lr=0.01)
    with precision(np.float64):
        p = Parameter(np.array([1.0, -1.0]), name="p")
        states = {}
        previous = p.value.data.copy()
        for _ in range(25):
            p.gradient = np.array([2.0, -0.3])
            adam_step([p], states, cfg)
            # bias correction makes m_hat = g and v_hat = g^2 exactly
            np.testing.assert_allclose(previous - p.value.data, [0.01, -0.01], rtol=1e-6)
            previous = p.value.data.copy()
    assert states["p"].t == 25


def test_adam_skips_frozen_parameters():
    p = Parameter(np.ones(2), name="p", trainable=False)
    p.gradient = np.ones(2)
    adam_step([p], {}, AdamConfig())
    np.testing.assert_array_equal(p.value.data, np.ones(2))


def test_adam_rejects_bad_config_and_state():
    with pytest.raises(ValueError):
        AdamConfig(lr=0.0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
    p = Parameter(np.ones(2), name="p")
    with pytest.raises(ShapeError):
        adam_step([p], {"p": AdamState(np.zeros(3), np.zeros(3))}, AdamConfig())


def test_adam_minimize_decreases_quadratic():
    w = Parameter(np.array([3.0, -2.0]), name="w")
    opt = Adam([w], AdamConfig(lr=0.1))
    losses = []
    for _ in range(50):
        with Tape() as tape:
            loss = sum_all(mul(w.value, w.value))
        losses.append(opt.minimize(loss, tape))
    assert losses[-1] < 0.1 * losses[0]


def test_precision_switches_tensor_dtype():
    assert Tensor([1.0]).data.dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
