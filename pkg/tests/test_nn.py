"""Tests for the numpy network: losses, forward pass, gradients and the parameter layout."""

import math

import numpy as np
import pytest

from simulation.errors import LabError, ShapeError
from simulation.nn import (
    Batch,
    Conv2D,
    Dense,
    FlatParams,
    FlatUpdate,
    Flatten,
    LossWeights,
    MaxPool,
    ModelSpec,
    ReLU,
    count_params,
    cross_entropy,
    default_cnn,
    finite_diff_grad,
    flatten,
    forward,
    forward_activations,
    grad,
    grad_wrt_logits,
    infer_shapes,
    init_params,
    kd_loss,
    layer_from_dict,
    layer_to_dict,
    max_relative_error,
    param_layout,
    sgd_step,
    softmax,
    unflatten,
    zero_params,
)
from simulation.rng import RngStream


def _as_float64(params):
    return FlatParams(params.values.astype(np.float64), params.layout)


def _kink_margin(model, params, inputs):
    """Distance of the forward pass from the nearest ReLU or max-pool switch."""
    acts = forward_activations(model, params, inputs)
    margin = np.inf
    for i, layer in enumerate(model.layers):
        x = inputs if i == 0 else acts[i - 1]
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(x).min()))
        elif isinstance(layer, MaxPool):
            b, c, h, w = x.shape
            s = layer.size
            blocks = (
                x[:, :, :h // s * s, :w // s * s]
                .reshape(b, c, h // s, s, w // s, s)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(-1, s * s)
            )
            top = np.sort(blocks, axis=1)
            live = top[:, -1] > 0
            if live.any():
                margin = min(margin, float((top[live, -1] - top[live, -2]).min()))
    return margin


class TestCrossEntropy:

    def test_uniform_logits_give_log_num_classes(self):
        assert cross_entropy(np.zeros((1, 10)), np.array([3])) == pytest.approx(math.log(10), abs=1e-6)

    def test_saturated_label_is_nearly_free(self):
        logits = np.zeros((1, 10))
        logits[0, 4] = 50.0
        assert cross_entropy(logits, np.array([4])) < 1e-9

    def test_hand_evaluated_value(self):
        assert cross_entropy(np.array([[2.0, 0.0, -1.0]]), np.array([0])) == pytest.approx(0.16984602, abs=1e-8)

    def test_label_out_of_range_is_rejected(self):
        with pytest.raises(LabError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))

    def test_label_count_must_match_rows(self):
        with pytest.raises(ShapeError):
            cross_entropy(np.zeros((2, 3)), np.array([0]))


class TestKdLoss:

    def test_identical_logits_give_zero(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        assert kd_loss(x, x, 2.0) == pytest.approx(0.0, abs=1e-7)

    def test_shift_invariance(self):
        teacher = np.zeros((2, 4))
        assert kd_loss(teacher + 3.0, teacher, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_two_class_value(self):
        # KL(softmax([1,0]) || softmax([0,1])) = (e - 1) / (e + 1)
        expected = (math.e - 1.0) / (math.e + 1.0)
        assert kd_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.46211716, abs=1e-8)

    def test_temperature_scales_by_square(self):
        student = np.array([[0.0, 1.0]])
        teacher = np.array([[2.0, 0.0]])
        t = 2.0
        q = softmax(teacher / t)[0]
        p = softmax(student / t)[0]
        expected = t * t * float(np.sum(q * np.log(q / p)))
        assert kd_loss(student, teacher, t) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("temperature", [0.0, -1.0])
    def test_non_positive_temperature_is_rejected(self, temperature):
        with pytest.raises(LabError):
            kd_loss(np.zeros((1, 2)), np.zeros((1, 2)), temperature)


class TestForward:

    def test_zero_weights_give_zero_logits(self, dense_model):
        logits = forward(dense_model, zero_params(dense_model), np.array([[1.0, -2.0, 3.0]], dtype=np.float32))
        np.testing.assert_array_equal(logits, np.zeros((1, 3)))

    def test_identity_dense_layer(self, dense_model):
        params = FlatParams(np.concatenate([np.eye(3).ravel(), np.zeros(3)]).astype(np.float32),
                            param_layout(dense_model))
        v = np.array([[0.5, -1.5, 2.0]], dtype=np.float32)
        np.testing.assert_array_equal(forward(dense_model, params, v), v)

    def test_two_layer_hand_computed(self):
        model = ModelSpec((Dense(2), ReLU(), Dense(2)), (2,), 2)
        w1 = [1.0, 0.0, 1.0, -1.0]
        b1 = [0.0, 0.5]
        w2 = [2.0, 1.0, 0.0, 3.0]
        b2 = [1.0, 1.0]
        params = FlatParams(np.array(w1 + b1 + w2 + b2, dtype=np.float32), param_layout(model))
        # hidden = relu([1, 1 - 2 + 0.5]) = [1, 0]; out = [2 + 1, 0 + 1]
        np.testing.assert_array_equal(forward(model, params, np.array([[1.0, 2.0]], dtype=np.float32)),
                                      [[3.0, 1.0]])

    def test_shape_mismatch_is_rejected(self, tiny_cnn):
        params = init_params(tiny_cnn, RngStream.root(0))
        with pytest.raises(ShapeError, match="does not match"):
            forward(tiny_cnn, params, np.zeros((2, 1, 5, 6), dtype=np.float32))

    def test_repeated_calls_are_bit_identical(self, tiny_cnn):
        params = init_params(tiny_cnn, RngStream.root(1))
        x = np.random.default_rng(1).uniform(size=(5, 1, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(forward(tiny_cnn, params, x), forward(tiny_cnn, params, x))

    def test_activations_align_with_layers(self, tiny_cnn):
        params = init_params(tiny_cnn, RngStream.root(2))
        acts = forward_activations(tiny_cnn, params, np.ones((2, 1, 6, 6), dtype=np.float32))
        assert [a.shape[1:] for a in acts] == infer_shapes(tiny_cnn)[1:]


class TestModelSpec:

    def test_default_cnn_shapes(self):
        model = default_cnn((1, 28, 28), 10)
        assert infer_shapes(model)[-1] == (10,)
        assert infer_shapes(model)[7] == (512,)

    def test_default_cnn_rejects_small_inputs(self):
        with pytest.raises(ShapeError):
            default_cnn((1, 12, 12), 10)

    def test_output_must_match_num_classes(self):
        with pytest.raises(ShapeError, match="num_classes"):
            ModelSpec((Flatten(), Dense(4)), (1, 2, 2), 3)

    def test_dense_needs_flat_input(self):
        with pytest.raises(ShapeError, match="Flatten"):
            ModelSpec((Dense(3),), (1, 2, 2), 3)

    def test_layer_dict_round_trip(self):
        for layer in (Conv2D(4, 3, 3, 2), MaxPool(2), ReLU(), Flatten(), Dense(7)):
            assert layer_from_dict(layer_to_dict(layer)) == layer

    def test_unknown_layer_type(self):
        with pytest.raises(LabError, match="unknown layer type"):
            layer_from_dict({"type": "dropout"})


class TestFlatParams:

    def test_flatten_unflatten_round_trip(self, tiny_cnn):
        params = init_params(tiny_cnn, RngStream.root(4))
        again = flatten(unflatten(params), params.layout)
        np.testing.assert_array_equal(again.values, params.values)

    def test_layout_covers_every_parameter(self, tiny_cnn):
        layout = param_layout(tiny_cnn)
        assert count_params(tiny_cnn) == 2 * 9 + 2 + 8 * 4 + 4 + 4 * 3 + 3
        assert layout[0].offset == 0
        for a, b in zip(layout, layout[1:]):
            assert b.offset == a.offset + a.size

    def test_init_is_deterministic_and_bounded(self, tiny_cnn):
        a = init_params(tiny_cnn, RngStream.root(9))
        b = init_params(tiny_cnn, RngStream.root(9))
        np.testing.assert_array_equal(a.values, b.values)
        first = param_layout(tiny_cnn)[0]
        assert np.abs(a.values[:first.size]).max() <= 1.0 / 3.0 + 1e-7

    def test_length_mismatch_is_rejected(self, tiny_cnn):
        with pytest.raises(ShapeError):
            FlatParams(np.zeros(3, dtype=np.float32), param_layout(tiny_cnn))


class TestGrad:

    def test_softmax_ce_gradient_of_single_dense(self, dense_model):
        rng = np.random.default_rng(0)
        params = _as_float64(init_params(dense_model, RngStream.root(0)))
        x = rng.normal(size=(1, 3))
        batch = Batch(x, np.array([2]))
        g = grad(dense_model, params, batch, LossWeights.from_alpha(0.0))
        delta = softmax(forward(dense_model, params, x))[0]
        delta[2] -= 1.0
        np.testing.assert_allclose(g.values[:9].reshape(3, 3), np.outer(delta, x[0]), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g.values[9:], delta, rtol=1e-12, atol=1e-15)

    def test_kd_term_vanishes_at_teacher(self, tiny_cnn):
        params = init_params(tiny_cnn, RngStream.root(3))
        x = np.random.default_rng(3).uniform(size=(4, 1, 6, 6)).astype(np.float32)
        batch = Batch(x, np.array([0, 1, 2, 0]), forward(tiny_cnn, params, x))
        g = grad(tiny_cnn, params, batch, LossWeights.from_alpha(1.0))
        np.testing.assert_array_equal(g.values, np.zeros_like(g.values))

    def test_missing_soft_targets_are_rejected(self, dense_model):
        params = zero_params(dense_model)
        with pytest.raises(LabError, match="soft targets"):
            grad(dense_model, params, Batch(np.zeros((1, 3)), np.array([0])), LossWeights.from_alpha(0.5))

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_matches_finite_differences(self, tiny_cnn, alpha):
        checked = 0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            params = _as_float64(init_params(tiny_cnn, RngStream.root(seed)))
            x = rng.uniform(size=(rng.integers(1, 9), 1, 6, 6))
            if _kink_margin(tiny_cnn, params, x) < 1e-3:
                continue
            labels = rng.integers(0, 3, size=len(x))
            batch = Batch(x, labels, rng.normal(size=(len(x), 3)))
            weights = LossWeights.from_alpha(alpha)
            temperature = float(rng.choice([1.0, 2.0]))
            analytic = grad(tiny_cnn, params, batch, weights, temperature)
            numeric = finite_diff_grad(tiny_cnn, params, batch, weights, temperature, step=1e-5)
            assert max_relative_error(analytic.values, numeric.values) < 1e-4
            checked += 1
            if checked == 7:
                break
        assert checked == 7

    def test_finite_difference_error_shrinks_quadratically(self, dense_model):
        params = _as_float64(init_params(dense_model, RngStream.root(6)))
        rng = np.random.default_rng(6)
        batch = Batch(rng.normal(size=(3, 3)) * 2.0, np.array([0, 1, 2]))
        weights = LossWeights.from_alpha(0.0)
        analytic = grad(dense_model, params, batch, weights).values
        coarse = np.abs(finite_diff_grad(dense_model, params, batch, weights, step=1e-2).values - analytic)
        i = int(np.argmax(coarse))
        fine = finite_diff_grad(dense_model, params, batch, weights, step=5e-3, coordinates=[i]).values
        ratio = coarse[i] / abs(fine[i] - analytic[i])
        assert 3.5 < ratio < 4.5

    def test_coordinates_limit_the_work(self, dense_model):
        params = _as_float64(init_params(dense_model, RngStream.root(7)))
        batch = Batch(np.ones((1, 3)), np.array([1]))
        numeric = finite_diff_grad(dense_model, params, batch, LossWeights(), coordinates=[0, 5])
        assert np.count_nonzero(numeric.values[[1, 2, 3, 4, 6, 7, 8, 9, 10, 11]]) == 0

    def test_non_positive_step_is_rejected(self, dense_model):
        with pytest.raises(LabError):
            finite_diff_grad(dense_model, zero_params(dense_model), Batch(np.ones((1, 3)), np.array([0])),
                             LossWeights(), step=0.0)

    def test_max_relative_error_of_empty_vectors(self):
        assert max_relative_error(np.zeros(0), np.zeros(0)) == 0.0


class TestGradWrtLogits:

    def test_symmetric_two_class_case(self):
        np.testing.assert_allclose(grad_wrt_logits(np.array([[0.0, 0.0]]), 0), [[-0.5, 0.5]])

    def test_signs_over_random_draws(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(2, 12))
            logits = rng.normal(scale=3.0, size=(1, n))
            label = int(rng.integers(0, n))
            g = grad_wrt_logits(logits, label)[0]
            assert g[label] < 0
            assert np.all(np.delete(g, label) > 0)

    def test_label_out_of_range_is_rejected(self):
        with pytest.raises(LabError):
            grad_wrt_logits(np.zeros((1, 2)), 2)


class TestSgdStep:

    def _params(self, values):
        model = ModelSpec((Dense(1),), (1,), 1)
        return FlatParams(np.array(values, dtype=np.float32), param_layout(model))

    def test_arithmetic(self):
        params = self._params([1.0, 2.0])
        out = sgd_step(params, FlatUpdate(np.array([0.5, -0.5], dtype=np.float32)), 0.1)
        np.testing.assert_allclose(out.values, [0.95, 2.05], rtol=1e-6)

    def test_zero_gradient_keeps_params(self):
        params = self._params([1.0, 2.0])
        out = sgd_step(params, FlatUpdate(np.zeros(2, dtype=np.float32)), 0.3)
        np.testing.assert_array_equal(out.values, params.values)

    def test_unit_step_onto_params_gives_zero(self):
        params = self._params([1.5, -2.0])
        out = sgd_step(params, FlatUpdate(params.values.copy()), 1.0)
        np.testing.assert_array_equal(out.values, [0.0, 0.0])

    def test_length_mismatch_is_rejected(self):
        with pytest.raises(ShapeError):
            sgd_step(self._params([1.0, 2.0]), FlatUpdate(np.zeros(3, dtype=np.float32)), 0.1)
