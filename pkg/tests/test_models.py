"""Tests for the model zoo."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.attack import infer_label
from src.autodiff import Tensor, grad, softmax
from src.errors import InvalidRangeError, LabelOutOfRangeError, ShapeMismatchError
from src.models import Model, ModelSpec, cross_entropy, init_uniform, model_forward, weight_gradients


def test_init_uniform_is_deterministic(desk_spec):
    first = init_uniform(desk_spec, seed=3)
    second = init_uniform(desk_spec, seed=3)
    for (name_a, a), (name_b, b) in zip(first.parameters, second.parameters):
        assert name_a == name_b
        assert np.array_equal(a, b)


def test_init_uniform_rejects_empty_range(tiny_spec):
    with pytest.raises(InvalidRangeError):
        init_uniform(tiny_spec, seed=0, low=0.0, high=0.0)


def test_init_uniform_statistics(desk_spec):
    model = init_uniform(desk_spec, seed=11)
    values = np.concatenate([weight.reshape(-1) for _, weight in model.parameters])
    assert values.size >= 10_000
    assert abs(values.mean()) < 0.02
    assert values.min() >= -0.5
    assert values.max() < 0.5


def test_weights_are_read_only(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.parameters[0][1][0, 0] = 1.0


class TestModelSpec:
    def test_lenet_parameter_layout(self):
        spec = ModelSpec.lenet((28, 28, 1), 10)
        assert spec.feature_size() == 48
        assert spec.parameter_shapes() == [
            ("conv1.weight", (12, 1, 5, 5)),
            ("conv2.weight", (12, 12, 5, 5)),
            ("conv3.weight", (12, 12, 5, 5)),
            ("conv4.weight", (12, 12, 5, 5)),
            ("fc.weight", (10, 48)),
        ]

    def test_lenet_cifar_shape(self):
        spec = ModelSpec.lenet((32, 32, 3), 10)
        assert spec.parameter_shapes()[0] == ("conv1.weight", (12, 3, 5, 5))
        assert spec.feature_size() == 48

    def test_lenet_rejects_odd_inputs(self):
        with pytest.raises(ValidationError):
            ModelSpec.lenet((20, 16, 1), 10)
        with pytest.raises(ValidationError):
            ModelSpec.lenet((6, 6, 1), 10)

    def test_mlp_layout(self, desk_spec):
        assert desk_spec.parameter_shapes() == [("fc1.weight", (256, 64)), ("fc2.weight", (10, 256))]

    def test_parameter_count_is_stable(self):
        spec = ModelSpec.lenet()
        assert init_uniform(spec, 1).parameter_count == init_uniform(spec, 2).parameter_count


class TestModelForward:
    def test_zero_weights_give_zero_logits(self, tiny_spec, rng):
        zeros = {name: np.zeros(shape) for name, shape in tiny_spec.parameter_shapes()}
        model = Model.from_parameters(tiny_spec, zeros)
        logits = model_forward(model, Tensor(rng.uniform(size=(2, 3, 1))))
        np.testing.assert_array_equal(logits.data, np.zeros(3))

    def test_mlp_golden_vector(self):
        spec = ModelSpec.mlp(input_shape=(1, 4, 1), class_count=2, hidden_sizes=(3,))
        model = Model.from_parameters(
            spec,
            {
                "fc1.weight": [[1, 0, 0, 0], [0, 1, 0, 0], [-1, 0, 0, 0]],
                "fc2.weight": [[1, 1, 1], [1, -1, 0]],
            },
        )
        logits = model_forward(model, Tensor(np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 4, 1)))
        s = 1.0 / (1.0 + math.exp(-1.0))
        np.testing.assert_allclose(logits.data, [s + 0.5 + (1.0 - s), s - 0.5], rtol=1e-12)

    def test_lenet_logit_shape(self):
        model = init_uniform(ModelSpec.lenet(), seed=0)
        logits = model_forward(model, Tensor(np.full((28, 28, 1), 0.5)))
        assert logits.shape == (10,)

    def test_wrong_image_shape(self, tiny_model):
        with pytest.raises(ShapeMismatchError):
            model_forward(tiny_model, Tensor(np.zeros((3, 2, 1))))

    def test_from_parameters_checks_shapes(self, tiny_spec):
        weights = {name: np.zeros(shape) for name, shape in tiny_spec.parameter_shapes()}
        weights["fc1.weight"] = np.zeros((2, 2))
        with pytest.raises(ShapeMismatchError):
            Model.from_parameters(tiny_spec, weights)


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_confident_logits(self):
        expected = math.log1p(math.exp(-20.0))
        assert cross_entropy(Tensor([10.0, -10.0]), 0).item() == pytest.approx(expected, rel=1e-6)
        assert expected == pytest.approx(2.06e-9, rel=1e-2)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRangeError):
            cross_entropy(Tensor([0.0, 1.0]), 2)
        with pytest.raises(LabelOutOfRangeError):
            cross_entropy(Tensor([0.0, 1.0]), -1)

    def test_gradient_is_softmax_minus_one_hot(self, rng):
        z = Tensor(rng.normal(size=5), requires_grad=True)
        (gz,) = grad(cross_entropy(z, 3), [z])
        expected = softmax(Tensor(z.data)).data - np.eye(5)[3]
        np.testing.assert_allclose(gz.data, expected, atol=1e-15)


class TestWeightGradients:
    def test_aligned_with_parameters(self, tiny_model, rng):
        gradients = weight_gradients(tiny_model, Tensor(rng.uniform(size=(2, 3, 1))), 0)
        assert gradients.names == tiny_model.parameter_names
        assert gradients.shapes == tuple(weight.shape for _, weight in tiny_model.parameters)

    def test_deterministic(self, tiny_model, rng):
        image = Tensor(rng.uniform(size=(2, 3, 1)))
        first = weight_gradients(tiny_model, image, 1)
        second = weight_gradients(tiny_model, image, 1)
        for a, b in zip(first.tensors, second.tensors):
            assert np.array_equal(a.data, b.data)

    def test_build_graph_connects_to_image(self, tiny_model, rng):
        image = Tensor(rng.uniform(size=(2, 3, 1)), requires_grad=True)
        gradients = weight_gradients(tiny_model, image, 1, build_graph=True)
        assert all(tensor.requires_grad for tensor in gradients.tensors)

    def test_lenet_matches_finite_differences(self, rng):
        model = init_uniform(ModelSpec.lenet((8, 8, 1), 10), seed=5)
        image = Tensor(rng.uniform(size=(8, 8, 1)))
        gradients = weight_gradients(model, image, 4)
        step = 1e-6
        for position, (name, weight) in enumerate(model.parameters):
            coords = [tuple(rng.integers(0, dim) for dim in weight.shape) for _ in range(8)]
            for coord in coords:
                values = []
                for sign in (1.0, -1.0):
                    shifted = weight.copy()
                    shifted[coord] += sign * step
                    weights = model.leaves(requires_grad=False)
                    weights[position] = Tensor(shifted)
                    values.append(cross_entropy(model_forward(model, image, weights), 4).item())
                central = (values[0] - values[1]) / (2 * step)
                analytic = gradients[name].data[coord]
                # conv weights with |g| near 1e-8 sit at finite-difference noise, so the denominator is floored
                error = abs(analytic - central) / max(abs(analytic), abs(central), 1e-3)
                assert error < 1e-5, (name, coord)


def test_output_row_sign_property(desk_spec, rng):
    """The true class's output row opposes every other row (batch of one)."""
    for draw in range(200):
        model = init_uniform(desk_spec, seed=draw)
        label = int(rng.integers(0, 10))
        gradients = weight_gradients(model, Tensor(rng.uniform(size=(8, 8, 1))), label)
        rows = gradients.tensors[-1].data
        products = rows @ rows[label]
        assert np.all(np.delete(products, label) <= 0)
        assert infer_label(gradients) == label
