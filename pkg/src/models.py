"""
Model zoo: the sigmoid LeNet variant and the small MLP under attack.

Layers are bias-free, so every parameter is a weight tensor and the last
parameter is always the output layer (one row per class logit). Images are
H x W x C arrays in [0, 1]; the convolutional path transposes them to
C x H x W internally.
"""

from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.autodiff import (
    GradientSet,
    Tensor,
    conv2d,
    grad,
    matmul,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    transpose,
)
from src.errors import InvalidRangeError, LabelOutOfRangeError, ShapeMismatchError

Architecture = Literal["lenet", "mlp"]
ParameterShape = Tuple[int, ...]

CANONICAL_LENET_INPUTS = ((28, 28, 1), (32, 32, 3))
MIN_LENET_SIDE = 8


def _conv_side(side: int, kernel: int, stride: int, padding: int) -> int:
    return (side + 2 * padding - kernel) // stride + 1


class ModelSpec(BaseModel):
    """Architecture and hyperparameters of a network."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    architecture: Architecture
    input_shape: Tuple[int, int, int] = Field(description="Image shape as (height, width, channels)")
    class_count: int = Field(default=10, ge=2)
    conv_channels: Tuple[int, ...] = (12, 12, 12, 12)
    kernel_size: int = Field(default=5, ge=1)
    stride: int = Field(default=2, ge=1)
    padding: int = Field(default=2, ge=0)
    hidden_sizes: Tuple[int, ...] = (256,)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelSpec":
        height, width, channels = self.input_shape
        if min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be positive, got {self.input_shape}")
        if self.architecture == "lenet":
            if not self.conv_channels:
                raise ValueError("lenet needs at least one convolution")
            if self.input_shape not in CANONICAL_LENET_INPUTS:
                # desk-scale inputs: square, 1 or 3 channels, side >= 8
                if height != width or channels not in (1, 3) or height < MIN_LENET_SIDE:
                    raise ValueError(
                        f"lenet input must be 28x28x1, 32x32x3 or a square 1/3-channel "
                        f"image of side >= {MIN_LENET_SIDE}, got {self.input_shape}"
                    )
        elif any(size < 1 for size in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        return self

    @classmethod
    def lenet(cls, input_shape: Tuple[int, int, int] = (28, 28, 1), class_count: int = 10) -> "ModelSpec":
        return cls(architecture="lenet", input_shape=input_shape, class_count=class_count)

    @classmethod
    def mlp(
        cls,
        input_shape: Tuple[int, int, int] = (8, 8, 1),
        class_count: int = 10,
        hidden_sizes: Sequence[int] = (256,),
    ) -> "ModelSpec":
        return cls(
            architecture="mlp",
            input_shape=input_shape,
            class_count=class_count,
            hidden_sizes=tuple(hidden_sizes),
        )

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def feature_size(self) -> int:
        """Width of the vector fed to the output layer."""
        if self.architecture == "mlp":
            return self.hidden_sizes[-1] if self.hidden_sizes else self.input_size
        side_h, side_w = self.input_shape[0], self.input_shape[1]
        for _ in self.conv_channels:
            side_h = _conv_side(side_h, self.kernel_size, self.stride, self.padding)
            side_w = _conv_side(side_w, self.kernel_size, self.stride, self.padding)
        return side_h * side_w * self.conv_channels[-1]

    def parameter_shapes(self) -> List[Tuple[str, ParameterShape]]:
        """Ordered (name, shape) of every weight; the output layer comes last."""
        shapes: List[Tuple[str, ParameterShape]] = []
        if self.architecture == "lenet":
            in_channels = self.input_shape[2]
            for index, out_channels in enumerate(self.conv_channels, start=1):
                shapes.append(
                    (f"conv{index}.weight", (out_channels, in_channels, self.kernel_size, self.kernel_size))
                )
                in_channels = out_channels
            shapes.append(("fc.weight", (self.class_count, self.feature_size())))
        else:
            width = self.input_size
            for index, hidden in enumerate(self.hidden_sizes, start=1):
                shapes.append((f"fc{index}.weight", (hidden, width)))
                width = hidden
            shapes.append((f"fc{len(self.hidden_sizes) + 1}.weight", (self.class_count, width)))
        return shapes


@dataclass(frozen=True)
class Model:
    """A network specification plus its (read-only) weights."""

    spec: ModelSpec
    parameters: Tuple[Tuple[str, np.ndarray], ...]

    @classmethod
    def from_parameters(cls, spec: ModelSpec, weights: Mapping[str, np.ndarray]) -> "Model":
        """Build a model from explicit weights, checked against the spec's shapes."""
        entries = []
        for name, shape in spec.parameter_shapes():
            if name not in weights:
                raise KeyError(f"missing parameter {name!r}")
            array = np.array(weights[name], dtype=np.float64)
            if array.shape != shape:
                raise ShapeMismatchError(name, array.shape, shape)
            array.setflags(write=False)
            entries.append((name, array))
        extra = set(weights) - {name for name, _ in entries}
        if extra:
            raise KeyError(f"unknown parameters {sorted(extra)}")
        return cls(spec=spec, parameters=tuple(entries))

    @property
    def parameter_names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.parameters)

    @property
    def output_layer(self) -> str:
        return self.parameters[-1][0]

    @property
    def parameter_count(self) -> int:
        return sum(array.size for _, array in self.parameters)

    def weight(self, name: str) -> np.ndarray:
        return dict(self.parameters)[name]

    def leaves(self, requires_grad: bool = True) -> List[Tensor]:
        return [Tensor(array, requires_grad=requires_grad, name=name) for name, array in self.parameters]

    def with_weights(self, arrays: Sequence[np.ndarray]) -> "Model":
        return Model.from_parameters(self.spec, dict(zip(self.parameter_names, arrays)))


def init_uniform(spec: ModelSpec, seed: int, low: float = -0.5, high: float = 0.5) -> Model:
    """Draw every weight i.i.d. from U[low, high), in parameter order, from one seeded generator."""
    if not low < high:
        raise InvalidRangeError(f"init range must satisfy low < high, got [{low}, {high})")
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    for name, shape in spec.parameter_shapes():
        weights[name] = rng.uniform(low, high, size=shape)
    return Model.from_parameters(spec, weights)


def model_forward(model: Model, image: Tensor, weights: Optional[Sequence[Tensor]] = None) -> Tensor:
    """Logits F_W(x) for one image.

    Args:
        model: Network to evaluate.
        image: H x W x C tensor matching ``model.spec.input_shape``.
        weights: Tensors to use in place of the model's stored weights, in
            parameter order. ``weight_gradients`` passes leaves here.

    Returns:
        Length-C logit vector as a graph node.
    """
    spec = model.spec
    if image.shape != tuple(spec.input_shape):
        raise ShapeMismatchError("model_forward", image.shape, spec.input_shape)
    if weights is None:
        weights = model.leaves(requires_grad=False)
    if len(weights) != len(model.parameters):
        raise ShapeMismatchError("model_forward", (len(weights),), (len(model.parameters),))

    if spec.architecture == "mlp":
        hidden = reshape(image, (spec.input_size, 1))
        for weight in weights[:-1]:
            hidden = sigmoid(matmul(weight, hidden))
    else:
        hidden = transpose(image, (2, 0, 1))
        for weight in weights[:-1]:
            hidden = sigmoid(conv2d(hidden, weight, stride=spec.stride, padding=spec.padding))
        hidden = reshape(hidden, (spec.feature_size(), 1))
    logits = matmul(weights[-1], hidden)
    return reshape(logits, (spec.class_count,))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] as a differentiable scalar."""
    if logits.ndim != 1:
        raise ShapeMismatchError("cross_entropy", logits.shape)
    if not 0 <= int(label) < logits.shape[0]:
        raise LabelOutOfRangeError(f"label {label} outside [0, {logits.shape[0]})")
    return softmax_cross_entropy(logits, int(label))


def weight_gradients(model: Model, image: Tensor, label: int, build_graph: bool = False) -> GradientSet:
    """Gradient of the cross-entropy loss w.r.t. every weight, in parameter order.

    With ``build_graph`` the returned tensors stay connected to ``image`` so
    a loss over them can be differentiated with respect to the image.
    """
    leaves = model.leaves(requires_grad=True)
    loss = cross_entropy(model_forward(model, image, leaves), label)
    gradients = grad(loss, leaves, build_graph=build_graph)
    return GradientSet(tuple(zip(model.parameter_names, gradients)))
