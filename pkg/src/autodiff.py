"""
Dense tensors with reverse-mode automatic differentiation.

Operations execute eagerly and record a tape node for each result. The
backward rule of every primitive is written with the same differentiable
primitives, so ``grad(..., build_graph=True)`` returns gradients that are
themselves graph nodes; differentiating a function of gradients (double
backprop) then needs nothing special.

All values are float64. Any operation that produces NaN raises
``NanDetectedError`` immediately.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import (
    MisalignedGradientError,
    NanDetectedError,
    NonFiniteValueError,
    NonScalarRootError,
    ShapeMismatchError,
    UnreachableLeafError,
)

Number = Union[int, float]
Shape = Tuple[int, ...]

_GRAD_ENABLED: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Operations inside the block record no tape nodes."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextmanager
def enable_grad() -> Iterator[None]:
    token = _GRAD_ENABLED.set(True)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


VJP = Callable[["Tensor"], Sequence[Optional["Tensor"]]]


class Tensor:
    """A float64 array that doubles as a node of the autodiff tape.

    Leaves are created by the constructor; every operation result is an
    interior node whose ``inputs`` are its parents and whose ``op`` names the
    primitive that produced it.

    Args:
        data: Anything ``np.asarray`` accepts. 0-d input becomes shape (1,).
        requires_grad: Whether gradients should flow into this leaf.
        name: Optional label, used in error messages and reprs.
    """

    __slots__ = ("data", "requires_grad", "op", "inputs", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        if any(dim < 1 for dim in array.shape):
            raise ShapeMismatchError("tensor", array.shape)
        if np.isnan(array).any():
            raise NanDetectedError("tensor")
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.inputs: Tuple["Tensor", ...] = ()
        self._vjp: Optional[VJP] = None
        self.name = name

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.inputs

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad}{label})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Number):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def square(self) -> "Tensor":
        return square(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    if np.isnan(value).any():
        raise NanDetectedError(op)
    node = Tensor.__new__(Tensor)
    node.data = value
    node.name = None
    node.op = op
    tracked = _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs)
    node.requires_grad = tracked
    node.inputs = tuple(inputs) if tracked else ()
    node._vjp = vjp if tracked else None
    return node


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


# --- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, neg(g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (neg(g),))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record("scale", a.data * factor, (a,), lambda g: (scale(g, factor),))


def add_scalar(a: Tensor, constant: float) -> Tensor:
    return _record("add_scalar", a.data + constant, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return _record("square", a.data * a.data, (a,), lambda g: (scale(mul(g, a), 2.0),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for large |a|
    value = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def vjp(g: Tensor):
        return (mul(g, mul(out, 1.0 - out)),)

    out = _record("sigmoid", value, (a,), vjp)
    return out


def tanh(a: Tensor) -> Tensor:
    def vjp(g: Tensor):
        return (mul(g, 1.0 - square(out)),)

    out = _record("tanh", np.tanh(a.data), (a,), vjp)
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return _record("relu", a.data * mask.data, (a,), lambda g: (mul(g, mask),))


# --- reductions and shape plumbing ----------------------------------------


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a shape-(1,) tensor."""
    shape = a.shape
    return _record("sum", np.array([a.data.sum()]), (a,), lambda g: (expand(g, shape),))


def expand(a: Tensor, shape: Shape) -> Tensor:
    """Broadcast a single-element tensor to ``shape``."""
    if a.size != 1:
        raise ShapeMismatchError("expand", a.shape, shape)
    value = np.full(shape, a.data.reshape(-1)[0], dtype=np.float64)
    return _record("expand", value, (a,), lambda g: (reshape(sum_all(g), a.shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatchError("reshape", a.shape, shape)
    original = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (reshape(g, original),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError("transpose", a.shape, axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _record(
        "transpose",
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (transpose(g, inverse),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


# --- convolution --------------------------------------------------------------


def pad2d(a: Tensor, padding: int) -> Tensor:
    """Symmetric zero padding of the two trailing axes of a (C, H, W) tensor."""
    if padding == 0:
        return a
    value = np.pad(a.data, ((0, 0), (padding, padding), (padding, padding)))
    return _record("pad2d", value, (a,), lambda g: (crop2d(g, padding),))


def crop2d(a: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return a
    _, h, w = a.shape
    if h <= 2 * padding or w <= 2 * padding:
        raise ShapeMismatchError("crop2d", a.shape)
    value = np.ascontiguousarray(a.data[:, padding:-padding, padding:-padding])
    return _record("crop2d", value, (a,), lambda g: (pad2d(g, padding),))


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    channels = x.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    return windows.transpose(0, 3, 4, 1, 2).reshape(channels * kernel * kernel, out_h * out_w)


def _col2im(cols: np.ndarray, shape: Shape, kernel: int, stride: int) -> np.ndarray:
    channels, height, width = shape
    out_h, out_w = _conv_out(height, kernel, stride), _conv_out(width, kernel, stride)
    blocks = cols.reshape(channels, kernel, kernel, out_h, out_w)
    image = np.zeros(shape, dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            image[:, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride] += blocks[:, i, j]
    return image


def im2col(a: Tensor, kernel: int, stride: int) -> Tensor:
    """Unfold a (C, H, W) tensor into a (C*k*k, H_out*W_out) patch matrix."""
    if a.ndim != 3 or a.shape[1] < kernel or a.shape[2] < kernel:
        raise ShapeMismatchError("im2col", a.shape, (kernel, kernel))
    shape = a.shape
    return _record(
        "im2col",
        _im2col(a.data, kernel, stride),
        (a,),
        lambda g: (col2im(g, shape, kernel, stride),),
    )


def col2im(a: Tensor, shape: Shape, kernel: int, stride: int) -> Tensor:
    """Adjoint of ``im2col``: scatter-add patches back into a (C, H, W) image."""
    channels, height, width = shape
    expected = (channels * kernel * kernel, _conv_out(height, kernel, stride) * _conv_out(width, kernel, stride))
    if a.shape != expected:
        raise ShapeMismatchError("col2im", a.shape, expected)
    return _record(
        "col2im",
        _col2im(a.data, tuple(shape), kernel, stride),
        (a,),
        lambda g: (im2col(g, kernel, stride),),
    )


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (C_in, H, W) input with (C_out, C_in, k, k) weights.

    Built from ``pad2d``/``im2col``/``matmul`` so it inherits their
    (twice-differentiable) backward rules.
    """
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0] or weight.shape[2] != weight.shape[3]:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape)
    if stride < 1 or padding < 0:
        raise ShapeMismatchError("conv2d", (stride,), (padding,))
    out_channels, in_channels, kernel, _ = weight.shape
    padded = pad2d(x, padding)
    if padded.shape[1] < kernel or padded.shape[2] < kernel:
        raise ShapeMismatchError("conv2d", x.shape, weight.shape)
    out_h = _conv_out(padded.shape[1], kernel, stride)
    out_w = _conv_out(padded.shape[2], kernel, stride)
    cols = im2col(padded, kernel, stride)
    flat = matmul(reshape(weight, (out_channels, in_channels * kernel * kernel)), cols)
    return reshape(flat, (out_channels, out_h, out_w))


# --- losses -----------------------------------------------------------------


def softmax(z: Tensor) -> Tensor:
    if z.ndim != 1:
        raise ShapeMismatchError("softmax", z.shape)
    shifted = np.exp(z.data - z.data.max())
    value = shifted / shifted.sum()

    def vjp(g: Tensor):
        inner = expand(sum_all(mul(g, out)), z.shape)
        return (mul(out, sub(g, inner)),)

    out = _record("softmax", value, (z,), vjp)
    return out


def softmax_cross_entropy(z: Tensor, label: int) -> Tensor:
    """Fused ``-log softmax(z)[label]`` for a 1-D logit vector."""
    if z.ndim != 1 or not 0 <= label < z.shape[0]:
        raise ShapeMismatchError("softmax_cross_entropy", z.shape, (label,))
    top = z.data.max()
    log_norm = np.log(np.exp(z.data - top).sum())
    one_hot = np.zeros(z.shape, dtype=np.float64)
    one_hot[label] = 1.0
    target = Tensor(one_hot)

    def vjp(g: Tensor):
        return (mul(expand(g, z.shape), sub(softmax(z), target)),)

    return _record("softmax_cross_entropy", np.array([(top - z.data[label]) + log_norm]), (z,), vjp)


# --- graph traversal -------------------------------------------------------


def _topological_order(root: Tensor) -> List[Tensor]:
    """Tracked nodes reachable from ``root``, parents before children."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def forward(root: Tensor) -> Tensor:
    """Value held at ``root``.

    Nodes are evaluated eagerly as the graph is built, so this walks the tape
    only to confirm it is well formed and returns a detached copy of the
    cached value.
    """
    _topological_order(root)
    return root.detach()


def grad(root: Tensor, wrt: Sequence[Tensor], build_graph: bool = False) -> List[Tensor]:
    """d(root)/d(t) for every t in ``wrt``.

    Args:
        root: Single-element tensor to differentiate.
        wrt: Tensors the gradient is taken with respect to.
        build_graph: When True the returned gradients are tape nodes and can
            be differentiated again.

    Raises:
        NonScalarRootError: ``root`` has more than one element.
        UnreachableLeafError: a tensor in ``wrt`` does not feed into ``root``.
    """
    if root.size != 1:
        raise NonScalarRootError(f"grad() needs a scalar root, got shape {root.shape}")
    order = _topological_order(root) if root.requires_grad else []
    reachable = {id(node) for node in order}
    for index, leaf in enumerate(wrt):
        if id(leaf) not in reachable:
            label = leaf.name or f"wrt[{index}]"
            raise UnreachableLeafError(f"{label} (shape {leaf.shape}) does not influence the root")

    mode = enable_grad() if build_graph else no_grad()
    with mode:
        grads = {id(root): Tensor(np.ones(root.shape))}
        for node in reversed(order):
            upstream = grads.get(id(node))
            if upstream is None or node._vjp is None:
                continue
            for parent, contribution in zip(node.inputs, node._vjp(upstream)):
                if contribution is None or not parent.requires_grad:
                    continue
                existing = grads.get(id(parent))
                grads[id(parent)] = contribution if existing is None else add(existing, contribution)
    return [grads[id(leaf)] for leaf in wrt]


def finite_diff_check(
    function: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-6,
    floor: float = 1e-12,
) -> float:
    """Max relative error between ``grad`` and central differences of ``function``.

    Per coordinate the error is ``|analytic - central| / max(|analytic|,
    |central|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    origin = np.array(as_tensor(point).data, dtype=np.float64)
    leaf = Tensor(origin, requires_grad=True, name="point")
    value = function(leaf)
    if not np.isfinite(value.data).all():
        raise NonFiniteValueError("function is not finite at the check point")
    (analytic,) = grad(value, [leaf])

    numeric = np.empty_like(origin)
    for index in np.ndindex(origin.shape):
        plus = origin.copy()
        plus[index] += step
        minus = origin.copy()
        minus[index] -= step
        f_plus = function(Tensor(plus)).item()
        f_minus = function(Tensor(minus)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteValueError(f"function is not finite around coordinate {index}")
        numeric[index] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic.data), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic.data - numeric) / denom))


# --- gradient sets ------------------------------------------------------------


@dataclass(frozen=True)
class GradientSet:
    """Per-parameter gradients, ordered like the owning model's parameters."""

    entries: Tuple[Tuple[str, Tensor], ...]

    @classmethod
    def from_arrays(cls, names: Sequence[str], arrays: Sequence[np.ndarray]) -> "GradientSet":
        if len(names) != len(arrays):
            raise MisalignedGradientError(f"{len(names)} names for {len(arrays)} arrays")
        return cls(tuple((name, Tensor(array)) for name, array in zip(names, arrays)))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    @property
    def tensors(self) -> Tuple[Tensor, ...]:
        return tuple(tensor for _, tensor in self.entries)

    @property
    def shapes(self) -> Tuple[Shape, ...]:
        return tuple(tensor.shape for _, tensor in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name: str) -> Tensor:
        for key, tensor in self.entries:
            if key == name:
                return tensor
        raise KeyError(name)

    def detached(self) -> "GradientSet":
        return GradientSet(tuple((name, tensor.detach()) for name, tensor in self.entries))

    def flatten(self) -> np.ndarray:
        return np.concatenate([tensor.data.reshape(-1) for _, tensor in self.entries])

    def check_aligned(self, other: "GradientSet") -> None:
        if self.names != other.names or self.shapes != other.shapes:
            raise MisalignedGradientError(
                f"gradient sets differ: {list(zip(self.names, self.shapes))} vs "
                f"{list(zip(other.names, other.shapes))}"
            )
