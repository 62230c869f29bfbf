"""
Reverse-mode automatic differentiation over dense float64 tensors.

A Graph is a tape: every operation appends a node holding its output Tensor and
the ids of its inputs, so the node list is topologically ordered by
construction. Graph.backward walks the tape once in reverse and returns the
gradient of a scalar root with respect to every named parameter leaf.

The op set is what the toy mobile nets and the sponge objective need: matmul,
cross-correlation conv2d and its depthwise variant, relu, global average
pooling, softmax cross-entropy and a few elementwise helpers.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray

from .errors import LabelError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
GradientMap = dict[str, Array]


def as_array(data: ArrayLike) -> Array:
    """Copy data into a read-only float64 array, rejecting NaN/Inf."""
    array = np.array(data, dtype=np.float64)
    if not np.isfinite(array).all():
        raise NonFiniteError("tensor data contains NaN or Inf")
    array.flags.writeable = False
    return array


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """
    Output extent of a strided, zero-padded sliding window.

    Raises:
        ShapeError: if stride < 1, padding < 0 or the window does not fit
    """
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"window of {kernel} with padding {padding} does not fit extent {size}"
        )
    return out


class Tensor:
    """A value recorded on a Graph.

    Tensors are immutable: ``data`` is a non-writeable float64 array and ops
    always produce new tensors.
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: Array, graph: "Graph", node_id: int):
        self.data = data
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"


class Function(ABC):
    """A differentiable operation.

    ``forward`` receives the input arrays and may keep whatever it needs for
    ``backward``; ``backward`` maps the gradient of the output to one gradient
    per input (None for inputs that are not differentiable).
    """

    name = "function"

    @abstractmethod
    def forward(self, *inputs: Array) -> Array:
        raise NotImplementedError

    @abstractmethod
    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        raise NotImplementedError


@dataclass(frozen=True)
class Node:
    """One tape record: operation kind, input node ids and the output."""

    op: str
    inputs: tuple[int, ...]
    tensor: Tensor
    function: Function | None


class Graph:
    """Tape of operations; confine one Graph to one thread."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.parameters: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(
        self,
        op: str,
        inputs: tuple[int, ...],
        data: Array,
        function: Function | None,
    ) -> Tensor:
        tensor = Tensor(data, self, len(self.nodes))
        self.nodes.append(Node(op, inputs, tensor, function))
        return tensor

    def constant(self, data: ArrayLike) -> Tensor:
        """Record a leaf that receives no gradient entry."""
        return self._append("constant", (), as_array(data), None)

    def parameter(self, name: str, data: ArrayLike) -> Tensor:
        """Record a named leaf; backward reports its gradient under ``name``."""
        if name in self.parameters:
            raise ValueError(f"parameter {name!r} is already on this graph")
        tensor = self._append("parameter", (), as_array(data), None)
        self.parameters[name] = tensor.node_id
        return tensor

    def apply(self, function: Function, *inputs: Tensor) -> Tensor:
        """Run ``function`` forward on ``inputs`` and record it."""
        for tensor in inputs:
            if tensor.graph is not self:
                raise ValueError(f"{function.name}: input {tensor!r} is on another graph")
        out = np.asarray(function.forward(*(t.data for t in inputs)), dtype=np.float64)
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{function.name} produced non-finite values")
        out.flags.writeable = False
        return self._append(function.name, tuple(t.node_id for t in inputs), out, function)

    def backward(self, root: Tensor) -> GradientMap:
        """
        Reverse-mode gradients of a scalar root.

        Args:
            root: rank-0 tensor recorded on this graph

        Returns:
            Gradient for every parameter on the graph; parameters that do not
            reach the root get zeros.
        """
        if root.graph is not self:
            raise ValueError("backward root belongs to another graph")
        if root.data.ndim != 0:
            raise ShapeError(f"backward root must be a scalar, got shape {root.shape}")

        grads: dict[int, Array] = {root.node_id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes[: root.node_id + 1]):
            if node.function is None:
                continue
            grad = grads.pop(node.tensor.node_id, None)
            if grad is None:
                continue
            for input_id, input_grad in zip(
                node.inputs, node.function.backward(grad), strict=True
            ):
                if input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        result: GradientMap = {}
        for name, node_id in self.parameters.items():
            shape = self.nodes[node_id].tensor.shape
            result[name] = grads.get(node_id, np.zeros(shape, dtype=np.float64))
        return result


def backward(graph: Graph, root: Tensor) -> GradientMap:
    """Module-level form of Graph.backward."""
    return graph.backward(root)


class MatMul(Function):
    name = "matmul"

    def forward(self, a: Array, b: Array) -> Array:
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad: Array) -> tuple[Array, Array]:
        return grad @ self.b.T, self.a.T @ grad


class Add(Function):
    name = "add"

    def forward(self, a: Array, b: Array) -> Array:
        return a + b

    def backward(self, grad: Array) -> tuple[Array, Array]:
        return grad, grad


class Mul(Function):
    name = "mul"

    def forward(self, a: Array, b: Array) -> Array:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: Array) -> tuple[Array, Array]:
        return grad * self.b, grad * self.a


class Scale(Function):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = factor

    def forward(self, x: Array) -> Array:
        return x * self.factor

    def backward(self, grad: Array) -> tuple[Array]:
        return (grad * self.factor,)


class AddBias(Function):
    name = "add_bias"

    def forward(self, x: Array, bias: Array) -> Array:
        return x + bias

    def backward(self, grad: Array) -> tuple[Array, Array]:
        return grad, grad.sum(axis=0)


class ReduceSum(Function):
    name = "sum"

    def forward(self, x: Array) -> Array:
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad: Array) -> tuple[Array]:
        return (np.full(self.shape, grad, dtype=np.float64),)


class ReLU(Function):
    name = "relu"

    def forward(self, x: Array) -> Array:
        # subgradient at exactly 0 is 0
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad: Array) -> tuple[Array]:
        return (np.where(self.mask, grad, 0.0),)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x: Array) -> Array:
        self.shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad: Array) -> tuple[Array]:
        n, c, h, w = self.shape
        spread = grad[:, :, None, None] / (h * w)
        return (np.broadcast_to(spread, self.shape).copy(),)


class Conv2d(Function):
    """Cross-correlation (no kernel flip) with zero padding."""

    name = "conv2d"

    def __init__(self, stride: int, padding: int):
        self.stride = stride
        self.padding = padding

    def forward(self, x: Array, kernel: Array) -> Array:
        p, s = self.padding, self.stride
        self.x_shape = x.shape
        self.kernel = kernel
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self.padded_shape = padded.shape
        # (n, c, h', w', kh, kw)
        self.windows = sliding_window_view(padded, kernel.shape[2:], axis=(2, 3))[
            :, :, ::s, ::s
        ]
        return np.einsum("nchwij,fcij->nfhw", self.windows, kernel)

    def backward(self, grad: Array) -> tuple[Array, Array]:
        p, s = self.padding, self.stride
        _, _, kh, kw = self.kernel.shape
        _, _, ho, wo = grad.shape
        grad_kernel = np.einsum("nfhw,nchwij->fcij", grad, self.windows)
        grad_padded = np.zeros(self.padded_shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
                    "nfhw,fc->nchw", grad, self.kernel[:, :, i, j]
                )
        h, w = self.x_shape[2:]
        return grad_padded[:, :, p : p + h, p : p + w], grad_kernel


class DepthwiseConv2d(Function):
    """Per-channel cross-correlation; no summation across channels."""

    name = "depthwise_conv2d"

    def __init__(self, stride: int, padding: int):
        self.stride = stride
        self.padding = padding

    def forward(self, x: Array, kernel: Array) -> Array:
        p, s = self.padding, self.stride
        self.x_shape = x.shape
        self.kernel = kernel
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self.padded_shape = padded.shape
        self.windows = sliding_window_view(padded, kernel.shape[1:], axis=(2, 3))[
            :, :, ::s, ::s
        ]
        return np.einsum("nchwij,cij->nchw", self.windows, kernel)

    def backward(self, grad: Array) -> tuple[Array, Array]:
        p, s = self.padding, self.stride
        _, kh, kw = self.kernel.shape
        _, _, ho, wo = grad.shape
        grad_kernel = np.einsum("nchw,nchwij->cij", grad, self.windows)
        grad_padded = np.zeros(self.padded_shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + s * ho : s, j : j + s * wo : s] += (
                    grad * self.kernel[None, :, i, j, None, None]
                )
        h, w = self.x_shape[2:]
        return grad_padded[:, :, p : p + h, p : p + w], grad_kernel


class SoftmaxCrossEntropy(Function):
    """Batch-mean negative log-likelihood of integer labels."""

    name = "softmax_cross_entropy"

    def __init__(self, labels: NDArray[np.int64]):
        self.labels = labels

    def forward(self, logits: Array) -> Array:
        n = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        self.probs = np.exp(log_probs)
        return np.asarray(-log_probs[np.arange(n), self.labels].mean())

    def backward(self, grad: Array) -> tuple[Array]:
        n = self.probs.shape[0]
        delta = self.probs.copy()
        delta[np.arange(n), self.labels] -= 1.0
        return (delta * (grad / n),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a.graph.apply(MatMul(), a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a.graph.apply(Add(), a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return a.graph.apply(Mul(), a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return x.graph.apply(Scale(float(factor)), x)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-M bias to every row of an N×M tensor."""
    if len(x.shape) != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit rows of {x.shape}")
    return x.graph.apply(AddBias(), x, bias)


def reduce_sum(x: Tensor) -> Tensor:
    return x.graph.apply(ReduceSum(), x)


def relu(x: Tensor) -> Tensor:
    return x.graph.apply(ReLU(), x)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extents of an N×C×H×W tensor."""
    if len(x.shape) != 4:
        raise ShapeError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    return x.graph.apply(GlobalAvgPool(), x)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlate an N×C×H×W input with an F×C×kh×kw kernel.

    Raises:
        ShapeError: on channel mismatch or non-positive output extent
    """
    if len(x.shape) != 4 or len(kernel.shape) != 4:
        raise ShapeError(f"conv2d expects rank-4 operands, got {x.shape}, {kernel.shape}")
    _, c, h, w = x.shape
    _, kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    conv_output_size(h, kh, stride, padding)
    conv_output_size(w, kw, stride, padding)
    return x.graph.apply(Conv2d(stride, padding), x, kernel)


def depthwise_conv2d(
    x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlate each channel of N×C×H×W with its own C×kh×kw slice."""
    if len(x.shape) != 4 or len(kernel.shape) != 3:
        raise ShapeError(
            f"depthwise_conv2d expects N×C×H×W and C×kh×kw, got {x.shape}, {kernel.shape}"
        )
    _, c, h, w = x.shape
    kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, kernel has {kc}")
    conv_output_size(h, kh, stride, padding)
    conv_output_size(w, kw, stride, padding)
    return x.graph.apply(DepthwiseConv2d(stride, padding), x, kernel)


def softmax_cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """
    Mean over the batch of -log softmax(logits)[label].

    Raises:
        ShapeError: if labels do not match the batch
        LabelError: if a label is outside [0, C)
    """
    if len(logits.shape) != 2:
        raise ShapeError(f"logits must be N×C, got {logits.shape}")
    n, c = logits.shape
    label_array = np.asarray(labels, dtype=np.int64)
    if label_array.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {label_array.shape}")
    if n and (label_array.min() < 0 or label_array.max() >= c):
        raise LabelError(f"labels must lie in [0, {c})")
    return logits.graph.apply(SoftmaxCrossEntropy(label_array), logits)
