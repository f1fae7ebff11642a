"""Reverse-mode differentiation over tensor-core operations.

Every op builds a `Node` holding its forward value and a vector-Jacobian product
(`vjp`) that maps the output gradient to one gradient per parent. `backward` walks
the graph in reverse topological order and accumulates gradients additively, so a
node consumed twice receives the sum of both contributions.
"""
import contextlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tc
from .tensor import ShapeError, Tensor

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

COMPONENTS = ("slow", "fast")

_grad_enabled = True


class GradientError(ValueError):
    """Raised for non-scalar losses and gradient/parameter shape mismatches."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    """A value in the computation graph."""

    def __init__(
        self,
        value: Any,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        vjp: Optional[Vjp] = None,
        requires_grad: bool = False,
    ):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        self.parents: Tuple[Node, ...] = tuple(parents) if tracked else ()
        self.op = op
        self.vjp = vjp if tracked else None
        self.requires_grad = requires_grad or tracked
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def grad(self) -> Optional[Tensor]:
        return None if self._grad is None else Tensor.wrap(self._grad.copy())

    def numpy(self) -> np.ndarray:
        return self.value.numpy()

    def item(self) -> float:
        return self.value.item()

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other: Any) -> "Node":
        return add(self, other)

    def __radd__(self, other: Any) -> "Node":
        return add(other, self)

    def __sub__(self, other: Any) -> "Node":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Node":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Node":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Node":
        return mul(other, self)

    def __neg__(self) -> "Node":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Node":
        return power(self, exponent)


class Parameter(Node):
    """Named trainable tensor tagged with its network component (slow or fast)."""

    def __init__(self, name: str, value: Any, component: str, group: str = "", trainable: bool = True):
        if component not in COMPONENTS:
            raise ValueError(f"component must be one of {COMPONENTS}, got {component!r}")
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.component = component
        self.group = group or component
        self.trainable = trainable
        self.op = "param"

    def assign(self, value: Any) -> None:
        """Replace the value, keeping the parameter's shape and dtype."""
        dtype = self.value.dtype
        if isinstance(value, Tensor) and value.dtype == dtype:
            new_value = value
        else:
            new_value = Tensor(value.data if isinstance(value, Tensor) else value, dtype=dtype)
        if new_value.shape != self.value.shape:
            raise GradientError(f"{self.name}: cannot assign shape {new_value.shape} to {self.value.shape}")
        self.value = new_value

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape}, component={self.component})"


def as_node(x: Any) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x: Any) -> Node:
    return Node(x)


def custom_op(value: Any, parents: Sequence[Node], vjp: Vjp, op: str = "custom") -> Node:
    """Register an op whose backward rule is supplied by the caller."""
    return Node(value if isinstance(value, Tensor) else Tensor.wrap(np.asarray(value)), parents, op, vjp)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back onto the operand's original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"operands {a.shape} and {b.shape} do not broadcast") from e


def add(a: Any, b: Any) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b)

    def vjp(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Node(Tensor.wrap(a.value.data + b.value.data), (a, b), "add", vjp)


def sub(a: Any, b: Any) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b)

    def vjp(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Node(Tensor.wrap(a.value.data - b.value.data), (a, b), "sub", vjp)


def mul(a: Any, b: Any) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b)
    a_val, b_val = a.value.data, b.value.data

    def vjp(g: np.ndarray):
        return unbroadcast(g * b_val, a.shape), unbroadcast(g * a_val, b.shape)

    return Node(Tensor.wrap(a_val * b_val), (a, b), "mul", vjp)


def ew_mul(a: Any, b: Any) -> Node:
    """Elementwise product where only `b` may broadcast (onto `a`'s shape)."""
    a, b = as_node(a), as_node(b)
    tc.check_broadcastable(a.shape, b.shape)
    return mul(a, b)


def power(x: Any, exponent: float) -> Node:
    x = as_node(x)
    val = x.value.data

    def vjp(g: np.ndarray):
        return (g * exponent * val ** (exponent - 1),)

    return Node(Tensor.wrap(val**exponent), (x,), "pow", vjp)


def matmul(w: Any, x: Any) -> Node:
    w, x = as_node(w), as_node(x)
    out = tc.matmul(w.value, x.value)
    w_val, x_val = w.value.data, x.value.data

    def vjp(g: np.ndarray):
        return g @ x_val.T, w_val.T @ g

    return Node(out, (w, x), "matmul", vjp)


def channel_mix(x: Any, w: Any) -> Node:
    """Apply `w` [C_out, C_in] at every position of `x` [B, C_in, ...] (a 1x1 convolution)."""
    x, w = as_node(x), as_node(w)
    if w.ndim != 2 or x.ndim < 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mix of {x.shape} with weights {w.shape}")
    x_val, w_val = x.value.data, w.value.data
    out = np.moveaxis(np.tensordot(w_val, x_val, axes=([1], [1])), 0, 1)

    def vjp(g: np.ndarray):
        dx = np.moveaxis(np.tensordot(w_val, g, axes=([0], [1])), 0, 1)
        rest = (0,) + tuple(range(2, g.ndim))
        dw = np.tensordot(g, x_val, axes=(rest, rest))
        return dx, dw

    return Node(Tensor.wrap(np.ascontiguousarray(out)), (x, w), "channel_mix", vjp)


def channel_bias(x: Any, b: Any) -> Node:
    """Add a per-channel bias `b` [C] to `x` [B, C, ...]."""
    x, b = as_node(x), as_node(b)
    return add(x, reshape(b, (1, -1) + (1,) * (x.ndim - 2)))


def channel_scale(x: Any, s: Any) -> Node:
    """Multiply `x` [B, C, ...] by a per-channel factor `s` [C]."""
    x, s = as_node(x), as_node(s)
    return mul(x, reshape(s, (1, -1) + (1,) * (x.ndim - 2)))


def reshape(x: Any, shape: Sequence[int]) -> Node:
    x = as_node(x)
    original = x.shape

    def vjp(g: np.ndarray):
        return (g.reshape(original),)

    return Node(Tensor.wrap(x.value.data.reshape(tuple(shape))), (x,), "reshape", vjp)


def concat(nodes: Sequence[Any], axis: int = 1) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat needs at least one operand")
    arrays = [n.value.data for n in nodes]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate shapes {[a.shape for a in arrays]} on axis {axis}") from e
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def vjp(g: np.ndarray):
        return np.split(g, bounds, axis=axis)

    return Node(Tensor.wrap(out), nodes, "concat", vjp)


def tile_channels(x: Any, reps: int) -> Node:
    """Repeat `x` along the channel axis `reps` times (concatenation of copies)."""
    x = as_node(x)
    tiling = (1, reps) + (1,) * (x.ndim - 2)

    def vjp(g: np.ndarray):
        split = g.reshape((g.shape[0], reps) + x.shape[1:])
        return (split.sum(axis=1),)

    return Node(Tensor.wrap(np.tile(x.value.data, tiling)), (x,), "tile", vjp)


def reduce_sum(x: Any, axes: Union[int, Sequence[int], None] = None, keepdims: bool = True) -> Node:
    x = as_node(x)
    axes = tuple(range(x.ndim)) if axes is None else tc.normalize_axes(axes, x.ndim)
    out = x.value.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g: np.ndarray):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(Tensor.wrap(np.asarray(out)), (x,), "sum", vjp)


def reduce_mean(x: Any, axes: Union[int, Sequence[int], None] = None, keepdims: bool = True) -> Node:
    x = as_node(x)
    axes = tuple(range(x.ndim)) if axes is None else tc.normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(reduce_sum(x, axes, keepdims), 1.0 / count)


def reduce_var(x: Any, axes: Union[int, Sequence[int], None] = None) -> Node:
    """Biased variance, differentiated through the mean."""
    x = as_node(x)
    centered = sub(x, reduce_mean(x, axes))
    return reduce_mean(mul(centered, centered), axes)


def l2_norm(x: Any, axes: Sequence[int]) -> Node:
    x = as_node(x)
    axes = tc.normalize_axes(axes, x.ndim)
    x_val = x.value.data
    norm = np.sqrt((x_val * x_val).sum(axis=axes, keepdims=True))

    def vjp(g: np.ndarray):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * x_val / safe, 0.0),)

    return Node(Tensor.wrap(norm), (x,), "l2_norm", vjp)


def sin(x: Any) -> Node:
    x = as_node(x)
    x_val = x.value.data

    def vjp(g: np.ndarray):
        return (g * np.cos(x_val),)

    return Node(tc.pointwise(x.value, "sin"), (x,), "sin", vjp)


def sigmoid(x: Any) -> Node:
    x = as_node(x)
    out = tc.pointwise(x.value, "sigmoid")
    s = out.data

    def vjp(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return Node(out, (x,), "sigmoid", vjp)


def gelu(x: Any) -> Node:
    x = as_node(x)
    x_val = x.value.data

    def vjp(g: np.ndarray):
        return (g * tc.gelu_grad_array(x_val),)

    return Node(tc.pointwise(x.value, "gelu"), (x,), "gelu", vjp)


def square(x: Any) -> Node:
    x = as_node(x)
    return mul(x, x)


def depthwise_conv(z: Any, k: Any) -> Node:
    """Same-padded depthwise cross-correlation; rank of `z` selects 1D or 2D."""
    z, k = as_node(z), as_node(k)
    spatial_rank = z.ndim - 2
    out = tc.depthwise_conv2d(z.value, k.value) if spatial_rank == 2 else tc.depthwise_conv1d(z.value, k.value)
    z_val, k_val = z.value.data, k.value.data
    kernel_shape = k_val.shape[2:]
    spatial = z_val.shape[2:]
    bcast = (1, -1) + (1,) * spatial_rank

    def vjp(g: np.ndarray):
        zp = tc.pad_same(z_val, kernel_shape)
        dzp = np.zeros_like(zp)
        dk = np.zeros_like(k_val)
        reduce_axes = (0,) + tuple(range(2, g.ndim))
        for offset in tc.kernel_offsets(kernel_shape):
            window = tc.window_slices(offset, spatial)
            tap = (slice(None), 0) + offset
            dzp[window] += k_val[tap].reshape(bcast) * g
            dk[tap] = (g * zp[window]).sum(axis=reduce_axes)
        crop = (slice(None), slice(None)) + tuple(slice((n - 1) // 2, (n - 1) // 2 + s) for n, s in zip(kernel_shape, spatial))
        return dzp[crop], dk

    return Node(out, (z, k), "depthwise_conv", vjp)


def circular_conv(z: Any, k: Any) -> Node:
    z, k = as_node(z), as_node(k)
    out = tc.circular_conv_fft(z.value, k.value)
    z_val, k_val = z.value.data, k.value.data

    def vjp(g: np.ndarray):
        return tc.circular_correlate(g, k_val), tc.circular_correlate(g, z_val)

    return Node(out, (z, k), "circular_conv", vjp)


def adaptive_avg_pool(x: Any, out_size: Sequence[int]) -> Node:
    x = as_node(x)
    out = tc.adaptive_pool_array(x.value.data, tuple(out_size))
    spatial = x.shape[2:]

    def vjp(g: np.ndarray):
        dx = g
        for axis, (n_in, n_out) in enumerate(zip(spatial, out_size), start=2):
            mat = tc.pool_matrix(n_in, n_out, g.dtype)
            dx = np.moveaxis(np.tensordot(dx, mat, axes=([axis], [0])), -1, axis)
        return (dx,)

    return Node(Tensor.wrap(out), (x,), "adaptive_avg_pool", vjp)


def topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node, params: Optional[Iterable[Parameter]] = None) -> Dict[str, Tensor]:
    """Return d(loss)/d(param) for every reachable parameter (zeros for `params` not reached)."""
    if loss.value.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node._grad = None
    loss._grad = np.ones(loss.shape, dtype=loss.value.dtype)
    for node in reversed(order):
        if node._grad is None or node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node._grad)):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise GradientError(f"{node.op}: gradient shape {g.shape} does not match {parent.shape}")
            g = np.asarray(g, dtype=parent.value.dtype)
            parent._grad = g if parent._grad is None else parent._grad + g

    grads: Dict[str, Tensor] = {}
    for node in order:
        if isinstance(node, Parameter) and node.trainable:
            grad = node._grad.copy() if node._grad is not None else np.zeros(node.shape, dtype=node.value.dtype)
            grads[node.name] = Tensor.wrap(grad)
    for param in params or ():
        if param.trainable and param.name not in grads:
            grads[param.name] = Tensor.wrap(np.zeros(param.shape, dtype=param.value.dtype))
    return grads


@dataclass
class GradCheckRow:
    name: str
    entries: int
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    rows: List[GradCheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    @property
    def max_rel_error(self) -> float:
        return max((row.max_rel_error for row in self.rows), default=0.0)

    def failures(self) -> List[GradCheckRow]:
        return [row for row in self.rows if not row.passed]


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Node],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of `f()` with central differences, one row per parameter.

    `max_entries` samples a deterministic subset of entries per tensor; `floor` bounds
    the denominator of the relative error so gradients near zero compare absolutely.
    """
    rng = np.random.default_rng(seed)
    grads = backward(f(), params)
    report = GradCheckReport(tol=tol)
    for param in params:
        if not param.trainable:
            continue
        original = param.value
        base = original.numpy()
        analytic = grads[param.name].data
        indices = list(np.ndindex(base.shape))
        if max_entries is not None and len(indices) > max_entries:
            picks = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(picks)]
        worst = 0.0
        try:
            for idx in indices:
                nudged = base.copy()
                nudged[idx] += step
                param.assign(Tensor(nudged, dtype=base.dtype))
                f_plus = f().item()
                nudged[idx] -= 2 * step
                param.assign(Tensor(nudged, dtype=base.dtype))
                f_minus = f().item()
                numeric = (f_plus - f_minus) / (2 * step)
                worst = max(worst, relative_error(float(analytic[idx]), numeric, floor))
        finally:
            param.assign(original)
        row = GradCheckRow(param.name, len(indices), worst, bool(worst < tol))
        if not row.passed:
            logging.warning("Gradient check failed for %s: max relative error %.3e", param.name, worst)
        report.rows.append(row)
    return report


def sgd_step(params: Sequence[Parameter], grads: Dict[str, Tensor], lr: float, weight_decay: float = 0.0) -> Sequence[Parameter]:
    """p <- p - lr * (g + weight_decay * p) for every trainable p."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for param in params:
        if not param.trainable:
            continue
        g = grads[param.name]
        if g.shape != param.shape:
            raise GradientError(f"{param.name}: gradient shape {g.shape} does not match {param.shape}")
        p = param.value.data
        param.assign(Tensor.wrap(p - lr * (g.data + weight_decay * p)))
    return params


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Dict[str, Tensor]) -> None:
        for param in self.params:
            g = grads[param.name]
            if g.shape != param.shape:
                raise GradientError(f"{param.name}: gradient shape {g.shape} does not match {param.shape}")
            p = param.value.data
            update = g.data + self.weight_decay * p
            if self.momentum:
                prev = self.velocity.get(param.name)
                update = update if prev is None else self.momentum * prev + update
                self.velocity[param.name] = update
            param.assign(Tensor.wrap(p - self.lr * update))
