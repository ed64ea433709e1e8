"""Dense tensors with reverse-mode differentiation and the Adam optimizer.

Only the operations the waypoint network needs are provided. Images are laid out
channels-last (N×H×W×C); convolution kernels are k×k×Cin×Cout.
"""
import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from cropway.errors import ConfigError, GradientError, ShapeError

__all__ = [
    "ACTIVATIONS",
    "REDUCTIONS",
    "DEFAULT_DTYPE",
    "DiffTensor",
    "Function",
    "AdamState",
    "Adam",
    "conv2d",
    "conv2d_transpose",
    "activation",
    "reduce",
    "elementwise",
    "dense",
    "concat",
    "backward",
    "adam_step",
    "grad_check",
    "grad_enabled",
    "no_grad",
]

logger = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "tanh", "relu", "mish", "softplus", "linear")
REDUCTIONS = ("mean", "max", "sum")
ELEMENTWISE = ("add", "mul", "sub")

#: Training runs in 32-bit; gradient checks pass float64 arrays explicitly.
DEFAULT_DTYPE = np.float32

Axes = Union[None, int, Sequence[int]]

_node_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph in this thread: results of operations never require gradients."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Function:
    """Base class of differentiable operations.

    ``forward`` receives the raw arrays of the parent tensors and may keep whatever it
    needs on ``self``; ``backward`` receives dL/d(output) and returns one gradient per
    parent (``None`` when a parent needs none).
    """

    def __init__(self, *parents: "DiffTensor") -> None:
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "DiffTensor", **kwargs: Any) -> "DiffTensor":
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        # Constant subgraphs keep no creator so their intermediates can be freed.
        return DiffTensor(out, requires_grad=requires_grad, creator=fn if requires_grad else None)


class DiffTensor:
    """A dense array taking part in a differentiable computation."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype: Optional[Any] = None,
    ) -> None:
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype:  # type: ignore[type-arg]
        return self.data.dtype

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Any) -> "DiffTensor":
        return elementwise(self, _lift(other, self), "add")

    def __radd__(self, other: Any) -> "DiffTensor":
        return elementwise(_lift(other, self), self, "add")

    def __sub__(self, other: Any) -> "DiffTensor":
        return elementwise(self, _lift(other, self), "sub")

    def __rsub__(self, other: Any) -> "DiffTensor":
        return elementwise(_lift(other, self), self, "sub")

    def __mul__(self, other: Any) -> "DiffTensor":
        return elementwise(self, _lift(other, self), "mul")

    def __rmul__(self, other: Any) -> "DiffTensor":
        return elementwise(_lift(other, self), self, "mul")

    def __getitem__(self, key: Any) -> "DiffTensor":
        return _Index.apply(self, key=key)


def _lift(value: Any, like: DiffTensor) -> DiffTensor:
    """Wrap a constant so it can meet ``like`` in an elementwise op."""
    if isinstance(value, DiffTensor):
        return value
    array = np.asarray(value, dtype=like.dtype)
    if array.ndim == 0:
        array = array.reshape((1,) * like.ndim)
    return DiffTensor(array)


# Elementwise and dense


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast rank {len(a)} against rank {len(b)} (shapes {a} and {b})")
    out = []
    for axis, (da, db) in enumerate(zip(a, b)):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"dim {axis} mismatch: {da} vs {db} (shapes {a} and {b})")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class _Elementwise(Function):
    def forward(self, a: np.ndarray, b: np.ndarray, kind: str = "add") -> np.ndarray:  # type: ignore[override]
        _broadcast_shape(a.shape, b.shape)
        self.kind = kind
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        a, b = (p.data for p in self.parents)
        if self.kind == "add":
            ga, gb = grad, grad
        elif self.kind == "sub":
            ga, gb = grad, -grad
        else:
            ga, gb = grad * b, grad * a
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def elementwise(a: DiffTensor, b: DiffTensor, kind: str) -> DiffTensor:
    """``a (+|-|*) b`` where every axis is either equal or of size 1 on one side."""
    if kind not in ELEMENTWISE:
        raise ConfigError(f"unknown elementwise kind {kind!r}, expected one of {ELEMENTWISE}")
    return _Elementwise.apply(a, b, kind=kind)


class _Dense(Function):
    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        if w.ndim != 2:
            raise ShapeError(f"dense weights must be rank 2, got shape {w.shape}")
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"input dim -1 is {x.shape[-1]} but weights dim 0 is {w.shape[0]}")
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match weights dim 1 ({w.shape[1]})")
        self.flat = x.reshape(-1, x.shape[-1])
        return (self.flat @ w + b).reshape(x.shape[:-1] + (w.shape[1],))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x, w, _ = (p.data for p in self.parents)
        g = grad.reshape(-1, w.shape[1])
        return (g @ w.T).reshape(x.shape), self.flat.T @ g, g.sum(axis=0)


def dense(x: DiffTensor, weights: DiffTensor, bias: DiffTensor) -> DiffTensor:
    """Affine map over the last axis."""
    return _Dense.apply(x, weights, bias)


# Activations


class _Activation(Function):
    def forward(self, x: np.ndarray, kind: str = "linear") -> np.ndarray:  # type: ignore[override]
        self.kind = kind
        if kind == "sigmoid":
            out = expit(x)
        elif kind == "tanh":
            out = np.tanh(x)
        elif kind == "relu":
            out = np.maximum(x, 0)
        elif kind == "softplus":
            out = np.logaddexp(0, x)
        elif kind == "mish":
            self.tanh_sp = np.tanh(np.logaddexp(0, x))
            out = x * self.tanh_sp
        else:
            out = x.copy()
        self.out = out
        return out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x = self.parents[0].data
        if self.kind == "sigmoid":
            return (grad * self.out * (1 - self.out),)
        if self.kind == "tanh":
            return (grad * (1 - self.out * self.out),)
        if self.kind == "relu":
            return (grad * (x > 0),)
        if self.kind == "softplus":
            return (grad * expit(x),)
        if self.kind == "mish":
            t = self.tanh_sp
            return (grad * (t + x * (1 - t * t) * expit(x)),)
        return (grad,)


def activation(x: DiffTensor, kind: str) -> DiffTensor:
    if kind not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
    return _Activation.apply(x, kind=kind)


# Reductions, indexing, concatenation


def _normalize_axes(axes: Axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ShapeError(f"axis {axis} out of range for rank {ndim}")
        out.append(axis % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    if not out:
        raise ShapeError("reduce needs at least one axis")
    return tuple(sorted(out))


class _Reduce(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, kind: str = "sum", axes: Tuple[int, ...] = (), keepdims: bool = False
    ) -> np.ndarray:
        for axis in axes:
            if x.shape[axis] == 0:
                raise ShapeError(f"cannot reduce over empty dim {axis}")
        self.kind, self.axes, self.keepdims = kind, axes, keepdims
        if kind == "sum":
            return np.asarray(x.sum(axis=axes, keepdims=keepdims))
        if kind == "mean":
            return np.asarray(x.mean(axis=axes, keepdims=keepdims))
        # max: flatten the reduced axes last so argmax picks the lowest linear index on ties
        self.kept = [a for a in range(x.ndim) if a not in axes]
        moved = np.transpose(x, self.kept + list(axes))
        flat = moved.reshape(moved.shape[: len(self.kept)] + (-1,))
        self.argmax = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]
        if keepdims:
            out = np.expand_dims(out, axes)
        return np.asarray(out)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        shape = self.parents[0].shape
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        if self.kind == "sum":
            return (np.broadcast_to(grad, shape).copy(),)
        if self.kind == "mean":
            count = int(np.prod([shape[a] for a in self.axes]))
            return (np.broadcast_to(grad / count, shape).copy(),)
        kept_shape = tuple(shape[a] for a in self.kept)
        reduced_shape = tuple(shape[a] for a in self.axes)
        flat = np.zeros(kept_shape + (int(np.prod(reduced_shape)),), dtype=grad.dtype)
        np.put_along_axis(flat, self.argmax[..., None], grad.reshape(kept_shape)[..., None], axis=-1)
        moved = flat.reshape(kept_shape + reduced_shape)
        return (np.transpose(moved, np.argsort(self.kept + list(self.axes))),)


def reduce(x: DiffTensor, kind: str, axes: Axes = None, keepdims: bool = False) -> DiffTensor:
    """Sum, mean or max over ``axes`` (all axes when ``None``).

    The max gradient goes to the first maximal element only.
    """
    if kind not in REDUCTIONS:
        raise ConfigError(f"unknown reduction {kind!r}, expected one of {REDUCTIONS}")
    return _Reduce.apply(x, kind=kind, axes=_normalize_axes(axes, x.ndim), keepdims=keepdims)


class _Index(Function):
    def forward(self, x: np.ndarray, key: Any = None) -> np.ndarray:  # type: ignore[override]
        self.key = key
        return np.array(x[key])

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        x = self.parents[0].data
        out = np.zeros_like(x)
        np.add.at(out, self.key, grad)
        return (out,)


class _Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = -1) -> np.ndarray:
        first = arrays[0]
        axis = axis % first.ndim
        for i, array in enumerate(arrays[1:], start=1):
            if array.ndim != first.ndim:
                raise ShapeError(f"concat input {i} has rank {array.ndim}, expected {first.ndim}")
            for dim in range(first.ndim):
                if dim != axis and array.shape[dim] != first.shape[dim]:
                    raise ShapeError(f"concat input {i} dim {dim} is {array.shape[dim]}, expected {first.shape[dim]}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[DiffTensor], axis: int = -1) -> DiffTensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    return _Concat.apply(*tensors, axis=axis)


# Convolutions


def _same_padding(size: int, stride: int, k: int) -> Tuple[int, int, int]:
    """Output size and (before, after) padding; odd deficits pad one more after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    k = w.shape[0]
    out = np.zeros((xp.shape[0], oh, ow, w.shape[3]), dtype=np.result_type(xp, w))
    for i in range(k):
        for j in range(k):
            out += xp[:, _window(i, stride, oh), _window(j, stride, ow), :] @ w[i, j]
    return out


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, stride: int, padded_shape: Tuple[int, ...]) -> np.ndarray:
    k = w.shape[0]
    oh, ow = g.shape[1:3]
    out = np.zeros(padded_shape, dtype=np.result_type(g, w))
    for i in range(k):
        for j in range(k):
            out[:, _window(i, stride, oh), _window(j, stride, ow), :] += g @ w[i, j].T
    return out


def _kernel_grad(xp: np.ndarray, g: np.ndarray, stride: int, k: int) -> np.ndarray:
    oh, ow, c_out = g.shape[1:]
    c_in = xp.shape[3]
    flat_g = g.reshape(-1, c_out)
    out = np.zeros((k, k, c_in, c_out), dtype=np.result_type(xp, g))
    for i in range(k):
        for j in range(k):
            patch = xp[:, _window(i, stride, oh), _window(j, stride, ow), :].reshape(-1, c_in)
            out[i, j] = patch.T @ flat_g
    return out


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, in_axis: int, out_axis: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be H×W×C or N×H×W×C, got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError(f"kernel must be rank 4, got shape {w.shape}")
    if w.shape[0] != w.shape[1]:
        raise ShapeError(f"kernel dim 1 ({w.shape[1]}) must equal kernel dim 0 ({w.shape[0]})")
    if w.shape[0] % 2 == 0:
        raise ShapeError(f"kernel dim 0 must be odd, got {w.shape[0]}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if x.shape[3] != w.shape[in_axis]:
        raise ShapeError(f"input dim 3 has {x.shape[3]} channels but kernel dim {in_axis} has {w.shape[in_axis]}")
    if b.shape != (w.shape[out_axis],):
        raise ShapeError(f"bias shape {b.shape} does not match kernel dim {out_axis} ({w.shape[out_axis]})")


class _Conv2d(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1
    ) -> np.ndarray:
        self.squeeze = x.ndim == 3
        if self.squeeze:
            x = x[None]
        _check_conv(x, w, b, stride, in_axis=2, out_axis=3)
        _, h, wd, _ = x.shape
        k = w.shape[0]
        oh, top, bottom = _same_padding(h, stride, k)
        ow, left, right = _same_padding(wd, stride, k)
        self.stride, self.k = stride, k
        self.crop = (slice(top, top + h), slice(left, left + wd))
        self.xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        out = _correlate(self.xp, w, stride, oh, ow) + b
        return out[0] if self.squeeze else out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.squeeze:
            grad = grad[None]
        w = self.parents[1].data
        gxp = _correlate_adjoint(grad, w, self.stride, self.xp.shape)
        gx = gxp[:, self.crop[0], self.crop[1], :]
        gw = _kernel_grad(self.xp, grad, self.stride, self.k)
        gb = grad.sum(axis=(0, 1, 2))
        return (gx[0] if self.squeeze else gx), gw, gb


def conv2d(x: DiffTensor, kernel: DiffTensor, bias: Optional[DiffTensor] = None, stride: int = 1) -> DiffTensor:
    """Same-padded 2-D convolution, output ceil(H/stride)×ceil(W/stride)."""
    if bias is None:
        bias = DiffTensor(np.zeros(kernel.shape[-1], dtype=kernel.dtype))
    return _Conv2d.apply(x, kernel, bias, stride=stride)


class _Conv2dTranspose(Function):
    def forward(  # type: ignore[override]
        self,
        x: np.ndarray,
        w: np.ndarray,
        b: np.ndarray,
        stride: int = 2,
        output_size: Optional[Tuple[int, int]] = None,
    ) -> np.ndarray:
        self.squeeze = x.ndim == 3
        if self.squeeze:
            x = x[None]
        _check_conv(x, w, b, stride, in_axis=3, out_axis=2)
        n, h, wd, _ = x.shape
        k = w.shape[0]
        ho, wo = output_size if output_size is not None else (h * stride, wd * stride)
        rh, top, bottom = _same_padding(ho, stride, k)
        rw, left, right = _same_padding(wo, stride, k)
        if (rh, rw) != (h, wd):
            raise ShapeError(f"output size {ho}×{wo} does not reduce back to input {h}×{wd} with stride {stride}")
        self.stride, self.k = stride, k
        self.pads = ((0, 0), (top, bottom), (left, right), (0, 0))
        padded = _correlate_adjoint(x, w, stride, (n, ho + top + bottom, wo + left + right, w.shape[2]))
        out = padded[:, top : top + ho, left : left + wo, :] + b
        return out[0] if self.squeeze else out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.squeeze:
            grad = grad[None]
        x = self.parents[0].data
        if self.squeeze:
            x = x[None]
        w = self.parents[1].data
        gp = np.pad(grad, self.pads)
        gx = _correlate(gp, w, self.stride, x.shape[1], x.shape[2])
        gw = _kernel_grad(gp, x, self.stride, self.k)
        gb = grad.sum(axis=(0, 1, 2))
        return (gx[0] if self.squeeze else gx), gw, gb


def conv2d_transpose(
    x: DiffTensor,
    kernel: DiffTensor,
    bias: Optional[DiffTensor] = None,
    stride: int = 2,
    output_size: Optional[Tuple[int, int]] = None,
) -> DiffTensor:
    """Adjoint of the same-padded strided convolution with the same kernel.

    The kernel is laid out as the forward convolution it transposes, k×k×Cout×Cin.
    ``output_size`` defaults to H·stride × W·stride; any size that convolves back to
    H×W is accepted.
    """
    if bias is None:
        bias = DiffTensor(np.zeros(kernel.shape[2], dtype=kernel.dtype))
    return _Conv2dTranspose.apply(x, kernel, bias, stride=stride, output_size=output_size)


# Backward pass


def _topological_order(root: DiffTensor) -> List[DiffTensor]:
    order: List[DiffTensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        if node.creator is not None:
            for parent in reversed(node.creator.parents):
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: DiffTensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires it.

    Leaf gradients add up across calls until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a loss that depends on no trainable tensor")
        return
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(node.node_id, None)
        if grad is None:
            continue
        if node.creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node.creator.parents, node.creator.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + parent_grad
            else:
                grads[parent.node_id] = parent_grad


# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, grad in grads.items():
        if name not in params:
            raise GradientError(f"gradient given for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient of {name!r} has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, grad in grads.items():
        param = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


class Adam:
    """Adam over a set of named tensors, reading gradients from ``.grad``."""

    def __init__(
        self,
        params: Mapping[str, DiffTensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.requires_grad and p.grad is not None}
        adam_step({name: p.data for name, p in self.params.items()}, grads, self.state, self.lr)


# Gradient check


def grad_check(
    function: Callable[[DiffTensor], DiffTensor],
    wrt: DiffTensor,
    step: float = 1e-4,
    analytic: Optional[np.ndarray] = None,
    samples: Optional[int] = None,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Worst relative error between the analytic and the central-difference gradient.

    ``wrt`` is perturbed in place, so ``function`` may ignore its argument and read a
    tensor it already holds (e.g. a model parameter). When ``samples`` is given only
    that many randomly chosen elements are checked. Relative errors are taken against
    ``max(|analytic|, |numeric|)`` floored at ``max(atol, 1e-3 · max|analytic|)`` so that
    near-zero entries do not dominate.
    """
    if analytic is None:
        saved = wrt.grad
        wrt.grad = None
        backward(function(wrt))
        analytic = wrt.grad if wrt.grad is not None else np.zeros_like(wrt.data)
        wrt.grad = saved
    analytic = np.asarray(analytic).reshape(-1)
    if analytic.size != wrt.data.size:
        raise ShapeError(f"analytic gradient has {analytic.size} elements, tensor has {wrt.data.size}")

    if not wrt.data.flags.c_contiguous:
        wrt.data = np.ascontiguousarray(wrt.data)
    flat = wrt.data.reshape(-1)
    indices: Sequence[int] = range(flat.size)
    if samples is not None and samples < flat.size:
        indices = np.sort(np.random.default_rng(seed).choice(flat.size, size=samples, replace=False))

    floor = max(atol, 1e-3 * float(np.max(np.abs(analytic), initial=0.0)))
    worst = 0.0
    for idx in indices:
        original = flat[idx]
        flat[idx] = original + step
        plus = function(wrt).item()
        flat[idx] = original - step
        minus = function(wrt).item()
        flat[idx] = original
        numeric = (plus - minus) / (2 * step)
        exact = float(analytic[idx])
        worst = max(worst, abs(numeric - exact) / max(abs(numeric), abs(exact), floor))
    return worst
