"""
Reverse-mode automatic differentiation over dense float arrays.

Every differentiable computation in the lab (model forward pass, loss, attack
gradients) is recorded on a `Tape`. A tape is an append-only list of nodes;
each node stores the forward value of one primitive, the ids of its operands
and whatever the backward rule needs. `backward` walks the tape once, from the
loss node down to id 0, and returns a `Grad` mapping node id -> gradient.

Tensors are float32 unless the tape is created with another dtype
(`finite_diff_check` uses float64 so rounding noise does not mask rule errors).
"""
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rp_utils import ShapeMismatchError, setup_logger

logger = setup_logger(__name__)

DTYPE = np.float32


def stable_tanh(x: np.ndarray) -> np.ndarray:
    """tanh(x) = (e^x - e^-x)/(e^x + e^-x), evaluated on -|x| so exp never overflows"""
    e = np.exp(-2.0 * np.abs(x))
    return np.sign(x) * (1.0 - e) / (1.0 + e)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """sigmoid(x) = 1/(1 + e^-x), split on the sign of x"""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


@dataclass
class Node:
    id: int
    kind: str
    operands: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attributes: Dict[str, Any] = field(default_factory=dict)
    saved: Dict[str, Any] = field(default_factory=dict)


class Tensor:
    """Handle to one node of a tape"""

    __slots__ = ('tape', 'id')

    def __init__(self, tape: 'Tape', node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the value"""
        return self.value.reshape(-1)

    def __add__(self, other):
        return add(self, self.tape.lift(other))

    def __radd__(self, other):
        return add(self.tape.lift(other), self)

    def __sub__(self, other):
        return sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return sub(self.tape.lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, self.tape.lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self.tape.lift(other))

    def __repr__(self):
        return f"Tensor(id={self.id}, kind={self.tape.nodes[self.id].kind}, shape={self.shape})"


class Grad(dict):
    """Mapping node id -> gradient of the loss w.r.t. that node's value"""

    def wrt(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self.get(tensor.id)


class Primitive(NamedTuple):
    forward: Callable[..., Tuple[np.ndarray, Dict[str, Any]]]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]


PRIMITIVES: Dict[str, Primitive] = {}


def primitive(kind: str, backward: Callable):
    """Register a forward function together with its backward rule"""
    def register(forward: Callable):
        PRIMITIVES[kind] = Primitive(forward, backward)
        return forward
    return register


class Tape:
    """Append-only record of primitive operations"""

    def __init__(self, dtype=DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, kind, operands, value, requires_grad, attributes=None, saved=None) -> Tensor:
        node = Node(
            id=len(self.nodes),
            kind=kind,
            operands=tuple(operands),
            value=value,
            requires_grad=requires_grad,
            attributes=attributes or {},
            saved=saved or {},
        )
        self.nodes.append(node)
        return Tensor(self, node.id)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        """Record an input value; gradients are collected for it when requires_grad"""
        array = np.array(value, dtype=self.dtype, copy=True)
        return self._append('leaf', (), array, requires_grad)

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def lift(self, value) -> Tensor:
        """Pass tensors of this tape through, record anything else as a constant"""
        if isinstance(value, Tensor):
            if value.tape is not self:
                raise ShapeMismatchError("Tensor belongs to a different tape")
            return value
        return self.constant(value)

    def record(self, kind: str, operands: Sequence[Tensor], **attributes) -> Tensor:
        """
        Compute a primitive's forward value and append it to the tape

        Parameters:
        - kind: Registered primitive name
        - operands: Operand tensors recorded on this tape
        - attributes: Non-differentiable op settings (axis, labels, mask...)

        Returns:
        Tensor handle of the new node
        """
        if kind not in PRIMITIVES:
            raise ValueError(f"Unknown op-kind '{kind}'")
        operands = [self.lift(op) for op in operands]
        values = [self.nodes[op.id].value for op in operands]
        value, saved = PRIMITIVES[kind].forward(*values, **attributes)
        value = np.asarray(value, dtype=self.dtype)
        requires_grad = any(self.nodes[op.id].requires_grad for op in operands)
        return self._append(kind, [op.id for op in operands], value, requires_grad, attributes, saved)


def _is_scalar(shape: Tuple[int, ...]) -> bool:
    return shape == () or shape == (1,)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and not (_is_scalar(a.shape) or _is_scalar(b.shape)):
        raise ShapeMismatchError(f"{kind}: shapes {list(a.shape)} and {list(b.shape)} do not match")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def _add_backward(g, a, b, out, saved, **attrs):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@primitive('add', _add_backward)
def _add(a, b):
    _check_broadcast('add', a, b)
    return a + b, {}


def _sub_backward(g, a, b, out, saved, **attrs):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@primitive('sub', _sub_backward)
def _sub(a, b):
    _check_broadcast('sub', a, b)
    return a - b, {}


def _mul_backward(g, a, b, out, saved, **attrs):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive('mul', _mul_backward)
def _mul(a, b):
    _check_broadcast('mul', a, b)
    return a * b, {}


def _scalar_mul_backward(g, a, out, saved, scalar):
    return (g * np.asarray(scalar, dtype=g.dtype),)


@primitive('scalar_mul', _scalar_mul_backward)
def _scalar_mul(a, scalar):
    return a * np.asarray(scalar, dtype=a.dtype), {}


def _matmul_backward(g, a, b, out, saved, **attrs):
    return g @ b.T, a.T @ g


@primitive('matmul', _matmul_backward)
def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not match")
    return a @ b, {}


def _bias_add_backward(g, x, b, out, saved, **attrs):
    axes = tuple(i for i in range(g.ndim) if i != 1)
    return g, np.sum(g, axis=axes)


@primitive('bias_add', _bias_add_backward)
def _bias_add(x, b):
    if x.ndim < 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"bias_add: shapes {list(x.shape)} and {list(b.shape)} do not match")
    return x + b.reshape((1, -1) + (1,) * (x.ndim - 2)), {}


def _conv2d_backward(g, x, w, out, saved, **attrs):
    kh, kw = w.shape[2], w.shape[3]
    windows = saved['windows']
    # dW[o,c,i,j] = sum_{b,y,x} g[b,o,y,x] * x[b,c,y+i,x+j]
    grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
    # dX is the full correlation of g with the flipped kernel
    padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    g_windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    grad_x = np.tensordot(g_windows, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return grad_x.transpose(0, 3, 1, 2), grad_w


@primitive('conv2d', _conv2d_backward)
def _conv2d(x, w):
    """Stride 1, valid padding; x [B,C,H,W], w [O,C,kh,kw] -> [B,O,H-kh+1,W-kw+1]"""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] \
            or x.shape[2] < w.shape[2] or x.shape[3] < w.shape[3]:
        raise ShapeMismatchError(f"conv2d: shapes {list(x.shape)} and {list(w.shape)} do not match")
    windows = sliding_window_view(x, (w.shape[2], w.shape[3]), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2), {'windows': windows}


def _maxpool2d_backward(g, x, out, saved, **attrs):
    b, c, h, w = x.shape
    ho, wo = g.shape[2], g.shape[3]
    picks = np.zeros((b, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(picks, saved['argmax'][..., None], g[..., None], axis=-1)
    picks = picks.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
    grad = np.zeros_like(x)
    grad[:, :, :2 * ho, :2 * wo] = picks
    return (grad,)


@primitive('maxpool2d', _maxpool2d_backward)
def _maxpool2d(x):
    """2x2 max pooling, stride 2; trailing odd rows/columns are dropped"""
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeMismatchError(f"maxpool2d: shape {list(x.shape)} is not a [B,C,H>=2,W>=2] batch")
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :, :2 * ho, :2 * wo].reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, ho, wo, 4)
    # argmax returns the first maximum in row-major scan order (ties go to it)
    argmax = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, {'argmax': argmax}


def _relu_backward(g, x, out, saved, **attrs):
    return (g * (x > 0),)


@primitive('relu', _relu_backward)
def _relu(x):
    return np.maximum(x, 0), {}


def _tanh_backward(g, x, out, saved, **attrs):
    return (g * (1 - out * out),)


@primitive('tanh', _tanh_backward)
def _tanh(x):
    return stable_tanh(x), {}


def _sigmoid_backward(g, x, out, saved, **attrs):
    return (g * out * (1 - out),)


@primitive('sigmoid', _sigmoid_backward)
def _sigmoid(x):
    return stable_sigmoid(x), {}


def _masked_softmax(x: np.ndarray, axis: int, mask: Optional[np.ndarray]) -> np.ndarray:
    shifted = x if mask is None else np.where(mask, x, -np.inf)
    peak = np.max(shifted, axis=axis, keepdims=True)
    e = np.exp(shifted - peak)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_backward(g, x, out, saved, axis=-1, mask=None):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


@primitive('softmax', _softmax_backward)
def _softmax(x, axis=-1, mask=None):
    """Softmax along axis; entries where mask is False get zero mass"""
    if mask is not None and np.shape(mask) != x.shape:
        raise ShapeMismatchError(f"softmax: mask shape {list(np.shape(mask))} and input {list(x.shape)} do not match")
    return _masked_softmax(x, axis, mask), {}


def _softmax_ce_backward(g, logits, out, saved, labels, reduction='mean'):
    grad = saved['probs'].copy()
    grad[np.arange(len(labels)), labels] -= 1
    if reduction == 'mean':
        grad /= len(labels)
    return (grad * g,)


@primitive('softmax_cross_entropy', _softmax_ce_backward)
def _softmax_cross_entropy(logits, labels, reduction='mean'):
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"softmax_cross_entropy: logits {list(logits.shape)} and labels {list(labels.shape)} do not match")
    if reduction not in ('mean', 'sum'):
        raise ValueError(f"Unknown reduction '{reduction}'")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {logits.shape[1]})")
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    per_sample = log_norm - shifted[np.arange(len(labels)), labels]
    probs = np.exp(shifted - log_norm[:, None])
    total = np.sum(per_sample)
    if reduction == 'mean':
        total = total / len(labels)
    return np.asarray(total), {'probs': probs}


def _sum_backward(g, x, out, saved, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


@primitive('sum', _sum_backward)
def _sum(x, axis=None):
    return np.sum(x, axis=axis), {}


def _mean_backward(g, x, out, saved, **attrs):
    return (np.full(x.shape, g / x.size, dtype=x.dtype),)


@primitive('mean', _mean_backward)
def _mean(x):
    return np.mean(x), {}


def _reshape_backward(g, x, out, saved, shape):
    return (g.reshape(x.shape),)


@primitive('reshape', _reshape_backward)
def _reshape(x, shape):
    try:
        return x.reshape(shape), {}
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot reshape {list(x.shape)} into {list(shape)}")


def _cumsum_backward(g, x, out, saved, axis=0):
    return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)


@primitive('cumsum', _cumsum_backward)
def _cumsum(x, axis=0):
    return np.cumsum(x, axis=axis), {}


def add(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record('add', [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record('sub', [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record('mul', [a, b])


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return a.tape.record('scalar_mul', [a], scalar=float(scalar))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.record('matmul', [a, b])


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return x.tape.record('bias_add', [x, b])


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    return x.tape.record('conv2d', [x, w])


def maxpool2d(x: Tensor) -> Tensor:
    return x.tape.record('maxpool2d', [x])


def relu(x: Tensor) -> Tensor:
    return x.tape.record('relu', [x])


def tanh(x: Tensor) -> Tensor:
    return x.tape.record('tanh', [x])


def sigmoid(x: Tensor) -> Tensor:
    return x.tape.record('sigmoid', [x])


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return x.tape.record('softmax', [x], axis=axis, mask=mask)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = 'mean') -> Tensor:
    return logits.tape.record('softmax_cross_entropy', [logits],
                              labels=np.asarray(labels, dtype=np.int64), reduction=reduction)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return x.tape.record('sum', [x], axis=axis)


def mean(x: Tensor) -> Tensor:
    return x.tape.record('mean', [x])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return x.tape.record('reshape', [x], shape=tuple(shape))


def cumsum(x: Tensor, axis: int = 0) -> Tensor:
    return x.tape.record('cumsum', [x], axis=axis)


def backward(tape: Tape, loss: Tensor) -> Grad:
    """
    Propagate d(loss)/d(node) through the tape

    Parameters:
    - tape: Tape holding the computation
    - loss: Scalar tensor recorded on the tape

    Returns:
    Grad with an entry for every node reachable backward from loss
    """
    loss_node = tape.nodes[loss.id]
    if loss_node.value.size != 1:
        raise ShapeMismatchError(f"backward: loss must be scalar, got shape {list(loss_node.value.shape)}")

    grads = Grad()
    grads[loss.id] = np.ones_like(loss_node.value)

    for node_id in range(loss.id, -1, -1):
        if node_id not in grads:
            continue
        node = tape.nodes[node_id]
        if not node.operands:
            continue
        operand_nodes = [tape.nodes[i] for i in node.operands]
        if not any(op.requires_grad for op in operand_nodes):
            continue
        rule = PRIMITIVES[node.kind].backward
        operand_grads = rule(grads[node_id], *[op.value for op in operand_nodes],
                             node.value, node.saved, **node.attributes)
        for op, grad in zip(operand_nodes, operand_grads):
            if grad is None or not op.requires_grad:
                continue
            grad = np.asarray(grad, dtype=tape.dtype)
            if op.id in grads:
                grads[op.id] = grads[op.id] + grad
            else:
                grads[op.id] = grad
    return grads


def finite_diff_check(f: Callable[[Tape, Tensor], Tensor], x: np.ndarray, h: float = 1e-3,
                      dtype=np.float64) -> float:
    """
    Compare the analytic gradient of a scalar function with central differences

    Points where f has a kink (relu at 0, pooling ties) are excluded by the caller:
    the backward rule returns one subgradient there, the difference quotient another.

    Parameters:
    - f: Builds a scalar tensor from (tape, x) using tape primitives
    - x: Point to check at
    - h: Central-difference step (> 0)
    - dtype: Tape dtype used for both the analytic and the numeric side

    Returns:
    max over coordinates of |analytic - numeric| / max(1e-8, |numeric|)
    """
    if h <= 0:
        raise ValueError("Finite-difference step must be positive")
    x = np.array(x, dtype=dtype)

    tape = Tape(dtype)
    xt = tape.leaf(x)
    grads = backward(tape, f(tape, xt))
    analytic = grads.get(xt.id)
    if analytic is None:
        analytic = np.zeros_like(x)

    def evaluate(point: np.ndarray) -> float:
        probe = Tape(dtype)
        return float(f(probe, probe.leaf(point, requires_grad=False)).value)

    numeric = np.zeros_like(x)
    for i in range(x.size):
        shifted = x.copy()
        shifted.flat[i] = x.flat[i] + h
        upper = evaluate(shifted)
        shifted.flat[i] = x.flat[i] - h
        lower = evaluate(shifted)
        numeric.flat[i] = (upper - lower) / (2 * h)

    error = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    worst = float(np.max(error)) if error.size else 0.0
    logger.debug(f"finite_diff_check: {x.size} coordinates, worst relative error {worst:.3e}")
    return worst
