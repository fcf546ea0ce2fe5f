"""
Reverse-mode differentiation over float64 numpy arrays.

Every op takes ``Tensor`` operands, computes its output eagerly and, when any
operand has ``requires_grad`` set, attaches a ``Node`` holding the operands and
the local gradient rule. ``backward`` rebuilds the recorded graph into a
topologically ordered ``Tape`` and walks it once in reverse.

Conventions:
    - relu / clamp have subgradient 0 at their kinks.
    - max-pool and reduce_max route the gradient to the first (row-major) maximum.
    - softmax / log-softmax subtract the row maximum before exponentiating.
    - only scalar-tensor broadcasting is supported, plus the explicit ``bias_add``.
"""

import weakref
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .utils import BenchError

Operand = Union['Tensor', float, int, np.ndarray]


class AutodiffError(BenchError):
    """Raised for invalid autodiff usage."""
    pass


class ShapeError(AutodiffError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int]):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shape mismatch {self.shape_a} vs {self.shape_b}")


class LabelRangeError(AutodiffError):
    """Raised when a class label falls outside the logits width."""
    pass


class Tensor:
    """Dense float64 array that may participate in gradient recording."""

    __slots__ = ('data', 'requires_grad', 'node', 'name', '__weakref__')

    def __init__(self, data: Union[np.ndarray, Sequence, float], requires_grad: bool = False,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Optional['Node'] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Operand) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Tensor':
        return mul(other, self)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> 'Tensor':
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)


GradRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """One recorded operation: operands, (weak) output and local gradient rule."""
    op: str
    inputs: Tuple[Tensor, ...]
    output_ref: 'weakref.ref[Tensor]'
    grad_rule: GradRule

    @property
    def output(self) -> Optional[Tensor]:
        return self.output_ref()


@dataclass
class Tape:
    """Recorded nodes in topological order (operands before their consumers)."""
    nodes: List[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> 'Tape':
        order: List[Node] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if tensor.node is None:
                continue
            if expanded:
                order.append(tensor.node)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for operand in reversed(tensor.node.inputs):
                if operand.node is not None and id(operand) not in visited:
                    stack.append((operand, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


class Gradients(Mapping):
    """
    Gradients keyed by tensor id.

    Indexing with a ``Tensor`` that the loss does not reach returns zeros.
    """

    def __init__(self, grads: Dict[int, np.ndarray], tensors: Dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, key: Union[Tensor, int]) -> np.ndarray:
        if isinstance(key, Tensor):
            grad = self._grads.get(id(key))
            if grad is None:
                return np.zeros_like(key.data)
            return grad
        return self._grads[key]

    def __contains__(self, key: object) -> bool:
        if isinstance(key, Tensor):
            return id(key) in self._grads
        return key in self._grads

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def tensor(self, key: int) -> Tensor:
        return self._tensors[key]


# --- recording helpers ---

def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, grad_rule: GradRule) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, weakref.ref(out), grad_rule)
    return out


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if shape == ():
        return np.asarray(grad.sum())
    return grad


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


# --- elementwise arithmetic ---

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same('add', a, b)

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)
    return _record('add', (a, b), a.data + b.data, rule)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same('sub', a, b)

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)
    return _record('sub', (a, b), a.data - b.data, rule)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same('mul', a, b)

    def rule(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)
    return _record('mul', (a, b), a.data * b.data, rule)


def scale(a: Operand, factor: float) -> Tensor:
    """Scalar multiplication by a constant."""
    a = as_tensor(a)
    factor = float(factor)
    return _record('scale', (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError('matmul', a.shape, b.shape)

    def rule(g):
        grad_a = g @ b.data.T
        grad_b = np.outer(a.data, g) if a.ndim == 1 else a.data.T @ g
        return grad_a, grad_b
    return _record('matmul', (a, b), a.data @ b.data, rule)


def bias_add(x: Operand, bias: Operand) -> Tensor:
    """Add a per-feature (1-D/2-D input) or per-channel (3-D/4-D input) bias."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1:
        raise ShapeError('bias_add', x.shape, bias.shape)
    if x.ndim in (1, 2):
        axis = x.ndim - 1
    elif x.ndim in (3, 4):
        axis = x.ndim - 3
    else:
        raise ShapeError('bias_add', x.shape, bias.shape)
    if x.shape[axis] != bias.shape[0]:
        raise ShapeError('bias_add', x.shape, bias.shape)
    view = [1] * x.ndim
    view[axis] = bias.shape[0]
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def rule(g):
        return g, g.sum(axis=reduce_axes) if reduce_axes else g
    return _record('bias_add', (x, bias), x.data + bias.data.reshape(view), rule)


# --- layers ---

def conv2d(x: Operand, weight: Operand, padding: int = 0) -> Tensor:
    """
    Stride-1 cross-correlation with symmetric zero padding.

    Args:
        x: Input of shape (N, C, H, W)
        weight: Filters of shape (F, C, kh, kw)
        padding: Zero padding added on each spatial border

    Returns:
        Output of shape (N, F, H + 2p - kh + 1, W + 2p - kw + 1)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError('conv2d', x.shape, weight.shape)
    p = int(padding)
    kh, kw = weight.shape[2], weight.shape[3]
    padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise ShapeError('conv2d', x.shape, weight.shape)
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    out = np.einsum('nchwij,fcij->nfhw', windows, weight.data, optimize=True)
    out_h, out_w = out.shape[2], out.shape[3]

    def rule(g):
        grad_w = np.einsum('nchwij,nfhw->fcij', windows, g, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + out_h, j:j + out_w] += np.einsum(
                    'nfhw,fc->nchw', g, weight.data[:, :, i, j], optimize=True)
        grad_x = grad_padded[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else grad_padded
        return grad_x, grad_w
    return _record('conv2d', (x, weight), out, rule)


def relu(x: Operand) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record('relu', (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _record('sigmoid', (x,), s, lambda g: (g * s * (1.0 - s),))


def _pool_windows(data: np.ndarray) -> Tuple[np.ndarray, int, int]:
    n, c, h, w = data.shape
    h2, w2 = h // 2, w // 2
    cropped = data[:, :, :2 * h2, :2 * w2]
    win = cropped.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    return win, h2, w2


def _unpool(grad_win: np.ndarray, shape: Tuple[int, ...], h2: int, w2: int) -> np.ndarray:
    n, c = shape[0], shape[1]
    block = grad_win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    grad = np.zeros(shape)
    grad[:, :, :2 * h2, :2 * w2] = block
    return grad


def max_pool2d(x: Operand) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError('max_pool2d', x.shape, (2, 2))
    win, h2, w2 = _pool_windows(x.data)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def rule(g):
        grad_win = np.zeros_like(win)
        np.put_along_axis(grad_win, idx, g[..., None], axis=-1)
        return (_unpool(grad_win, x.shape, h2, w2),)
    return _record('max_pool2d', (x,), out, rule)


def avg_pool2d(x: Operand) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError('avg_pool2d', x.shape, (2, 2))
    win, h2, w2 = _pool_windows(x.data)

    def rule(g):
        grad_win = np.repeat(g[..., None] / 4.0, 4, axis=-1)
        return (_unpool(grad_win, x.shape, h2, w2),)
    return _record('avg_pool2d', (x,), win.mean(axis=-1), rule)


def upsample2d(x: Operand) -> Tensor:
    """Nearest-neighbour 2x upsampling of (N, C, H, W) input."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError('upsample2d', x.shape, (2, 2))
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def rule(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return _record('upsample2d', (x,), out, rule)


# --- shape and reductions ---

def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError('reshape', x.shape, tuple(shape))
    return _record('reshape', (x,), out, lambda g: (g.reshape(x.shape),))


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return np.full(shape, float(g))
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(x: Operand, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _record('sum', (x,), np.asarray(x.data.sum(axis=axis)),
                   lambda g: (_expand(g, x.shape, axis),))


def mean(x: Operand, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return _record('mean', (x,), np.asarray(x.data.mean(axis=axis)),
                   lambda g: (_expand(g, x.shape, axis) / count,))


def reduce_max(x: Operand) -> Tensor:
    """Maximum over the last axis; ties route gradient to the first index."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=-1)[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def rule(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, idx, np.asarray(g)[..., None], axis=-1)
        return (grad,)
    return _record('reduce_max', (x,), out, rule)


def _label_index(x: Tensor, labels: Union[int, Sequence[int], np.ndarray], op: str) -> np.ndarray:
    labels_arr = np.asarray(labels, dtype=np.int64)
    expected = x.shape[:-1]
    if labels_arr.shape != expected:
        raise ShapeError(op, x.shape, labels_arr.shape)
    width = x.shape[-1]
    if labels_arr.size and (labels_arr.min() < 0 or labels_arr.max() >= width):
        raise LabelRangeError(f"{op}: label out of range [0, {width}): {labels_arr.tolist()}")
    return labels_arr[..., None]


def pick(x: Operand, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Select entry ``labels[i]`` from row ``i`` of the last axis."""
    x = as_tensor(x)
    idx = _label_index(x, labels, 'pick')
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def rule(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, idx, np.asarray(g)[..., None], axis=-1)
        return (grad,)
    return _record('pick', (x,), out, rule)


# --- probabilities and losses ---

def _softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Operand) -> Tensor:
    x = as_tensor(x)
    s = _softmax(x.data)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _record('softmax', (x,), s, rule)


def log_softmax(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = _log_softmax(x.data)
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)
    return _record('log_softmax', (x,), out, rule)


def cross_entropy(logits: Operand, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    if logits.ndim not in (1, 2):
        raise ShapeError('cross_entropy', logits.shape, np.shape(labels))
    idx = _label_index(logits, labels, 'cross_entropy')
    log_probs = _log_softmax(logits.data)
    count = 1 if logits.ndim == 1 else logits.shape[0]
    loss = -np.take_along_axis(log_probs, idx, axis=-1).sum() / count

    def rule(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
        return (grad * (float(g) / count),)
    return _record('cross_entropy', (logits,), np.asarray(loss), rule)


def l1_norm(x: Operand, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    return _record('l1_norm', (x,), np.asarray(np.abs(x.data).sum(axis=axis)),
                   lambda g: (_expand(g, x.shape, axis) * np.sign(x.data),))


def l2_norm_sq(x: Operand, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    return _record('l2_norm_sq', (x,), np.asarray((x.data * x.data).sum(axis=axis)),
                   lambda g: (_expand(g, x.shape, axis) * 2.0 * x.data,))


def clamp(x: Operand, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Element-wise clamp; gradient passes only strictly inside (lo, hi)."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi) if (lo is not None or hi is not None) else x.data.copy()
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data > lo
    if hi is not None:
        inside &= x.data < hi
    return _record('clamp', (x,), out, lambda g: (g * inside,))


def straight_through(x: Operand, fn: Callable[[np.ndarray], np.ndarray], op: str = 'straight_through') -> Tensor:
    """Apply a non-differentiable ``fn`` forward and the identity backward."""
    x = as_tensor(x)
    out = np.asarray(fn(x.data), dtype=np.float64)
    if out.shape != x.shape:
        raise ShapeError(op, x.shape, out.shape)
    return _record(op, (x,), out, lambda g: (g,))


# --- gradients ---

def backward(loss: Tensor) -> Gradients:
    """
    Propagate d(loss)/d(.) to every tensor that requires gradients.

    Args:
        loss: Scalar tensor produced by recorded ops

    Returns:
        Gradients mapping; unreachable tensors read as zeros

    Raises:
        AutodiffError: If ``loss`` is not a scalar
    """
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {}
    tensors: Dict[int, Tensor] = {}
    if not loss.requires_grad:
        return Gradients(grads, tensors)

    grads[id(loss)] = np.ones_like(loss.data)
    tensors[id(loss)] = loss
    for node in reversed(Tape.from_output(loss).nodes):
        out = node.output
        grad_out = grads.get(id(out)) if out is not None else None
        if grad_out is None:
            continue
        for operand, grad in zip(node.inputs, node.grad_rule(grad_out)):
            if grad is None or not operand.requires_grad:
                continue
            key = id(operand)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = np.asarray(grad, dtype=np.float64).reshape(operand.shape)
                tensors[key] = operand
    return Gradients(grads, tensors)


def finite_diff_grad(func: Callable[[Tensor], Union[Tensor, float]], x: Union[Tensor, np.ndarray],
                     h: float = 1e-5) -> Tensor:
    """
    Central-difference gradient estimate of a scalar function.

    Args:
        func: Maps a tensor to a scalar (tensor or float)
        x: Point of evaluation
        h: Step size, must be positive

    Returns:
        Tensor with (func(x + h e_i) - func(x - h e_i)) / 2h in each coordinate

    Examples:
        >>> g = finite_diff_grad(lambda t: mul(t, t), Tensor(3.0), h=1e-3)
        >>> round(float(g.data), 6)
        6.0
    """
    if h <= 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    base = as_tensor(x).data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        f_plus = float(np.asarray(as_tensor(func(Tensor(plus))).data).reshape(-1)[0])
        f_minus = float(np.asarray(as_tensor(func(Tensor(minus))).data).reshape(-1)[0])
        flat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)
