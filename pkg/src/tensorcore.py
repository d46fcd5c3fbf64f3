"""
Dense tensor kernel with reverse-mode autodiff

Tensors wrap numpy arrays. Operations executed while a Tape is active (and
gradients are enabled) are recorded in execution order; Tape.backward walks
the record in reverse and accumulates gradients into every tensor that
requires them. Precision is a process-wide setting: float32 for training
runs, float64 for oracle tests.

A FlopCounter context instruments the kernel: matmul-style ops add 2*m*k*n,
softmax adds 5 per element, layernorm 8 per element and relu 1 per element.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils import MoeSearchError, ConfigError, ShapeError, read_yaml, write_yaml

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
MASK_VALUE = -1e9

SOFTMAX_FLOPS_PER_ELEMENT = 5
LAYERNORM_FLOPS_PER_ELEMENT = 8
RELU_FLOPS_PER_ELEMENT = 1

_PRECISIONS = {'float32': np.float32, 'float64': np.float64}
_dtype = np.float32


def set_precision(name: str):
    global _dtype
    if name not in _PRECISIONS:
        raise ConfigError(f"Unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]
    logger.debug(f"Precision set to {name}")


def get_dtype():
    return _dtype


@contextmanager
def precision(name: str):
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()['_dtype'] = previous


# ============================================================================
# THREAD-LOCAL STATE: ACTIVE TAPES, GRAD MODE, FLOP COUNTERS
# ============================================================================

class _State(threading.local):
    def __init__(self):
        self.tapes: List['Tape'] = []
        self.grad_enabled = True
        self.counters: List['FlopCounter'] = []
        self.counting = True


_state = _State()


@contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class FlopCounter:
    matmul: int = 0
    elementwise: int = 0

    @property
    def total(self) -> int:
        return self.matmul + self.elementwise


@contextmanager
def count_flops():
    counter = FlopCounter()
    _state.counters.append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


@contextmanager
def uncounted():
    """Suspend FLOP instrumentation (used for the output vocabulary projection)"""
    previous = _state.counting
    _state.counting = False
    try:
        yield
    finally:
        _state.counting = previous


def _bill(matmul: int = 0, elementwise: int = 0):
    if not _state.counting:
        return
    for counter in _state.counters:
        counter.matmul += int(matmul)
        counter.elementwise += int(elementwise)


# ============================================================================
# TENSOR AND TAPE
# ============================================================================

class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', 'name')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, np.ndarray) and data.dtype == _dtype:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data"""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of differentiable operations

    Entries are appended as operations execute, so every entry's inputs are
    produced by earlier entries or are leaves.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn):
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))

    def backward(self, loss: Tensor, retain: bool = False):
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise MoeSearchError("loss was not produced on this tape")

        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            upstream = entry.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is not None and tensor.requires_grad:
                    tensor.accumulate(grad)
        if not retain:
            self.entries = []


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


def _record(op: str, inputs: Tuple[Tensor, ...], output_data: np.ndarray, backward_fn) -> Tensor:
    output = Tensor(output_data)
    if not _state.grad_enabled or not _state.tapes:
        return output
    if not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    _state.tapes[-1].record(op, inputs, output, backward_fn)
    return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    """b must broadcast onto a without changing a's shape"""
    try:
        result = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        result = None
    if result != a.shape:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


# ============================================================================
# LINEAR ALGEBRA
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes

    a is [..., m, k]; b is either [k, n] or carries the same leading axes as a.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree for {a.shape} and {b.shape}")

    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _bill(matmul=2 * int(np.prod(a.shape[:-2], dtype=np.int64)) * m * k * n)

    def backward_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return _record('matmul', (a, b), out, backward_fn)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """x [..., d] times weight [h, d] transposed -> [..., h]"""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    h, d = weight.shape
    out = x.data @ weight.data.T
    rows = int(np.prod(x.shape[:-1], dtype=np.int64))
    _bill(matmul=2 * rows * d * h)

    def backward_fn(g):
        grad_x = g @ weight.data
        grad_w = g.reshape(-1, h).T @ x.data.reshape(-1, d)
        return grad_x, grad_w

    return _record('linear', (x, weight), out, backward_fn)


# ============================================================================
# ELEMENTWISE AND SHAPE OPS
# ============================================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast('add', a, b)

    def backward_fn(g):
        return g, _unbroadcast(g, b.shape)

    return _record('add', (a, b), a.data + b.data, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast('mul', a, b)

    def backward_fn(g):
        return g * b.data, _unbroadcast(g * a.data, b.shape)

    return _record('mul', (a, b), a.data * b.data, backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward_fn(g):
        return (g * factor,)

    return _record('scale', (x,), x.data * factor, backward_fn)


def relu(x: Tensor) -> Tensor:
    _bill(elementwise=RELU_FLOPS_PER_ELEMENT * x.data.size)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _record('relu', (x,), np.where(mask, x.data, 0).astype(x.data.dtype), backward_fn)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.data.ndim


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Stabilized softmax; mask is an additive constant (0 or MASK_VALUE)
    broadcast onto x before normalizing
    """
    axis = _check_axis(x, axis)
    _bill(elementwise=SOFTMAX_FLOPS_PER_ELEMENT * x.data.size)
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record('softmax', (x,), y, backward_fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    _bill(elementwise=LAYERNORM_FLOPS_PER_ELEMENT * x.data.size)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        grad_x = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grad_gain = (g * xhat).reshape(-1, d).sum(axis=0)
        grad_bias = g.reshape(-1, d).sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return _record('layernorm', (x, gain, bias), out, backward_fn)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward_fn(g):
        return (g * keep,)

    return _record('dropout', (x,), x.data * keep, backward_fn)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape

    def backward_fn(g):
        return (g.reshape(original),)

    return _record('reshape', (x,), x.data.reshape(shape), backward_fn)


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _record('transpose', (x,), np.transpose(x.data, axes), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record('concat', tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                   backward_fn)


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors"""
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack_mean: shapes {shape} and {t.shape} differ")
    k = len(tensors)
    if k == 1:
        return tensors[0]
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data
    out = out / k

    def backward_fn(g):
        return tuple(g / k for _ in tensors)

    return _record('stack_mean', tuple(tensors), out, backward_fn)


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record('sum', (x,), np.asarray(x.data.sum(axis=axis)), backward_fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


# ============================================================================
# INDEXING
# ============================================================================

def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"embed: token id {int(ids.max())} outside vocabulary of {vocab}")

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, d))
        return (grad,)

    return _record('embed', (table,), table.data[ids], backward_fn)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _record('gather_rows', (x,), x.data[index], backward_fn)


def merge_rows(num_rows: int, pieces: Sequence[Tuple[np.ndarray, Tensor]]) -> Tensor:
    """Assemble [num_rows, d] from row blocks placed at disjoint indices"""
    d = pieces[0][1].shape[-1]
    out = np.zeros((num_rows, d), dtype=_dtype)
    for index, block in pieces:
        out[index] = block.data

    def backward_fn(g):
        return tuple(g[index] for index, _ in pieces)

    return _record('merge_rows', tuple(block for _, block in pieces), out, backward_fn)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """x [n, e], index [n] -> [n, 1] holding x[i, index[i]]"""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[rows, index] = g[:, 0]
        return (grad,)

    return _record('pick', (x,), x.data[rows, index][:, None], backward_fn)


# ============================================================================
# LOSS
# ============================================================================

def cross_entropy(logits: Tensor, targets: np.ndarray, label_smoothing: float = 0.0,
                  ignore_index: Optional[int] = None) -> Tensor:
    """
    Label-smoothed cross-entropy averaged over non-ignored targets

    Args:
        logits: [n, vocab]
        targets: [n] token ids
        label_smoothing: fraction in [0, 1) spread uniformly over the vocabulary
        ignore_index: target id excluded from the average (padding)

    Returns:
        Scalar tensor
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and targets.max() >= vocab:
        raise ShapeError(f"cross_entropy: target id {int(targets.max())} >= vocab size {vocab}")

    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ShapeError("cross_entropy: no non-padding targets")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    safe_targets = np.where(keep, targets, 0)
    nll = -log_probs[rows, safe_targets]
    smooth = -log_probs.mean(axis=1)
    per_token = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    loss = (per_token * keep).sum() / count

    def backward_fn(g):
        target_dist = np.full((n, vocab), label_smoothing / vocab, dtype=logits.data.dtype)
        target_dist[rows, safe_targets] += 1.0 - label_smoothing
        grad = (np.exp(log_probs) - target_dist) * keep[:, None] / count
        return (grad * g,)

    return _record('cross_entropy', (logits,), np.asarray(loss), backward_fn)


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar fn() with respect to tensor.data"""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    flat_grad = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            flat_grad[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale_))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and finite differences over all tensors"""
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, h)))
    return worst


# ============================================================================
# CHECKPOINT CONTAINER
# ============================================================================

def save_tensors(path, arrays: Dict[str, np.ndarray], extra: Optional[Dict] = None) -> Path:
    """
    Write named arrays as little-endian .npz plus a YAML manifest

    Returns:
        Path of the manifest; the array file sits beside it with suffix .npz
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stored = {name: np.ascontiguousarray(a, dtype=a.dtype.newbyteorder('<')) for name, a in arrays.items()}
    np.savez(path.with_suffix('.npz'), **stored)
    manifest = {
        'tensors': [{'name': name, 'shape': list(a.shape), 'dtype': str(a.dtype)} for name, a in stored.items()],
    }
    manifest.update(extra or {})
    return write_yaml(path.with_suffix('.yaml'), manifest)


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], Dict]:
    path = Path(path)
    manifest = read_yaml(path.with_suffix('.yaml'))
    arrays = {}
    with np.load(path.with_suffix('.npz')) as archive:
        for entry in manifest.get('tensors', []):
            name = entry['name']
            if name not in archive.files:
                raise ConfigError(f"Checkpoint {path} is missing tensor {name}")
            array = archive[name]
            if list(array.shape) != list(entry['shape']):
                raise ConfigError(f"Checkpoint tensor {name} has shape {array.shape}, manifest says {entry['shape']}")
            arrays[name] = array
    return arrays, manifest
