"""
Tensor and reverse-mode gradient tape
Dense numpy arrays whose operations are recorded on a per-thread tape
so gradients can be read at any intermediate node after backward()
"""

import hashlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from service.errors import ContractError, DimensionError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape recording on this thread, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    Dense array participating in the gradient tape

    Data is stored as a numpy array in row-major order. ``grad`` is
    populated by ``Tape.backward`` and accumulates across uses.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=DEFAULT_DTYPE, name: Optional[str] = None):
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


def _is_scalar(value) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer))


def constant(array, dtype=None) -> Tensor:
    """Wrap an array as a tensor that never requires grad"""
    array = np.asarray(array) if dtype is None else np.asarray(array, dtype=dtype)
    return Tensor._wrap(array, False)


@dataclass
class TapeNode:
    """One recorded operation: inputs, output and the rule mapping dOut to dInputs"""

    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    """
    Ordered record of operations for one forward pass

    Tapes are single-shot: ``backward`` may be called once. Use one tape
    per forward pass::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], rule: BackwardRule) -> None:
        if self._consumed:
            raise ContractError("cannot record on a tape after backward()")
        self.nodes.append(TapeNode(tuple(inputs), output, rule))

    def backward(self, loss: Tensor) -> None:
        """
        Propagate gradients from a scalar loss to every reachable tensor

        Args:
            loss: Scalar tensor recorded on this tape
        """
        if self._consumed:
            raise ContractError("tape already consumed; tapes are single-shot")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward() on an empty tape")
        self._consumed = True

        loss.grad = np.ones(loss.shape, dtype=loss.dtype)
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, grads):
                if grad is not None and tensor.requires_grad:
                    tensor.accumulate_grad(grad)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Run backward on ``tape`` or on the innermost active tape"""
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("backward() called with no tape")
    tape.backward(loss)


def _result(array: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, needs_grad)
    if needs_grad:
        tape.record(out, inputs, rule)
    return out


def _check_leading_broadcast(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> None:
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if long[len(long) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} differ beyond leading batch dimensions")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def add_scalar(x: Tensor, c: Scalar) -> Tensor:
    return _result(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def mul_scalar(x: Tensor, c: Scalar) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result(np.where(positive, x.data, x.dtype.type(0)), (x,), lambda g: (g * positive,))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape),))


# Linear algebra and shapes


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product ``a[..., m, k] @ b[..., k, n]``

    Leading batch dimensions follow the suffix rule: the shorter batch
    shape must match the trailing batch dims of the longer one.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    _check_leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")

    def rule(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return _result(a.data @ b.data, (a, b), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concatenate(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise UsageError("concatenate() needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise DimensionError(
                f"concatenate: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Slice ``index`` out of ``axis``, dropping that axis"""
    axis = axis % x.ndim

    def rule(g):
        grad = np.zeros(x.shape, dtype=x.dtype)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        grad[tuple(slicer)] = g
        return (grad,)

    return _result(np.take(x.data, index, axis=axis), (x,), rule)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast size-1 axes of ``x`` to ``shape``"""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    def rule(g):
        return (g.sum(axis=axes, keepdims=True),)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), rule)


# Neural network primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), rule)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight``; backward scatter-adds into the table"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {weight.shape[0]})")

    def rule(g):
        grad = np.zeros(weight.shape, dtype=weight.dtype)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return _result(weight.data[ids], (weight,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale and shift"""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) / sigma
    reduce_axes = tuple(range(x.ndim - 1))

    def rule(g):
        ghat = g * gamma.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        grad_x = (ghat - m1 - xhat * m2) / sigma
        return grad_x, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), rule)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train_mode: bool) -> Tensor:
    """Inverted dropout in train mode; the identity (same object) in eval mode"""
    if not train_mode or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """
    Weighted cross entropy with a fused log-softmax

    Args:
        logits: Tensor shaped [..., V]
        targets: Integer array shaped [...]
        weights: Per-position weights shaped like ``targets``
        smoothing: Mass spread uniformly over the V-1 non-gold classes

    Returns:
        Scalar tensor: sum over positions of weight * token loss
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.dtype)
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, weights {weights.shape}")
    vocab = logits.shape[-1]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    gold = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if smoothing == 0.0:
        token_loss = -gold
    else:
        off = smoothing / (vocab - 1)
        token_loss = -((1.0 - smoothing) * gold + off * (logp.sum(axis=-1) - gold))
    total = np.asarray((weights * token_loss).sum(), dtype=logits.dtype)

    def rule(g):
        target_dist = np.zeros_like(logp)
        if smoothing != 0.0:
            target_dist += logits.dtype.type(smoothing / (vocab - 1))
        np.put_along_axis(target_dist, targets[..., None], logits.dtype.type(1.0 - smoothing), axis=-1)
        return ((np.exp(logp) - target_dist) * (weights * g)[..., None],)

    return _result(total, (logits,), rule)


# Randomness and integrity


class RngStreams:
    """
    Named random streams derived from one seed

    Each stream is keyed independently so that, for example, head-mask
    sampling never shifts the dropout masks of a run.
    """

    INIT = 0
    DROPOUT = 1
    DATA = 2
    MASK = 3

    def __init__(self, seed: int):
        if seed < 0:
            raise UsageError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.mask = self._generator(self.MASK)

    def _generator(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def init(self) -> np.random.Generator:
        return self._generator(self.INIT)

    def dropout(self, step: int) -> np.random.Generator:
        """Fresh generator for ``step``; two calls with one step give identical masks"""
        return self._generator(self.DROPOUT, step)

    def corpus(self) -> np.random.Generator:
        return self._generator(self.DATA, 0)

    def shuffle(self, epoch: int) -> np.random.Generator:
        return self._generator(self.DATA, 1 + epoch)


def checksum(tensors: Sequence[Tensor]) -> str:
    """SHA-256 over the raw bytes of ``tensors`` in order"""
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()
