"""Dense float64 tensors, a reverse-mode gradient tape, and plain SGD.

Everything the rest of the package learns with lives here: the Tensor
container, primitive ops recorded on the active Tape, the shared GCN layer,
softmax cross-entropy, and a central-difference gradient checker.

Ops record themselves only while a Tape is active, so the same forward code
serves both training (inside ``with Tape() as t:``) and inference.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, StateError, ValidationError


def rng_for(seed: int, *scope: object) -> np.random.Generator:
    """Independent deterministic random stream for (seed, *scope).

    Scope parts are hashed into the seed material, so streams for different
    components never depend on the order other components were created in.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in scope:
        if isinstance(part, int) and not isinstance(part, bool):
            entropy.append(part & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(repr(part).encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(entropy)


def assert_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def _mark_recorded(self) -> None:
        # called by the tape: intermediates become grad-carrying
        if not self.requires_grad:
            self.requires_grad = True
            self._grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    """A tensor gradients never flow into (adjacencies, geometry, biases from data)."""
    return Tensor(value, requires_grad=False)


@dataclass
class _TapeOp:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Records primitive ops so the chain rule can be replayed in reverse.

    Single-use: one recorded forward pass, one backward sweep. Gradients of
    leaf tensors (parameters and any hand-made ``requires_grad`` inputs)
    accumulate into their ``.grad`` buffers; intermediate gradients live only
    inside the sweep.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _ACTIVE_TAPES.pop()
        if popped is not self:
            raise StateError("tapes exited out of order")
        return False

    @property
    def op_count(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StateError("tape already consumed; record a fresh forward pass")
        self._consumed = True
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        assert_finite(loss.data, "loss")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self._ops):
            out_grad = grads.pop(id(op.output), None)
            leaves.pop(id(op.output), None)
            if out_grad is None:
                continue
            input_grads = op.backward(out_grad)
            for inp, grad in zip(op.inputs, input_grads):
                if grad is None or not inp.requires_grad:
                    continue
                have = grads.get(id(inp))
                grads[id(inp)] = grad if have is None else have + grad
                leaves[id(inp)] = inp
        # whatever is left was never produced by an op on this tape: a leaf
        for key, tensor in leaves.items():
            if tensor._grad is not None:
                tensor._grad += grads[key]


def _record(output: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        output._mark_recorded()
        _ACTIVE_TAPES[-1]._ops.append(_TapeOp(output, inputs, backward))
    return output


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    return _record(Tensor(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))))

    def backward(g):
        y = out.data
        return (g * y * (1.0 - y),)

    return _record(out, (a,), backward)


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def tensor_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), backward)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows by index; the backward pass scatter-adds into the source."""
    if a.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), backward)


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"col_slice needs a 2-D tensor, got shape {a.shape}")
    out = Tensor(a.data[:, start:stop])

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def backward(g):
        y = out.data
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _record(out, (a,), backward)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """−log softmax(logits)[target], stable via max subtraction."""
    if logits.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy needs 1-D logits, got shape {logits.shape}")
    k = logits.shape[0]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    x = logits.data
    m = x.max()
    lse = m + math.log(np.exp(x - m).sum())
    out = Tensor(lse - x[target])

    def backward(g):
        probs = np.exp(x - lse)
        probs[target] -= 1.0
        return (g.reshape(()) * probs,)

    return _record(out, (logits,), backward)


def mean_of(terms: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors, as a scalar tensor."""
    if not terms:
        raise ValidationError("mean_of needs at least one term")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return mul(total, constant(1.0 / len(terms)))


# ---------------------------------------------------------------------------
# GCN layer

def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops.

    Directed inputs are symmetrized (elementwise max, the boolean OR of the
    matrix and its transpose) before normalization; the self-loop keeps every
    degree positive, so there is no zero-degree error path.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got shape {a.shape}")
    if np.any(a < 0):
        raise ValidationError("adjacency entries must be non-negative")
    assert_finite(a, "adjacency")
    a = np.maximum(a, a.T) + np.eye(a.shape[0])
    inv_sqrt_deg = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]


def gcn_layer(h: Tensor, adjacency, w: Tensor, activation: str = "relu") -> Tensor:
    """One graph convolution: activation(Â · H · W)."""
    a = adjacency.data if isinstance(adjacency, Tensor) else np.asarray(adjacency, dtype=np.float64)
    a_hat = normalized_adjacency(a)
    if h.shape[0] != a_hat.shape[0]:
        raise DimensionError(f"{h.shape[0]} feature rows vs {a_hat.shape[0]} graph nodes")
    if h.shape[1] != w.shape[0]:
        raise DimensionError(f"feature dim {h.shape[1]} vs weight rows {w.shape[0]}")
    out = matmul(matmul(constant(a_hat), h), w)
    if activation == "relu":
        return relu(out)
    if activation in (None, "identity"):
        return out
    raise ValidationError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------------------
# Optimization

@dataclass
class OptimizerConfig:
    learning_rate: float = 5e-3
    batch_size: int = 16
    max_epochs: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be at least 1, got {self.batch_size}")


def sgd_step(params: Iterable[Tensor], config: OptimizerConfig) -> None:
    """In-place update: data ← data − lr · grad, then grads are zeroed."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError("parameter has no gradient buffer; was it created with requires_grad?")
    for p in params:
        p.data -= config.learning_rate * p.grad
        p.zero_grad()


def init_param(rng: np.random.Generator, shape: Sequence[int], fan_in: int | None = None) -> Tensor:
    """Weight drawn uniform in [−1/√fan_in, +1/√fan_in]."""
    shape = tuple(shape)
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# Gradient checking

def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild its forward pass on every call and be deterministic.
    Every coordinate of every parameter is perturbed; the relative error uses
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError("finite_difference_check needs requires_grad parameters")
        p.zero_grad()

    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    def evaluate() -> float:
        value = f()
        assert_finite(value.data, "checked function value")
        return value.item()

    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        flat_grads = grads.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            upper = evaluate()
            flat[i] = saved - epsilon
            lower = evaluate()
            flat[i] = saved
            numeric = (upper - lower) / (2.0 * epsilon)
            denom = max(abs(flat_grads[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_grads[i] - numeric) / denom)
    return worst
