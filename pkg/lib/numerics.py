#!/usr/bin/env python3
"""
Dense float64 tensors with tape-based reverse-mode differentiation

Ops record onto the active Tape only when one of their inputs requires grad,
so inference runs without bookkeeping. Every op output is checked for
NaN/Inf before it is handed back. Arrays are never mutated in place once a
Tensor owns them; optimizer steps swap in new arrays.
"""

import hashlib
import itertools
import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, GraphError, NumericalError, SchemaError, ShapeError
from .logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "situformer-checkpoint/1"

_ids = itertools.count(1)
_local = threading.local()


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {op}")


class Tensor:
    """Dense float64 array that can take part in gradient recording"""

    # numpy operands on the left defer to the reflected Tensor operators
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError("tensors must have at least one element")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.id = next(_ids)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor; stays a Parameter (and in checkpoints) when frozen"""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of differentiable ops; use as a context manager"""

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._outputs = set()

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.records.append(TapeRecord(op, inputs, output, backward))
        self._outputs.add(output.id)

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.id in self._outputs

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Suspend recording, e.g. for finite-difference evaluations"""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    _check_finite(out, op)
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad)
    if requires_grad:
        tape = current_tape()
        if tape is not None:
            tape.record(op, inputs, result, backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic (numpy broadcasting)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericalError("division by zero")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _emit("div", out, (a, b), backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("sqrt of a non-positive value")
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to `a`"""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _emit("maximum", out, (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to `a`"""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _emit("minimum", out, (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow"""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("softplus", out, (x,), lambda g: (g * s,))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """GELU, tanh form"""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_K * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_K * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _emit("gelu", out, (x,), backward)


# Shape and linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _emit("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return _emit("reshape", x.data.reshape(shape).copy(), (x,),
                 lambda g: (g.reshape(x.shape),))


def tsum(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        out = np.array([x.data.sum()])
        return _emit("sum", out, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0]),))

    out = x.data.sum(axis=axis, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1)

    def backward(g):
        g = g.reshape(x.data.sum(axis=axis, keepdims=True).shape)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), backward)


def mean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shapes disagree: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Select rows (axis 0) or columns (axis 1) of a 2-D tensor"""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"take works on rows or columns of 2-D tensors, got {x.shape}")
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        grad = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(grad, idx, g)
        else:
            np.add.at(grad, (slice(None), idx), g)
        return (grad,)

    return _emit("take", out, (x,), backward)


def gather(x, columns: Sequence[int]) -> Tensor:
    """Pick x[i, columns[i]] for every row; returns an n x 1 tensor"""
    x = as_tensor(x)
    cols = np.asarray(columns, dtype=np.int64)
    if x.data.ndim != 2 or len(cols) != x.shape[0]:
        raise ShapeError(f"gather needs one column per row, got {len(cols)} for {x.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, cols].reshape(-1, 1)

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[rows, cols] = g[:, 0]
        return (grad,)

    return _emit("gather", out, (x,), backward)


# Normalization and probability

def softmax(logits, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax with max-subtraction; masked entries get probability 0"""
    x = as_tensor(logits)
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if np.any(~keep.any(axis=axis)):
            raise ShapeError("all positions masked")
        z = np.where(keep, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", s, (x,), backward)


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit("log_softmax", out, (x,),
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each row of an n x d tensor, then scale and shift"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx,
                _unbroadcast(g * xhat, gamma.shape),
                _unbroadcast(g, beta.shape))

    return _emit("layer_norm", out, (x, gamma, beta), backward)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit length; an all-zero row stays zero"""
    x = as_tensor(x)
    norm = sqrt(tsum(x * x, axis=-1, keepdims=True) + eps)
    return x / norm


# Reverse mode

def backward(loss: Tensor, tape: Tape) -> Dict[int, np.ndarray]:
    """
    Reverse-mode pass over `tape` from a scalar `loss`.

    Returns leaf-tensor id -> gradient and overwrites `.grad` on those leaves,
    so replaying the same tape gives identical results.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise GraphError("loss is not on the tape (detached graph)")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for rec in reversed(tape.records):
        g = grads.pop(rec.output.id, None)
        if g is None:
            continue
        input_grads = rec.backward(g)
        for tensor, grad in zip(rec.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise ShapeError(f"{rec.op} produced a gradient of shape {grad.shape} for {tensor.shape}")
            if tensor not in tape:
                leaves[tensor.id] = tensor
            prev = grads.get(tensor.id)
            grads[tensor.id] = grad if prev is None else prev + grad

    result = {}
    for tid, tensor in leaves.items():
        grad = grads[tid]
        _check_finite(grad, "backward")
        tensor.grad = grad.copy()
        result[tid] = grad
    return result


# Modules

class Module:
    """Container of Parameters and sub-modules, discovered by attribute walk"""

    def _members(self) -> Iterator[Tuple[str, Union[Tensor, "Module"]]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._members():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
            else:
                yield from value.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def trainable(self) -> Dict[str, Parameter]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    def freeze(self):
        for _, p in self.named_parameters():
            p.requires_grad = False

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        state = {}
        for key, value in self._members():
            if isinstance(value, Parameter):
                state[f"{prefix}{key}"] = value.data.copy()
            else:
                state.update(value.state_dict(f"{prefix}{key}."))
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True):
        used = set()
        self._load(state, prefix, used)
        if strict:
            unexpected = sorted(k for k in state if k.startswith(prefix) and k not in used)
            if unexpected:
                raise SchemaError(f"unexpected checkpoint entries: {unexpected[:5]}")

    def _load(self, state: Mapping[str, np.ndarray], prefix: str, used: set):
        for key, value in self._members():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                _assign(value, state, name)
                used.add(name)
            else:
                value._load(state, f"{name}.", used)


def _assign(param: Parameter, state: Mapping[str, np.ndarray], name: str):
    if name not in state:
        raise SchemaError(f"checkpoint is missing parameter '{name}'")
    arr = np.asarray(state[name], dtype=np.float64)
    if arr.shape != param.shape:
        raise ShapeError(f"parameter '{name}' has shape {arr.shape}, expected {param.shape}")
    _check_finite(arr, f"loading '{name}'")
    param.data = arr.copy()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            weight = np.zeros((in_dim, out_dim))
        else:
            limit = np.sqrt(6.0 / (in_dim + out_dim))
            weight = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self._eps)


# Optimizer

@dataclass
class OptimState:
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState,
              lr: float, lr_scale: Optional[Mapping[str, float]] = None):
    """Bias-corrected Adam with decoupled weight decay; returns (params, state)"""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        if m.shape != param.shape:
            raise ShapeError(f"optimizer moments for '{name}' do not match the parameter")

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = param.data * (1.0 - step_lr * state.weight_decay) - step_lr * update
        _check_finite(new, f"adam step on '{name}'")

        param.data = new
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v

    return params, state


def named_grads(params: Mapping[str, Tensor], grad_map: Mapping[int, np.ndarray]) -> Dict[str, np.ndarray]:
    """Re-key a backward() result by parameter name; unused parameters get zeros"""
    return {name: grad_map.get(p.id, np.zeros_like(p.data)) for name, p in params.items()}


# Gradient verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst: str = ""


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f: Callable[[], Tensor], params: Union[Mapping[str, Tensor], Sequence[Tensor]],
               eps: float = 1e-5, tol: float = 1e-4, coords_per_param: Optional[int] = 6,
               seed: int = 0) -> GradCheckReport:
    """
    Compare tape gradients of the scalar `f()` with central differences.

    `f` closes over `params`; a sampled subset of coordinates of every
    parameter is perturbed in turn (all of them when coords_per_param is None).
    """
    if eps <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {eps}")
    named = dict(params) if isinstance(params, Mapping) else {f"p{i}": p for i, p in enumerate(params)}

    with no_tape():
        first = f().item()
        second = f().item()
    if first != second:
        raise NumericalError(f"objective is not deterministic ({first!r} != {second!r})")

    with Tape() as tape:
        loss = f()
    grad_map = backward(loss, tape)

    rng = np.random.default_rng(seed)
    max_err, worst, checked = 0.0, "", 0
    for name, param in named.items():
        analytic = grad_map.get(param.id, np.zeros_like(param.data)).reshape(-1)
        count = param.data.size
        k = count if coords_per_param is None else min(coords_per_param, count)
        for i in sorted(rng.choice(count, size=k, replace=False)):
            original = param.data
            plus = original.copy()
            plus.flat[i] += eps
            minus = original.copy()
            minus.flat[i] -= eps
            with no_tape():
                param.data = plus
                f_plus = f().item()
                param.data = minus
                f_minus = f().item()
            param.data = original

            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = relative_error(float(analytic[i]), numeric)
            checked += 1
            if err > max_err:
                max_err, worst = err, f"{name}[{i}]"

    report = GradCheckReport(max_rel_error=max_err, passed=max_err < tol, checked=checked, worst=worst)
    logger.debug(f"grad_check: {checked} coordinates, max relative error {max_err:.3e} at {worst or '-'}")
    return report


# Checkpoints

def save_checkpoint(path: Union[str, Path], state: Mapping[str, np.ndarray], meta: Optional[Dict] = None) -> Path:
    """Write parameter name -> shape + values as versioned JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).reshape(-1).tolist()}
            for name, arr in state.items()
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f)
    logger.info(f"Saved checkpoint to: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict]:
    path = Path(path)
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"checkpoint {path} is not valid JSON: {e}") from e

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"checkpoint {path} has format {payload.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")

    state = {}
    for name, entry in payload.get("params", {}).items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            data = entry["data"]
            size = len(data)
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"checkpoint entry '{name}' is malformed, missing or bad field {e!r}") from e
        if int(np.prod(shape)) != size:
            raise SchemaError(f"checkpoint entry '{name}' has {len(data)} values for shape {shape}")
        state[name] = np.asarray(data, dtype=np.float64).reshape(shape)
    return state, payload.get("meta", {})


def file_digest(*paths: Union[str, Path]) -> str:
    """SHA-256 over the bytes of one or more files, in order"""
    digest = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


if __name__ == "__main__":
    x = Parameter([[2.0]])
    y = Parameter([[3.0]])
    with Tape() as tape:
        loss = tsum(x * y)
    grads = backward(loss, tape)
    logger.info(f"d/dx = {grads[x.id].item()}, d/dy = {grads[y.id].item()}")
