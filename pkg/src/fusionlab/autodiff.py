"""Dense tensors with a reverse-mode differentiation tape.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and at
least one input requires a gradient, the operation is appended to the tape
together with a closure computing its vector-Jacobian product. Outside a tape
nothing is recorded, which keeps evaluation cheap.

    with Tape() as tape:
        loss = cross_entropy(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation's precondition is violated."""


class Tensor:
    """A dense array that can take part in reverse-mode differentiation."""

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no-copy constructor for op outputs
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never receive gradients."""

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, name=name, dtype=dtype)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    def freeze(self) -> None:
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.requires_grad = True


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> dict[int, np.ndarray]:
        return backward(self, output, grad)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class no_record:
    """Context manager that suspends recording on every active tape."""

    def __enter__(self):
        self._saved = list(_tape_stack)
        _tape_stack.clear()

    def __exit__(self, *exc):
        _tape_stack.extend(self._saved)


def backward(tape: Tape, output: Tensor, grad: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Propagate d(output) back through ``tape``.

    Gradients are accumulated into ``.grad`` of every leaf that requires one
    (parameters, trigger). Returns the map from leaf id to the gradient
    contributed by this call.
    """
    if grad is None:
        if output.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grad = np.ones_like(output.data)
    grads: dict[int, np.ndarray] = {output.id: np.asarray(grad, dtype=output.dtype)}
    produced = {node.out.id for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    if output.requires_grad and output.id not in produced:
        leaves[output.id] = output
    for node in reversed(tape.nodes):
        g = grads.pop(node.out.id, None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = _unbroadcast(ig, inp.shape)
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + ig
            else:
                grads[inp.id] = ig
            if inp.id not in produced:
                leaves[inp.id] = inp
    result = {}
    for lid, leaf in leaves.items():
        g = grads.get(lid)
        if g is None:
            continue
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[lid] = g
    return result


# ---------------------------------------------------------------------------
# recording helpers


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clip; the gradient is passed only where no clipping happened."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh form."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # weight gradient: fold the leading axes into one product
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions (accumulated in float64)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    out = np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[ax] for ax in axes]))
    out = np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return _make(np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# fused neural-network primitives


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; normaliser accumulated in float64."""
    x = z.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (z,), vjp)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    x = z.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    out = (shifted - lse).astype(x.dtype)
    prob = np.exp(out)

    def vjp(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _make(out, (z,), vjp)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``labels`` under softmax(``logits``).

    ``logits`` is either a single vector of K scores or a (B, K) batch.
    With ``reduction="none"`` the per-sample losses are returned.
    """
    x = logits.data
    single = x.ndim == 1
    if single:
        x = x[None, :]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = x.shape[-1]
    if lab.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {x.shape[0]} rows of logits but {lab.shape[0]} labels")
    if np.any(lab < 0) or np.any(lab >= k):
        raise IndexError(f"cross_entropy: label out of range [0, {k})")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True, dtype=np.float64))
    logp = shifted - lse
    rows = np.arange(x.shape[0])
    per = -logp[rows, lab]
    prob = np.exp(logp)
    if reduction == "mean":
        out = np.asarray(per.mean(), dtype=x.dtype)
        scale = np.full(x.shape[0], 1.0 / x.shape[0])
    elif reduction == "sum":
        out = np.asarray(per.sum(), dtype=x.dtype)
        scale = np.ones(x.shape[0])
    elif reduction == "none":
        out = per.astype(x.dtype)
        scale = None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if single and reduction == "none":
        out = out[0]

    def vjp(g):
        d = prob.copy()
        d[rows, lab] -= 1.0
        gs = np.asarray(g, dtype=np.float64)
        if scale is None:
            d = d * gs.reshape(-1, 1)
        else:
            d = d * (gs * scale).reshape(-1, 1)
        d = d.astype(x.dtype)
        return (d[0] if single else d,)

    return _make(out, (logits,), vjp)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    if gamma.shape != (xd.shape[-1],) or beta.shape != (xd.shape[-1],):
        raise ShapeError(f"layernorm: width {xd.shape[-1]} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(xd.dtype)
    inv = inv.astype(xd.dtype)
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    """First/second moment estimates for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, p: Tensor) -> "AdamState":
        return cls(np.zeros_like(p.data, dtype=np.float64), np.zeros_like(p.data, dtype=np.float64))


def adaptive_step(param: Parameter, lr: float, state: AdamState, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> Parameter:
    """One bias-corrected adaptive-moment update, applied in place.

    A nonzero ``weight_decay`` is decoupled from the moment estimates.
    """
    if not param.trainable:
        raise ContractError(f"adaptive_step on frozen parameter {param.name!r}")
    if param.grad is None:
        raise ContractError(f"adaptive_step: parameter {param.name!r} has no gradient")
    g = param.grad.astype(np.float64)
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    new = param.data.astype(np.float64) - update
    if weight_decay:
        new -= lr * weight_decay * param.data
    param.data = new.astype(param.dtype)
    return param


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float, weight_decay: float = 0.0):
        self.params = [p for p in params]
        for p in self.params:
            if not p.trainable:
                raise ContractError(f"Adam given frozen parameter {p.name!r}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = {p.id: AdamState.like(p) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            adaptive_step(p, self.lr, self.state[p.id], weight_decay=self.weight_decay)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, tol: float = 1e-3,
               step: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    Everything is evaluated in float64. The error for each input is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-12)``.
    Failures are reported, not raised.
    """
    xs = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                 requires_grad=True, dtype=np.float64) for x in inputs]
    with Tape() as tape:
        out = fn(*xs)
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(tape, out)
    errors = []
    for x in xs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn(*xs).data)
            flat[i] = orig - step
            down = float(fn(*xs).data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
        errors.append(float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    worst = max(errors) if errors else 0.0
    return GradCheckReport(passed=worst <= tol, max_rel_error=worst, per_input=errors)
