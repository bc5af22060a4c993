"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it in
creation order; :func:`backward` replays the tape in reverse.  Outside a tape
the same functions compute plain values without building a graph, which is
what evaluation uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946
BCE_EPS = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class Tensor:
    """Dense float64 array with an accumulated gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_inputs", "_backward", "_op", "_tape")
    # ndarray <op> Tensor must defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __rmatmul__ = lambda self, other: matmul(other, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Ordered record of the operations executed inside a ``with`` block.

    Tapes are thread-local: each thread may hold its own active tape, and a
    tape must only be used from the thread that created it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def record(self, node: Tensor) -> None:
        node._tape = self
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1 or loss.ndim != 0:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("backward: loss was not recorded on this tape")
        # Fresh buffers per pass so repeated calls accumulate linearly.
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            input_grads = node._backward(g)
            for inp, ig in zip(node._inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    tensors[key] = inp
        for key, g in grads.items():
            t = tensors[key]
            if t.grad is None:
                t.grad = np.zeros_like(t.value)
            t.grad = t.grad + g


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.value.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("backward: loss is not recorded on any tape")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._inputs = ()
    out._backward = None
    out._op = op
    out._tape = None
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def relu(a) -> Tensor:
    """``max(a, 0)``; doubles as the hinge."""
    a = as_tensor(a)
    return _make(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),), "relu")


hinge = relu


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def selu(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    pos = x > 0
    ex = np.exp(np.minimum(x, 0.0))
    out = SELU_SCALE * np.where(pos, x, SELU_ALPHA * (ex - 1.0))
    deriv = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * ex)
    return _make(out, (a,), lambda g: (g * deriv,), "selu")


# ------------------------------------------------------------------ reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def maxpool(a, axis: int = 0, valid=None) -> Tensor:
    """Max over ``axis``.  Rows where ``valid`` is false never win the max.

    The gradient is shared equally among all entries attaining the maximum
    (rows zeroed by a mask tie with each other, and each of them needs to
    hear whether it would help).
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    x = a.value
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        vshape = valid.shape + (1,) * (a.ndim - valid.ndim)
        if valid.ndim > a.ndim or a.shape[: valid.ndim] != valid.shape:
            raise ShapeError(f"maxpool: valid mask shape {valid.shape} does not match {a.shape}")
        x = np.where(valid.reshape(vshape), x, -np.inf)
    out = x.max(axis=axis)
    winners = x == np.expand_dims(out, axis)
    share = winners / winners.sum(axis=axis, keepdims=True)

    def bw(g):
        return (share * np.expand_dims(g, axis),)

    return _make(out, (a,), bw, "maxpool")


def softmax(a, axis: int = -1, valid=None) -> Tensor:
    """Softmax over ``axis``; entries where ``valid`` is false get zero weight."""
    a = as_tensor(a)
    x = a.value
    if valid is not None:
        x = np.where(valid, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# -------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw, "concat")


def index(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.value[key]

    def bw(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, key, g)
        return (grad,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "index")


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` gathered by integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")

    def bw(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _make(table.value[ids], (table,), bw, "embedding")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match input {x.shape}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def bw(g):
        dxhat = g * gain.value
        d = x.shape[-1]
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), bw, "layer_norm")


# -------------------------------------------------------------- loss helpers


def cosine(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; defined as 0 when either norm is 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes differ {a.shape} and {b.shape}")
    na = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.value * b.value).sum(axis=axis, keepdims=True))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    dot = (a.value * b.value).sum(axis=axis, keepdims=True)
    c = np.where(ok, dot / denom, 0.0)
    safe_na = np.where(ok, na, 1.0)
    safe_nb = np.where(ok, nb, 1.0)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = np.where(ok, g * (b.value / denom - c * a.value / safe_na**2), 0.0)
        gb = np.where(ok, g * (a.value / denom - c * b.value / safe_nb**2), 0.0)
        return ga, gb

    return _make(np.squeeze(c, axis=axis), (a, b), bw, "cosine")


def bce(p, y) -> Tensor:
    """Elementwise binary cross-entropy of probabilities ``p`` against targets ``y``."""
    p, y = as_tensor(p), as_tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"bce: shapes differ {p.shape} and {y.shape}")
    inside = (p.value > BCE_EPS) & (p.value < 1.0 - BCE_EPS)
    pc = np.clip(p.value, BCE_EPS, 1.0 - BCE_EPS)
    out = -(y.value * np.log(pc) + (1.0 - y.value) * np.log(1.0 - pc))

    def bw(g):
        return g * inside * (pc - y.value) / (pc * (1.0 - pc)), None

    return _make(out, (p, y), bw, "bce")


def straight_through_threshold(a, threshold: float = 0.5, hard: bool = True) -> Tensor:
    """Binarize ``a`` (``1`` iff ``a > threshold``) with an identity backward.

    ``hard=False`` returns ``a`` itself: the soft surrogate whose ordinary
    derivative equals the straight-through gradient, used by gradient checks.
    """
    a = as_tensor(a)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if np.any(a.value < 0.0) or np.any(a.value > 1.0) or np.any(np.isnan(a.value)):
        raise ValueError("straight_through_threshold: scores must lie in [0, 1]")
    out = (a.value > threshold).astype(np.float64) if hard else a.value.copy()
    return _make(out, (a,), lambda g: (g,), "threshold")


# ------------------------------------------------------------- verification


def _central_difference(loss_fn, params, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    up = loss_fn(params).item()
    flat[i] = orig - h
    down = loss_fn(params).item()
    flat[i] = orig
    if not (np.isfinite(up) and np.isfinite(down)):
        raise FloatingPointError("gradient_check: loss is not finite")
    return (up - down) / (2.0 * h)


def _select_estimate(estimates: list[float], steps: list[float], roundoff: float) -> float:
    """Pick the finite-difference estimate with the smallest error estimate.

    ``estimates`` are central differences at ``steps``, each ten times smaller
    than the one before.  Candidates are the plain differences and their
    Richardson extrapolations ``(100 * D(h / 10) - D(h)) / 99``, which cancel
    the second-order truncation term.
    """
    values, errors = [], []
    for k in range(len(steps) - 1):
        values.append(estimates[k])
        errors.append(abs(estimates[k] - estimates[k + 1]) + roundoff / steps[k])
    rich = [(100.0 * b - a) / 99.0 for a, b in zip(estimates, estimates[1:])]
    for k in range(len(rich) - 1):
        values.append(rich[k])
        errors.append(abs(rich[k] - rich[k + 1]) + roundoff / steps[k + 1])
    return values[int(np.argmin(errors))]


def gradient_check(
    loss_fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    n_probes: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    adaptive: bool = False,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``n_probes`` limits the check to that many randomly chosen entries per
    parameter; ``None`` checks every entry.  The error of one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``, so entries
    whose gradient is below ``floor`` are judged on absolute error.

    ``adaptive=True`` is for piecewise-smooth losses (ReLU, hinges, max).
    Central differences are taken at the steps ``epsilon * 10**k`` for
    k = 1, 0, -1, -2.  Each step but the last gets an error estimate: its
    distance to the next smaller step (large when a kink lies in between)
    plus a round-off bound ``4 * eps_machine * max(|loss|, 1) / h``.  The
    step with the smallest estimate wins, unless a Richardson extrapolation
    of two adjacent steps agrees better with its smaller-step neighbour.  The
    choice never looks at the analytic value.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n_probes is not None and n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = [epsilon * 10.0**k for k in (1, 0, -1, -2)] if adaptive else [epsilon]
    for p in params:
        p.zero_grad()
    with Tape():
        loss = loss_fn(params)
        if not np.isfinite(loss.value).all():
            raise FloatingPointError("gradient_check: loss is not finite")
        backward(loss)
    roundoff = 4.0 * np.finfo(np.float64).eps * max(abs(float(loss.value)), 1.0)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        positions: Iterable[int]
        if n_probes is None or n_probes >= flat.size:
            positions = range(flat.size)
        else:
            positions = rng.choice(flat.size, size=n_probes, replace=False)
        for i in positions:
            estimates = [_central_difference(loss_fn, params, flat, i, h) for h in steps]
            if adaptive:
                numeric = _select_estimate(estimates, steps, roundoff)
            else:
                numeric = estimates[0]
            denom = max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
