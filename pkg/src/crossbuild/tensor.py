"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. ``Tape.backward`` then walks the
recorded nodes in reverse order and accumulates gradients into ``.grad``.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(x * x)
    >>> tape.backward(loss)
    >>> x.grad
    array([6.])

Broadcasting: ``add``, ``sub`` and ``mul`` follow numpy broadcasting and
reduce gradients back onto the original operand shapes. ``matmul`` contracts
the last axis of ``a`` with the second-to-last of ``b`` and broadcasts the
leading (batch) axes. Every other primitive requires exact shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_tape",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "elu",
    "abs_",
    "softmax",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "sum_",
    "mean",
    "dropout",
    "layer_norm",
    "lstm_scan",
    "grad_clip_global",
    "AdamState",
    "adam_step",
]


def _check_finite(arr: np.ndarray, where: str) -> None:
    # NaN and Inf both survive a sum, so one reduction flags either.
    if arr.size and not math.isfinite(float(np.sum(arr))):
        if not np.isfinite(arr).all():
            raise NumericError(f"{where}: non-finite value produced")


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, where: str) -> "Tensor":
        _check_finite(arr, where)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations run, so every node's inputs were
    produced earlier on the tape (or are leaves).
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs, output, rule) -> None:
        if self.consumed:
            raise ContractError("Tape: cannot record on a tape that already ran backward")
        self.nodes.append(_Node(tuple(inputs), output, rule))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


class no_tape:
    """Context manager that suspends recording (inference)."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Gradients accumulate additively into existing ``.grad`` arrays.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("backward: tape already consumed")
    tape.consumed = True
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
                touched[key] = inp
    # Whatever remains in ``pending`` belongs to leaves.
    for key, g in pending.items():
        t = touched[key]
        if g.shape != t.shape:
            g = g.reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, out: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs and bool(_TAPES), name)
    if needs and _TAPES:
        _TAPES[-1].record(inputs, result, rule)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a @ b`` with batch broadcasting; both operands need ndim >= 2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast"
        ) from None

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # Shared weight: fold the batch axes into one contraction.
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), rule)


# -- elementwise unary ------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    ex = np.exp(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, alpha * (ex - 1.0))
    return _emit("elu", out, (x,), lambda g: (g * np.where(pos, 1.0, alpha * ex),))


def abs_(x: Tensor) -> Tensor:
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit(
        "softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    )


# -- structural -------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return np.split(g, bounds, axis=ax)

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, rule)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items
    )


def slice_(x: Tensor, idx) -> Tensor:
    """Indexing; basic slices are cheap, integer arrays scatter-add on backward."""
    try:
        out = x.data[idx]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc} for shape {x.shape}") from None
    basic = _is_basic_index(idx)

    def rule(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _emit("slice", np.asarray(out, dtype=np.float64), (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- stochastic and normalisation ------------------------------------------


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must lie in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise ContractError("dropout: an rng stream is required when active")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({n},) for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def rule(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), rule)


def lstm_scan(
    x: Tensor, h0: Tensor, c0: Tensor, w_input: Tensor, w_hidden: Tensor, bias: Tensor
) -> Tensor:
    """Run a single-layer LSTM over ``x`` of shape (B, T, I).

    Gate order along the 4*D axis is input, forget, cell, output. Returns a
    (B, T, 2, D) tensor holding the hidden state ``[..., 0, :]`` and the cell
    state ``[..., 1, :]`` after every step, so callers slice out whichever
    sequence or final state they need.
    """
    if x.ndim != 3:
        raise DimensionError(f"lstm_scan: input must be (B, T, I), got {x.shape}")
    bsz, steps, n_in = x.shape
    d = h0.shape[-1]
    if (
        h0.shape != (bsz, d)
        or c0.shape != (bsz, d)
        or w_input.shape != (n_in, 4 * d)
        or w_hidden.shape != (d, 4 * d)
        or bias.shape != (4 * d,)
    ):
        raise DimensionError(
            "lstm_scan: inconsistent shapes "
            f"x={x.shape} h0={h0.shape} c0={c0.shape} "
            f"w_input={w_input.shape} w_hidden={w_hidden.shape} bias={bias.shape}"
        )
    zx = x.data @ w_input.data + bias.data
    wh = w_hidden.data
    gates = np.empty((steps, bsz, 4 * d))
    cells = np.empty((steps + 1, bsz, d))
    hiddens = np.empty((steps + 1, bsz, d))
    hiddens[0] = h0.data
    cells[0] = c0.data
    for t in range(steps):
        z = zx[:, t] + hiddens[t] @ wh
        a = gates[t]
        a[:, : 2 * d] = 0.5 * (1.0 + np.tanh(0.5 * z[:, : 2 * d]))
        a[:, 2 * d : 3 * d] = np.tanh(z[:, 2 * d : 3 * d])
        a[:, 3 * d :] = 0.5 * (1.0 + np.tanh(0.5 * z[:, 3 * d :]))
        cells[t + 1] = a[:, d : 2 * d] * cells[t] + a[:, :d] * a[:, 2 * d : 3 * d]
        hiddens[t + 1] = a[:, 3 * d :] * np.tanh(cells[t + 1])
    out = np.stack([hiddens[1:], cells[1:]], axis=2).transpose(1, 0, 2, 3)

    def rule(g):
        gz = np.empty((steps, bsz, 4 * d))
        dh_next = np.zeros((bsz, d))
        dc_next = np.zeros((bsz, d))
        for t in range(steps - 1, -1, -1):
            a = gates[t]
            i, f, gg, o = a[:, :d], a[:, d : 2 * d], a[:, 2 * d : 3 * d], a[:, 3 * d :]
            tc = np.tanh(cells[t + 1])
            dh = g[:, t, 0] + dh_next
            dc = g[:, t, 1] + dc_next + dh * o * (1.0 - tc * tc)
            dz = gz[t]
            dz[:, :d] = dc * gg * i * (1.0 - i)
            dz[:, d : 2 * d] = dc * cells[t] * f * (1.0 - f)
            dz[:, 2 * d : 3 * d] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * d :] = dh * tc * o * (1.0 - o)
            dh_next = dz @ wh.T
            dc_next = dc * f
        gz_bt = gz.transpose(1, 0, 2)
        gx = gz_bt @ w_input.data.T if x.requires_grad else None
        gwi = (
            x.data.reshape(-1, n_in).T @ gz_bt.reshape(-1, 4 * d)
            if w_input.requires_grad
            else None
        )
        gwh = (
            hiddens[:-1].reshape(-1, d).T @ gz.reshape(-1, 4 * d)
            if w_hidden.requires_grad
            else None
        )
        gb = gz.reshape(-1, 4 * d).sum(axis=0) if bias.requires_grad else None
        return gx, dh_next, dc_next, gwi, gwh, gb

    return _emit("lstm_scan", out, (x, h0, c0, w_input, w_hidden, bias), rule)


# -- optimisation -----------------------------------------------------------


def grad_clip_global(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the applied scale factor (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ContractError(f"grad_clip_global: max_norm must be positive, got {max_norm}")
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if total <= max_norm:
        return 1.0
    scale = max_norm / total
    for p in params:
        p.grad = p.grad * scale
    return scale


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    frozen: Iterable[str] = (),
) -> None:
    """Apply one bias-corrected Adam update in place.

    Parameters listed in ``frozen`` or lacking a gradient are skipped and
    their moments and step counters are left untouched.
    """
    if lr <= 0:
        raise ContractError(f"adam_step: lr must be positive, got {lr}")
    frozen = set(frozen)
    b1, b2 = state.beta1, state.beta2
    for key, p in params.items():
        g = grads.get(key)
        if key in frozen or g is None:
            continue
        m = state.first.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second[key]
        t = state.steps.get(key, 0) + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.first[key], state.second[key], state.steps[key] = m, v, t
