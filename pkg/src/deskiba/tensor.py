"""Small reverse-mode autodiff over numpy arrays.

Only the operations the two desk-scale CNNs and the bottleneck objective need
are provided.  Every op records itself on the active :class:`Tape` when one of
its inputs requires a gradient; :func:`backward` replays the tape in reverse.

Convolutions are fixed to 3x3 kernels, zero padding 1 and stride 1; pooling is
2x2 with stride 2.  Leading batch axes are accepted where noted so the training
loop and the K-sample noise average can run vectorized.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class TapeError(RuntimeError):
    """Backward was asked for something the tape cannot provide."""


_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "deskiba_dtype", default=np.dtype(np.float32)
)
_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "deskiba_tape", default=None
)


def default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors.

    ``precision("float64")`` is the mode gradient checks run in.
    """
    token = _DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"empty dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return take(self, index)


@dataclass(eq=False)
class _Node:
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass(eq=False)
class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded.  A tape belongs to one worker and should be reset (or replaced)
    between forward passes.
    """

    ops: list[tuple[Tensor, _Node]] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None

    def reset(self) -> None:
        self.ops.clear()

    def __len__(self) -> int:
        return len(self.ops)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(tuple(inputs), backward_fn, name)
        tape.ops.append((out, out._node))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from err


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _record(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def minimum(x: Tensor, bound: float) -> Tensor:
    """Elementwise ``min(x, bound)``; no gradient flows where clamped."""
    x = as_tensor(x)
    keep = x.data <= bound
    out = np.where(keep, x.data, np.asarray(bound, dtype=x.dtype))
    return _record(out, (x,), lambda g: (g * keep,), "minimum")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(np.asarray(out, dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis), 1.0 / n)


def take(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(x.data[index]), (x,), back, "take")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------- layers


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``kernels`` is
    ``[C_out, C_in, 3, 3]``; ``bias`` is ``[C_out]``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernels must be [C_out, C_in, 3, 3], got {kernels.shape}")
    c_out, c_in = kernels.shape[:2]
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if x.data.ndim not in (3, 4) or x.shape[-3] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with {c_in} input channels")

    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    n, _, h, w = xd.shape
    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # [N, C_in, H, W, 3, 3] -> [N*H*W, C_in*9]
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c_in * 9)
    wmat = kernels.data.reshape(c_out, c_in * 9)
    out = cols @ wmat.T + bias.data
    out = out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def back(g):
        gd = g if batched else g[None]
        gcols = gd.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        gk = (gcols.T @ cols).reshape(kernels.shape)
        gb = gcols.sum(axis=0)
        dcols = (gcols @ wmat).reshape(n, h, w, c_in, 3, 3)
        gpad = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                gpad[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gpad[:, :, 1:-1, 1:-1]
        return (gx if batched else gx[0], gk, gb)

    return _record(out, (x, kernels, bias), back, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, over the last two axes.

    Ties send the whole gradient to the first element in row-major scan order.
    """
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError("maxpool2d: need at least two spatial axes")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = np.argmax(blocks, axis=-1)  # first maximum on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return _record(out, (x,), back, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last two (spatial) axes."""
    return mean(x, axis=(-2, -1))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``W @ x + b`` for ``x`` of shape ``[n]`` or ``[N, n]``."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.data.ndim != 2:
        raise ShapeError(f"dense: weights must be a matrix, got {weights.shape}")
    m, n = weights.shape
    if x.shape[-1] != n or x.data.ndim not in (1, 2):
        raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    out = x.data @ weights.data.T + bias.data

    def back(g):
        gw = np.outer(g, x.data) if x.data.ndim == 1 else g.T @ x.data
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return (g @ weights.data, gw, gb)

    return _record(out, (x, weights, bias), back, "dense")


def spatial_linear(x: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Apply fixed matrices on both spatial axes: ``left @ x[..., :, :] @ right.T``.

    Separable smoothing and bilinear resizing are both of this form.
    """
    x = as_tensor(x)
    left = np.asarray(left, dtype=x.dtype)
    right = np.asarray(right, dtype=x.dtype)
    if x.shape[-2] != left.shape[1] or x.shape[-1] != right.shape[1]:
        raise ShapeError(f"spatial_linear: {x.shape} vs {left.shape}, {right.shape}")
    out = left @ x.data @ right.T
    return _record(out, (x,), lambda g: (left.T @ g @ right,), "spatial_linear")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    p = np.exp(_log_softmax(logits.data))

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (logits,), back, "softmax")


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``; mean over rows for ``[N, k]`` logits."""
    logits = as_tensor(logits)
    k = logits.shape[-1]
    if k < 2:
        raise ShapeError("softmax_cross_entropy: need at least two classes")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {label}")
    batched = logits.data.ndim == 2
    lp = _log_softmax(logits.data if batched else logits.data[None])
    rows = lp.shape[0]
    if labels.size == 1 and rows > 1:
        labels = np.full(rows, labels[0])
    if labels.shape != (rows,):
        raise ShapeError(f"softmax_cross_entropy: {rows} rows but {labels.size} labels")
    picked = lp[np.arange(rows), labels]
    loss = np.asarray(-picked.mean(), dtype=logits.dtype)

    def back(g):
        grad = np.exp(lp)
        grad[np.arange(rows), labels] -= 1
        grad *= g / rows
        return (grad if batched else grad[0],)

    return _record(loss, (logits,), back, "softmax_cross_entropy")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with requires_grad.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    if loss.data.ndim != 0:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._node is None or not any(out is loss for out, _ in tape.ops):
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for out, node in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
