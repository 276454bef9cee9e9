"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the innermost active :class:`GradientTape`.  Outside
a tape every op is a plain forward computation.  ``stop_gradient`` returns a
tensor that is never recorded, so gradient reaching it is dropped.
"""
from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradientTape", "tensor", "constant", "stop_gradient", "backward",
    "add", "sub", "mul", "div", "scale", "relu", "tanh", "abs", "mean", "sum",
    "conv2d", "linear", "grad_of", "ShapeError",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "tape_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape_node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass(eq=False)
class _Node:
    # output and tape are weak so a step's graph is freed by refcounting alone
    op: str
    inputs: tuple[Tensor, ...]
    output: "weakref.ref[Tensor]"
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = -1
    tape: "weakref.ref[GradientTape] | None" = None


@dataclass(eq=False)
class GradientTape:
    """Ordered record of primitive ops.  Use as a context manager.

    One tape per training step; it is discarded after the update.
    """

    nodes: list[_Node] = field(default_factory=list)
    frozen: bool = False

    def __enter__(self) -> "GradientTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("gradient tapes exited out of order")
        stack.pop()
        self.frozen = True

    def record(self, node: _Node) -> None:
        if self.frozen:
            raise RuntimeError("cannot record onto a frozen tape")
        node.index = len(self.nodes)
        node.tape = weakref.ref(self)
        self.nodes.append(node)


_local = threading.local()


def _stack() -> list[GradientTape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> GradientTape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.tape_node = None
    out.name = None
    tape = _active_tape()
    if needs and tape is not None:
        node = _Node(op, inputs, weakref.ref(out), vjp)
        tape.record(node)
        out.tape_node = node
    return out


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 and a.data.ndim == 0 or b.size == 1 and b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcast is supported, so reduce fully when shapes differ
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# -- elementwise primitives --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    # subgradient 0 at the kink
    sign = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),))


def sum(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def stop_gradient(x) -> Tensor:
    """Same values as ``x``; no gradient ever flows back through the result."""
    x = _as_tensor(x)
    return Tensor(x.data.copy(), requires_grad=False)


# -- layers ------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (C, K, K, N, H, W) -> rows ordered like weights.reshape(O, C*K*K)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    cols = _im2col(x, k)
    out = w.reshape(o, -1) @ cols
    if b is not None:
        out += b[:, None]
    return out.reshape(o, n, h, wd).transpose(1, 0, 2, 3), cols


def conv2d(x, weights, bias=None) -> Tensor:
    """2-D cross-correlation, NCHW input, OIKK weights, zero "same" padding."""
    x, weights = _as_tensor(x), _as_tensor(weights)
    if x.data.ndim != 4 or weights.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weights, got {x.shape} and {weights.shape}")
    o, c, k, k2 = weights.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd side, got {k}x{k2}")
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weights expect {c} (shapes {x.shape}, {weights.shape})")
    inputs: tuple[Tensor, ...] = (x, weights)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
        inputs = (x, weights, bias)
    out, cols = _conv_forward(x.data, weights.data, None if bias is None else bias.data)
    wdata = weights.data

    def vjp(g: np.ndarray):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (gm @ cols.T).reshape(wdata.shape)
        dx = None
        if x.requires_grad:
            # adjoint of same-padded correlation: correlate with flipped, transposed kernel
            wt = np.ascontiguousarray(wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx, _ = _conv_forward(g, wt, None)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=1)

    return _emit("conv2d", out, inputs, vjp)


def linear(x, weights, bias=None) -> Tensor:
    """Dense layer: ``x @ weights.T + bias`` for x of shape (N, in)."""
    x, weights = _as_tensor(x), _as_tensor(weights)
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weights.shape}")
    inputs: tuple[Tensor, ...] = (x, weights)
    out = x.data @ weights.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match {weights.shape}")
        out = out + bias.data
        inputs = (x, weights, bias)
    xd, wd = x.data, weights.data

    def vjp(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit("linear", out, inputs, vjp)


# -- backward ----------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from every leaf tensor with ``requires_grad`` that the tape
    touched to its gradient.  Leaves the loss does not depend on are absent;
    use :func:`grad_of` to read them as zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    node = loss.tape_node
    if node is None:
        if loss.requires_grad:
            return {loss: np.ones_like(loss.data)}
        return {}
    tape = node.tape() if node.tape is not None else None
    if tape is None:
        raise RuntimeError("backward: the tape that produced this loss has been discarded")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for nd in reversed(tape.nodes[: node.index + 1]):
        out = nd.output()
        if out is None:
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(nd.inputs, nd.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.tape_node is None:
                prev = leaves.get(inp)
                leaves[inp] = gi.copy() if prev is None else prev + gi
            elif key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return leaves


def grad_of(grads: dict[Tensor, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(t)
    return np.zeros_like(t.data) if g is None else g
