"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tensor` is an immutable wrapper around a contiguous numpy array.
Operations on tensors that live on an open :class:`GradientTape` append a
node holding a backward rule; :func:`backward` walks the tape in reverse
append order and accumulates gradients additively.

Typical use::

    tape = GradientTape()
    w = tape.watch(weight)
    loss = tsum(mul(w, w))
    grads = backward(tape, loss)
    grads[w.node]            # == 2 * weight.data
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float32/float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=None, *, tape: "GradientTape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def on_tape(self) -> bool:
        return self.tape is not None and not self.tape.closed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", node={self.node}" if self.on_tape else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    inputs: tuple[Optional[int], ...]
    backward: Optional[BackwardFn]


class GradientTape:
    """Append-only record of differentiable operations.

    A tape is single-use: :func:`backward` closes it and drops the recorded
    closures, so intermediate buffers are released after each training step.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self.closed = False
        self._watched: dict[int, Tensor] = {}

    def watch(self, t: Tensor) -> Tensor:
        """Return a leaf alias of ``t`` recorded on this tape.

        Watching the same tensor twice returns the same alias, so a parameter
        shared by several layers accumulates a single gradient.
        """
        if self.closed:
            raise ContractError("cannot watch on a closed tape")
        alias = self._watched.get(id(t))
        if alias is None or alias.data is not t.data:
            self.nodes.append(Node((), None))
            alias = Tensor(t.data, tape=self, node=len(self.nodes) - 1)
            self._watched[id(t)] = alias
        return alias

    def alias_of(self, t: Tensor) -> Tensor | None:
        return self._watched.get(id(t))

    def gradient(self, t: Tensor) -> np.ndarray | None:
        """Gradient for a watched tensor (or its alias) after :func:`backward`."""
        if t.tape is self and t.node is not None:
            return self.gradients.get(t.node)
        alias = self._watched.get(id(t))
        if alias is None:
            return None
        return self.gradients.get(alias.node)

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardFn) -> Tensor:
        handles = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(Node(handles, rule))
        return Tensor(data, tape=self, node=len(self.nodes) - 1)

    def __len__(self):
        return len(self.nodes)


def _active_tape(inputs: Sequence[Tensor]) -> GradientTape | None:
    tape = None
    for t in inputs:
        if t.on_tape:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def result(data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardFn) -> Tensor:
    """Wrap an op output, recording ``rule`` if any input is on an open tape.

    ``rule(grad_out)`` must return one gradient (or None) per input, each
    shaped like that input.
    """
    tape = _active_tape(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, rule)


def backward(tape: GradientTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``; returns leaf gradients by handle."""
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node is None or tape.closed:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for idx in range(loss.node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.backward is None:
            leaves[idx] = g
            continue
        for handle, gi in zip(node.inputs, node.backward(g)):
            if handle is None or gi is None:
                continue
            prev = grads.get(handle)
            grads[handle] = gi if prev is None else prev + gi
    tape.gradients = leaves
    tape.nodes = []
    tape.closed = True
    return leaves


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementary ops ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum with numpy broadcasting."""
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    da, db = a.data, b.data
    return result(out, (a, b), lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return result(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements as a rank-0 tensor."""
    shape = a.shape
    return result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of ``[n,p,q]`` and ``[n,q,r]`` operands."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"matmul_batched: cannot multiply {a.shape} by {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul_batched: dtype mismatch {a.dtype} vs {b.dtype}")
    da, db = a.data, b.data

    def rule(g):
        return np.matmul(g, db.transpose(0, 2, 1)), np.matmul(da.transpose(0, 2, 1), g)

    return result(np.matmul(da, db), (a, b), rule)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return result(s, (x,), rule)


# -- gradient checking -------------------------------------------------------

_branch_sink: list | None = None


@contextmanager
def branch_trace():
    """Collect the branch masks of piecewise ops (e.g. ReLU6) run inside the block."""
    global _branch_sink
    prev, _branch_sink = _branch_sink, []
    try:
        yield _branch_sink
    finally:
        _branch_sink = prev


def note_branches(mask: np.ndarray) -> None:
    if _branch_sink is not None:
        _branch_sink.append(np.packbits(mask).tobytes())


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4, *,
                      seed: int = 0, max_coords: int | None = None, refine: int = 2) -> float:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    Non-scalar outputs are reduced with a fixed random cotangent so every
    output element contributes. Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``. ``max_coords`` samples a
    seeded subset of coordinates for large inputs.

    A central difference is only meaningful when ``f`` is smooth over the
    stencil. If a piecewise op changes branch between ``x - h``, ``x`` and
    ``x + h``, that coordinate is re-evaluated with ``h / 100`` (at most
    ``refine`` times); the last estimate is used either way.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=None)
    if x0.dtype != np.float64:
        raise ContractError("finite_diff_check requires float64 input")
    rng = np.random.default_rng(seed)

    def evaluate(xv: np.ndarray):
        with branch_trace() as branches:
            y = f(Tensor(xv)).data
        if not np.all(np.isfinite(y)):
            raise NumericError("f contains non-finite values")
        return y, branches

    y0, base_branches = evaluate(x0)
    weights = np.ones_like(y0) if y0.size == 1 else rng.standard_normal(y0.shape)

    tape = GradientTape()
    xt = tape.watch(Tensor(x0))
    y = f(xt)
    if y.on_tape:
        loss = tsum(mul(y, Tensor(weights)))
        analytic = backward(tape, loss).get(xt.node, np.zeros_like(x0))
    else:
        analytic = np.zeros_like(x0)

    coords = np.arange(x0.size)
    if max_coords is not None and max_coords < x0.size:
        coords = rng.choice(x0.size, size=max_coords, replace=False)
    worst = 0.0
    flat_a = analytic.reshape(-1)
    for i in coords:
        h = step
        for attempt in range(refine + 1):
            xp = x0.copy()
            xp.flat[i] += h
            xm = x0.copy()
            xm.flat[i] -= h
            yp, bp = evaluate(xp)
            ym, bm = evaluate(xm)
            numeric = (np.sum(weights * yp) - np.sum(weights * ym)) / (2 * h)
            if bp == base_branches and bm == base_branches:
                break
            h /= 100.0
        err = abs(flat_a[i] - numeric) / max(1.0, abs(flat_a[i]))
        worst = max(worst, float(err))
    return worst
