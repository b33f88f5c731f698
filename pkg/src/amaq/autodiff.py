"""Minimal reverse-mode autodiff over dense float32 tensors.

A module-level tape records every op whose inputs require grad; backward()
replays it in reverse. Custom-gradient ops (needed by the straight-through
quantizers) register through custom_op().
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "BackwardError",
    "tensor",
    "zeros",
    "tape_reset",
    "tape_size",
    "no_grad",
    "backward",
    "custom_op",
    "forward_op",
    "add",
    "mul",
    "matmul",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding_gather",
    "cross_entropy",
    "transpose",
    "reshape",
    "slice_",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeMismatch(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, a, b):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class BackwardError(RuntimeError):
    """Raised when a backward function misbehaves (wrong arity or shapes)."""


class Tensor:
    """Dense row-major float32 tensor with an optional grad buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        # grad buffers may alias upstream arrays; accumulation is out-of-place
        # so shared references are never mutated
        g = g if g.dtype == np.float32 else g.astype(np.float32)
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


class TapeNode:
    """One recorded op: inputs, output, and the backward rule for the pass."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


_TAPE: list[TapeNode] = []
_GRAD_ENABLED = True


def tape_reset():
    _TAPE.clear()


class no_grad:
    """Context manager that suppresses tape recording (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def tape_size() -> int:
    return len(_TAPE)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _TAPE.append(TapeNode(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, grad: Optional[np.ndarray] = None):
    """Populate .grad for every requires_grad tensor reachable from `loss`.

    Grads accumulate additively into existing .grad buffers. `grad` seeds
    the pass; it defaults to ones and is required for non-scalar roots.
    """
    if grad is None:
        if loss.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=np.float32)
        if grad.shape != loss.data.shape:
            raise BackwardError(f"seed grad shape {grad.shape} != loss shape {loss.shape}")
    if not _TAPE and not loss.requires_grad:
        raise BackwardError("backward called with an empty tape")

    # Per-pass accumulation; merged into .grad at the end so repeated
    # backward calls stack additively.
    pending: dict[int, np.ndarray] = {id(loss): grad.copy()}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(_TAPE):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        holders.pop(id(node.output), None)
        if node.output.requires_grad:
            node.output.accumulate_grad(upstream)
        grads = node.backward_fn(upstream)
        if not isinstance(grads, tuple):
            grads = (grads,)
        if len(grads) != len(node.inputs):
            raise BackwardError(
                f"{node.op}: backward returned {len(grads)} grads for {len(node.inputs)} inputs"
            )
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            if not inp.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float32)
            if g.shape != inp.data.shape:
                raise BackwardError(
                    f"{node.op}: backward grad shape {g.shape} != input shape {inp.data.shape}"
                )
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
                holders[key] = inp

    # Leaves (and any tensors not produced by a taped node this pass).
    for key, g in pending.items():
        t = holders[key]
        if t.requires_grad:
            t.accumulate_grad(g)


def custom_op(
    forward_fn: Callable[..., np.ndarray],
    backward_fn: Callable[[np.ndarray], tuple],
    inputs: Sequence[Tensor],
    name: str = "custom",
) -> Tensor:
    """Record an op with a caller-supplied backward rule.

    forward_fn receives the input arrays and returns the output array.
    backward_fn receives the upstream grad and returns one grad (or None)
    per input; arity and shapes are validated when backward reaches it.
    """
    out_data = np.asarray(forward_fn(*[t.data for t in inputs]), dtype=np.float32)
    return _record(name, inputs, out_data, backward_fn)


# ---------------------------------------------------------------------------
# built-in ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _sum_to_last_axis(g: np.ndarray) -> np.ndarray:
    # reduce a full-shape grad back to a (last_dim,) bias
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b) -> Tensor:
    """Element-wise add; also accepts a (last_dim,) bias broadcast over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias_add = b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]
    if not bias_add and a.shape != b.shape:
        raise ShapeMismatch("add", a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        gb = _sum_to_last_axis(g) if bias_add else g
        return g, gb

    return _record("add", (a, b), out, bwd)


def mul(a: Tensor, b) -> Tensor:
    """Element-wise product; `b` may be a python scalar (constant, no grad)."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _record("mul", (a,), a.data * np.float32(c), lambda g: (g * np.float32(c),))
    b = _as_tensor(b)
    scalar = b.data.size == 1 or a.data.size == 1
    if not scalar and a.shape != b.shape:
        raise ShapeMismatch("mul", a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.size == 1:
            ga = np.asarray(ga.sum(), dtype=np.float32).reshape(a.shape)
        if b.data.size == 1:
            gb = np.asarray(gb.sum(), dtype=np.float32).reshape(b.shape)
        return ga, gb

    return _record("mul", (a, b), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D x 2D, batched x 2D (linear layers), or batched x batched."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.ndim != b.ndim and b.ndim != 2:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.ndim == b.ndim and a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form gelu: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + np.float32(0.044715) * xd * xd * xd)
    t = np.tanh(inner)
    out = np.float32(0.5) * xd * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * dinner
        return (g * dx.astype(np.float32),)

    return _record("gelu", (x,), out, bwd)


def softmax(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis (max subtraction)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        dgamma = _sum_to_last_axis(g * xhat)
        dbeta = _sum_to_last_axis(g)
        return dx.astype(np.float32), dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, bwd)


def embedding_gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer ids; backward scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding_gather", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_gather: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding_gather", (table,), out, bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean NLL of integer targets under log-softmax(logits).

    Logits (..., V), targets (...). An optional 0/1 mask of the target shape
    restricts the mean to the masked positions.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target outside [0, {v})")
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    m = logits.data.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits.data - m).sum(axis=-1, keepdims=True))).reshape(-1)
    nll = lse - flat[np.arange(flat.shape[0]), tflat]
    if mask is None:
        w = np.ones_like(nll)
    else:
        w = np.asarray(mask, dtype=np.float32).reshape(-1)
        if w.shape != nll.shape:
            raise ShapeMismatch("cross_entropy", targets.shape, np.asarray(mask).shape)
    denom = max(float(w.sum()), 1.0)
    out = np.float32((nll * w).sum() / denom)

    probs = np.exp(flat - lse[:, None])

    def bwd(g):
        dl = probs.copy()
        dl[np.arange(flat.shape[0]), tflat] -= 1.0
        dl *= (w / denom)[:, None] * float(g)
        return (dl.reshape(logits.shape).astype(np.float32),)

    return _record("cross_entropy", (logits,), out, bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("transpose", (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record("reshape", (x,), out, bwd)


def slice_(x: Tensor, slices) -> Tensor:
    """Basic slicing; backward scatters into a zero buffer."""
    x = _as_tensor(x)
    out = np.ascontiguousarray(x.data[slices])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[slices] = g
        return (gx,)

    return _record("slice", (x,), out, bwd)


_OPS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "gelu": gelu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "embedding_gather": embedding_gather,
    "cross_entropy": cross_entropy,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Name-dispatched entry over the built-in op set."""
    if op not in _OPS:
        raise KeyError(f"unknown op {op!r}; known: {sorted(_OPS)}")
    return _OPS[op](*inputs, **kwargs)
