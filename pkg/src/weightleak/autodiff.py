"""Reverse-mode differentiation over float64 numpy arrays.

Every backward rule is written in terms of the same differentiable ops, so a
gradient computed with ``retain_graph=True`` is itself a recorded ``DiffVar``
and can be differentiated again. That is what lets an adversary optimise a
function of model gradients.

Recording state is thread-local: one attack trial per thread or process.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DiffVar",
    "GradResult",
    "DimensionError",
    "tensor",
    "variable",
    "constant",
    "no_record",
    "gradients",
    "affine",
    "conv2d",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "log_softmax",
    "softmax",
    "cross_entropy_soft",
    "cross_entropy_probs",
    "frobenius_norm_all",
    "sum_of_squares",
    "inner_product",
    "total_variation",
]


class DimensionError(ValueError):
    """Raised when operand shapes cannot be combined."""


_state = threading.local()
_ids = itertools.count()


def _is_recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def no_record(active: bool = True) -> Iterator[None]:
    """Evaluate ops without building a graph (results are constants)."""
    previous = _is_recording()
    _state.record = previous and not active
    try:
        yield
    finally:
        _state.record = previous


@contextmanager
def _recording(flag: bool) -> Iterator[None]:
    previous = _is_recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = previous


def tensor(data) -> np.ndarray:
    """Validate external input as a finite float64 array."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


class DiffVar:
    """Immutable value plus its position in the recording graph."""

    __slots__ = ("value", "parents", "backward", "requires_grad", "node_id", "ctx")

    __array_priority__ = 100  # make ndarray <op> DiffVar defer to us

    def __init__(self, value, parents=(), backward=None, requires_grad=False, ctx=None):
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        self.value = value
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.ctx = ctx

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "DiffVar":
        return permute(self, (1, 0))

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DiffVar(shape={self.shape}{flag})"

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

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)


def variable(value, requires_grad: bool = True) -> DiffVar:
    """A leaf the caller wants gradients for."""
    return DiffVar(tensor(value), requires_grad=requires_grad)


def constant(value) -> DiffVar:
    """A validated, non-differentiable copy of external data."""
    return DiffVar(tensor(value))


def _wrap(x) -> DiffVar:
    return x if isinstance(x, DiffVar) else constant(x)


def _node(value, parents: tuple, backward: Callable, ctx=None) -> DiffVar:
    if _is_recording() and any(p.requires_grad for p in parents):
        return DiffVar(value, parents, backward, True, ctx)
    return DiffVar(value)


# -- broadcasting helpers ----------------------------------------------------


def _reduce_axes(from_shape: tuple, to_shape: tuple) -> tuple[tuple, int]:
    lead = len(from_shape) - len(to_shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(to_shape) if n == 1 and from_shape[lead + i] != 1
    )
    return axes, lead


def sum_to(x: DiffVar, shape: tuple) -> DiffVar:
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, _ = _reduce_axes(x.shape, shape)
    value = x.value.sum(axis=axes).reshape(shape) if axes else x.value.reshape(shape)
    return _node(value, (x,), _sum_to_bwd, (x.shape,))


def _sum_to_bwd(node, g, needs):
    return (broadcast_to(g, node.ctx[0]),)


def broadcast_to(x: DiffVar, shape: tuple) -> DiffVar:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    value = np.broadcast_to(x.value, shape)
    return _node(value, (x,), _broadcast_bwd, (x.shape,))


def _broadcast_bwd(node, g, needs):
    return (sum_to(g, node.ctx[0]),)


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> DiffVar:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value + b.value, (a, b), _add_bwd)


def _add_bwd(node, g, needs):
    a, b = node.parents
    return (
        sum_to(g, a.shape) if needs[0] else None,
        sum_to(g, b.shape) if needs[1] else None,
    )


def sub(a, b) -> DiffVar:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value - b.value, (a, b), _sub_bwd)


def _sub_bwd(node, g, needs):
    a, b = node.parents
    return (
        sum_to(g, a.shape) if needs[0] else None,
        sum_to(neg(g), b.shape) if needs[1] else None,
    )


def neg(a) -> DiffVar:
    a = _wrap(a)
    return _node(-a.value, (a,), _neg_bwd)


def _neg_bwd(node, g, needs):
    return (neg(g),)


def mul(a, b) -> DiffVar:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value * b.value, (a, b), _mul_bwd)


def _mul_bwd(node, g, needs):
    a, b = node.parents
    return (
        sum_to(mul(g, b), a.shape) if needs[0] else None,
        sum_to(mul(g, a), b.shape) if needs[1] else None,
    )


def div(a, b) -> DiffVar:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value / b.value, (a, b), _div_bwd)


def _div_bwd(node, g, needs):
    a, b = node.parents
    ga = div(g, b)
    return (
        sum_to(ga, a.shape) if needs[0] else None,
        sum_to(neg(mul(ga, node)), b.shape) if needs[1] else None,
    )


def matmul(a, b) -> DiffVar:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _node(a.value @ b.value, (a, b), _matmul_bwd)


def _matmul_bwd(node, g, needs):
    a, b = node.parents
    return (
        matmul(g, permute(b, (1, 0))) if needs[0] else None,
        matmul(permute(a, (1, 0)), g) if needs[1] else None,
    )


# -- shape ops ---------------------------------------------------------------


def reshape(x, shape) -> DiffVar:
    x = _wrap(x)
    value = x.value.reshape(shape)
    if value.shape == x.shape:
        return x
    return _node(value, (x,), _reshape_bwd, (x.shape,))


def _reshape_bwd(node, g, needs):
    return (reshape(g, node.ctx[0]),)


def permute(x, axes) -> DiffVar:
    x = _wrap(x)
    axes = tuple(axes)
    return _node(np.transpose(x.value, axes), (x,), _permute_bwd, (axes,))


def _permute_bwd(node, g, needs):
    return (permute(g, np.argsort(node.ctx[0])),)


def reduce_sum(x, axis=None, keepdims=False) -> DiffVar:
    x = _wrap(x)
    value = x.value.sum(axis=axis, keepdims=keepdims)
    return _node(value, (x,), _reduce_sum_bwd, (x.shape, axis, keepdims))


def _reduce_sum_bwd(node, g, needs):
    shape, axis, keepdims = node.ctx
    if axis is None:
        kept = (1,) * len(shape)
    elif not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = {a % len(shape) for a in axes}
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    else:
        kept = g.shape
    return (broadcast_to(reshape(g, kept), shape),)


def index(x, key) -> DiffVar:
    """Basic (slice) indexing; the adjoint scatters into zeros."""
    x = _wrap(x)
    return _node(x.value[key], (x,), _index_bwd, (key, x.shape))


def _index_bwd(node, g, needs):
    key, shape = node.ctx
    return (_scatter(g, key, shape),)


def _scatter(g: DiffVar, key, shape) -> DiffVar:
    out = np.zeros(shape)
    out[key] = g.value
    return _node(out, (g,), _scatter_bwd, (key,))


def _scatter_bwd(node, g, needs):
    return (index(g, node.ctx[0]),)


# -- elementwise nonlinearities ---------------------------------------------


def exp(x) -> DiffVar:
    x = _wrap(x)
    return _node(np.exp(x.value), (x,), _exp_bwd)


def _exp_bwd(node, g, needs):
    return (mul(g, node),)


def log(x) -> DiffVar:
    x = _wrap(x)
    return _node(np.log(x.value), (x,), _log_bwd)


def _log_bwd(node, g, needs):
    return (div(g, node.parents[0]),)


def sqrt(x) -> DiffVar:
    x = _wrap(x)
    return _node(np.sqrt(x.value), (x,), _sqrt_bwd)


def _sqrt_bwd(node, g, needs):
    return (div(mul(g, 0.5), node),)


def sigmoid(x) -> DiffVar:
    x = _wrap(x)
    v = x.value
    # split by sign so neither branch overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (x,), _sigmoid_bwd)


def _sigmoid_bwd(node, g, needs):
    return (mul(g, mul(node, sub(1.0, node))),)


def relu(x) -> DiffVar:
    x = _wrap(x)
    mask = (x.value > 0).astype(np.float64)
    return _node(x.value * mask, (x,), _masked_bwd, (mask,))


def absolute(x) -> DiffVar:
    """|x| with subgradient 0 at 0."""
    x = _wrap(x)
    sign = np.sign(x.value)
    return _node(np.abs(x.value), (x,), _masked_bwd, (sign,))


def _masked_bwd(node, g, needs):
    return (mul(g, DiffVar(node.ctx[0])),)


def log_softmax(x, axis: int = -1) -> DiffVar:
    x = _wrap(x)
    v = x.value
    shifted = v - v.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _node(out, (x,), _log_softmax_bwd, (axis,))


def _log_softmax_bwd(node, g, needs):
    axis = node.ctx[0]
    return (sub(g, mul(exp(node), reduce_sum(g, axis=axis, keepdims=True))),)


def softmax(x, axis: int = -1) -> DiffVar:
    return exp(log_softmax(x, axis))


# -- convolution via im2col --------------------------------------------------


@lru_cache(maxsize=64)
def _im2col_index(C: int, H: int, W: int, kh: int, kw: int, pad: int, stride: int):
    Hp, Wp = H + 2 * pad, W + 2 * pad
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1
    c, i, j = np.meshgrid(np.arange(C), np.arange(kh), np.arange(kw), indexing="ij")
    patch = (c * Hp * Wp + i * Wp + j).ravel()
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    origin = (oi * stride * Wp + oj * stride).ravel()
    idx = origin[:, None] + patch[None, :]
    idx.flags.writeable = False
    return idx, oh, ow


def _im2col(x: DiffVar, kh: int, kw: int, pad: int, stride: int) -> DiffVar:
    B, C, H, W = x.shape
    idx, oh, ow = _im2col_index(C, H, W, kh, kw, pad, stride)
    xp = x.value
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = xp.reshape(B, -1)[:, idx].reshape(B * oh * ow, -1)
    return _node(cols, (x,), _im2col_bwd, (x.shape, kh, kw, pad, stride))


def _im2col_bwd(node, g, needs):
    return (_col2im(g, *node.ctx),)


def _col2im(g: DiffVar, shape, kh, kw, pad, stride) -> DiffVar:
    B, C, H, W = shape
    idx, _, _ = _im2col_index(C, H, W, kh, kw, pad, stride)
    Hp, Wp = H + 2 * pad, W + 2 * pad
    per = C * Hp * Wp
    flat = (idx[None, :, :] + (np.arange(B) * per)[:, None, None]).ravel()
    acc = np.bincount(flat, weights=g.value.ravel(), minlength=B * per)
    img = acc.reshape(B, C, Hp, Wp)[:, :, pad : pad + H, pad : pad + W]
    return _node(img, (g,), _col2im_bwd, (shape, kh, kw, pad, stride))


def _col2im_bwd(node, g, needs):
    _, kh, kw, pad, stride = node.ctx
    return (_im2col(g, kh, kw, pad, stride),)


# -- layer-level ops ---------------------------------------------------------


def affine(input, weight, use_bias: bool = False, bias=None) -> DiffVar:
    """``input @ weight (+ bias)`` for input [B, n_in] and weight [n_in, n_out]."""
    input, weight = _wrap(input), _wrap(weight)
    if input.ndim != 2 or weight.ndim != 2 or input.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"affine: input shape {input.shape} incompatible with weight shape {weight.shape}"
        )
    out = matmul(input, weight)
    if use_bias:
        if bias is None:
            raise ValueError("affine: use_bias set but no bias given")
        bias = _wrap(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"affine: bias shape {bias.shape} does not match weight shape {weight.shape}"
            )
        out = add(out, bias)
    return out


def conv2d(input, kernel, pad: int = 0, stride: int = 1) -> DiffVar:
    """Cross-correlation of [B, C_in, H, W] with [C_out, C_in, kH, kW]."""
    input, kernel = _wrap(input), _wrap(kernel)
    if input.ndim != 4 or kernel.ndim != 4 or input.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d: input shape {input.shape} incompatible with kernel shape {kernel.shape}"
        )
    if pad < 0 or stride < 1:
        raise ValueError(f"conv2d: need pad >= 0 and stride >= 1, got pad={pad}, stride={stride}")
    B, _, H, W = input.shape
    c_out, _, kh, kw = kernel.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d: input {input.shape} too small for kernel {kernel.shape} "
            f"with pad={pad}, stride={stride}"
        )
    cols = _im2col(input, kh, kw, pad, stride)
    out = matmul(cols, permute(reshape(kernel, (c_out, -1)), (1, 0)))
    return permute(reshape(out, (B, oh, ow, c_out)), (0, 3, 1, 2))


def cross_entropy_probs(logits, target_probs) -> DiffVar:
    """Mean cross entropy of ``logits`` against probability rows."""
    logits, target_probs = _wrap(logits), _wrap(target_probs)
    if logits.shape != target_probs.shape or logits.ndim != 2:
        raise DimensionError(
            f"cross entropy: logits {logits.shape} vs targets {target_probs.shape}"
        )
    total = reduce_sum(mul(target_probs, log_softmax(logits)))
    return mul(total, -1.0 / logits.shape[0])


def cross_entropy_soft(logits, label_logits) -> DiffVar:
    """Cross entropy against ``softmax(label_logits)``; labels stay differentiable."""
    return cross_entropy_probs(logits, softmax(label_logits))


def sum_of_squares(tensors: Sequence) -> DiffVar:
    if len(tensors) == 0:
        raise ValueError("need at least one tensor")
    terms = [reduce_sum(mul(t, t)) for t in map(_wrap, tensors)]
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def inner_product(a: Sequence, b: Sequence) -> DiffVar:
    if len(a) == 0 or len(a) != len(b):
        raise ValueError("inner product needs two non-empty lists of equal length")
    total = None
    for x, y in zip(a, b):
        x, y = _wrap(x), _wrap(y)
        if x.shape != y.shape:
            raise DimensionError(f"inner product: shapes {x.shape} and {y.shape} differ")
        term = reduce_sum(mul(x, y))
        total = term if total is None else add(total, term)
    return total


def frobenius_norm_all(tensors: Sequence) -> DiffVar:
    """Euclidean norm of all entries of all tensors taken together.

    At exactly zero the result is a constant 0 (zero subgradient) instead of
    propagating the infinite derivative of sqrt.
    """
    total = sum_of_squares(tensors)
    if total.value == 0.0:
        return constant(0.0)
    return sqrt(total)


def total_variation(image) -> DiffVar:
    """Anisotropic TV: summed absolute vertical and horizontal neighbour differences."""
    image = _wrap(image)
    if image.ndim != 4:
        raise DimensionError(f"total_variation expects [B, C, H, W], got {image.shape}")
    H, W = image.shape[2], image.shape[3]
    total = constant(0.0)
    if H >= 2:
        dv = sub(index(image, np.s_[:, :, 1:, :]), index(image, np.s_[:, :, :-1, :]))
        total = add(total, reduce_sum(absolute(dv)))
    if W >= 2:
        dh = sub(index(image, np.s_[:, :, :, 1:]), index(image, np.s_[:, :, :, :-1]))
        total = add(total, reduce_sum(absolute(dh)))
    return total


# -- reverse pass ------------------------------------------------------------


@dataclass(frozen=True)
class GradResult:
    """Gradients aligned with the requested variables.

    With ``graph_retained`` the entries are recorded ``DiffVar`` nodes,
    otherwise plain arrays.
    """

    grads: list
    graph_retained: bool

    def __iter__(self):
        return iter(self.grads)

    def __len__(self) -> int:
        return len(self.grads)

    def __getitem__(self, i):
        return self.grads[i]


def _walk(root: DiffVar, targets: set) -> tuple[list, dict]:
    """Post-order over grad-requiring nodes; flags nodes with a path to a target."""
    order: list = []
    needed: dict = {}
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            needed[node.node_id] = node.node_id in targets or any(
                needed.get(p.node_id, False) for p in node.parents
            )
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in visited:
                stack.append((p, False))
    return order, needed


def gradients(scalar: DiffVar, wrt: Sequence[DiffVar], retain_graph: bool = False) -> GradResult:
    """d scalar / d wrt[i] by reverse accumulation.

    Variables with no path from ``scalar`` get zeros. With ``retain_graph`` the
    backward pass is recorded so the returned gradients can be differentiated.
    """
    if not isinstance(scalar, DiffVar) or scalar.shape != ():
        shape = getattr(scalar, "shape", None)
        raise ValueError(f"gradients() needs a scalar root, got shape {shape}")
    wrt = list(wrt)
    targets = {v.node_id for v in wrt if v.requires_grad}
    grads: dict = {}
    if scalar.requires_grad and targets:
        order, needed = _walk(scalar, targets)
        grads[scalar.node_id] = DiffVar(np.ones(()))
        with _recording(retain_graph):
            for node in reversed(order):
                if node.backward is None or not needed[node.node_id]:
                    continue
                g = grads.get(node.node_id)
                if g is None:
                    continue
                needs = tuple(p.requires_grad and needed.get(p.node_id, False) for p in node.parents)
                for p, pg, need in zip(node.parents, node.backward(node, g, needs), needs):
                    if not need or pg is None:
                        continue
                    prev = grads.get(p.node_id)
                    grads[p.node_id] = pg if prev is None else add(prev, pg)
    out = []
    for v in wrt:
        g = grads.get(v.node_id)
        if g is None:
            g = DiffVar(np.zeros(v.shape))
        out.append(g if retain_graph else g.value)
    return GradResult(out, retain_graph)
