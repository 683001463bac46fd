"""Dense tensors with reverse-mode differentiation over a small set of coarse ops.

Every op computes its forward value eagerly with numpy and, when any input
requires a gradient, records a closure that maps the output gradient back to
its inputs. :func:`backward` walks the recorded graph in reverse topological
order and accumulates into ``Tensor.grad``.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, EmptyLossError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; ``stream`` selects an independent substream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"


class Parameter(Tensor):
    """A named leaf tensor whose gradient buffer persists between backward passes."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, copy=True), requires_grad=trainable)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass(frozen=True)
class GradCheckReport:
    parameter_id: str
    max_relative_error: float
    max_absolute_error: float
    num_entries_checked: int


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if grad_enabled() and any(t.requires_grad for t in inputs):
        return Tensor(data, True, tuple(inputs), backward_fn, op)
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray):
    if isinstance(t, Parameter):
        t.grad += g
    elif t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), bw, "neg")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), bw, "scale")


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(), (a,), bw, "sum")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_grad(x: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return sig * (1.0 + x * (1.0 - sig))


def silu(x: Tensor) -> Tensor:
    """Elementwise ``x * sigmoid(x)``."""
    sig = _sigmoid(x.data)

    def bw(g):
        _accumulate(x, g * _silu_grad(x.data, sig))

    return _result(x.data * sig, (x,), bw, "silu")


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), bw, "transpose")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accumulate(a, full)

    return _result(a.data[..., start:stop], (a,), bw, "slice")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch dims; ``b`` is 2-D or has the same batch dims."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared_rhs = b.data.ndim == 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared_rhs:
                k, n = b.shape
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), bw, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xh).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            _accumulate(
                x,
                inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True)),
            )

    return _result(out, (x, gain, bias), bw, "layer_norm")


# -- indexing ----------------------------------------------------------------


def _scatter_rows(n_rows: int, idx: np.ndarray, rows: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros((n_rows, rows.shape[-1]), dtype=dtype)
    np.add.at(out, idx.ravel(), rows.reshape(-1, rows.shape[-1]))
    return out


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx)

    def bw(g):
        _accumulate(table, _scatter_rows(table.shape[0], idx, g, table.dtype))

    return _result(table.data[idx], (table,), bw, "gather")


def take_along_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[r, idx[r, j]]`` for a 2-D ``x``; the index itself carries no gradient."""
    idx = np.asarray(idx)
    n_rows, width = x.shape
    flat = (idx + width * np.arange(n_rows)[:, None]).ravel()

    def bw(g):
        gx = np.bincount(flat, weights=g.ravel(), minlength=n_rows * width)
        _accumulate(x, gx.reshape(n_rows, width).astype(x.dtype, copy=False))

    return _result(x.data.reshape(-1)[flat].reshape(idx.shape), (x,), bw, "take")


def weighted_row_sum(table: Tensor, idx: np.ndarray, weights: Tensor) -> Tensor:
    """``out[r] = sum_j weights[r, j] * table[idx[r, j]]``.

    The straight-through value readout of a top-k lookup: gradients reach the
    selected table rows and the weights, never the indices.
    """
    idx = np.asarray(idx)
    rows = table.data[idx]  # (R, k, d)
    out = (weights.data[:, None, :] @ rows)[:, 0, :]

    def bw(g):
        if weights.requires_grad:
            _accumulate(weights, (rows @ g[:, :, None])[:, :, 0])
        if table.requires_grad:
            contrib = weights.data[:, :, None] * g[:, None, :]
            _accumulate(table, _scatter_rows(table.shape[0], idx, contrib, table.dtype))

    return _result(out, (table, weights), bw, "weighted_row_sum")


class RowGradMask:
    """Boolean row mask read at backward time; ``rows=None`` lets every row through."""

    __slots__ = ("rows",)

    def __init__(self, rows=None):
        self.rows = rows


def mask_row_grads(table: Tensor, mask: RowGradMask) -> Tensor:
    """Identity in the forward pass; zeroes gradient rows outside ``mask.rows`` in backward.

    The output shares the input's data array, so forward values are unchanged
    by construction. The mask may be filled in after the forward pass.
    """

    def bw(g):
        if mask.rows is None:
            _accumulate(table, g)
        else:
            _accumulate(table, np.where(mask.rows[:, None], g, 0).astype(g.dtype, copy=False))

    return _result(table.data, (table,), bw, "mask_rows")


# -- loss --------------------------------------------------------------------


def cross_entropy_masked(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-token NLL over positions where ``loss_mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    n_pos, vocab = logits.shape
    if targets.shape != (n_pos,) or mask.shape != (n_pos,):
        raise ShapeError(f"cross_entropy_masked: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy_masked: every position is masked out")
    if np.any(targets[mask] < 0) or np.any(targets[mask] >= vocab):
        raise ValueError(f"cross_entropy_masked: target ids must lie in [0, {vocab})")
    safe_targets = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n_pos)
    nll = lse - z[rows, safe_targets]
    loss = nll[mask].sum() / count

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, safe_targets] -= 1.0
        p *= (mask * (g / count))[:, None].astype(p.dtype)
        _accumulate(logits, p)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# -- driver ------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(param) into every reachable trainable parameter's ``grad``."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.grad[...] = 0.0


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    sample_size: int = 20,
    seed: int = 0,
) -> list[GradCheckReport]:
    """Compare analytic gradients with central differences on sampled entries.

    Half of each parameter's sample is drawn from entries with a nonzero
    analytic gradient and half uniformly, so sparse gradients (value rows,
    embeddings) are exercised without ignoring the zero entries.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"finite differences need float64 parameters; {p.name} is {p.dtype}")
    zero_grads(params)
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    rng = make_rng(seed)
    reports = []
    for p in params:
        flat_grad = analytic[p.name].ravel()
        nonzero = np.flatnonzero(flat_grad)
        n_each = max(1, sample_size // 2)
        picks = []
        if nonzero.size:
            picks.append(rng.choice(nonzero, size=min(n_each, nonzero.size), replace=False))
        picks.append(rng.choice(flat_grad.size, size=min(sample_size - n_each, flat_grad.size), replace=False))
        entries = np.unique(np.concatenate(picks))
        flat_value = p.data.reshape(-1)
        max_rel = max_abs = 0.0
        with no_grad():
            for i in entries:
                orig = flat_value[i]
                flat_value[i] = orig + epsilon
                f_plus = float(loss_fn().data)
                flat_value[i] = orig - epsilon
                f_minus = float(loss_fn().data)
                flat_value[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                a = float(flat_grad[i])
                err = abs(a - numeric)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, err / max(abs(a), abs(numeric), 1e-8))
        reports.append(GradCheckReport(p.name, max_rel, max_abs, int(entries.size)))
    return reports
