"""Small reverse-mode autodiff engine on top of numpy.

Only the operations the NCPP graph needs are provided. Every op records its
parents and a closure that maps the output gradient to parent gradients;
``backward`` linearises the graph into a :class:`Tape` and replays it in
reverse.  All data is float64.
"""
from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0.0), (x,), backward, "relu")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Select ``indices`` along ``axis``; gradients scatter back with add."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward, "take")


def pad_axis(x: Tensor, before: int, after: int, axis: int) -> Tensor:
    x = as_tensor(x)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]

    def backward(g):
        index = [slice(None)] * g.ndim
        index[axis] = slice(before, before + n)
        return (g[tuple(index)],)

    return _make(np.pad(x.data, widths), (x,), backward, "pad")


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(x.shape[a] for a in axes)
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold batch axes into rows: one GEMM instead of a batched one
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- nn ops

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "layer_norm")


class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> BatchNormState:
        other = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, update_stats: bool = True) -> Tensor:
    """Per-channel normalisation over every axis except the last.

    In training mode batch statistics are used (population variance) and, if
    ``update_stats``, folded into the running averages. Inference uses the
    running statistics only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeError(f"batch_norm channel mismatch: input {x.shape}, gamma {gamma.shape}")
    flat = x.data.reshape(-1, c)
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        if update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mu
            state.running_var = m * state.running_var + (1.0 - m) * var
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        g2 = g.reshape(-1, c)
        xh = xhat.reshape(-1, c)
        ggamma = (g2 * xh).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gh = g2 * gamma.data
            if training:
                gx = inv * (gh - gh.mean(axis=0) - xh * (gh * xh).mean(axis=0))
            else:
                gx = gh * inv
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def conv1d(x: Tensor, filters: Tensor, bias: Tensor | None = None) -> Tensor:
    """'Same'-padded 1-D convolution of ``x`` [batch, length, c_in].

    ``filters`` has shape [kernel, c_in, c_out]; kernel must be odd.
    """
    x, filters = as_tensor(x), as_tensor(filters)
    k, c_in, c_out = filters.shape
    if x.ndim != 3 or x.shape[-1] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, filters {filters.shape}")
    if k % 2 != 1:
        raise ShapeError(f"conv1d kernel length must be odd, got {k}")
    if k == 1:
        out = matmul(x, reshape(filters, (c_in, c_out)))
    else:
        half = k // 2
        n = x.shape[1]
        padded = pad_axis(x, half, half, axis=1)
        windows = concat([take(padded, np.arange(j, j + n), axis=1) for j in range(k)], axis=-1)
        out = matmul(windows, reshape(filters, (k * c_in, c_out)))
    return out if bias is None else add(out, bias)


def conv_bn_relu(x: Tensor, filters: Tensor, bias: Tensor | None, gamma: Tensor | None,
                 beta: Tensor | None, state: BatchNormState | None, training: bool,
                 update_stats: bool = True) -> Tensor:
    """Convolution, then batch norm (skipped when ``state`` is None), then ReLU."""
    h = conv1d(x, filters, bias)
    if state is not None:
        h = batch_norm(h, gamma, beta, state, training, update_stats)
    return relu(h)


class VocabularyError(IndexError):
    """Raised when a token id is outside the embedding table."""


def embedding_lookup_masked(ids, table: Tensor, mask) -> Tensor:
    """Gather rows of ``table`` for ``ids``; masked-out positions give zeros.

    Row 0 is the padding row and never receives gradient.
    """
    ids = np.asarray(ids, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    table = as_tensor(table)
    if ids.shape != mask.shape:
        raise ShapeError(f"ids {ids.shape} and mask {mask.shape} differ")
    vocab = table.shape[0]
    if ids.size and (ids.max() >= vocab or ids.min() < 0):
        raise VocabularyError(f"token id {int(ids.max())} out of vocabulary of size {vocab}")
    safe = np.where(mask, ids, 0)
    keep = mask[..., None].astype(DTYPE)
    out = table.data[safe] * keep

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, safe[mask], g[mask])
        gt[0] = 0.0
        return (gt,)

    return _make(out, (table,), backward, "embedding")


def huber_loss(pred: Tensor, target, delta: float = 1.0, mask=None) -> Tensor:
    """Mean Huber loss: quadratic for |e| <= delta, linear beyond.

    With ``mask`` only the selected elements contribute and the mean is over
    their count.
    """
    if not delta > 0:
        raise ValueError(f"huber delta must be positive, got {delta}")
    pred = as_tensor(pred)
    target = np.asarray(as_tensor(target).data)
    if pred.shape != target.shape:
        raise ShapeError(f"huber_loss shapes differ: {pred.shape} vs {target.shape}")
    e = target - pred.data
    abs_e = np.abs(e)
    quad = abs_e <= delta
    per = np.where(quad, 0.5 * e * e, delta * (abs_e - 0.5 * delta))
    if mask is None:
        w = np.ones_like(e)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=DTYPE), e.shape)
        per = np.where(w > 0, per, 0.0)
    n = max(float(w.sum()), 1.0)

    def backward(g):
        # d/dpred of the per-element loss
        d = np.where(quad, -e, -delta * np.sign(e))
        return (g * w * d / n,)

    return _make(np.asarray(per.sum() / n), (pred,), backward, "huber")


# ---------------------------------------------------------------- backward

class Tape:
    """Operations reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate across calls until reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.record(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape
