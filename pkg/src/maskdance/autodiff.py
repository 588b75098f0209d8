"""Dense arrays with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` that touch at least one
tensor with ``requires_grad`` are recorded in order; :func:`backward` replays
the record in reverse.  Outside a tape everything is plain numpy, which keeps
inference cheap.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError", "ShapeError", "NumericError", "TapeError", "DegenerateLossError",
    "ParameterError", "Tensor", "Tape", "backward", "precision", "tensor",
    "matmul", "softmax", "log_softmax", "cross_entropy", "gumbel_softmax_st",
    "layer_norm", "conv1d", "embedding", "concat", "repeat", "cumsum", "gelu",
    "relu", "tanh", "exp", "log", "abs_", "sum_", "mean", "straight_through",
    "stop_gradient", "AdamW", "warmup_lr", "clip_grad_norm",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, ValueError):
    pass


class TapeError(AutodiffError, RuntimeError):
    pass


class DegenerateLossError(AutodiffError, ValueError):
    pass


class ParameterError(AutodiffError, ValueError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with (gradient checks use float64)."""
    old = _dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = old


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[tuple] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: "Tensor", parents: tuple, grad_fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, parents, grad_fn))

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape; re-record the computation first")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        nodes, self.nodes = self.nodes, []
        for out, parents, grad_fn in reversed(nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in parents)
            pgrads = grad_fn(g, needs)
            for p, pg, need in zip(parents, pgrads, needs):
                if not need or pg is None:
                    continue
                if p._tape is self:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.data.shape)
                    p.grad = pg.copy() if p.grad is None else p.grad + pg


def backward(loss: "Tensor") -> None:
    """Populate ``.grad`` of every leaf that contributed to ``loss``."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise TapeError("loss is detached: it was not produced on an active tape")
    loss._tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self.name = name

    # -- introspection
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: tuple, grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out.name = None
    stack = _tape_stack()
    if stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        stack[-1].record(out, parents, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if needs[1] else None
        return ga, gb

    return _result(a.data / b.data, (a, b), grad_fn)


def power(x, p: float) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g, needs):
        return (g * p * x.data ** (p - 1),)

    return _result(x.data ** p, (x,), grad_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def grad_fn(g, needs):
        return (g * out,)

    return _result(out, (x,), grad_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g, needs):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), grad_fn)


def abs_(x) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g, needs):
        return (g * np.sign(x.data),)

    return _result(np.abs(x.data), (x,), grad_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0

    def grad_fn(g, needs):
        return (g * pos,)

    return _result(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), grad_fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def grad_fn(g, needs):
        return (g * (1 - out * out),)

    return _result(out, (x,), grad_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def grad_fn(g, needs):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _result(out.astype(xd.dtype), (x,), grad_fn)


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def grad_fn(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def grad_fn(g, needs):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), grad_fn)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def grad_fn(g, needs):
        return (g.transpose(inv),)

    return _result(x.data.transpose(axes), (x,), grad_fn)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = _as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    basic = _is_basic_index(idx)

    def grad_fn(g, needs):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, grad_fn)


def repeat(x, repeats: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling along ``axis``."""
    x = _as_tensor(x)
    ax = axis % x.ndim

    def grad_fn(g, needs):
        shape = x.shape[:ax] + (x.shape[ax], repeats) + x.shape[ax + 1:]
        return (g.reshape(shape).sum(axis=ax + 1),)

    return _result(np.repeat(x.data, repeats, axis=ax), (x,), grad_fn)


def cumsum(x, axis: int) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g, needs):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(x.data, axis=axis), (x,), grad_fn)


def stop_gradient(x) -> Tensor:
    return _as_tensor(x).detach()


def straight_through(hard, soft) -> Tensor:
    """Forward value of ``hard``; gradient routed entirely to ``soft``."""
    hard, soft = _as_tensor(hard), _as_tensor(soft)
    if hard.shape != soft.shape:
        raise ShapeError("straight-through operands must share a shape")

    def grad_fn(g, needs):
        return None, g

    return _result(hard.data.astype(soft.data.dtype), (hard, soft), grad_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def grad_fn(g, needs):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), grad_fn)


def embedding(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def grad_fn(g, needs):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _result(table.data[ids], (table,), grad_fn)


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 1-d convolution.

    x: (B, T, Cin); weight: (k, Cin, Cout); bias: (Cout,).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    B, T, cin = x.shape
    k, wcin, cout = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv1d channel mismatch: input {cin}, weight {wcin}")
    t_out = (T + 2 * padding - k) // stride + 1
    if t_out <= 0:
        raise ShapeError("conv1d input too short for kernel")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    span = stride * (t_out - 1) + 1
    cols = np.stack([xp[:, j:j + span:stride, :] for j in range(k)], axis=2)
    cols2 = cols.reshape(B * t_out, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = (cols2 @ w2).reshape(B, t_out, cout)
    parents = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def grad_fn(g, needs):
        g2 = g.reshape(B * t_out, cout)
        gx = gw = gb = None
        if needs[0]:
            gcols = (g2 @ w2.T).reshape(B, t_out, k, cin)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + span:stride, :] += gcols[:, :, j, :]
            gx = gxp[:, padding:padding + T, :] if padding else gxp
        if needs[1]:
            gw = (cols2.T @ g2).reshape(k, cin, cout)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=0)
        return (gx, gw, gb)[:len(parents)]

    return _result(out, parents, grad_fn)


# ---------------------------------------------------------------- normalisation / probabilities

def _check_finite(x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericError("NaN in input")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), grad_fn)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data)
    ls = _log_softmax_np(x.data, axis)

    def grad_fn(g, needs):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _result(ls, (x,), grad_fn)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over all leading positions."""
    logits = _as_tensor(logits)
    _check_finite(logits.data)
    K = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise IndexError("target index out of range")
    if weights is None:
        w = np.ones(targets.shape, dtype=logits.data.dtype)
    else:
        w = np.asarray(weights.data if isinstance(weights, Tensor) else weights,
                       dtype=logits.data.dtype)
        if w.shape != targets.shape:
            raise ShapeError("weights must match targets")
        if (w < 0).any():
            raise ParameterError("weights must be non-negative")
    total = float(w.sum())
    if total <= 0:
        raise DegenerateLossError("all cross-entropy weights are zero")
    flat = logits.data.reshape(-1, K)
    ls = _log_softmax_np(flat, -1)
    t = targets.reshape(-1)
    wf = w.reshape(-1)
    nll = -ls[np.arange(t.size), t]
    loss = np.asarray((wf * nll).sum() / total, dtype=logits.data.dtype)

    def grad_fn(g, needs):
        p = np.exp(ls)
        p[np.arange(t.size), t] -= 1.0
        p *= (wf / total)[:, None]
        return ((g * p).reshape(logits.shape).astype(logits.data.dtype),)

    return _result(loss, (logits,), grad_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g, needs):
        gx = gg = gb = None
        if needs[0]:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            gg = (g * xhat).sum(axis=lead)
        if needs[2]:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), grad_fn)


def gumbel_softmax_st(logits, temperature: float, rng: np.random.Generator):
    """Straight-through Gumbel-Softmax over the last axis.

    Returns ``(soft, hard)``: ``soft`` is the relaxed sample and ``hard`` the one-hot
    of its argmax whose gradient is routed through ``soft``.
    """
    if not temperature > 0:
        raise ParameterError("temperature must be positive")
    logits = _as_tensor(logits)
    u = rng.uniform(1e-10, 1.0 - 1e-10, size=logits.shape)
    noise = (-np.log(-np.log(u))).astype(logits.data.dtype)
    soft = softmax((logits + noise) * (1.0 / temperature), axis=-1)
    idx = soft.data.argmax(axis=-1)
    onehot = np.zeros_like(soft.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    hard = straight_through(onehot, soft)
    return soft, hard


# ---------------------------------------------------------------- optimisation

def warmup_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warm-up to ``peak`` over ``warmup`` steps, constant afterwards."""
    if warmup <= 0:
        return peak
    return peak * min(1.0, (step + 1) / warmup)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, betas=(0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim > 1:
                upd = upd + self.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]
