"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations executed inside an active :class:`Tape` whose inputs are trainable
leaves (``requires_grad=True``) or results of earlier recorded operations are
appended to the tape.  Outside a tape every op is a plain numpy computation,
which is how inference and frozen-model forwards run.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_STACK: list["Tape"] = []

MASK_FILL = -1e9
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 value, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    backward: Callable | None


class Tape:
    """Append-only record of operations for one forward pass.

    ``backward`` may be called once; a second call raises ``RuntimeError``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_node: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.remove(self)

    def _tracked(self, t) -> bool:
        return isinstance(t, Tensor) and (t._tape is self or (t.requires_grad and t._tape is None))

    def _node_id(self, t) -> int | None:
        if not isinstance(t, Tensor):
            return None
        if t._tape is self:
            return t._node
        if t.requires_grad and t._tape is None:
            key = id(t)
            if key not in self._leaf_node:
                self._leaf_node[key] = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None))
                self._leaves.append(t)
            return self._leaf_node[key]
        return None

    def record(self, op: str, inputs: Sequence, data: np.ndarray, backward: Callable) -> Tensor:
        ids = tuple(self._node_id(t) for t in inputs)
        out = Tensor(data)
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(op, ids, backward))
        return out

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(root)/d(leaf) into ``leaf.grad`` for every leaf on this tape.

        Returns a mapping ``id(leaf) -> gradient``.  Leaves that do not reach the
        root get a zero gradient.
        """
        if self._used:
            raise RuntimeError("backward already ran on this tape; record a new forward pass")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        self._used = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if root._tape is self:
            grads[root._node] = np.ones_like(root.data)
            for i in range(root._node, -1, -1):
                g = grads[i]
                node = self.nodes[i]
                if g is None or node.backward is None:
                    continue
                needs = tuple(j is not None for j in node.inputs)
                in_grads = node.backward(g, needs)
                for j, ig in zip(node.inputs, in_grads):
                    if j is None or ig is None:
                        continue
                    grads[j] = ig if grads[j] is None else grads[j] + ig
                grads[i] = None
        out = {}
        for leaf in self._leaves:
            g = grads[self._leaf_node[id(leaf)]]
            g = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[id(leaf)] = g
        return out


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(root)


def current_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


def leaf(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence, data: np.ndarray, backward: Callable) -> Tensor:
    tape = current_tape()
    if tape is not None and any(tape._tracked(t) for t in inputs):
        return tape.record(op, inputs, data, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _emit("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _emit("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _emit("mul", (a, b), ad * bd, bw)


def scale(a, k: float) -> Tensor:
    a = _as_tensor(a)
    k = float(k)
    return _emit("scale", (a,), a.data * k, lambda g, needs: (g * k,))


def gelu(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    c = np.sqrt(2.0 / np.pi)
    x2 = xd * xd
    inner = c * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g, needs):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit("gelu", (x,), out, bw)


# -- shape -----------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g, needs: (g.reshape(old),))


def transpose(x, axes=()) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g, needs: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def bw(g, needs):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (x,), x.data[index], bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the sequence axis for ``T x d`` activations)."""
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g, needs):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=axis), bw)


# -- reductions ------------------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), bw)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    shape = x.shape
    return _emit("mean", (x,), np.asarray(x.data.mean()),
                 lambda g, needs: (np.full(shape, float(g) / n),))


def l2_norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    x = _as_tensor(x)
    xd = x.data
    nrm = np.sqrt(np.sum(xd * xd, axis=axis))

    def bw(g, needs):
        n = np.expand_dims(nrm, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0, xd / safe, 0.0),)

    return _emit("l2_norm", (x,), nrm, bw)


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g, needs):
        ga = (2.0 / n) * float(g) * diff
        return (ga if needs[0] else None, -ga if needs[1] else None)

    return _emit("mse", (a, b), np.asarray(np.mean(diff * diff)), bw)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {ad.shape} x {bd.shape}")

    # activations x weight: one flat GEMM is much faster than a broadcast loop
    flat = ad.ndim > 2 and bd.ndim == 2

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if needs[1]:
            if flat:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]) if flat else ad @ bd
    return _emit("matmul", (a, b), out, bw)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with row-max subtraction."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g, needs):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), p, bw)


def causal_scores(q, k, scale_by: float) -> Tensor:
    """Scaled ``q @ k^T`` with positions j > i replaced by a large negative constant."""
    q, k = _as_tensor(q), _as_tensor(k)
    qd, kd = q.data, k.data
    T = qd.shape[-2]
    if kd.shape[-2] != T:
        raise ShapeError(f"causal_scores needs equal lengths: {qd.shape} vs {kd.shape}")
    allowed = np.tril(np.ones((T, T), dtype=bool))
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale_by
    s = np.where(allowed, s, MASK_FILL)

    def bw(g, needs):
        gs = np.where(allowed, g, 0.0) * scale_by
        gq = gs @ kd if needs[0] else None
        gk = np.swapaxes(gs, -1, -2) @ qd if needs[1] else None
        return gq, gk

    return _emit("causal_scores", (q, k), s, bw)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g, needs):
        gx = gg = gb = None
        if needs[0]:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        if needs[1]:
            gg = _unbroadcast(g * xhat, gain.shape)
        if needs[2]:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _emit("layer_norm", (x, gain, bias), out, bw)


def embedding(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range for vocabulary of size {V}")

    def bw(g, needs):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embedding", (table,), table.data[ids], bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean next-token negative log-likelihood over positions where ``mask`` is set."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    m = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != targets.shape:
        raise ShapeError(f"mask {m.shape} does not match targets {targets.shape}")
    total = m.sum()
    if total <= 0:
        raise ValueError("cross_entropy mask selects no positions")
    logp = log_softmax_np(logits.data)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(np.sum(nll * m) / total)

    def bw(g, needs):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (m / total * float(g))[..., None],)

    return _emit("cross_entropy", (logits,), np.asarray(loss), bw)


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool


def finite_diff_check(f: Callable[[Tensor], Tensor], x, tol: float = 1e-4, h: float = 1e-5,
                      name: str = "f", grad_fn: Callable | None = None) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``grad_fn`` overrides the analytic gradient (used for negative controls).
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    fx = f(Tensor(x0)).data
    if fx.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {fx.shape}")
    if not np.all(np.isfinite(fx)):
        raise FloatingPointError(f"{name}(x) is not finite")
    if grad_fn is None:
        xl = leaf(x0.copy())
        with Tape() as tape:
            out = f(xl)
        tape.backward(out)
        analytic = xl.grad
    else:
        analytic = np.asarray(grad_fn(x0), dtype=np.float64)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return GradCheckReport(name, err, tol, err <= tol)


# -- optimizers ------------------------------------------------------------


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3):
        self.params = params
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for p in self.params.values():
            if p.requires_grad and p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    """Adam with bias correction; only parameters flagged ``requires_grad`` move."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * self.v[name] + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float):
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
