"""Tensor arithmetic with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and remembers how it was produced.
Calling :func:`backward` on a scalar tensor walks the recorded graph in
reverse topological order and fills ``.grad`` on every reachable node.

Dtype follows the inputs: float32 for training, float64 for the
verification paths. Python scalars and plain arrays mixed into an
expression are cast to the tensor's dtype so they never upcast it.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class ContractViolation(ValueError):
    """Caller broke a precondition (shapes, empty inputs, label ranges)."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient went NaN/inf."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents: tuple["Tensor", ...] = (),
                 backward: BackwardFn | None = None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.name = name

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def astype(self, dtype) -> "Tensor":
        if self.data.dtype == dtype:
            return self
        src = self.data.dtype
        return Tensor(self.data.astype(dtype), (self,),
                      lambda g: (g.astype(src),))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p: float): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return take(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self): return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
    return Tensor(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return Tensor(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return Tensor(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                  lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) without overflow for large x."""
    out = np.logaddexp(0, a.data).astype(a.dtype)
    return Tensor(out, (a,), lambda g: (g * expit(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
    return Tensor(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first argmax."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (ga,)
    return Tensor(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return Tensor(np.broadcast_to(a.data, shape), (a,),
                  lambda g: (_unbroadcast(g, a.shape),))


def take(a: Tensor, idx) -> Tensor:
    """Indexing (basic or advanced); repeated indices accumulate in backward."""
    out = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)
    return Tensor(np.array(out, copy=True), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return Tensor(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    return Tensor(out, tuple(ts),
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D ``b``; ``a`` may carry leading batch dimensions."""
    a, b = _pair(a, b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return Tensor(out, (a, b), back)


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``W x + b`` applied over the last axis of ``x``.

    ``W`` has shape (out, in); ``x`` has shape (..., in).
    """
    x = as_tensor(x, W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ContractViolation(f"dense: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ContractViolation(f"dense: bias {b.shape} does not match W {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = g @ W.data
        gW = g2.T @ x2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)
    parents = (x, W) if b is None else (x, W, b)
    return Tensor(out, parents, back)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the labelled class over rows of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractViolation(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise ContractViolation("cross_entropy: no rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractViolation(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)
    return Tensor(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> Tensor:
    """Fill ``.grad`` on every node reachable from the scalar ``root``."""
    if root.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        pgrads = node._backward(node.grad)
        for p, g in zip(node._parents, pgrads):
            if g is None:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=p.dtype, copy=True).reshape(p.shape)
            else:
                p.grad = p.grad + g.reshape(p.shape)
    for node in order:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
    return root


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


class Rng:
    """Deterministic generator; normals come from Box-Muller over uniforms.

    ``draws`` counts every scalar value handed out, so callers can assert
    that a code path is RNG-free.
    """

    def __init__(self, seed: int | Sequence[int] = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))
        self.draws = 0

    def split(self, *keys) -> "Rng":
        """Independent substream keyed by ints or strings."""
        spawn_key = self._seq.spawn_key + tuple(_key_to_int(k) for k in keys)
        return Rng(np.random.SeedSequence(self._seq.entropy, spawn_key=spawn_key))

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape))
        self.draws += n
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape))
        if n == 0:
            return np.zeros(shape)
        half = (n + 1) // 2
        self.draws += 2 * half
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        n = int(np.prod(shape))
        self.draws += n
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# optimisation and gradient checking
# ---------------------------------------------------------------------------

def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, Tensor]:
    """Return new leaves ``p - lr * g``; the inputs are left untouched."""
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient for {', '.join(bad)}")
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
        else:
            out[k] = Tensor((p.data - p.dtype.type(lr) * g).astype(p.dtype), name=k)
    return out


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    nonfinite: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_error <= self.tol

    def lines(self) -> list[str]:
        out = [f"{k}: {v:.3e}" for k, v in sorted(self.errors.items())]
        out += [f"{k}: non-finite" for k in self.nonfinite]
        return out


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, Tensor], tol: float = 1e-4, step: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` with central differences.

    The error for one parameter tensor is ``max|a - n| / max(max|a|, max|n|)``
    over the checked entries, so near-zero entries do not dominate. ``f``
    must be deterministic: any noise it uses has to be frozen by the caller.
    With ``max_entries`` only a seeded random subset of each tensor is probed.
    """
    report = GradCheckReport(tol=tol)
    loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        report.nonfinite.append("<loss>")
        return report
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    chooser = np.random.default_rng(seed)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(chooser.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            fp = f(params).item()
            flat[i] = old - step
            fm = f(params).item()
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * step)
        a = analytic[name].reshape(-1)[idx]
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(a))):
            report.nonfinite.append(name)
            continue
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(a - numeric).max(initial=0.0)
        report.errors[name] = 0.0 if scale == 0 else float(diff / scale)
    return report


def param_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}


def cast_params(params: Mapping[str, Tensor], dtype) -> dict[str, Tensor]:
    """Fresh leaves in ``dtype`` (e.g. float64 for gradient checking)."""
    return {k: Tensor(p.data.astype(dtype), name=k) for k, p in params.items()}


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
