"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every trainable quantity in the package flows through :class:`Tensor`.  Ops
record a node only when one of their inputs requires a gradient, so constant
sub-expressions (sample positions, frozen point clouds) cost nothing extra.
Any op that produces a NaN or Inf raises :class:`NonFiniteError` naming the op.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DTYPE = np.float64

_state = threading.local()


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Named learnable tensor; gradients accumulate into ``grad``."""

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _raise_nonscalar():
    raise ContractError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    # a single reduction propagates any NaN/Inf; only a failure pays for the count
    if not np.isfinite(np.sum(arr)) and not np.isfinite(arr).all():
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NonFiniteError(f"op '{op}' produced {bad} non-finite value(s)")


def make_op(out: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable):
    """Wrap a forward result; ``backward_fn(g)`` returns one gradient per parent."""
    out = np.asarray(out, dtype=DTYPE)
    _check_finite(out, op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(out, True, tuple(parents), backward_fn, op)
    return Tensor(out, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.data.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != p.shape:
                pg = _unbroadcast(pg, p.shape)
            _check_finite(pg, f"{node.op}.backward")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return make_op(out, "pow", (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_op(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.sin(a.data), "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.cos(a.data), "cos", (a,), lambda g: (-g * np.sin(a.data),))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is routed to ``a`` where a > floor."""
    a = as_tensor(a)
    keep = a.data > floor
    return make_op(np.where(keep, a.data, floor), "clamp_min", (a,), lambda g: (g * keep,))


def softplus(a) -> Tensor:
    """log(1 + e^x) as max(x, 0) + log1p(e^-|x|), which cannot overflow."""
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    out = np.maximum(a.data, 0.0) + np.log1p(e)

    def bw(g):
        # sigmoid(x) from the cached e^-|x|
        inv = 1.0 / (1.0 + e)
        return (g * np.where(a.data >= 0, inv, e * inv),)

    return make_op(out, "softplus", (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return make_op(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return make_op(a.data * keep, "relu", (a,), lambda g: (g * keep,))


ACTIVATIONS = {"softplus": softplus, "sigmoid": sigmoid, "relu": relu}


def activation(a, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(a)


# ---------------------------------------------------------------- reductions

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return make_op(out, "sum", (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)
    return make_op(out, "mean", (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,))


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = out - a.data

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g if exclusive else rev,)

    return make_op(out, "cumsum", (a,), bw)


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, slice, np.integer)) for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(a.data[index], "getitem", (a,), bw)


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather ``a[idx]`` along axis 0 for an integer array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (full,)

    return make_op(a.data[idx], "take_rows", (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, "concat", ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make_op(out, "stack", ts, bw)


def sparse_matmul(matrix, a) -> Tensor:
    """``matrix @ a`` for a constant scipy sparse matrix and a 2-D tensor."""
    a = as_tensor(a)
    mt = matrix.T.tocsr()
    return make_op(matrix @ a.data, "sparse_matmul", (a,), lambda g: (mt @ g,))


# ---------------------------------------------------------------- layers

def linear_forward(x, weights, bias) -> Tensor:
    """out[..., j] = sum_i x[..., i] * W[i, j] + b[j]."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear: weights {weights.shape} / bias {bias.shape} inconsistent")
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weights.shape[0]}")
    x2 = x.data.reshape(-1, weights.shape[0])
    out = x2 @ weights.data + bias.data

    def bw(g):
        g2 = g.reshape(-1, weights.shape[1])
        gx = (g2 @ weights.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weights.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_op(out.reshape(x.shape[:-1] + (weights.shape[1],)), "linear", (x, weights, bias), bw)


class Linear:
    """Dense layer holding a ``[din, dout]`` weight and a ``[dout]`` bias."""

    def __init__(self, name: str, din: int, dout: int, rng: np.random.Generator | None = None, zero=False):
        self.din, self.dout = din, dout
        if zero or rng is None:
            w = np.zeros((din, dout))
            b = np.zeros(dout)
        else:
            bound = 1.0 / np.sqrt(din)
            w = rng.uniform(-bound, bound, size=(din, dout))
            b = rng.uniform(-bound, bound, size=dout)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", b)

    def __call__(self, x) -> Tensor:
        return linear_forward(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


# ---------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam; gradients are left in place until ``zero_grad``."""

    def __init__(self, params: Iterable[Parameter], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for p in self.params:
            out[f"adam.m.{p.name}"] = self.m[p.name]
            out[f"adam.v.{p.name}"] = self.v[p.name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        self.step_count = int(tensors["adam.step"][0])
        for p in self.params:
            self.m[p.name] = np.array(tensors[f"adam.m.{p.name}"], dtype=DTYPE)
            self.v[p.name] = np.array(tensors[f"adam.v.{p.name}"], dtype=DTYPE)


# ---------------------------------------------------------------- verification

def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], epsilon=1e-5,
                      max_coords=24, seed=0, min_rel_grad: float | None = None) -> dict[str, float]:
    """Worst relative error between backward() and central differences, per parameter.

    Up to ``max_coords`` coordinates are sampled per parameter.  The relative
    error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.  With
    ``min_rel_grad`` set, sampling is restricted to coordinates whose analytic
    gradient is at least that fraction of the parameter's largest one; tiny
    gradients deep in a long chain are otherwise dominated by the roundoff of
    the difference quotient.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    backward(loss)
    report = {}
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        pool = np.arange(flat.size)
        if min_rel_grad is not None:
            mags = np.abs(analytic.reshape(-1))
            big = pool[mags >= min_rel_grad * mags.max()] if mags.max() > 0 else pool
            pool = big if len(big) else pool
        if pool.size <= max_coords:
            coords = pool
        else:
            coords = np.sort(rng.choice(pool, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            with no_grad():
                fp = float(loss_fn().data)
            flat[c] = orig - epsilon
            with no_grad():
                fm = float(loss_fn().data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"loss not finite while perturbing {p.name}[{c}]")
            numeric = (fp - fm) / (2.0 * epsilon)
            a = analytic.reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report[p.name] = worst
    return report
