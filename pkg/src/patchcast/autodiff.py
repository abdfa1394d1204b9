"""Reverse-mode automatic differentiation over dense numpy arrays.

Just enough machinery for a small transformer: a Tensor wraps a row-major
ndarray, every operation records its inputs and a backward closure, and
``backward`` walks the implicit tape in reverse creation order. Arrays are
treated as immutable once wrapped. Gradient checks are meant to run in
float64; training may run in float32.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "as_tensor",
    "concat",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent for an op."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "node_id")

    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=data.dtype if isinstance(data, np.ndarray) else np.float64)
        self.grad: np.ndarray | None = None
        # a node needs grad if it is a leaf that asked for it, or any parent needs it
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        if not _GRAD_ENABLED:
            self.requires_grad = False
            _parents = ()
        self._parents = _parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        self.node_id = next(Tensor._ids)

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Reverse-accumulate gradients from this node into every reachable leaf.

        Gradients of shared subexpressions sum. `seed` must match the output
        shape; it defaults to 1 for scalar outputs.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward on non-scalar {self.op} node requires an explicit seed")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape} at node {self.op}")
        order = self._topo_order()
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)  # leaf
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def _topo_order(self) -> list["Tensor"]:
        """Nodes reachable from self, in reverse creation order (ids are assigned
        in creation order, so sorting descending is a valid reverse-topological order)."""
        seen: set[int] = set()
        stack = [self]
        nodes: list[Tensor] = []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n.node_id, reverse=True)
        return nodes

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, like=self)
        out = Tensor(self.data + other.data, _parents=(self, other), _op="add")
        if out.requires_grad:
            out._backward = lambda g: (
                (self, _unbroadcast(g, self.shape)),
                (other, _unbroadcast(g, other.shape)),
            )
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, like=self)
        out = Tensor(self.data - other.data, _parents=(self, other), _op="sub")
        if out.requires_grad:
            out._backward = lambda g: (
                (self, _unbroadcast(g, self.shape)),
                (other, _unbroadcast(-g, other.shape)),
            )
        return out

    def __rsub__(self, other):
        return as_tensor(other, like=self) - self

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,), _op="neg")
        if out.requires_grad:
            out._backward = lambda g: ((self, -g),)
        return out

    def __mul__(self, other):
        other = as_tensor(other, like=self)
        out = Tensor(self.data * other.data, _parents=(self, other), _op="mul")
        if out.requires_grad:
            out._backward = lambda g: (
                (self, _unbroadcast(g * other.data, self.shape)),
                (other, _unbroadcast(g * self.data, other.shape)),
            )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, like=self)
        out = Tensor(self.data / other.data, _parents=(self, other), _op="div")
        if out.requires_grad:
            out._backward = lambda g: (
                (self, _unbroadcast(g / other.data, self.shape)),
                (other, _unbroadcast(-g * self.data / (other.data**2), other.shape)),
            )
        return out

    def __rtruediv__(self, other):
        return as_tensor(other, like=self) / self

    def matmul(self, other):
        other = as_tensor(other, like=self)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} at node {self.op}@{other.op}")
        out = Tensor(a @ b, _parents=(self, other), _op="matmul")
        if out.requires_grad:

            def bw(g):
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.swapaxes(a, -1, -2) @ g
                return ((self, _unbroadcast(ga, a.shape)), (other, _unbroadcast(gb, b.shape)))

            out._backward = bw
        return out

    __matmul__ = matmul

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = Tensor(self.data.reshape(shape), _parents=(self,), _op="reshape")
        if out.requires_grad:
            out._backward = lambda g: ((self, g.reshape(old)),)
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), _parents=(self,), _op="transpose")
        if out.requires_grad:
            out._backward = lambda g: ((self, g.transpose(inv)),)
        return out

    def swapaxes(self, a, b):
        out = Tensor(np.swapaxes(self.data, a, b), _parents=(self,), _op="swapaxes")
        if out.requires_grad:
            out._backward = lambda g: ((self, np.swapaxes(g, a, b)),)
        return out

    def __getitem__(self, key):
        # basic (slice/ellipsis) indexing only: selections never alias, so the
        # gradient is a plain scatter
        out = Tensor(self.data[key], _parents=(self,), _op="slice")
        if out.requires_grad:

            def bw(g):
                gp = np.zeros_like(self.data)
                gp[key] += g
                return ((self, gp),)

            out._backward = bw
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _op="sum")
        if out.requires_grad:

            def bw(g):
                if axis is None:
                    return ((self, np.broadcast_to(g, self.shape).astype(self.dtype)),)
                gg = g if keepdims else np.expand_dims(g, axis)
                return ((self, np.broadcast_to(gg, self.shape).astype(self.dtype)),)

            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, _parents=(self,), _op="exp")
        if out.requires_grad:
            out._backward = lambda g: ((self, g * y),)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), _op="log")
        if out.requires_grad:
            out._backward = lambda g: ((self, g / self.data),)
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor(y, _parents=(self,), _op="sqrt")
        if out.requires_grad:
            out._backward = lambda g: ((self, g * (0.5 / y)),)
        return out

    def arcsinh(self):
        out = Tensor(np.arcsinh(self.data), _parents=(self,), _op="arcsinh")
        if out.requires_grad:
            out._backward = lambda g: ((self, g / np.sqrt(self.data**2 + 1.0)),)
        return out

    def sigmoid(self):
        y = _sigmoid(self.data)
        out = Tensor(y, _parents=(self,), _op="sigmoid")
        if out.requires_grad:
            out._backward = lambda g: ((self, g * y * (1.0 - y)),)
        return out

    def silu(self):
        s = _sigmoid(self.data)
        out = Tensor(self.data * s, _parents=(self,), _op="silu")
        if out.requires_grad:
            out._backward = lambda g: ((self, g * (s * (1.0 + self.data * (1.0 - s)))),)
        return out

    def softplus(self):
        y = np.logaddexp(0.0, self.data)
        out = Tensor(y, _parents=(self,), _op="softplus")
        if out.requires_grad:
            out._backward = lambda g: ((self, g * _sigmoid(self.data)),)
        return out

    def softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(y, _parents=(self,), _op="softmax")
        if out.requires_grad:

            def bw(g):
                inner = (g * y).sum(axis=axis, keepdims=True)
                return ((self, y * (g - inner)),)

            out._backward = bw
        return out

    def masked_fill(self, mask: np.ndarray, value: float):
        """Fill positions where `mask` is True with `value`; gradient is blocked there."""
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), self.shape)
        out = Tensor(np.where(mask, np.asarray(value, dtype=self.dtype), self.data),
                     _parents=(self,), _op="masked_fill")
        if out.requires_grad:
            out._backward = lambda g: ((self, np.where(mask, 0.0, g)),)
        return out

    def pinball(self, target: np.ndarray, tau: np.ndarray | float):
        """Quantile (pinball) loss elementwise: (y - q)(tau - 1[y < q]).

        `target` and `tau` are constants; the gradient wrt the prediction is the
        exact three-valued subgradient: -tau where y > q, 0 where y == q,
        (1 - tau) where y < q.
        """
        y = np.asarray(target, dtype=self.dtype)
        t = np.asarray(tau, dtype=self.dtype)
        q = self.data
        out = Tensor((y - q) * (t - (y < q)), _parents=(self,), _op="pinball")
        if out.requires_grad:
            gq = np.where(y > q, -t, np.where(y < q, 1.0 - t, 0.0)).astype(self.dtype)
            out._backward = lambda g: ((self, g * gq),)
        return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), _parents=tuple(tensors), _op="concat")
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple((t, p) for t, p in zip(tensors, pieces))

        out._backward = bw
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the analytic gradient of scalar `fn` and
    central finite differences at `point`.

    Relative error per coordinate is |analytic - numeric| / (|numeric| + 1e-12).
    `fn` must be smooth at `point` (no pinball kinks along the probe). With
    `max_coords`, a random subset of coordinates is probed.
    """
    point = np.asarray(point, dtype=np.float64)
    leaf = Tensor(point.copy(), requires_grad=True)
    out = fn(leaf)
    if out.data.size != 1:
        raise ShapeError("finite_diff_check expects a scalar-valued function")
    out.backward()
    analytic = leaf.grad.reshape(-1)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("non-finite analytic gradient in finite_diff_check")

    flat = point.reshape(-1)
    idx = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    for i in idx:
        for sgn, store in ((+1, "hi"), (-1, "lo")):
            probe = flat.copy()
            probe[i] += sgn * step
            val = fn(Tensor(probe.reshape(point.shape))).data.item()
            if not np.isfinite(val):
                raise FloatingPointError("non-finite function value in finite_diff_check")
            if sgn > 0:
                hi = val
            else:
                lo = val
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic[i] - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
