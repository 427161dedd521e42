"""Dense float64 tensors with reverse-mode differentiation.

Deliberately small: row-major numpy storage, a handful of primitives with
hand-written backward rules, and a central-difference gradient checker.
Broadcasting is limited to what the model needs (trailing-axis bias adds
and stacked matmul over leading axes).
"""
from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import DimensionError, NumericalError, ParameterError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the differentiation tape.

    Values produced by an op are treated as immutable; only optimizers
    mutate leaf `.data` between forward passes. `backward()` may be called
    once per recorded graph and accumulates into leaf `.grad` slots, which
    is what lets several losses share parameters within one step.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------
    def detach(self) -> "Tensor":
        """A constant view of this value, cut off from the tape."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar into leaves.

        Every reachable node is visited exactly once; fan-out contributions
        add. Interior grads are reset per call, leaf grads accumulate.
        """
        if self.data.shape != ():
            raise ParameterError(
                f"backward requires a scalar output, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + g

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _ensure(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _ensure(other))

    def __rsub__(self, other):
        return sub(_ensure(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _ensure(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ParameterError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, _ensure(other))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        return reshape(self, shape)


def _ensure(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _op(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- primitives ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shapes incompatible: {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub shapes incompatible: {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _op(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shapes incompatible: {a.shape} vs {b.shape}")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _op(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _op(data, (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2 needs ndim >= 2, got shape {a.shape}")

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _op(np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")

    def backward(g):
        return (g.reshape(a.shape),)

    return _op(data, (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(
            "concat shapes incompatible: " + ", ".join(str(p.shape) for p in parts)
        )
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _op(data, parts, backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _op(y, (a,), backward)


def softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature-softened softmax along the last axis, max-stabilized."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - inner)) / temperature,)

    return _op(y, (a,), backward)


def log_softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"log_softmax temperature must be > 0, got {temperature}")
    z = a.data / temperature
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def backward(g):
        return ((g - s * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _op(y, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full(a.shape, float(g)),)

    return _op(a.data.sum(), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return _op(a.data.mean(), (a,), backward)


def im2col(a: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Unfold [B,C,H,W] into patch rows [B, oh*ow, C*k*k] for conv-as-matmul."""
    if a.ndim != 4:
        raise DimensionError(f"im2col expects [B,C,H,W], got shape {a.shape}")
    batch, chans, height, width = a.shape
    k, s, p = kernel, stride, padding
    oh = (height + 2 * p - k) // s + 1
    ow = (width + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"im2col kernel {k} stride {s} pad {p} too large for input {a.shape}"
        )
    padded = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((batch, chans, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = padded[:, :, i : i + s * oh : s, j : j + s * ow : s]
    data = cols.transpose(0, 4, 5, 1, 2, 3).reshape(batch, oh * ow, chans * k * k)

    def backward(g):
        gcols = g.reshape(batch, oh, ow, chans, k, k).transpose(0, 3, 4, 5, 1, 2)
        gpad = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i : i + s * oh : s, j : j + s * ow : s] += gcols[:, :, i, j]
        if p:
            return (gpad[:, :, p : p + height, p : p + width],)
        return (gpad,)

    return _op(data, (a,), backward)


# -- parameters -------------------------------------------------------------

class ParamSet:
    """Ordered, uniquely named collection of trainable tensors.

    Gradient slots are the `.grad` arrays of the member tensors; after
    `zero_grad` every slot exists and mirrors its parameter's shape.
    Subsets share the underlying tensors, which is how per-branch
    optimizers address their slice of one model.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ParameterError(f"duplicate parameter name '{name}'")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def adopt(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ParameterError(f"duplicate parameter name '{name}'")
        self._params[name] = tensor

    def subset(self, *prefixes: str) -> "ParamSet":
        sub = ParamSet()
        for name, t in self._params.items():
            if name.startswith(prefixes):
                sub.adopt(name, t)
        return sub

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def values(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def n_elements(self) -> int:
        return sum(t.size for t in self._params.values())


def grad_check(f: Callable[[], Tensor], params: ParamSet, eps: float = 1e-5) -> float:
    """Compare tape gradients of scalar `f()` against central differences.

    Returns the max over all parameter elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    `f` must be deterministic and rebuild its graph from current parameter
    values on every call.
    """
    if not (0.0 < eps <= 1e-2):
        raise ParameterError(f"grad_check eps must lie in (0, 1e-2], got {eps}")
    params.zero_grad()
    out = f()
    if out.shape != ():
        raise ParameterError("grad_check target must return a scalar")
    out.backward()
    analytic = {name: np.array(t.grad, copy=True) for name, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(
                    f"non-finite objective while perturbing '{name}' element {i}"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
