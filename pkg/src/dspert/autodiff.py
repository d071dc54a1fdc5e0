"""Minimal reverse-mode automatic differentiation engine.

Tensors carry float64 numpy arrays. Every operation builds a fresh graph
node (define-by-run), so a new graph exists per forward pass. ``backward``
walks the graph in reverse topological order and accumulates gradients
into ``.grad`` of every tensor that requires them; repeated calls without
resetting accumulate further.

Only the primitives the model actually needs are provided; broadcasting
is supported exactly where those primitives need it (bias rows, column
weights) and nowhere else.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BoundsError, ConfigError, ContractError, ShapeError

Array = np.ndarray


class Tensor:
    """A float64 array that doubles as a node in the differentiation graph.

    Leaf tensors are created directly; interior tensors are created by the
    operations below and keep references to their parents plus a closure
    that maps the upstream gradient to per-parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A value-only copy with no graph attachment."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; everything routes through the module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor(data)


def _node(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` back down to ``shape`` after a numpy broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of several same-shaped tensors as a single graph node."""
    if not tensors:
        raise ContractError("add_n of an empty sequence")
    data = tensors[0].data
    for t in tensors[1:]:
        data = data + t.data
    return _node(
        data,
        tuple(tensors),
        lambda g: tuple(_unbroadcast(g, t.shape) for t in tensors),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} x {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    take_a = a.data >= b.data
    return _node(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        ),
    )


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> tuple[Array, ...]:
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _node(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to mean 0 / variance 1, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def backward(g: Array) -> tuple[Array, ...]:
        g_hat = g * gain.data
        gx = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes))

    return _node(out, (x, gain, bias), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g: Array) -> tuple[Array, ...]:
        return tuple(np.split(g, offsets, axis=axis))

    return _node(data, tuple(tensors), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start..stop`` (half-open) of a matrix."""
    n = a.shape[0]
    if not 0 <= start < stop <= n:
        raise BoundsError(f"row slice {start}..{stop} invalid for {n} rows")

    def backward(g: Array) -> tuple[Array, ...]:
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise BoundsError(f"column slice {start}..{stop} invalid for {n} columns")

    def backward(g: Array) -> tuple[Array, ...]:
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _node(a.data[..., start:stop].copy(), (a,), backward)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> tuple[Array, ...]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(data, (a,), backward)


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def embedding_lookup(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; the gradient flows into the gathered rows."""
    ids = np.asarray(indices, dtype=np.int64)
    if ids.ndim != 1:
        raise ContractError(f"embedding indices must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise BoundsError(
            f"embedding index out of range for table with {table.shape[0]} rows"
        )

    def backward(g: Array) -> tuple[Array, ...]:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), backward)


def xlogy(y: Array, p: Tensor) -> Tensor:
    """Elementwise ``y * log(p)`` with the convention 0 * log(0) = 0.

    ``y`` is a plain array (e.g. a target distribution), not part of the
    graph. Where ``y`` is nonzero and ``p`` is nonpositive the result is
    non-finite, which training surfaces as an abort.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"xlogy shapes differ: {y.shape} vs {p.shape}")
    active = y != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.where(active, y * np.log(np.where(active, p.data, 1.0)), 0.0)

    def backward(g: Array) -> tuple[Array, ...]:
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(active, g * y / p.data, 0.0),)

    return _node(data, (p,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: "RngState | None") -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors.

    Evaluation mode (or p = 0) is the identity and draws nothing from rng.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout requires an RngState")
    mask = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every requires_grad tensor reachable from loss.

    Gradients accumulate across calls until zeroed; a tensor consumed by
    several operations receives the sum of all contributions.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative depth-first topological sort (graphs can be deep).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class RngState:
    """Counter-based splitmix64 generator.

    Draw ``i`` depends only on (seed, i), so identical seed and call
    sequence give bitwise-identical results on every platform, and the
    stream position can be saved and restored as a single counter.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = int(position)

    def _raw(self, n: int) -> Array:
        idx = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        z = np.uint64(self.seed) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape: tuple[int, ...] | int = ()) -> Array:
        """Uniform float64 draws in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape: tuple[int, ...] | int = (), std: float = 1.0) -> Array:
        """Gaussian draws via Box-Muller (two uniforms per normal)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u1 = self.uniform((n,))
        u2 = self.uniform((n,))
        u1 = np.where(u1 == 0.0, 2.0**-53, u1)
        out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2) * std
        return out.reshape(shape) if shape else out[0]

    def randint(self, upper: int) -> int:
        """One draw from {0, ..., upper - 1}."""
        if upper <= 0:
            raise ContractError(f"randint upper bound must be positive, got {upper}")
        return min(int(self.uniform() * upper), upper - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self) -> "RngState":
        """An independent child stream seeded from this one."""
        return RngState(int(self._raw(1)[0]))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6
) -> float:
    """Worst relative error between autodiff and central finite differences.

    ``f`` must be scalar-valued. The relative error uses an absolute floor
    of 1e-8 in the denominator so near-zero gradients do not blow up.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("finite_diff_check requires a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    worst = 0.0
    flat = x.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = float(f(x).data.reshape(()))
        flat[i] = original - h
        f_minus = float(f(x).data.reshape(()))
        flat[i] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(1e-8, abs(numeric), abs(analytic_flat[i]))
        worst = max(worst, abs(numeric - analytic_flat[i]) / denom)
    return worst


def global_grad_norm(tensors: Iterable[Tensor]) -> float:
    """Euclidean norm over all gradients, treating missing grads as zero."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return math.sqrt(total)
