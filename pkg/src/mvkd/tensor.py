"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its parents and a closure
mapping the output gradient to one gradient per parent. ``Tensor.backward``
walks the graph in reverse topological order.

Data lives in plain numpy arrays (row-major, no aliasing between ops). The
default dtype is float32; gradient checks run in float64.
"""

from __future__ import annotations

import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidAxis, InvalidBackward, InvalidParameter, InvalidShape, ShapeMismatch

DEFAULT_DTYPE = np.float32

# per thread, so concurrent inference workers cannot flip each other's mode
_state = threading.local()


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, teacher passes)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------

_STREAM_IDS = {"init": 1, "shuffle": 2, "data": 3, "bench": 4}


class Rng:
    """Seeded source of independent PCG64 streams.

    Each consumer asks for its own named stream; a stream is derived from
    ``SeedSequence([seed, stream_id, *keys])`` so it never depends on how much
    randomness another consumer has already drawn. PCG64 and the numpy
    ``Generator`` sampling routines are platform independent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, name: str, *keys: int) -> np.random.Generator:
        sid = _STREAM_IDS.get(name)
        if sid is None:
            sid = zlib.crc32(name.encode()) | (1 << 32)
        entropy = [self.seed, sid, *(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def __repr__(self):
        return f"Rng(seed={self.seed})"


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise InvalidAxis(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise InvalidAxis(f"repeated axis in {axes}")
    return tuple(sorted(out))


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")  # keeps 0-d scalars 0-d
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False
        self.op = ""

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._retain = False
        out.op = op
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{rg})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires-grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise InvalidBackward(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise InvalidBackward("tensor does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._node(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._node(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._node(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

        return Tensor._node(out, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self
        p = float(exponent)

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._node(a.data**p, (a,), bw, f"pow{p:g}")

    def exp(self):
        out = np.exp(self.data)
        return Tensor._node(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        return Tensor._node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._node(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    # -- linear algebra ---------------------------------------------------
    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation -----------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise InvalidShape(str(exc)) from None
        return Tensor._node(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        out = np.asarray(self.data.transpose(axes), order="C")
        return Tensor._node(out, (self,), lambda g: (g.transpose(inv),), "transpose")

    permute = transpose

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        src_shape, dtype = self.shape, self.dtype
        out = np.asarray(self.data[idx], order="C")

        def bw(g):
            full = np.zeros(src_shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._node(out, (self,), bw, "getitem")

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce(self, "max", axis, keepdims)


class Parameter(Tensor):
    """A leaf tensor registered with a module and updated by the optimizer."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------


def create(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    value: float = 0.0,
    low: float = 0.0,
    high: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    rng: Rng | np.random.Generator | None = None,
    dtype=None,
    requires_grad: bool = False,
) -> Tensor:
    """Allocate a tensor filled according to ``init``.

    ``init`` is one of zeros, ones, constant (uses ``value``), uniform
    (``low``/``high``), normal (``mean``/``std``) or trunc_normal (normal
    redrawn outside two standard deviations). Stochastic inits consume the
    ``init`` stream of an ``Rng``, or the given ``Generator`` directly, in
    row-major order.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise InvalidShape(f"extents must be >= 1, got {shape}")
    dtype = dtype or DEFAULT_DTYPE
    if init in ("uniform", "normal", "trunc_normal"):
        if rng is None:
            raise InvalidParameter(f"{init} init needs an rng")
        gen = rng.stream("init") if isinstance(rng, Rng) else rng
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "constant":
        data = np.full(shape, value)
    elif init == "uniform":
        if not low < high:
            raise InvalidParameter(f"uniform needs low < high, got {low}, {high}")
        data = gen.uniform(low, high, size=shape)
    elif init == "normal":
        if std < 0:
            raise InvalidParameter(f"std must be >= 0, got {std}")
        data = mean + std * gen.standard_normal(size=shape)
    elif init == "trunc_normal":
        if std < 0:
            raise InvalidParameter(f"std must be >= 0, got {std}")
        z = gen.standard_normal(size=shape)
        bad = np.abs(z) > 2.0
        while bad.any():
            z[bad] = gen.standard_normal(size=int(bad.sum()))
            bad = np.abs(z) > 2.0
        data = mean + std * z
    else:
        raise InvalidParameter(f"unknown init {init!r}")
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._node(a.data @ b.data, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    ax = _normalize_axes(axis, ndim)[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        sl = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return Tensor._node(out, tensors, bw, "concat")


def reduce(x: Tensor, op: str, axes=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over ``axes`` (all axes when None).

    The max gradient is routed to the first maximal element in row-major
    order over the reduced axes.
    """
    ax = _normalize_axes(axes, x.ndim)
    src_shape = x.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(src_shape))

    if op == "sum":
        out = x.data.sum(axis=ax, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept), src_shape).copy(),)

    elif op == "mean":
        count = int(np.prod([src_shape[i] for i in ax])) if ax else 1
        out = x.data.mean(axis=ax, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) / count, src_shape).copy(),)

    elif op == "max":
        rest = tuple(i for i in range(x.ndim) if i not in ax)
        moved = x.data.transpose(rest + ax)
        lead = moved.shape[: len(rest)]
        flat = moved.reshape(lead + (-1,))
        idx = flat.argmax(axis=-1)
        out_flat = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out = out_flat.reshape(kept) if keepdims else out_flat

        def bw(g):
            mask = np.zeros_like(flat)
            np.put_along_axis(mask, idx[..., None], g.reshape(lead + (1,)), axis=-1)
            inv = np.argsort(rest + ax)
            return (mask.reshape(moved.shape).transpose(inv),)

    else:
        raise InvalidParameter(f"unknown reduction {op!r}")
    return Tensor._node(np.asarray(out), (x,), bw, op)

