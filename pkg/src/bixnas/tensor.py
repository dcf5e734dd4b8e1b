"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its operands and a backward rule. :func:`backward` linearises that graph into
a :class:`Tape` (topological order) and replays it in reverse, accumulating
into ``.grad`` of every leaf created with ``requires_grad=True``. A leaf that
is used at several sites of the graph therefore receives the sum of its
site-wise gradients, which is what weight sharing across recurrence
iterations relies on.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_state = threading.local()

_DEFAULT_DTYPE = np.float64


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise DomainError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def finite_checks_enabled() -> bool:
    return getattr(_state, "finite", True)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = finite_checks_enabled()
    _state.finite = enabled
    try:
        yield
    finally:
        _state.finite = prev


class Tensor:
    """N-d real array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else _DEFAULT_DTYPE))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if finite_checks_enabled() and not np.isfinite(data).all():
            raise NumericError("non-finite value produced by forward op")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise kernel -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor._op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor._op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, k) -> Tensor:
    if isinstance(k, Tensor):
        if k.size != 1:
            raise ShapeError("scale expects a scalar factor")
        k = float(k.data)
    k = a.data.dtype.type(k)
    return Tensor._op(a.data * k, (a,), lambda g: (g * k,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return Tensor._op(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                      lambda g: (g * mask,))


def mean_reduce(a: Tensor) -> Tensor:
    n = a.size
    inv = a.dtype.type(1.0 / n)
    shape = a.shape
    return Tensor._op(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                      lambda g: (np.full(shape, g * inv, dtype=a.dtype),))


def sum_reduce(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._op(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                      lambda g: (np.full(shape, g, dtype=a.dtype),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "mean_reduce": mean_reduce,
}


def apply_elementwise(kind: str, *operands) -> Tensor:
    """Dispatch one of the elementwise kinds by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise DomainError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._op(out, (a,), lambda g: (g.reshape(old),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data
    return Tensor._op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty list")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._op(out, tuple(tensors), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._op(y, (a,), bw)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward ``hard`` exactly, route the incoming gradient to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through: shape mismatch")
    return Tensor._op(hard, (soft,), lambda g: (g,))


# -- Gumbel-Softmax -----------------------------------------------------------

@contextlib.contextmanager
def suppress_gumbel_noise():
    """Test hook: inside the block Gumbel samples use zero noise."""
    prev = getattr(_state, "no_noise", False)
    _state.no_noise = True
    try:
        yield
    finally:
        _state.no_noise = prev


def gumbel_noise(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if getattr(_state, "no_noise", False):
        return np.zeros(shape, dtype=dtype)
    # u strictly inside (0, 1)
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(logits: Tensor, temperature: float, hard: bool,
                   rng: np.random.Generator, noise: bool = True) -> Tensor:
    """Column-wise Gumbel-Softmax over an ``N x K`` logit matrix.

    Each of the K columns becomes a distribution over the N rows. With
    ``hard=True`` the forward value is the exact one-hot of the column argmax
    (first index on ties) while gradients follow the soft sample.
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    if logits.ndim != 2:
        raise ShapeError("gumbel_softmax expects an N x K matrix")
    g = gumbel_noise(logits.shape, rng, logits.dtype) if noise else np.zeros_like(logits.data)
    perturbed = Tensor._op(logits.data + g, (logits,), lambda gr: (gr,))
    soft = softmax(scale(perturbed, 1.0 / temperature), axis=0)
    if not hard:
        return soft
    idx = soft.data.argmax(axis=0)
    one_hot = np.zeros_like(soft.data)
    one_hot[idx, np.arange(soft.shape[1])] = 1.0
    return straight_through(one_hot, soft)


# -- tape ---------------------------------------------------------------------

class Tape:
    """Operation nodes in topological order (operands before results)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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

    def __contains__(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = Tape.record(loss)
    elif not tape.nodes or tape.nodes[-1] is not loss:
        raise ContractError("loss is not the final node of the given tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
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


# -- numerical gradient check -------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5,
               params: Iterable[Tensor] | None = None, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``f`` maps a tensor to a scalar tensor. When ``params`` is given the check
    runs over those leaves instead of ``x`` (``f`` is then called with ``x``
    unchanged). ``max_coords`` limits each leaf to a seeded random sample of
    coordinates.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    targets = list(params) if params is not None else [x]
    for t in targets:
        t.requires_grad = True
        t.grad = None
        t.data = np.ascontiguousarray(t.data)  # perturbed in place through a flat view
    out = f(x)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite function value")
    backward(out)
    worst = 0.0
    with no_grad():
        for t in targets:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.random.default_rng(seed).choice(flat.size, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(x).data)
                flat[i] = orig - eps
                fm = float(f(x).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("non-finite value during finite differences")
                num = (fp - fm) / (2 * eps)
                err = abs(float(analytic.reshape(-1)[i]) - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst
