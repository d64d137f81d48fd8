"""Dense tensors with a small reverse-mode tape.

Every primitive computes its value eagerly with numpy and, when one of its
inputs requires gradients, records a vector-Jacobian product closure. Nodes
carry a creation sequence number, so sorting the reachable nodes by that
number gives a valid topological order; :class:`Tape` walks it backwards.

Broadcasting follows numpy semantics for the binary elementwise ops and for
``matmul`` batch dimensions; gradients are summed back to the input shapes.
"""

from __future__ import annotations

import itertools
import threading
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "ShapeError", "no_grad", "grad_enabled",
    "tensor", "add", "sub", "mul", "neg", "matmul", "concat", "getitem", "gather",
    "reshape", "transpose", "sum", "mean", "abs", "sign", "recip_eps", "tanh",
    "recip_norm", "relu", "silu", "exp", "log", "softmax", "log_softmax", "scale", "pad2d",
    "layer_norm", "dropout", "canonicalize", "sign_canon", "cross_entropy",
    "l1_norm", "backward",
]

_counter = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that disables tape recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self._seq = next(_counter)
        self.op = "leaf"

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and np.ndim(x) == 0 else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    data = np.asarray(data)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_counter)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {shapes} do not broadcast") from exc


# -- elementwise arithmetic --------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product (with broadcasting)."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a.shape, b.shape)
    A, B = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * B, A.shape) if a.requires_grad else None,
                _unbroadcast(g * A, B.shape) if b.requires_grad else None)

    return _result(A * B, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


# -- linear algebra ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    A, B = a.data, b.data
    try:
        out = np.matmul(A, B)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {A.shape} and {B.shape} do not conform") from exc

    def vjp(g):
        a2 = A[None, :] if A.ndim == 1 else A
        b2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            if A.ndim == 1:
                ga = ga[..., 0, :]
            ga = _unbroadcast(ga, A.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            if B.ndim == 1:
                gb = gb[..., :, 0]
            gb = _unbroadcast(gb, B.shape)
        return ga, gb

    return _result(out, (a, b), vjp, "matmul")


# -- structural --------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, ts, vjp, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    """Slicing and (advanced) indexing."""
    X = x.data
    out = X[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros_like(X)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), vjp, "getitem")


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[..., index]`` for a flat integer index along the last axis.

    The backward pass is a sparse one-hot product, which is much faster than
    ``np.add.at`` for the im2col gathers used by convolutions.
    """
    X = x.data
    index = np.asarray(index, dtype=np.int64)
    n, m = X.shape[-1], index.size
    out = X[..., index]

    def vjp(g):
        sel = sparse.csr_matrix((np.ones(m, dtype=g.dtype), (np.arange(m), index)), shape=(m, n))
        flat = g.reshape(-1, m)
        return (np.asarray(sel.T.dot(flat.T).T).reshape(X.shape),)

    return _result(out, (x,), vjp, "gather")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def pad2d(x: Tensor, padding: int) -> Tensor:
    """Zero-pad the last two axes by ``padding`` on every side."""
    if padding == 0:
        return x
    p = padding
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return _result(np.pad(x.data, width), (x,), lambda g: (g[..., p:-p, p:-p],), "pad2d")


# -- reductions --------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([src[a] for a in axes]))
    inv = x.dtype.type(1.0 / count)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, src).copy(),)

    return _result(np.asarray(out), (x,), vjp, "mean")


# -- pointwise nonlinearities ------------------------------------------

def abs(x: Tensor) -> Tensor:  # noqa: A001
    # subgradient at 0 is 0
    s = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def sign(x: Tensor) -> Tensor:
    """Elementwise sign; piecewise constant, so it carries no gradient."""
    return Tensor(np.sign(x.data))


def recip_eps(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Regularized reciprocal ``x / (x**2 + eps)``; finite everywhere for eps > 0."""
    X = x.data
    e = X.dtype.type(eps)
    den = X * X + e
    return _result(X / den, (x,), lambda g: (g * (e - X * X) / (den * den),), "recip_eps")


def recip_norm(x: Tensor, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """Vector inversion ``x / max(|x|^2, eps)`` along ``axis``.

    For ``|x|^2 > eps`` this maps ``q * x`` to ``(1/q) * recip_norm(x)`` exactly
    for any scalar q != 0, which the elementwise ``recip_eps`` only does
    approximately.
    """
    X = x.data
    e = X.dtype.type(eps)
    sq = (X * X).sum(axis=axis, keepdims=True)
    big = sq > e
    den = np.where(big, sq, e)
    y = X / den

    def vjp(g):
        gx = g / den - np.where(big, 2.0 * X * (g * X).sum(axis=axis, keepdims=True) / (den * den), 0.0)
        return (gx.astype(X.dtype),)

    return _result(y, (x,), vjp, "recip_norm")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = expit(X)
    return _result(X * s, (x,), lambda g: (g * s * (1 + X * (1 - s)),), "silu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    X = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(X)
    return _result(out, (x,), lambda g: (g / X,), "log")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + X.dtype.type(eps))
    y = xc * rstd

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - y * gy),)

    return _result(y, (x,), vjp, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- canonicalization --------------------------------------------------

def canonicalize(x: Tensor, eps: float, axis: int | None = None) -> Tensor:
    """``x / max(|x|, eps)``: the positive-scale canonical representative.

    With ``axis=None`` the magnitude is taken elementwise (so the result is
    the sign, with 0 mapped to 0); with an axis it is the Euclidean norm
    along that axis, which leaves the direction of a feature vector.
    """
    X = x.data
    e = X.dtype.type(eps)
    if axis is None:
        mag = np.abs(X)
        den = np.maximum(mag, e)
        y = X / den
        big = mag > e
        # d/dx of x/|x| vanishes away from 0; below eps the map is linear
        return _result(y, (x,), lambda g: (np.where(big, 0, g / e).astype(X.dtype),), "canonicalize")
    norm = np.sqrt((X * X).sum(axis=axis, keepdims=True))
    den = np.maximum(norm, e)
    y = X / den
    big = norm > e

    def vjp(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / den, g / e).astype(X.dtype),)

    return _result(y, (x,), vjp, "canonicalize")


def sign_canon(x: Tensor, axis: int = -1) -> Tensor:
    """Sign-flip canonical representative of feature vectors.

    Each vector along ``axis`` is multiplied by the sign of its
    largest-magnitude entry, so ``sign_canon(-x) == sign_canon(x)`` exactly.
    The multiplier is piecewise constant and treated as such in backward.
    """
    X = x.data
    pick = np.take_along_axis(X, np.expand_dims(np.abs(X).argmax(axis=axis), axis), axis=axis)
    s = np.sign(pick)
    return _result(X * s, (x,), lambda g: (g * s,), "sign_canon")


# -- losses ------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch axis (-2).

    ``logits`` is ``[..., batch, classes]``; the result has the leading shape,
    i.e. a scalar for 2-D logits and one value per network for stacked ones.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim < 2:
        raise ShapeError("cross_entropy expects [..., batch, classes] logits")
    batch, classes = logits.shape[-2:]
    if classes < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError("label out of range")
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros((batch, classes), dtype=logits.dtype)
    onehot[np.arange(batch), labels] = 1
    picked = sum(mul(logp, Tensor(onehot)), axis=-1)
    return neg(mean(picked, axis=-1))


def l1_norm(t: Tensor, axis=None) -> Tensor:
    return sum(abs(t), axis=axis)


# -- tape --------------------------------------------------------------

class Tape:
    """Nodes reachable from a root, in recording order.

    Recording order is topological because a node is always created after
    its parents; backward simply visits the nodes in reverse.
    """

    def __init__(self, root: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        self.root = root
        self.nodes = sorted(seen.values(), key=lambda n: n._seq)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._vjp is None]

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        root = self.root
        if seed is None:
            seed = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g
                continue
            for parent, gp in zip(node._parents, node._vjp(g)):
                if gp is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        return grads


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaf gradients are overwritten, not accumulated, so repeated calls on the
    same tape give identical results.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")
    tape = Tape(loss)
    for leaf in tape.leaves:
        leaf.grad = None
    tape.backward()
    return tape


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
