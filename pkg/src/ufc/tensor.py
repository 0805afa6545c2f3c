"""Dense tensors with reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a node holding
its parents, a backward closure and a global sequence number. ``backward``
collects the nodes reachable from the loss and runs them in exact reverse
execution order. Broadcasting is deliberately absent: operands must share a
shape unless one of them is a python scalar or a 0-d tensor. Channel and row
biases go through the explicit ``conv2d``/``linear``/``add_bias`` ops.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "matmul",
    "linear",
    "add_bias",
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "concat",
    "l2_norm",
    "l2_normalize",
    "log_softmax",
    "softmax",
    "logsumexp",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = itertools.count()


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the float type new tensors are created with.

    float32 is the working precision. Gradient checks switch to float64 so
    central differences are not swamped by single-precision rounding.
    """
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = next(_SEQ)


class Tensor:
    """Row-major float array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# graph plumbing


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    return arr


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap ``data`` and, when needed, record the op on the tape.

    ``grad_fn(g)`` returns one gradient (or None) per parent.
    """
    _check_finite(op, data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), grad_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored, so two calls without
    zeroing double them. The graph is kept alive for that reason.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._node is None:
        raise RuntimeError("backward: loss has no recorded ops (empty tape)")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._node.parents if p.requires_grad)

    order = sorted(nodes.values(), key=lambda t: t._node.seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t._node.backward(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                _accumulate(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar-tensor broadcasting exists
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor contains zero")
    out = a.data / b.data

    def grad_fn(g):
        return (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * out / b.data, b.shape),
        )

    return _make("div", out, (a, b), grad_fn)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p
    return _make("pow", out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise FloatingPointError("log: input must be strictly positive")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def grad_fn(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=a.data.dtype), (a,), grad_fn)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if np.ndim(out) == 0:
        out = np.asarray(out, dtype=a.data.dtype)
    else:
        out = out.copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return _make("concat", out, tensors, grad_fn)


# ---------------------------------------------------------------------------
# dense layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a vector along one axis of ``x`` (the only broadcast on offer)."""
    ax = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[ax] = -1
    other = tuple(i for i in range(x.ndim) if i != ax)
    return _make(
        "add_bias",
        x.data + b.data.reshape(view),
        (x, b),
        lambda g: (g, g.sum(axis=other)),
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x (n, in), w (in, out), b (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} @ {w.shape}")
    out = x.data @ w.data
    parents: tuple = (x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} vs output width {w.shape[1]}")
        out = out + b.data
        parents = (x, w, b)

    def grad_fn(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make("linear", out, parents, grad_fn)


# ---------------------------------------------------------------------------
# convolutions: NHWC activations, (kh, kw, c_in, c_out) weights for both
# conv2d and conv_transpose2d


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, Hp, Wp, C) -> (N*Ho*Wo, kh*kw*C), columns ordered (i, j, c)."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _scatter_taps(src: np.ndarray, taps: np.ndarray, shape, stride: int, ho: int, wo: int) -> np.ndarray:
    """Sum over kernel offsets (i, j) of ``src @ taps[i, j]`` shifted into place.

    ``src`` is (N*Ho*Wo, a) and ``taps`` (kh, kw, a, b); the result is an
    (N, Hp, Wp, b) grid. This is the adjoint of ``_im2col`` fused with the
    matmul, which avoids materialising the full column matrix.
    """
    n = shape[0]
    kh, kw, _, b = taps.shape
    out = np.zeros(shape, dtype=src.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                src @ taps[i, j]
            ).reshape(n, ho, wo, b)
    return out


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NHWC ``x`` with (kh, kw, c_in, c_out) ``w``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} vs {w.shape[3]} output channels")
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    xp = _pad_hw(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(-1, co)
    out = cols @ wmat
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        gm = g.reshape(-1, co)
        gx = None
        if x.requires_grad:
            gxp = _scatter_taps(gm, w.data.transpose(0, 1, 3, 2), xp.shape, stride, ho, wo)
            gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        grads = [gx, (cols.T @ gm).reshape(w.shape)]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    return _make("conv2d", out.reshape(n, ho, wo, co), parents, grad_fn)


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of conv2d; output extent is (H - 1) * stride - 2 * padding + k."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[3],):
        raise ShapeError(f"conv_transpose2d: bias {b.shape} vs {w.shape[3]} output channels")
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    hp = (h - 1) * stride + kh
    wp = (wd - 1) * stride + kw
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: padding {padding} too large for {x.shape}")
    xm = x.data.reshape(-1, ci)
    full = _scatter_taps(xm, w.data, (n, hp, wp, co), stride, h, wd)
    out = full[:, padding : padding + ho, padding : padding + wo] if padding else full
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        cols = _im2col(_pad_hw(g, padding), kh, kw, stride, h, wd)
        wmat = w.data.transpose(2, 0, 1, 3).reshape(ci, -1)
        gx = (cols @ wmat.T).reshape(x.shape) if x.requires_grad else None
        gw = (xm.T @ cols).reshape(ci, kh, kw, co).transpose(1, 2, 0, 3)
        grads = [gx, np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _make("conv_transpose2d", np.ascontiguousarray(out), parents, grad_fn)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on NHWC input; ties go to the first element."""
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"max_pool2d: needs NHWC input with even H, W, got {x.shape}")
    n, h, w, c = x.shape
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return _make("max_pool2d", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalisation and softmax family


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm along the last axis."""
    norm = np.sqrt((x.data**2).sum(axis=-1))
    if np.any(norm == 0):
        raise ZeroDivisionError("l2_norm: zero vector has no differentiable norm")
    return _make("l2_norm", norm, (x,), lambda g: (g[..., None] * x.data / norm[..., None],))


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean length."""
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ZeroDivisionError("l2_normalize: cannot normalise a zero vector")
    out = x.data / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(
        "log_softmax",
        out,
        (x,),
        lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        "softmax",
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def logsumexp(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor over the entries selected by ``mask``.

    The row maximum over selected entries is subtracted before exponentiating.
    Every row must select at least one entry.
    """
    if x.ndim != 2:
        raise ShapeError(f"logsumexp: expects a 2-D tensor, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"logsumexp: mask {mask.shape} vs input {x.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("logsumexp: a row selects no entries")
    masked = np.where(mask, x.data, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    weights = e / s

    return _make("logsumexp", out.astype(x.data.dtype), (x,), lambda g: (g[:, None] * weights,))


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Compare ``backward`` against central differences of ``f`` at ``x``.

    Returns max |analytic - numeric| / max(1, |analytic|) over coordinates.
    ``f`` must build a fresh graph from ``x`` on every call.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"finite_diff_check: step {h} outside [1e-5, 1e-2]")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None

    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"finite_diff_check: non-finite value at coordinate {i}")
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
