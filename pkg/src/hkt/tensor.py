"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`
when at least one input requires a gradient. The tape is append-only, so its
order is already topological and :func:`backward` simply walks it in reverse.

There is no broadcasting: binary operations require equal shapes, and the only
mixed operation is scaling by a Python float.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "current_tape",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "elementwise",
    "matmul",
    "bmm",
    "reshape",
    "permute",
    "sum_all",
    "mean_all",
    "relu",
    "softmax_rows",
    "linear",
    "conv1x1",
    "bilinear_resize",
    "resize_matrix",
    "avg_pool2d",
    "global_avg_pool",
    "mae_loss",
    "mse_loss",
    "cross_entropy_loss",
]


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t.tape_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager to scope one training step::

        with Tape():
            loss = model_loss(batch)
            backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> None:
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(out, tuple(inputs), backward_fn, op))

    def clear(self) -> None:
        for node in self.nodes:
            node.out.tape_id = None
            node.out._tape = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        self.clear()
        return False


_DEFAULT_TAPE = Tape()
_TAPES: list[Tape] = []
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPES[-1] if _TAPES else _DEFAULT_TAPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(out, inputs, backward_fn, op)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays of leaf tensors. The
    tape that recorded ``loss`` is cleared afterwards unless ``retain_graph``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.tape_id is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
            return
        raise UsageError("loss was not produced under an active tape")
    tape = loss._tape
    pending = {id(loss): seed}
    for idx in range(loss.tape_id, -1, -1):
        node = tape.nodes[idx]
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g if node.out.grad is None else node.out.grad + g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                _accumulate(inp, gi)
    if not retain_graph:
        tape.clear()


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch ``add``, ``sub``, ``scale`` or ``hadamard`` by name."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "hadamard":
        return mul(a, b)
    if op == "scale":
        if isinstance(b, Tensor):
            raise ValidationError("scale takes a Python scalar, not a tensor")
        return scale(a, b)
    raise ValidationError(f"unknown elementwise op {op!r}")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -- reductions and reshapes ------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (g.transpose(inverse),), "permute")


# -- products -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of ``(B, m, k)`` and ``(B, k, n)``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if a.shape[2] == 1:
        # rank-one outer products; broadcasting beats batched gemm here
        def back_outer(g):
            return (g * bd).sum(axis=2, keepdims=True), (ad * g).sum(axis=1, keepdims=True)

        return _result(ad * bd, (a, b), back_outer, "bmm")

    def back(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _result(ad @ bd, (a, b), back, "bmm")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    if a.ndim < 1 or a.size == 0:
        raise DimensionError(f"softmax_rows: empty tensor {a.shape}")
    s = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def back(g):
        gs = g * s
        gs -= s * gs.sum(axis=-1, keepdims=True)
        return (gs,)

    return _result(s, (a,), back, "softmax_rows")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (N, D_in) and ``w`` of shape (D_out, D_in)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"linear: expected 2-D x, 2-D w, 1-D b; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not agree")
    xd, wd = x.data, w.data

    def back(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _result(xd @ wd.T + b.data, (x, w, b), back, "linear")


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel channel map: (N, C, H, W) with w (C', C) and b (C',) -> (N, C', H, W)."""
    if x.ndim != 4 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"conv1x1: expected 4-D x, 2-D w, 1-D b; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise DimensionError(f"conv1x1: channel mismatch x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    out = np.einsum("oc,nchw->nohw", wd, xd) + b.data[None, :, None, None]

    def back(g):
        gx = np.einsum("oc,nohw->nchw", wd, g)
        gw = np.einsum("nohw,nchw->oc", g, xd)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, (x, w, b), back, "conv1x1")


# -- spatial resampling -----------------------------------------------------------

def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights (n_out, n_in), half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"bilinear_resize: expected (N, C, H, W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target size must be positive, got {out_h}x{out_w}")
    ry = resize_matrix(x.shape[2], out_h)
    rx = resize_matrix(x.shape[3], out_w)
    out = np.einsum("ih,nchw,jw->ncij", ry, x.data, rx)
    return _result(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ry, g, rx),), "bilinear_resize")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be divisible by k."""
    n, c, h, w = x.shape if x.ndim == 4 else (None,) * 4
    if x.ndim != 4 or k < 1 or h % k or w % k:
        raise DimensionError(f"avg_pool2d: cannot pool {x.shape} by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _result(out, (x,), back, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


# -- losses -----------------------------------------------------------------------

def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at an exact tie is 0."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape("mae_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        s = np.sign(diff) * (g[0] / n)
        return s, -s

    return _result(np.array([np.abs(diff).mean()]), (pred, target), back, "mae_loss")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape("mse_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        d = diff * (2.0 * g[0] / n)
        return d, -d

    return _result(np.array([(diff * diff).mean()]), (pred, target), back, "mse_loss")


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over a batch of logits (N, K)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_loss: expected (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.issubdtype(labels.dtype, np.integer)):
        raise ValidationError(f"cross_entropy_loss: labels must be integers in [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g[0] / n),)

    return _result(np.array([loss]), (logits,), back, "cross_entropy_loss")
