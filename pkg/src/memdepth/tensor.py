"""Small reverse-mode autodiff engine on top of numpy.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`.
When a :class:`Tape` is active and any input requires a gradient, the op is
appended to that tape together with a closure that maps the output gradient
to input gradients.  :func:`backward` replays the tape in reverse.

Tensors are treated as immutable: nothing here writes into ``.data`` of a
tensor after construction.
"""

from __future__ import annotations

import contextlib
import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPE = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class GradientError(TensorError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
        elif arr.dtype not in _DTYPE_TAG:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """Same values, no history.  The array is shared, not copied."""
        return Tensor(self.data, requires_grad=requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops.

    Use as a context manager; ops executed inside it are recorded when at
    least one input requires a gradient.  Tapes nest, innermost wins.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


_TAPES: list[Tape] = []


@contextlib.contextmanager
def no_tape():
    """Suspend recording (ops inside behave as constants)."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in output of shape {arr.shape}")


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, out)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.records.append(Record(op, inputs, result, backward_fn))
    return result


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)  # overflow surfaces as NonFiniteError below
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NonFiniteError(f"log: non-positive input (min {x.min()})")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    """Square root.  The derivative at exactly 0 is taken as 0."""
    x = a.data
    if (x < 0).any():
        raise NonFiniteError(f"sqrt: negative input (min {x.min()})")
    out = np.sqrt(x)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(out.dtype, copy=False),)

    return _make("sqrt", out, (a,), bw)


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make("square", x * x, (a,), lambda g: (2 * g * x,))


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return _make("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    return _make("relu", np.where(pos, x, 0).astype(x.dtype, copy=False), (a,),
                 lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    x = a.data
    keep = x > lo
    out = np.where(keep, x, lo).astype(x.dtype, copy=False)
    return _make("clamp_min", out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def slice_(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {src_shape}") from None

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make("slice", np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise TypeError(f"concat: mixed dtypes {dt} and {t.dtype}")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tensors, bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), src).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    count = int(np.prod([src[i] for i in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims) / a.dtype.type(count)
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept) / g.dtype.type(count), src).copy(),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None))
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: mixed dtypes {a.dtype} and {b.dtype}")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make("matmul", out, (a, b), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on ``N x Cin x H x W`` with ``Cout x Cin x kh x kw`` weights."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if x.dtype != w.dtype or (b is not None and b.dtype != x.dtype):
        raise TypeError("conv2d: mixed dtypes")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: (n*ho*wo, cin*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    wshape, dtype = w.shape, x.dtype

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gm.T @ cols).reshape(wshape)
        gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros((n, cin, hp, wp), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    shape = x.shape

    def bw(g):
        lead = g.shape[:-2]
        g = g.reshape(*lead, shape[-2], factor, shape[-1], factor)
        return (g.sum(axis=(-3, -1)),)

    return _make("upsample_nearest", out, (x,), bw)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping average pooling of the last two axes."""
    h, w = x.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"avg_pool: extents {(h, w)} not divisible by {factor}")
    lead = x.shape[:-2]
    ho, wo = h // factor, w // factor
    out = x.data.reshape(*lead, ho, factor, wo, factor).mean(axis=(-3, -1))
    scale = x.dtype.type(1.0 / (factor * factor))

    def bw(g):
        g = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (g * scale,)

    return _make("avg_pool", out, (x,), bw)


def grid_sample(src: Tensor, sx: np.ndarray, sy: np.ndarray) -> Tensor:
    """Bilinear sampling of ``C x H x W`` source at pixel coordinates ``(sx, sy)``.

    ``sx`` and ``sy`` are constant ``Ho x Wo`` arrays in pixel units.  They are
    clamped to the source domain (border clamp).  Differentiable w.r.t. ``src``.
    """
    if src.ndim != 3:
        raise ShapeError(f"grid_sample: source must be C x H x W, got {src.shape}")
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)
    if sx.shape != sy.shape:
        raise ShapeError(f"grid_sample: coordinate shapes {sx.shape} and {sy.shape} differ")
    c, h, w = src.shape
    x = np.clip(sx, 0, w - 1)
    y = np.clip(sy, 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    dtype = src.dtype
    w00 = ((1 - fx) * (1 - fy)).astype(dtype)
    w01 = (fx * (1 - fy)).astype(dtype)
    w10 = ((1 - fx) * fy).astype(dtype)
    w11 = (fx * fy).astype(dtype)
    i00, i01 = y0 * w + x0, y0 * w + x1
    i10, i11 = y1 * w + x0, y1 * w + x1
    flat = src.data.reshape(c, h * w)
    out = (flat[:, i00] * w00 + flat[:, i01] * w01) + (flat[:, i10] * w10 + flat[:, i11] * w11)

    def bw(g):
        g = g.reshape(c, -1)
        idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
        grad = np.empty((c, h * w), dtype=dtype)
        for ch in range(c):
            vals = np.concatenate([(g[ch] * w00.ravel()), (g[ch] * w01.ravel()),
                                   (g[ch] * w10.ravel()), (g[ch] * w11.ravel())])
            grad[ch] = np.bincount(idx, weights=vals, minlength=h * w)
        return (grad.reshape(c, h, w),)

    return _make("grid_sample", out.reshape((c,) + sx.shape), (src,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse pass from scalar ``root``; returns ``{leaf: d root / d leaf}``.

    Leaves that require grad also get the gradient added to ``leaf.grad``.
    """
    if root.size != 1:
        raise GradientError(f"backward: root must be scalar, got shape {root.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(root) not in produced:
        raise GradientError("backward: root was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        result[leaf] = g
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    kinks: list[tuple[int, ...]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {len(self.kinks)} non-differentiable point(s)" if self.kinks else ""
        return f"{status}: max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e}) over {self.checked} coords{extra}"


def finite_diff_check(fn: Callable[[Tensor], Tensor], leaf: Tensor, h: float = 1e-5,
                      tol: float = 1e-4, coords: Iterable[tuple[int, ...]] | None = None,
                      kink_tol: float = 1e-2) -> GradCheckReport:
    """Compare the taped gradient of scalar ``fn(leaf)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Coordinates where the one-sided slopes disagree by more than ``kink_tol``
    (relative) are reported as kinks and left out of the pass/fail decision.
    ``coords`` restricts the check to a subset of entries.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    base = np.array(leaf.data, copy=True)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    if out.size != 1:
        raise GradientError(f"finite_diff_check: fn must return a scalar, got shape {out.shape}")
    f0 = out.item()
    if not np.isfinite(f0):
        raise NonFiniteError("finite_diff_check: fn produced a non-finite value")
    if out.requires_grad:
        analytic = backward(tape, out).get(x, np.zeros_like(base))
    else:
        analytic = np.zeros_like(base)

    def evaluate(arr):
        with no_tape():
            val = fn(Tensor(arr)).item()
        if not np.isfinite(val):
            raise NonFiniteError("finite_diff_check: fn produced a non-finite value")
        return val

    if coords is None:
        coords = list(np.ndindex(*base.shape)) if base.ndim else [()]
    worst, checked, kinks = 0.0, 0, []
    for idx in coords:
        idx = tuple(int(i) for i in idx)
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        fp, fm = evaluate(plus), evaluate(minus)
        numeric = (fp - fm) / (2 * h)
        right, left = (fp - f0) / h, (f0 - fm) / h
        if abs(right - left) > kink_tol * max(abs(right), abs(left), 1.0):
            kinks.append(idx)
            continue
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return GradCheckReport(worst, worst <= tol, tol, checked, kinks)


# ---------------------------------------------------------------------------
# blob serialization: name, dtype tag, rank, extents, raw LE values


def write_blob(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TAG:
        raise TypeError(f"write_blob: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BI", _DTYPE_TAG[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


class TruncatedError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    start = fh.tell() if fh.seekable() else None
    data = fh.read(n)
    if len(data) != n:
        where = f" at offset {start}" if start is not None else ""
        total = (start or 0)
        raise TruncatedError(
            f"truncated blob{where}: expected {total + n} bytes, got {total + len(data)}")
    return data


def read_blob(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, nlen).decode("utf-8")
    tag, rank = struct.unpack("<BI", _read_exact(fh, 5))
    if tag not in _TAG_DTYPE:
        raise ValueError(f"read_blob: unknown dtype tag {tag} for {name!r}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    dtype = _TAG_DTYPE[tag]
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    return name, arr


def blob_bytes(name: str, arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_blob(buf, name, arr)
    return buf.getvalue()
