"""Dense float64 tensors with a recorded reverse-mode graph.

Every op returns a new :class:`Tensor`. When grad recording is on and any
input requires a gradient, the output remembers its parents and a closure
mapping the output gradient to input gradients. :func:`backward` walks that
graph once in reverse topological order and then discards it.
"""

from __future__ import annotations

import contextlib
import functools
import struct
import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand extents do not conform."""


class ConfigError(ValueError):
    """An op or model was configured with an unsupported setting."""


class ContractError(RuntimeError):
    """A precondition of the autodiff contract was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was found where only finite values are allowed."""


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self._parents = None
        self._backward = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        t.grad = None
        t.requires_grad = False
        t.op = None
        t._parents = None
        t._backward = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._parents is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(arr: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor._wrap(arr)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# graph traversal


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, every input before its users."""
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
        for p in node._parents or ():
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")
    order = graph_nodes(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        node._parents = None
        node._backward = None


def check_finite(t: Tensor, where: str = "tensor") -> Tensor:
    if not np.isfinite(t.data).all():
        bad = int(np.size(t.data) - np.isfinite(t.data).sum())
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")
    return t


# --------------------------------------------------------------------------
# element-wise family


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x, s: float) -> Tensor:
    x = _t(x)
    s = float(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0.0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = _t(x)
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = _t(x)
    y = -np.logaddexp(0.0, -x.data)
    return _result(y, (x,), lambda g: (g * _sigmoid(-x.data),), "log_sigmoid")


def square(x) -> Tensor:
    x = _t(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def abs_(x) -> Tensor:
    x = _t(x)
    sgn = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def log1p(x) -> Tensor:
    x = _t(x)
    xd = x.data
    return _result(np.log1p(xd), (x,), lambda g: (g / (1.0 + xd),), "log1p")


def sum_(x) -> Tensor:
    x = _t(x)
    shape = x.shape
    return _result(np.array([x.data.sum()]), (x,),
                   lambda g: (np.full(shape, g[0]),), "sum")


def mean(x) -> Tensor:
    x = _t(x)
    n = x.data.size
    shape = x.shape
    return _result(np.array([x.data.sum() / n]), (x,),
                   lambda g: (np.full(shape, g[0] / n),), "mean")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_t(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].ndim
    ax = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(
            x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(f"concat: {xs[0].shape} vs {x.shape} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[n], bounds[n + 1]), axis=ax) for n in range(len(xs))
        )

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def reshape(x, shape) -> Tensor:
    x = _t(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def take0(x, k: int) -> Tensor:
    """Slice ``x[k]`` along the leading axis."""
    x = _t(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[k] = g
        return (out,)

    return _result(x.data[k], (x,), bw, "take0")


def slice0(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading axis."""
    x = _t(x)
    shape = x.shape
    if not 0 <= start < stop <= shape[0]:
        raise ShapeError(f"slice0: [{start}:{stop}] out of range for {shape}")

    def bw(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _result(x.data[start:stop], (x,), bw, "slice0")


def stack0(xs: Sequence[Tensor]) -> Tensor:
    xs = [_t(x) for x in xs]
    for x in xs[1:]:
        _same_shape(xs[0], x, "stack0")
    return _result(np.stack([x.data for x in xs]), xs,
                   lambda g: tuple(g[n] for n in range(len(xs))), "stack0")


# --------------------------------------------------------------------------
# channel mixing / convolution


def conv1x1(x, w, b=None) -> Tensor:
    x, w = _t(x), _t(w)
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1x1: input {x.shape} vs weight {w.shape}")
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    if b is not None:
        b = _t(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv1x1: bias {b.shape} vs weight {w.shape}")
    xm = x.data.reshape(c_in, h * wd)
    y = w.data @ xm
    if b is not None:
        y += b.data[:, None]
    wd_ = w.data

    def bw(g):
        gm = g.reshape(c_out, h * wd)
        gx = (wd_.T @ gm).reshape(c_in, h, wd) if x.requires_grad else None
        gw = gm @ xm.T if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return _result(y.reshape(c_out, h, wd), parents, bw, "conv1x1")


def _conv_out(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def conv3x3(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1."""
    if stride not in (1, 2):
        raise ConfigError(f"conv3x3: stride must be 1 or 2, got {stride}")
    x, w = _t(x), _t(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1:] != (x.shape[0], 3, 3):
        raise ShapeError(f"conv3x3: input {x.shape} vs weight {w.shape}")
    c_in, h, wd = x.shape
    if h < 3 or wd < 3:
        raise ShapeError(f"conv3x3: spatial extent must be >= 3, got {(h, wd)}")
    c_out = w.shape[0]
    if b is not None:
        b = _t(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv3x3: bias {b.shape} vs weight {w.shape}")
    ho, wo = _conv_out(h, stride), _conv_out(wd, stride)
    cols = _kernels.im2col(x.data, stride, ho, wo)
    wm = w.data.reshape(c_out, c_in * 9)
    y = wm @ cols
    if b is not None:
        y += b.data[:, None]

    def bw(g):
        gm = g.reshape(c_out, ho * wo)
        gx = _kernels.col2im(wm.T @ gm, c_in, h, wd, ho, wo, stride) if x.requires_grad else None
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return _result(y.reshape(c_out, ho, wo), parents, bw, "conv3x3")


def conv3x3_stride(x, w, b=None, stride: int = 2) -> Tensor:
    return conv3x3(x, w, b, stride=stride)


def matvec(w, v) -> Tensor:
    w, v = _t(w), _t(v)
    if w.ndim != 2 or v.shape != (w.shape[1],):
        raise ShapeError(f"matvec: matrix {w.shape} vs vector {v.shape}")
    wd, vd = w.data, v.data
    return _result(wd @ vd, (w, v), lambda g: (np.outer(g, vd), wd.T @ g), "matvec")


def channel_scale(x, g) -> Tensor:
    """Multiply each channel of ``x[C,H,W]`` by ``g[C]``."""
    x, g = _t(x), _t(g)
    if x.ndim != 3 or g.shape != (x.shape[0],):
        raise ShapeError(f"channel_scale: {x.shape} vs gate {g.shape}")
    xd, gd = x.data, g.data
    return _result(xd * gd[:, None, None], (x, g),
                   lambda gr: (gr * gd[:, None, None], (gr * xd).sum(axis=(1, 2))),
                   "channel_scale")


def global_avg_pool(x) -> Tensor:
    x = _t(x)
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool: expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    n = h * w
    return _result(x.data.reshape(c, n).sum(axis=1) / n, (x,),
                   lambda g: (np.broadcast_to((g / n)[:, None, None], (c, h, w)).copy(),),
                   "global_avg_pool")


# --------------------------------------------------------------------------
# resampling


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    m.setflags(write=False)
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    x = _t(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: output size must be >= 1, got {(out_h, out_w)}")
    if x.ndim != 3:
        raise ShapeError(f"resize_bilinear: expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,), "resize_bilinear")
    ry = _bilinear_matrix(h, out_h)
    rx = _bilinear_matrix(w, out_w)
    y = np.matmul(np.matmul(ry, x.data), rx.T)
    return _result(y, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),),
                   "resize_bilinear")


def pad_edge(x, top: int = 0, bottom: int = 0, left: int = 0, right: int = 0) -> Tensor:
    """Replicate border rows/columns outward."""
    x = _t(x)
    c, h, w = x.shape
    y = np.pad(x.data, ((0, 0), (top, bottom), (left, right)), mode="edge")

    def bw(g):
        g = g.copy()
        if top:
            g[:, top] += g[:, :top].sum(axis=1)
        if bottom:
            g[:, top + h - 1] += g[:, top + h:].sum(axis=1)
        g = g[:, top:top + h]
        if left:
            g[:, :, left] += g[:, :, :left].sum(axis=2)
        if right:
            g[:, :, left + w - 1] += g[:, :, left + w:].sum(axis=2)
        return (np.ascontiguousarray(g[:, :, left:left + w]),)

    return _result(y, (x,), bw, "pad_edge")


def sparse_sample(x, matrix, out_hw: tuple[int, int]) -> Tensor:
    """Apply a fixed sparse [P, H*W] sampling matrix to every channel."""
    x = _t(x)
    c, h, w = x.shape
    if matrix.shape[1] != h * w or matrix.shape[0] != out_hw[0] * out_hw[1]:
        raise ShapeError(f"sparse_sample: matrix {matrix.shape} vs input {x.shape}")
    xm = x.data.reshape(c, h * w)
    y = np.asarray((matrix @ xm.T).T).reshape(c, *out_hw)
    mt = matrix.T.tocsr()

    def bw(g):
        gm = g.reshape(c, -1)
        return (np.asarray((mt @ gm.T).T).reshape(c, h, w),)

    return _result(y, (x,), bw, "sparse_sample")


# --------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      indices=None) -> float:
    """Max element-wise relative gap between backward() and central differences.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. The
    error per element is ``|g_fd - g_an| / max(1, |g_fd|, |g_an|)``. Pass
    ``indices`` (flat positions) to check a slice of a large input.
    """
    if h <= 0:
        raise ConfigError(f"finite_diff_check: h must be positive, got {h}")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    y = f(leaf)
    check_finite(y, "finite_diff_check")
    backward(y)
    g_an = np.zeros_like(base) if leaf.grad is None else leaf.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for n in idx:
            xp = flat.copy()
            xp[n] += h
            fp = f(Tensor._wrap(xp.reshape(base.shape)))
            xm = flat.copy()
            xm[n] -= h
            fm = f(Tensor._wrap(xm.reshape(base.shape)))
            check_finite(fp, "finite_diff_check")
            check_finite(fm, "finite_diff_check")
            g_fd = (fp.item() - fm.item()) / (2.0 * h)
            ga = float(g_an.reshape(-1)[n])
            err = abs(g_fd - ga) / max(1.0, abs(g_fd), abs(ga))
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# snapshot format: "QFT1", u32 rank, u32 extents[rank], f64 data (little endian)

_MAGIC = b"QFT1"


def write_tensor(fh, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh) -> Tensor:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(shape)) if rank else 1
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ValueError("truncated tensor payload")
    return Tensor._wrap(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
