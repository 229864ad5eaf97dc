"""Quaternion algebra and Hamilton-product channel mixing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import numcore as nc
from .numcore import ShapeError, Tensor


@dataclass(frozen=True)
class Quaternion:
    r: float
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.x, self.y, self.z])

    @classmethod
    def from_array(cls, v) -> Quaternion:
        r, x, y, z = (float(c) for c in v)
        return cls(r, x, y, z)

    def norm(self) -> float:
        return math.sqrt(self.r * self.r + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalize(self) -> Quaternion:
        n = self.norm()
        if n == 0.0:
            raise ZeroDivisionError("cannot normalize the zero quaternion")
        return Quaternion(self.r / n, self.x / n, self.y / n, self.z / n)

    def conj(self) -> Quaternion:
        return Quaternion(self.r, -self.x, -self.y, -self.z)

    def __mul__(self, other: Quaternion) -> Quaternion:
        return hamilton(self, other)

    def __neg__(self) -> Quaternion:
        return Quaternion(-self.r, -self.x, -self.y, -self.z)


ONE = Quaternion(1.0)
I = Quaternion(0.0, 1.0)
J = Quaternion(0.0, 0.0, 1.0)
K = Quaternion(0.0, 0.0, 0.0, 1.0)


def hamilton(p: Quaternion, q: Quaternion) -> Quaternion:
    return Quaternion(
        p.r * q.r - p.x * q.x - p.y * q.y - p.z * q.z,
        p.r * q.x + p.x * q.r + p.y * q.z - p.z * q.y,
        p.r * q.y - p.x * q.z + p.y * q.r + p.z * q.x,
        p.r * q.z + p.x * q.y - p.y * q.x + p.z * q.r,
    )


def matrix_form(q: Quaternion) -> Tensor:
    """Left-multiplication matrix: ``matrix_form(p) @ q == p * q`` as 4-vectors."""
    r, x, y, z = q.r, q.x, q.y, q.z
    return Tensor([
        [r, -x, -y, -z],
        [x, r, -z, y],
        [y, z, r, -x],
        [z, -y, x, r],
    ])


class QuaternionTensor:
    """A tensor whose leading axis holds the (r, i, j, k) components."""

    __slots__ = ("inner",)

    def __init__(self, inner: Tensor):
        if inner.ndim < 1 or inner.shape[0] != 4:
            raise ShapeError(f"quaternion tensor needs a leading axis of 4, got {inner.shape}")
        self.inner = inner

    @classmethod
    def from_components(cls, r, i, j, k) -> QuaternionTensor:
        return cls(nc.stack0([r, i, j, k]))

    @property
    def shape(self) -> tuple:
        return self.inner.shape

    def component_view(self, k: int) -> Tensor:
        return nc.take0(self.inner, k)

    @property
    def r(self) -> Tensor:
        return self.component_view(0)

    @property
    def i(self) -> Tensor:
        return self.component_view(1)

    @property
    def j(self) -> Tensor:
        return self.component_view(2)

    @property
    def k(self) -> Tensor:
        return self.component_view(3)


def hamilton_block(wr, wi, wj, wk) -> Tensor:
    """Stack four [C_out, C_in] weights into the [4C_out, 4C_in] Hamilton matrix.

    Block rows follow the quaternion matrix form, so applying the result to
    the packed input (x_r, x_i, x_j, x_k) computes W * x per channel pair.
    """
    ws = [nc._t(w) for w in (wr, wi, wj, wk)]
    for w in ws[1:]:
        if w.shape != ws[0].shape:
            raise ShapeError(f"hamilton_block: weight shapes {ws[0].shape} vs {w.shape}")
    co, ci = ws[0].shape
    # (row, col) -> (component, sign)
    layout = [
        [(0, 1), (1, -1), (2, -1), (3, -1)],
        [(1, 1), (0, 1), (3, -1), (2, 1)],
        [(2, 1), (3, 1), (0, 1), (1, -1)],
        [(3, 1), (2, -1), (1, 1), (0, 1)],
    ]
    big = np.empty((4 * co, 4 * ci))
    for a in range(4):
        for b in range(4):
            comp, sign = layout[a][b]
            big[a * co:(a + 1) * co, b * ci:(b + 1) * ci] = sign * ws[comp].data

    def bw(g):
        grads = [np.zeros((co, ci)) for _ in range(4)]
        for a in range(4):
            for b in range(4):
                comp, sign = layout[a][b]
                grads[comp] += sign * g[a * co:(a + 1) * co, b * ci:(b + 1) * ci]
        return tuple(grads)

    return nc._result(big, ws, bw, "hamilton_block")


class QuaternionLinear:
    """1x1 quaternion channel mixing with four real weight matrices."""

    def __init__(self, wr: Tensor, wi: Tensor, wj: Tensor, wk: Tensor,
                 bias: Tensor | None = None):
        shapes = {w.shape for w in (wr, wi, wj, wk)}
        if len(shapes) != 1 or wr.ndim != 2:
            raise ShapeError(f"QuaternionLinear: inconsistent weight shapes {shapes}")
        self.wr, self.wi, self.wj, self.wk = wr, wi, wj, wk
        if bias is not None and bias.shape != (4, wr.shape[0]):
            raise ShapeError(f"QuaternionLinear: bias {bias.shape}, expected {(4, wr.shape[0])}")
        self.bias = bias

    @property
    def c_out(self) -> int:
        return self.wr.shape[0]

    @property
    def c_in(self) -> int:
        return self.wr.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        out = {"wr": self.wr, "wi": self.wi, "wj": self.wj, "wk": self.wk}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def weight_count(self) -> int:
        return 4 * self.c_in * self.c_out

    def param_count(self) -> int:
        return self.weight_count() + (0 if self.bias is None else 4 * self.c_out)

    def __call__(self, x: QuaternionTensor) -> QuaternionTensor:
        return qlinear_forward(self, x)


def dense_equivalent_weight_count(c_in: int, c_out: int) -> int:
    """Weights of a real 1x1 layer mapping 4*c_in to 4*c_out channels."""
    return (4 * c_in) * (4 * c_out)


def param_ratio(c_in: int, c_out: int) -> Fraction:
    return Fraction(4 * c_in * c_out, dense_equivalent_weight_count(c_in, c_out))


def qlinear_forward(layer: QuaternionLinear, x: QuaternionTensor) -> QuaternionTensor:
    shape = x.shape
    if len(shape) != 4 or shape[1] != layer.c_in:
        raise ShapeError(
            f"qlinear_forward: input {shape} vs layer with {layer.c_in} input channels")
    _, c_in, h, w = shape
    big = hamilton_block(layer.wr, layer.wi, layer.wj, layer.wk)
    bias = None if layer.bias is None else nc.reshape(layer.bias, (4 * layer.c_out,))
    packed = nc.reshape(x.inner, (4 * c_in, h, w))
    out = nc.conv1x1(packed, big, bias)
    return QuaternionTensor(nc.reshape(out, (4, layer.c_out, h, w)))


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": nc.relu,
    "sigmoid": nc.sigmoid,
    "identity": lambda t: t,
}


def split_activation(x: QuaternionTensor, f: str | Callable = "relu") -> QuaternionTensor:
    """Apply a real function independently to each of the four components."""
    fn = _ACTIVATIONS[f] if isinstance(f, str) else f
    return QuaternionTensor(fn(x.inner))


def suprasphere_init(c_in: int, c_out: int, seed: int, bias: bool = True,
                     magnitude_scale: float | None = None) -> QuaternionLinear:
    """Quaternion weights w = m * u, u uniform on the unit 3-sphere.

    m ~ Uniform(-s, s) with s = 1/sqrt(2*c_in) unless ``magnitude_scale`` is
    given. Biases start at zero.
    """
    if c_in < 1 or c_out < 1:
        raise ShapeError(f"suprasphere_init: channel counts must be >= 1, got {(c_in, c_out)}")
    rng = np.random.default_rng(seed)
    u = sphere_directions(rng, (c_out, c_in))
    s = 1.0 / math.sqrt(2.0 * c_in) if magnitude_scale is None else magnitude_scale
    m = rng.uniform(-s, s, size=(c_out, c_in))
    w = m[..., None] * u
    b = Tensor(np.zeros((4, c_out)), requires_grad=True) if bias else None
    return QuaternionLinear(*(Tensor(w[..., k], requires_grad=True) for k in range(4)), bias=b)


def sphere_directions(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit 4-vectors with a uniform direction, shape ``shape + (4,)``."""
    g = rng.standard_normal(tuple(shape) + (4,))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def save_qlinear(path, layer: QuaternionLinear, name: str) -> None:
    with open(path, "wb") as fh:
        has_bias = int(layer.bias is not None)
        fh.write(f"qlinear {name} {layer.c_in} {layer.c_out} {has_bias}\n".encode("ascii"))
        for w in (layer.wr, layer.wi, layer.wj, layer.wk):
            nc.write_tensor(fh, w)
        if has_bias:
            nc.write_tensor(fh, layer.bias)


def load_qlinear(path) -> tuple[str, QuaternionLinear]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 5 or header[0] != "qlinear":
            raise ValueError(f"not a quaternion layer checkpoint: {header}")
        ws = [nc.read_tensor(fh) for _ in range(4)]
        bias = nc.read_tensor(fh) if header[4] == "1" else None
    for t in ws + ([bias] if bias is not None else []):
        t.requires_grad = True
    return header[1], QuaternionLinear(*ws, bias=bias)
