"""Parameter containers and deterministic per-name initialization."""

from __future__ import annotations

import zlib

import numpy as np

from . import numcore as nc
from .numcore import Tensor


def param_rng(seed: int, name: str) -> np.random.Generator:
    """RNG keyed by (seed, parameter name) so init does not depend on build order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def param_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF,
                                       zlib.crc32(name.encode())]).generate_state(1)[0])


class Module:
    """Anything with named parameters; children are discovered by attribute."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.parameters(name + "."))
            elif hasattr(val, "parameters") and callable(val.parameters) and not isinstance(val, type):
                out.update({f"{name}.{k}": v for k, v in val.parameters().items()})
            elif isinstance(val, (list, tuple)):
                for n, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{n}."))
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, seed: int, name: str, zero: bool = False,
                 bias: bool = True):
        if zero:
            w = np.zeros((c_out, c_in))
        else:
            w = param_rng(seed, name + ".w").normal(0.0, np.sqrt(2.0 / c_in), (c_out, c_in))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.c_in, self.c_out = c_in, c_out

    def __call__(self, x: Tensor) -> Tensor:
        return nc.conv1x1(x, self.w, self.b)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, seed: int, name: str, stride: int = 1,
                 zero: bool = False):
        if zero:
            w = np.zeros((c_out, c_in, 3, 3))
        else:
            w = param_rng(seed, name + ".w").normal(0.0, np.sqrt(2.0 / (9 * c_in)),
                                                    (c_out, c_in, 3, 3))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return nc.conv3x3(x, self.w, self.b, stride=self.stride)
