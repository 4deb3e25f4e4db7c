"""Parameter containers: a tiny module tree with dotted parameter names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..core import Parameter, Tensor, conv2d, layer_norm, linear

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator | None, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled outside +-2 std; zeros when ``rng`` is None (shape-only build)."""
    if rng is None:
        return np.zeros(shape, dtype=np.float32)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


class Module:
    """Attribute-order parameter tree.  Child modules may also sit in lists."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            for name, p in _walk(value, f"{prefix}{key}"):
                yield name, p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}


def _walk(value, name: str):
    if isinstance(value, Parameter):
        if not value.name:
            value.name = name
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            if isinstance(item, (Module, Parameter)):
                yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self._eps)


class Conv2d(Module):
    """Convolution with fan-out He-normal init."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0, groups: int = 1, rng=None):
        fan_out = kernel * kernel * c_out // groups
        shape = (c_out, c_in // groups, kernel, kernel)
        w = np.zeros(shape, dtype=np.float32) if rng is None else rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)
        self.weight = Parameter(np.asarray(w, dtype=np.float32))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))
        self._stride, self._padding, self._groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self._stride, self._padding, self._groups)
