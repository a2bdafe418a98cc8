"""Small parameter containers shared by the network modules."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gelu, matmul

__all__ = ["Linear", "Mlp", "named_parameters", "linear", "mlp"]


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor    # [out]

    def __call__(self, x):
        return matmul(x, self.weight) + self.bias

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class Mlp:
    """``out = skip(x) + fc2(gelu(fc1(x)))``; ``skip`` is optional."""

    fc1: Linear
    fc2: Linear
    skip: Linear | None = None

    def __call__(self, x):
        y = self.fc2(gelu(self.fc1(x)))
        if self.skip is not None:
            y = y + matmul(x, self.skip.weight)
        return y


def linear(rng: np.random.Generator, n_in: int, n_out: int, scale: float | None = None) -> Linear:
    std = scale if scale is not None else 1.0 / np.sqrt(n_in)
    return Linear(Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True),
                  Tensor(np.zeros(n_out), requires_grad=True))


def mlp(rng, n_in, n_hidden, n_out, skip: bool = False) -> Mlp:
    sk = None
    if skip:
        sk = linear(rng, n_in, n_out)
        sk.bias.requires_grad = False  # unused: fc2 carries the bias
    return Mlp(linear(rng, n_in, n_hidden), linear(rng, n_hidden, n_out), sk)


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Walk dataclasses, dicts and lists collecting tensors by dotted name."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.update(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, dict):
        for k in obj:
            out.update(named_parameters(obj[k], f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.update(named_parameters(v, f"{prefix}.{i}" if prefix else str(i)))
    return out
