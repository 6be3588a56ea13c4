"""Parameter containers and the small layers every model here is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Collects parameters from attributes: Tensors with ``requires_grad``,
    nested Modules, and lists/dicts of either."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.DTYPE), requires_grad=True)


class Linear(Module):
    """y = x W^T + b with W of shape (out, in), torch-style uniform init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        bound = 1.0 / np.sqrt(n_in)
        self.weight = param(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.bias = param(rng.uniform(-bound, bound, size=(n_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else x.reshape(-1, x.shape[-1])
        y = T.matmul(flat, T.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y if x.ndim == 2 else y.reshape(*lead, y.shape[-1])

    def zero_(self) -> "Linear":
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self


class MLP(Module):
    """Two-layer map in -> hidden -> out with GELU in between."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
