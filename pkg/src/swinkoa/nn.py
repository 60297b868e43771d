"""Parameter containers built on :mod:`swinkoa.numerics`."""
from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from swinkoa import numerics as nx
from swinkoa.numerics import Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return (truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) * std).astype(nx.DTYPE)


class Module:
    """Walks attributes to find parameters and child modules.

    Lists of modules are traversed in order, so parameter names such as
    ``stages.0.blocks.1.attn.qkv.weight`` are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        problems = []
        for k in sorted(set(own) | set(state)):
            if k not in state:
                problems.append(f"missing tensor {k} {own[k].shape}")
            elif k not in own:
                problems.append(f"unexpected tensor {k} {tuple(np.shape(state[k]))}")
            elif own[k].shape != tuple(np.shape(state[k])):
                problems.append(f"shape mismatch for {k}: model {own[k].shape} vs checkpoint {tuple(np.shape(state[k]))}")
        if problems:
            raise nx.DimensionError("state does not fit model:\n  " + "\n  ".join(problems))
        for k, p in own.items():
            p.data = np.array(state[k], dtype=nx.DTYPE)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Stack of linear maps with an activation between consecutive layers.

    ``init="he"`` scales each hidden weight by ``sqrt(2 / fan_in)`` (ReLU
    stacks) and zeroes the output layer; the default keeps the
    transformer-style ``std=0.02`` everywhere.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator, activation=nx.relu, init: str = "small"):
        if init not in ("small", "he"):
            raise ValueError(f"unknown init {init!r}")
        self.layers = [
            Linear(a, b, rng, std=0.02 if init == "small" else float(np.sqrt(2.0 / a)))
            for a, b in zip(sizes[:-1], sizes[1:])
        ]
        if init == "he":
            self.layers[-1].weight.data[...] = 0.0
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x
