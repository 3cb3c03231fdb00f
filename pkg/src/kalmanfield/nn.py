"""Small layer helpers on top of the autodiff ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad


class Module:
    """Parameter container; children are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, ad.Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(prefix + key, value)

    def parameters(self) -> list[ad.Parameter]:
        return [p for _, p in self.named_parameters()]


def _walk(name: str, value) -> Iterator[tuple[str, ad.Parameter]]:
    if isinstance(value, ad.Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        if zero:
            w, b = np.zeros((n_in, n_out)), np.zeros(n_out)
        else:
            w = rng.uniform(-bound, bound, (n_in, n_out))
            b = rng.uniform(-bound, bound, n_out)
        self.weight = ad.Parameter(w)
        self.bias = ad.Parameter(b)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> ad.Tensor:
        return ad.linear(x, self.weight, self.bias)


class MLP(Module):
    """ReLU hidden layers followed by a linear output layer (no output activation)."""

    def __init__(self, n_in: int, hidden: list[int], n_out: int, rng: np.random.Generator):
        widths = [n_in, *hidden]
        self.hidden = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.out = Linear(widths[-1], n_out, rng)

    def features(self, x) -> ad.Tensor:
        for layer in self.hidden:
            x = ad.relu(layer(x))
        return x

    def __call__(self, x) -> ad.Tensor:
        return self.out(self.features(x))


def name_parameters(module: Module) -> list[ad.Parameter]:
    """Stamp dotted attribute paths onto parameters; returns them in declared order."""
    params = []
    for name, p in module.named_parameters():
        p.name = name
        params.append(p)
    return params
