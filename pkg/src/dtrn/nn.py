"""Parameter containers and the dense layers shared by every model part."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import Parameter, Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are discovered from instance attributes that are
    :class:`Parameter`, :class:`Module`, or lists/tuples of those, in
    attribute definition order, so names and ordering are deterministic.
    """

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            yield from _walk(value, prefix + attr)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grads(self) -> None:
        tn.zero_grads(self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else tn.DEFAULT_DTYPE

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise tn.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x W + b with W of shape (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else uniform(rng, (d_in, d_out), bound)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tn.matmul(x, self.weight)
        if self.bias is not None:
            y = tn.add(y, self.bias)
        return y


class MLP(Module):
    """Stack of Linear layers with ReLU between them.

    ``final`` picks what follows the last layer: None, "relu" or "sigmoid".
    """

    def __init__(self, dims, rng: np.random.Generator, final: str | None = None, zero_last: bool = False):
        dims = list(dims)
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output widths")
        n = len(dims) - 1
        self.layers = [Linear(dims[i], dims[i + 1], rng, zero=zero_last and i == n - 1) for i in range(n)]
        if final not in (None, "relu", "sigmoid"):
            raise ValueError(f"unknown final activation {final!r}")
        self.final = final

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tn.relu(x)
        if self.final == "relu":
            x = tn.relu(x)
        elif self.final == "sigmoid":
            x = tn.sigmoid(x)
        return x
