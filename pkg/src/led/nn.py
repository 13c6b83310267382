"""Parameter containers and dense layers built on :mod:`led.autodiff`."""

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

ACTIVATIONS = {
    "relu": lambda h: h.relu(),
    "elu": lambda h: h.elu(),
    "tanh": lambda h: h.tanh(),
}


class Module:
    """Collects ``Tensor`` parameters from attributes, recursively.

    Parameter names are dotted attribute paths, in attribute insertion order,
    which makes checkpoints stable across runs.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())


def _activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}") from None


class Linear(Module):
    """Affine map ``x @ W + b`` with ``W`` stored as [in, out]."""

    def __init__(self, n_in, n_out, gen=None, zero=False, gain=2.0):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = gen.normal(0.0, np.sqrt(gain / n_in), size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + self.bias


class MaskedLinear(Linear):
    """Linear layer whose connectivity is restricted by a fixed binary mask.

    ``mask`` uses the [out, in] orientation of the usual MADE notation.
    """

    def __init__(self, n_in, n_out, mask, gen=None, zero=False, gain=2.0):
        super().__init__(n_in, n_out, gen, zero=zero, gain=gain)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (n_out, n_in):
            raise ContractError(f"mask shape {mask.shape} != {(n_out, n_in)}")
        self.mask = mask
        self._mask_t = Tensor(mask.T.copy())
        self.weight.data *= self._mask_t.data

    def __call__(self, x):
        return x @ (self.weight * self._mask_t) + self.bias


class MLP(Module):
    """Stack of dense layers; the activation is applied between layers only."""

    def __init__(self, sizes, gen, activation="relu", zero_last=False):
        if len(sizes) < 2:
            raise ContractError("MLP needs at least input and output sizes")
        self.layers = [
            Linear(a, b, gen, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = activation
        self._act = _activation(activation)

    def __call__(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = self._act(h)
        return h
