"""Invertible layers with exact log-Jacobian-determinants.

A :class:`FlowChain` maps base draws ``z0`` to ``z`` through its layers in
order. Every layer exposes ``forward(x) -> (y, log_det)`` and
``inverse(y) -> (x, log_det_of_inverse)``, with ``log_det`` of shape [batch].
Densities are evaluated by running the chain backwards::

    log p(z) = log p_base(h^-1(z)) + log |d h^-1 / d z|
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, elementwise, no_tape
from .errors import ContractError, DimensionError, DomainError
from .nn import MLP, Linear, Module, _activation

LOG_2PI = float(np.log(2.0 * np.pi))
MASK_KINDS = ("random_half", "checkerboard", "complement")


class BaseDensity:
    """Fixed base distribution ``p(z0)``: standard normal or uniform on (0, 1)^dim."""

    def __init__(self, dim, kind="standard_normal"):
        if kind not in ("standard_normal", "uniform_unit_box"):
            raise ContractError(f"unknown base density {kind!r}")
        self.dim = int(dim)
        self.kind = kind

    def log_prob(self, z):
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f"expected [batch, {self.dim}], got {z.shape}")
        if self.kind == "standard_normal":
            return z.square().sum(axis=1) * -0.5 - 0.5 * self.dim * LOG_2PI
        if np.any((z.data < 0.0) | (z.data > 1.0)):
            raise DomainError("point outside the unit box under a uniform base")
        return Tensor(np.zeros(z.shape[0]))

    def sample(self, n, gen):
        if self.kind == "standard_normal":
            return gen.standard_normal((n, self.dim))
        return gen.random((n, self.dim))

    def __repr__(self):
        return f"BaseDensity(dim={self.dim}, kind={self.kind!r})"


@dataclass(frozen=True)
class MaskSpec:
    dim: int
    bits: tuple
    kind: str

    @property
    def array(self):
        return np.array(self.bits, dtype=np.float64)

    def complement(self):
        return MaskSpec(self.dim, tuple(1 - b for b in self.bits), "complement")


def make_mask(dim, kind, gen=None, spatial_shape=None):
    """Build a coupling mask; ``gen`` must be the mask-choice stream for random masks."""
    if dim < 2:
        raise ContractError("a coupling mask needs dim >= 2")
    if kind == "random_half":
        if gen is None:
            raise ContractError("random_half masks need a generator")
        bits = np.zeros(dim, dtype=int)
        bits[gen.permutation(dim)[: dim // 2]] = 1
    elif kind == "checkerboard":
        if spatial_shape is not None:
            rows, cols = spatial_shape
            if rows * cols != dim:
                raise ContractError(f"spatial shape {spatial_shape} does not cover dim {dim}")
            r, c = np.indices((rows, cols))
            bits = ((r + c) % 2).ravel()
        else:
            bits = np.arange(dim) % 2
    else:
        raise ContractError(f"unknown mask kind {kind!r}")
    return MaskSpec(dim, tuple(int(b) for b in bits), kind)


class CouplingConditioner(Module):
    """Shared-trunk MLP producing bounded log-scales ``s`` and shifts ``t``.

    ``s = bound * tanh(raw)``, with ``bound`` a learnable per-layer scalar.
    Output heads start at zero so a new layer is the identity map.
    """

    def __init__(self, dim, hidden_sizes, gen, activation="relu"):
        self.trunk = MLP([dim, *hidden_sizes], gen, activation) if hidden_sizes else None
        width = hidden_sizes[-1] if hidden_sizes else dim
        self.scale_head = Linear(width, dim, zero=True)
        self.shift_head = Linear(width, dim, zero=True)
        self.bound = Tensor(np.ones(1), requires_grad=True)
        self._act = _activation(activation)

    def __call__(self, xm):
        h = self._act(self.trunk(xm)) if self.trunk is not None else xm
        s = self.scale_head(h).tanh() * self.bound
        return s, self.shift_head(h)


class CouplingLayer(Module):
    """Affine coupling ``y = b*x + (1-b)*(x*exp(s(b*x)) + t(b*x))``.

    ``conditioner`` maps the masked input to ``(s, t)``; any callable with that
    contract works, which lets tests plug in fixed functions.
    """

    def __init__(self, mask, conditioner):
        self.mask = mask
        self.conditioner = conditioner
        self._b = Tensor(mask.array)
        self._free = Tensor(1.0 - mask.array)

    @property
    def dim(self):
        return self.mask.dim

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"coupling layer of dim {self.dim} got input {x.shape}")

    def forward(self, x):
        x = as_tensor(x)
        self._check(x)
        xm = x * self._b
        s, t = self.conditioner(xm)
        y = xm + self._free * (x * s.exp() + t)
        return y, (s * self._free).sum(axis=1)

    def inverse(self, y):
        y = as_tensor(y)
        self._check(y)
        ym = y * self._b
        s, t = self.conditioner(ym)
        x = ym + self._free * ((y - t) * (-s).exp())
        return x, (s * self._free).sum(axis=1) * -1.0

    def __call__(self, x):
        return self.forward(x)


def coupling_forward(layer, x):
    return layer.forward(x)


def coupling_inverse(layer, y):
    return layer.inverse(y)


class GaussianQuantileLayer(Module):
    """Fixed elementwise map ``u -> scale * Phi^-1(u)`` from ``(0, 1)^d`` to ``R^d``.

    Lets an affine autoregressive chain on a uniform base reach unbounded
    support; it has no parameters.
    """

    def __init__(self, dim, scale=1.0):
        self.dim = int(dim)
        self.scale = float(scale)
        self._log_scale = float(np.log(scale))

    def forward(self, u):
        y = elementwise("ndtri", as_tensor(u))
        ld = (y.square() * 0.5 + (0.5 * LOG_2PI + self._log_scale)).sum(axis=1)
        return y * self.scale, ld

    def inverse(self, x):
        y = as_tensor(x) * (1.0 / self.scale)
        u = elementwise("ndtr", y)
        return u, (y.square() * -0.5 - (0.5 * LOG_2PI + self._log_scale)).sum(axis=1)


class FlowChain(Module):
    """Ordered invertible layers on top of a :class:`BaseDensity`."""

    def __init__(self, base, layers=()):
        self.base = base
        self.layers = list(layers)

    @property
    def dim(self):
        return self.base.dim

    def __len__(self):
        return len(self.layers)

    def forward(self, z0):
        """Push ``z0`` through every layer; returns ``(z, sum of log-dets)``."""
        z = as_tensor(z0)
        total = None
        for layer in self.layers:
            z, ld = layer.forward(z)
            total = ld if total is None else total + ld
        if total is None:
            total = Tensor(np.zeros(z.shape[0]))
        return z, total

    def inverse(self, z):
        z0 = as_tensor(z)
        total = None
        for layer in reversed(self.layers):
            z0, ld = layer.inverse(z0)
            total = ld if total is None else total + ld
        if total is None:
            total = Tensor(np.zeros(z0.shape[0]))
        return z0, total

    def log_density(self, z):
        z = as_tensor(z)
        if not self.layers:
            return self.base.log_prob(z)
        z0, ld = self.inverse(z)
        return self.base.log_prob(z0) + ld

    def sample(self, n, gen):
        if n < 1:
            raise ContractError("need n >= 1 samples")
        with no_tape():
            z, _ = self.forward(Tensor(self.base.sample(n, gen)))
        return z.data


def chain_log_density(chain, z):
    return chain.log_density(z)


def chain_sample(chain, n, gen):
    return chain.sample(n, gen)


def build_coupling_chain(
    dim,
    n_layers,
    gen_init,
    gen_mask=None,
    hidden_sizes=(100,),
    mask_kind="random_half",
    base="standard_normal",
    spatial_shape=None,
    activation="relu",
):
    """Chain of ``n_layers`` coupling layers with alternating complementary masks.

    The first mask is drawn once at construction; later layers alternate
    between it and its complement.
    """
    layers = []
    if n_layers:
        first = make_mask(dim, mask_kind, gen_mask, spatial_shape)
        for k in range(n_layers):
            mask = first if k % 2 == 0 else first.complement()
            cond = CouplingConditioner(dim, list(hidden_sizes), gen_init, activation)
            layers.append(CouplingLayer(mask, cond))
    return FlowChain(BaseDensity(dim, base), layers)
