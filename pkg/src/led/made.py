"""Masked autoregressive conditioners (MADE) and inverse autoregressive flow layers."""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor
from .errors import ContractError, DimensionError
from .flows import BaseDensity, FlowChain, GaussianQuantileLayer
from .nn import MaskedLinear, Module, _activation

SCALE_FLOOR = 1e-4
# s-head bias at which sigmoid(s) + SCALE_FLOOR == 1, i.e. an identity layer.
IDENTITY_SCALE_BIAS = float(np.log((1.0 - SCALE_FLOOR) / SCALE_FLOOR))


@dataclass
class DegreeAssignment:
    input_degrees: np.ndarray
    hidden_degrees: list
    output_degrees: np.ndarray
    masks: list  # [out, in] binary arrays, one per weight matrix

    @property
    def dim(self):
        return len(self.input_degrees)


def build_made_masks(d, hidden_sizes, gen=None, input_degrees=None, hidden_degrees=None):
    """Degrees and connectivity masks for a MADE with two heads (shift, scale).

    Hidden unit ``k`` connects to previous unit ``j`` iff
    ``deg(k) >= deg(j)``; output connections use ``deg(out) > deg(j)``.
    Without explicit ``input_degrees`` the inputs get degrees ``1..d`` in index
    order; hidden degrees are drawn uniformly from ``[1, max_degree - 1]``.
    """
    if input_degrees is None:
        input_degrees = np.arange(1, d + 1)
    input_degrees = np.asarray(input_degrees, dtype=int)
    if input_degrees.shape != (d,) or input_degrees.min() < 1:
        raise ContractError("input degrees must be d positive integers")
    top = max(int(input_degrees.max()) - 1, 1)
    if hidden_degrees is None:
        if hidden_sizes and gen is None:
            raise ContractError("hidden degrees must be given or drawn from a generator")
        hidden_degrees = [gen.integers(1, top + 1, size=n) for n in hidden_sizes]
    hidden_degrees = [np.asarray(h, dtype=int) for h in hidden_degrees]
    if [len(h) for h in hidden_degrees] != list(hidden_sizes):
        raise ContractError("hidden degrees do not match hidden sizes")

    masks = []
    prev = input_degrees
    for h in hidden_degrees:
        masks.append((h[:, None] >= prev[None, :]).astype(np.float64))
        prev = h
    output_degrees = np.concatenate([input_degrees, input_degrees])
    masks.append((output_degrees[:, None] > prev[None, :]).astype(np.float64))
    return DegreeAssignment(input_degrees, hidden_degrees, output_degrees, masks)


class MadeConditioner(Module):
    """Masked MLP returning ``(mu, s)``, each of input dimension.

    The output layer starts at zero weights; its ``s`` bias starts at
    ``scale_bias`` (0 gives sigma = 0.5 at initialisation).
    """

    def __init__(self, degrees, gen_init, activation="relu", scale_bias=0.0):
        self.degrees = degrees
        d = degrees.dim
        sizes = [d, *[len(h) for h in degrees.hidden_degrees], 2 * d]
        n = len(degrees.masks)
        self.layers = [
            MaskedLinear(sizes[i], sizes[i + 1], degrees.masks[i], gen_init, zero=i == n - 1)
            for i in range(n)
        ]
        self.layers[-1].bias.data[d:] = scale_bias
        self._act = _activation(activation)
        self.dim = d

    def __call__(self, x):
        h = as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = self._act(h)
        return h[:, : self.dim], h[:, self.dim :]


class IafLayer(Module):
    """``z_i = z'_i * sigma_i(z'_<i) + mu_i(z'_<i)``, ``sigma = sigmoid(s) + floor``.

    ``ordering[k]`` is the coordinate with autoregressive position ``k``; the
    conditioner's input degrees must agree with it.
    """

    def __init__(self, conditioner, ordering=None, floor=SCALE_FLOOR):
        d = conditioner.dim
        self.conditioner = conditioner
        self.ordering = np.arange(d) if ordering is None else np.asarray(ordering, dtype=int)
        if sorted(self.ordering.tolist()) != list(range(d)):
            raise ContractError("ordering must be a permutation")
        self.floor = floor
        eye = np.eye(d)
        self._onehots = [Tensor(eye[i]) for i in self.ordering]

    @property
    def dim(self):
        return self.conditioner.dim

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"IAF layer of dim {self.dim} got input {x.shape}")

    def _scale(self, s):
        return s.sigmoid() + self.floor

    def forward(self, zp):
        zp = as_tensor(zp)
        self._check(zp)
        mu, s = self.conditioner(zp)
        sigma = self._scale(s)
        return zp * sigma + mu, sigma.log().sum(axis=1)

    def inverse(self, z):
        """Sequential solve, one conditioner pass per autoregressive position."""
        z = as_tensor(z)
        self._check(z)
        x = Tensor(np.zeros(z.shape))
        log_det = None
        for e in self._onehots:
            mu, s = self.conditioner(x)
            sigma = self._scale(s)
            x = x * (1.0 - e) + ((z - mu) / sigma) * e
            term = (sigma.log() * e).sum(axis=1)
            log_det = term if log_det is None else log_det + term
        return x, log_det * -1.0

    def __call__(self, zp):
        return self.forward(zp)


def iaf_forward(layer, zp):
    return layer.forward(zp)


def iaf_inverse(layer, z):
    x, _ = layer.inverse(z)
    return x


def make_iaf_layer(d, hidden_sizes, gen_init, gen_mask, ordering=None, scale_bias=0.0,
                   activation="relu"):
    ordering = np.arange(d) if ordering is None else np.asarray(ordering, dtype=int)
    input_degrees = np.empty(d, dtype=int)
    input_degrees[ordering] = np.arange(1, d + 1)
    degrees = build_made_masks(d, list(hidden_sizes), gen_mask, input_degrees=input_degrees)
    cond = MadeConditioner(degrees, gen_init, activation, scale_bias)
    return IafLayer(cond, ordering)


def build_iaf_chain(dim, n_layers, gen_init, gen_mask, hidden_sizes=(512, 512),
                    base="standard_normal", scale_bias=0.0, gaussian_warp=False,
                    warp_scale=1.0, activation="relu"):
    """IAF chain whose orderings reverse between successive layers.

    With ``gaussian_warp`` a fixed normal-quantile layer of width ``warp_scale``
    follows the base, so a uniform base yields unbounded support. Every IAF
    layer has ``sigma <= 1`` and so can only contract volume; the warp scale
    sets the widest density the chain can represent.
    """
    layers = [GaussianQuantileLayer(dim, warp_scale)] if gaussian_warp else []
    ordering = np.arange(dim)
    for _ in range(n_layers):
        layers.append(make_iaf_layer(dim, hidden_sizes, gen_init, gen_mask, ordering,
                                     scale_bias, activation))
        ordering = ordering[::-1].copy()
    return FlowChain(BaseDensity(dim, base), layers)
