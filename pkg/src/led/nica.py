"""Autoregressive conditional-CDF transforms on discretised densities.

For a positive density on a box, ``y_1 = F(x_1)`` and ``y_2 = F(x_2 | x_1)``
make ``(y_1, y_2)`` independent and uniform on ``(0, 1)^2``. The densities here
are piecewise constant on grid cells, so every CDF is piecewise linear and the
transform, its inverse and its triangular structure are exact computations.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .autodiff import Adam, Tape, Tensor, backward, no_tape
from .errors import ContractError, DomainError
from .flows import FlowChain
from .made import IDENTITY_SCALE_BIAS, build_iaf_chain

_EDGE_EPS = 1e-12


@dataclass
class GridDensity:
    """Probability mass on a regular grid over a box (1 or 2 dimensions).

    ``mass[i, j]`` is the mass of the cell with index ``i`` along dimension 1
    and ``j`` along dimension 2.
    """

    box: tuple
    resolution: tuple
    mass: np.ndarray

    def __post_init__(self):
        self.box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        self.resolution = tuple(int(r) for r in self.resolution)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if len(self.box) not in (1, 2) or len(self.resolution) != len(self.box):
            raise ContractError("grid densities are 1- or 2-dimensional")
        if self.mass.shape != self.resolution:
            raise ContractError(f"mass shape {self.mass.shape} != resolution {self.resolution}")
        if np.any(self.mass < 0):
            raise ContractError("mass must be non-negative")
        total = self.mass.sum()
        if abs(total - 1.0) > 1e-12:
            raise ContractError(f"mass sums to {total}, not 1")

    @classmethod
    def from_function(cls, density, box, resolution):
        """Discretise ``density`` (vectorised over [n, dims]) at cell centres."""
        box = tuple(tuple(b) for b in box)
        if isinstance(resolution, int):
            resolution = (resolution,) * len(box)
        centers = [_centers(lo, hi, n) for (lo, hi), n in zip(box, resolution)]
        mesh = np.meshgrid(*centers, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = np.asarray(density(pts), dtype=np.float64).reshape(resolution)
        vals = np.maximum(vals, 0.0)
        mass = vals / vals.sum()
        return cls(box, resolution, mass)

    @property
    def dims(self):
        return len(self.box)

    @property
    def edges(self):
        return [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(self.box, self.resolution)]

    @property
    def centers(self):
        return [_centers(lo, hi, n) for (lo, hi), n in zip(self.box, self.resolution)]

    @property
    def cell_widths(self):
        return np.array([(hi - lo) / n for (lo, hi), n in zip(self.box, self.resolution)])

    @property
    def cell_volume(self):
        return float(np.prod(self.cell_widths))

    def density(self):
        """Piecewise-constant density values per cell."""
        return self.mass / self.cell_volume

    def center_points(self):
        mesh = np.meshgrid(*self.centers, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def sample(self, n, gen):
        """Exact draws from the piecewise-constant density."""
        flat = gen.choice(self.mass.size, size=n, p=self.mass.ravel())
        idx = np.unravel_index(flat, self.resolution)
        u = gen.random((n, self.dims))
        lows = np.array([lo for lo, _ in self.box])
        return lows + (np.stack(idx, axis=1) + u) * self.cell_widths


def _centers(lo, hi, n):
    w = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * w


@dataclass
class ConditionalCdfTransform:
    """CDF tables evaluated at cell edges, with linear interpolation inside cells.

    ``marginal_cdf`` has one value per edge of dimension 1;
    ``conditional_cdf[i]`` is ``F(x_2 | x_1 in cell i)`` at the edges of
    dimension 2 (absent for 1-D densities).
    """

    box: tuple
    edges: list
    marginal_cdf: np.ndarray
    conditional_cdf: np.ndarray = field(default=None)

    @property
    def dims(self):
        return len(self.edges)

    def _check_inside(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dims:
            raise ContractError(f"expected {self.dims} columns, got {x.shape[1]}")
        for k, (lo, hi) in enumerate(self.box):
            if np.any((x[:, k] < lo) | (x[:, k] > hi)):
                raise DomainError(f"sample outside the box along dimension {k + 1}")
        return x

    def _cell_index(self, x1):
        e = self.edges[0]
        n = len(e) - 1
        i = np.floor((x1 - e[0]) / (e[-1] - e[0]) * n).astype(int)
        return np.clip(i, 0, n - 1)

    def _interp_rows(self, v, tables, knots):
        # Row-wise linear interpolation of v[k] in tables[k] over knots.
        n = len(knots) - 1
        j = np.clip(np.floor((v - knots[0]) / (knots[-1] - knots[0]) * n).astype(int), 0, n - 1)
        frac = (v - knots[j]) / (knots[j + 1] - knots[j])
        rows = np.arange(len(v))
        return tables[rows, j] + frac * (tables[rows, j + 1] - tables[rows, j])

    def transform(self, samples):
        x = self._check_inside(samples)
        y = np.empty_like(x)
        y[:, 0] = np.interp(x[:, 0], self.edges[0], self.marginal_cdf)
        if self.dims == 2:
            i = self._cell_index(x[:, 0])
            y[:, 1] = self._interp_rows(x[:, 1], self.conditional_cdf[i], self.edges[1])
        return np.clip(y, _EDGE_EPS, 1.0 - _EDGE_EPS)

    def inverse(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if np.any((y <= 0) | (y >= 1)):
            raise DomainError("inverse transform needs y strictly inside (0, 1)")
        x = np.empty_like(y)
        x[:, 0] = np.interp(y[:, 0], self.marginal_cdf, self.edges[0])
        if self.dims == 2:
            i = self._cell_index(x[:, 0])
            e2 = self.edges[1]
            for row in range(len(y)):
                x[row, 1] = np.interp(y[row, 1], self.conditional_cdf[i[row]], e2)
        return x


def fit_conditional_cdfs(density):
    """Marginal and cell-conditional CDF tables from cumulative cell sums."""
    mass = density.mass
    edges = density.edges
    if density.dims == 1:
        cdf = np.concatenate([[0.0], np.cumsum(mass)])
        if np.any(mass <= 0):
            raise DomainError("zero-mass cell violates the positivity assumption")
        return ConditionalCdfTransform(density.box, edges, cdf / cdf[-1])
    marginal = mass.sum(axis=1)
    if np.any(marginal <= 0):
        raise DomainError("zero-mass conditioning slice violates the positivity assumption")
    cdf1 = np.concatenate([[0.0], np.cumsum(marginal)])
    cdf1 /= cdf1[-1]
    cond = np.concatenate([np.zeros((mass.shape[0], 1)), np.cumsum(mass, axis=1)], axis=1)
    cond /= cond[:, -1:]
    return ConditionalCdfTransform(density.box, edges, cdf1, cond)


def transform_samples(t, samples):
    return t.transform(samples)


def invert_transform(t, y):
    return t.inverse(y)


# ---------------------------------------------------------------------------
# finite-sample independence / uniformity diagnostics


def ks_uniform(y):
    """Kolmogorov-Smirnov statistic of each column against Uniform(0, 1)."""
    y = np.atleast_2d(y)
    return np.array([stats.kstest(y[:, k], "uniform").statistic for k in range(y.shape[1])])


def binned_mutual_information(y, bins=16):
    """Plug-in MI (nats) of two columns on a ``bins x bins`` grid over (0,1)^2,
    minus the Miller-Madow bias ``(bins - 1)^2 / (2 n)``."""
    n = len(y)
    joint, _, _ = np.histogram2d(y[:, 0], y[:, 1], bins=bins, range=[[0, 1], [0, 1]])
    p = joint / n
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / (px @ py)[nz])).sum())
    return mi - (bins - 1) ** 2 / (2.0 * n)


# ---------------------------------------------------------------------------
# flow-based echo of the universality argument


def grid_kl(target, log_model_density):
    """``KL(target || model)`` by cell-centre quadrature on ``target``'s grid.

    ``log_model_density`` maps [n, dims] points to log-densities.
    """
    pts = target.center_points()
    log_q = np.asarray(log_model_density(pts)).reshape(target.resolution)
    p = target.mass
    nz = p > 0
    log_p = np.log(p[nz] / target.cell_volume)
    return float((p[nz] * (log_p - log_q[nz])).sum())


def chain_log_density_fn(chain, batch=20000):
    def fn(pts):
        out = []
        with no_tape():
            for s in range(0, len(pts), batch):
                out.append(chain.log_density(Tensor(pts[s : s + batch])).data)
        return np.concatenate(out)

    return fn


@dataclass
class DemoConfig:
    hidden_sizes: tuple = (64, 64)
    n_samples: int = 20000
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    final_lr_fraction: float = 0.1
    gaussian_warp: bool = True
    warp_scale: float = 3.0
    # bounded hidden units keep the sequential inverse from amplifying outliers
    activation: str = "tanh"


def iaf_universality_demo(target, layers, config, rng):
    """Fit a uniform-base IAF chain to samples of a 2-D ``target`` by maximum likelihood.

    Layers start as the identity. Returns the fitted chain and the grid
    ``KL(target || model)`` before training and after each epoch.
    """
    if target.dims != 2:
        raise ContractError("the universality demo needs a 2-D target")
    chain = build_iaf_chain(2, layers, rng.stream("init"), rng.stream("mask-choice"),
                            tuple(config.hidden_sizes), base="uniform_unit_box",
                            scale_bias=IDENTITY_SCALE_BIAS, gaussian_warp=config.gaussian_warp,
                            warp_scale=config.warp_scale, activation=config.activation)
    data = target.sample(config.n_samples, rng.stream("data"))
    params = chain.parameters()
    opt = Adam(params, config.lr)
    density = chain_log_density_fn(chain)
    trace = [grid_kl(target, density)]
    shuffle = rng.stream("data-shuffle")
    for epoch in range(config.epochs):
        frac = epoch / max(config.epochs - 1, 1)
        opt.hyper.lr = config.lr * (1.0 - (1.0 - config.final_lr_fraction) * frac)
        order = shuffle.permutation(len(data))
        for s in range(0, len(data), config.batch_size):
            batch = Tensor(data[order[s : s + config.batch_size]])
            with Tape() as tape:
                loss = -chain.log_density(batch).mean()
            opt.step(backward(loss, tape))
        trace.append(grid_kl(target, density))
    return chain, trace


def gaussian_mixture_density(means, covs, weights):
    """Vectorised density of a Gaussian mixture (used for grid targets)."""
    comps = [stats.multivariate_normal(m, c) for m, c in zip(means, covs)]

    def fn(pts):
        return sum(w * c.pdf(pts) for w, c in zip(weights, comps))

    return fn
