"""Grayscale density maps (binary PGM, P5) and raw CSV grids."""

from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_tape
from .errors import ContractError
from .vae import aggregate_posterior_samples

MAX_RESOLUTION = 2048


def write_pgm(path, pixels):
    """Write a uint8 [rows, cols] array as P5 with maxval 255."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ContractError("PGM images are 2-D")
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(np.clip(pixels, 0, 255).astype(np.uint8).tobytes())
    return Path(path)


def read_pgm(path):
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ContractError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(f) for f in fields[1:])
    pos += 1
    return np.frombuffer(data[pos : pos + rows * cols], dtype=np.uint8).reshape(rows, cols), maxval


def _resolution(resolution):
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    cols, rows = resolution
    if max(cols, rows) > MAX_RESOLUTION or min(cols, rows) < 1:
        raise ContractError(f"resolution must be in [1, {MAX_RESOLUTION}]")
    return cols, rows


def pixel_centers(box, resolution):
    """``[rows * cols, 2]`` pixel-centre coordinates; row 0 is the top of the box."""
    cols, rows = _resolution(resolution)
    (x0, x1), (y0, y1) = box
    xs = x0 + (np.arange(cols) + 0.5) * (x1 - x0) / cols
    ys = y1 - (np.arange(rows) + 0.5) * (y1 - y0) / rows
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1), (rows, cols)


def to_gray(values):
    """Linear map from [0, max] to [0, 255]."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    if not np.isfinite(top) or top <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(np.clip(values, 0, None) / top * 255.0).astype(np.uint8)


def write_grid_csv(path, values):
    np.savetxt(path, values, delimiter=",", fmt="%.17g")


def emit_density_map(density_fn, box, resolution, path, csv_path=None):
    """Render ``density_fn`` ([n, 2] -> [n] densities) over ``box`` as a P5 image."""
    pts, shape = pixel_centers(box, resolution)
    values = np.asarray(density_fn(pts), dtype=np.float64).reshape(shape)
    write_pgm(path, to_gray(values))
    if csv_path is not None:
        write_grid_csv(csv_path, values)
    return values


def emit_histogram_map(samples, box, resolution, path, csv_path=None):
    cols, rows = _resolution(resolution)
    (x0, x1), (y0, y1) = box
    counts, _, _ = np.histogram2d(samples[:, 1], samples[:, 0], bins=[rows, cols],
                                  range=[[y0, y1], [x0, x1]])
    counts = counts[::-1]
    write_pgm(path, to_gray(counts))
    if csv_path is not None:
        write_grid_csv(csv_path, counts)
    return counts


def _exp_log_density(chain):
    def fn(pts):
        with no_tape():
            return np.exp(chain.log_density(Tensor(pts)).data)

    return fn


def _base_density(base):
    def fn(pts):
        with no_tape():
            return np.exp(base.log_prob(Tensor(pts)).data)

    return fn


def marginal_density_fn(model, gen, n_latent=2000):
    """Monte Carlo ``p(x) = mean_m p(x | z_m)``, ``z_m ~ p(z)``, for Gaussian decoders."""
    z = model.prior.sample(n_latent, gen)
    means = model.decoder.mean(z)
    var = np.exp(model.decoder.logvar.data)

    def fn(pts):
        out = np.empty(len(pts))
        for s in range(0, len(pts), 512):
            p = pts[s : s + 512]
            d2 = ((p[:, None, :] - means[None]) ** 2 / var).sum(axis=2)
            log_k = -0.5 * d2 - 0.5 * np.log(2 * np.pi * var).sum()
            out[s : s + 512] = np.exp(log_k).mean(axis=1)
        return out

    return fn


PANELS = ("aggregate_z", "aggregate_z0", "base_density", "prior_density", "marginal_x")


def emit_latent_panels(model, dataset, out_dir, gen, latent_box=((-4, 4), (-4, 4)),
                     data_box=((-4, 4), (-4, 4)), resolution=128, n_samples=20000):
    """Write the five toy panels as ``<name>.pgm`` plus ``<name>.csv`` grids.

    The aggregate-posterior samples are drawn first, then pulled back through
    ``h^-1``; the marginal panel needs a 2-D Gaussian decoder.
    """
    if model.latent_dim != 2:
        raise ContractError("panels need a 2-D latent space")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z = aggregate_posterior_samples(model, dataset, n_samples, gen)
    with no_tape():
        z0 = model.prior.inverse(Tensor(z))[0].data
    paths = {name: out_dir / f"{name}.pgm" for name in PANELS}
    csv = {name: out_dir / f"{name}.csv" for name in PANELS}
    emit_histogram_map(z, latent_box, resolution, paths["aggregate_z"], csv["aggregate_z"])
    emit_histogram_map(z0, latent_box, resolution, paths["aggregate_z0"], csv["aggregate_z0"])
    emit_density_map(_base_density(model.prior.base), latent_box, resolution,
                     paths["base_density"], csv["base_density"])
    emit_density_map(_exp_log_density(model.prior), latent_box, resolution,
                     paths["prior_density"], csv["prior_density"])
    if np.asarray(dataset).shape[1] != 2 or not hasattr(model.decoder, "logvar"):
        raise ContractError("the marginal panel needs 2-D data and a Gaussian decoder")
    emit_density_map(marginal_density_fn(model, gen), data_box, resolution,
                     paths["marginal_x"], csv["marginal_x"])
    return paths
